//! Adaptive mixing and prediction heads.
//!
//! The sampled features `f ∈ [P × C]` of a query are decoded with dynamic
//! weights generated from the query feature: channel mixing applies a
//! `C × C` matrix shared by all points, point mixing applies a `P × P` matrix
//! shared by all channels. The result is flattened, aggregated into the query
//! feature and fed to the regression and classification MLPs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, layer_norm_slice, matmul, DenseArray, LAYER_NORM_EPS};
use crate::queries::{wrap_angle, QueryBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixingOrder {
    #[default]
    ChannelThenPoint,
    PointThenChannel,
    ChannelOnly,
    PointOnly,
    /// Channel then point with fixed learnable matrices instead of
    /// query-generated ones.
    Static,
    /// No mixing: every point row is replaced by the mean over points.
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: DenseArray,
    pub b1: DenseArray,
    pub w2: DenseArray,
    pub b2: DenseArray,
}

impl MlpParams {
    pub fn init(
        rng: &mut impl Rng,
        input: usize,
        hidden: usize,
        output: usize,
        out_scale: f64,
    ) -> Self {
        Self {
            w1: numerics::uniform_array(rng, &[input, hidden], 1.0 / (input as f64).sqrt()),
            b1: DenseArray::zeros(&[hidden]),
            w2: numerics::uniform_array(rng, &[hidden, output], out_scale / (hidden as f64).sqrt()),
            b2: DenseArray::zeros(&[output]),
        }
    }

    /// `ReLU(x·W1 + b1)·W2 + b2`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut hidden = numerics::linear_vec(x, &self.w1, &self.b1)?;
        hidden.iter_mut().for_each(|v| *v = v.max(0.0));
        numerics::linear_vec(&hidden, &self.w2, &self.b2)
    }

    fn arrays(&self) -> [&DenseArray; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn arrays_mut(&mut self) -> [&mut DenseArray; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingParams {
    pub order: MixingOrder,
    pub channels: usize,
    pub points: usize,
    /// `D × C·C` channel-weight generator.
    pub channel_gen_w: DenseArray,
    pub channel_gen_b: DenseArray,
    /// `D × P·P` point-weight generator.
    pub point_gen_w: DenseArray,
    pub point_gen_b: DenseArray,
    /// Fixed matrices used by [`MixingOrder::Static`].
    pub static_channel: DenseArray,
    pub static_point: DenseArray,
    pub channel_ln_gain: DenseArray,
    pub channel_ln_shift: DenseArray,
    pub point_ln_gain: DenseArray,
    pub point_ln_shift: DenseArray,
    /// `P·C × D` aggregation.
    pub agg_w: DenseArray,
    pub agg_b: DenseArray,
    pub out_ln_gain: DenseArray,
    pub out_ln_shift: DenseArray,
    /// D → hidden → 9 box deltas.
    pub reg: MlpParams,
    /// D → hidden → class logits.
    pub cls: MlpParams,
}

/// Logit bias that makes every initial class score equal `prior`.
pub fn prior_logit(prior: f64) -> f64 {
    -((1.0 - prior) / prior).ln()
}

impl MixingParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        rng: &mut impl Rng,
        order: MixingOrder,
        d_model: usize,
        channels: usize,
        points: usize,
        hidden: usize,
        num_classes: usize,
        class_prior: f64,
    ) -> Self {
        let gen_bound = 1.0 / (d_model as f64).sqrt();
        let mut cls = MlpParams::init(rng, d_model, hidden, num_classes, 0.1);
        cls.b2 = DenseArray::filled(&[num_classes], prior_logit(class_prior));
        Self {
            order,
            channels,
            points,
            channel_gen_w: numerics::uniform_array(
                rng,
                &[d_model, channels * channels],
                gen_bound * 0.1,
            ),
            channel_gen_b: numerics::uniform_array(
                rng,
                &[channels * channels],
                1.0 / (channels as f64).sqrt(),
            ),
            point_gen_w: numerics::uniform_array(rng, &[d_model, points * points], gen_bound * 0.1),
            point_gen_b: numerics::uniform_array(
                rng,
                &[points * points],
                1.0 / (points as f64).sqrt(),
            ),
            static_channel: numerics::uniform_array(
                rng,
                &[channels, channels],
                1.0 / (channels as f64).sqrt(),
            ),
            static_point: numerics::uniform_array(
                rng,
                &[points, points],
                1.0 / (points as f64).sqrt(),
            ),
            channel_ln_gain: DenseArray::filled(&[channels], 1.0),
            channel_ln_shift: DenseArray::zeros(&[channels]),
            point_ln_gain: DenseArray::filled(&[points], 1.0),
            point_ln_shift: DenseArray::zeros(&[points]),
            agg_w: numerics::uniform_array(
                rng,
                &[points * channels, d_model],
                1.0 / ((points * channels) as f64).sqrt(),
            ),
            agg_b: DenseArray::zeros(&[d_model]),
            out_ln_gain: DenseArray::filled(&[d_model], 1.0),
            out_ln_shift: DenseArray::zeros(&[d_model]),
            reg: MlpParams::init(rng, d_model, hidden, 9, 0.01),
            cls,
        }
    }

    pub fn d_model(&self) -> usize {
        self.out_ln_gain.len()
    }

    pub fn num_classes(&self) -> usize {
        self.cls.b2.len()
    }

    pub fn validate(&self) -> Result<()> {
        let (c, p, d) = (self.channels, self.points, self.d_model());
        let hidden_r = self.reg.b1.len();
        let hidden_c = self.cls.b1.len();
        let k = self.num_classes();
        let expect = [
            ("channel_gen_w", &self.channel_gen_w, vec![d, c * c]),
            ("channel_gen_b", &self.channel_gen_b, vec![c * c]),
            ("point_gen_w", &self.point_gen_w, vec![d, p * p]),
            ("point_gen_b", &self.point_gen_b, vec![p * p]),
            ("static_channel", &self.static_channel, vec![c, c]),
            ("static_point", &self.static_point, vec![p, p]),
            ("channel_ln_gain", &self.channel_ln_gain, vec![c]),
            ("channel_ln_shift", &self.channel_ln_shift, vec![c]),
            ("point_ln_gain", &self.point_ln_gain, vec![p]),
            ("point_ln_shift", &self.point_ln_shift, vec![p]),
            ("agg_w", &self.agg_w, vec![p * c, d]),
            ("agg_b", &self.agg_b, vec![d]),
            ("out_ln_shift", &self.out_ln_shift, vec![d]),
            ("reg.w1", &self.reg.w1, vec![d, hidden_r]),
            ("reg.w2", &self.reg.w2, vec![hidden_r, 9]),
            ("reg.b2", &self.reg.b2, vec![9]),
            ("cls.w1", &self.cls.w1, vec![d, hidden_c]),
            ("cls.w2", &self.cls.w2, vec![hidden_c, k]),
        ];
        for (name, arr, shape) in expect {
            if arr.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "mixing.{name}: expected shape {shape:?}, got {:?}",
                    arr.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn arrays(&self) -> Vec<(&'static str, &DenseArray)> {
        let mut v = vec![
            ("channel_gen_w", &self.channel_gen_w),
            ("channel_gen_b", &self.channel_gen_b),
            ("point_gen_w", &self.point_gen_w),
            ("point_gen_b", &self.point_gen_b),
            ("static_channel", &self.static_channel),
            ("static_point", &self.static_point),
            ("channel_ln_gain", &self.channel_ln_gain),
            ("channel_ln_shift", &self.channel_ln_shift),
            ("point_ln_gain", &self.point_ln_gain),
            ("point_ln_shift", &self.point_ln_shift),
            ("agg_w", &self.agg_w),
            ("agg_b", &self.agg_b),
            ("out_ln_gain", &self.out_ln_gain),
            ("out_ln_shift", &self.out_ln_shift),
        ];
        let reg_names = ["reg.w1", "reg.b1", "reg.w2", "reg.b2"];
        let cls_names = ["cls.w1", "cls.b1", "cls.w2", "cls.b2"];
        v.extend(reg_names.into_iter().zip(self.reg.arrays()));
        v.extend(cls_names.into_iter().zip(self.cls.arrays()));
        v
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut v = vec![
            &mut self.channel_gen_w,
            &mut self.channel_gen_b,
            &mut self.point_gen_w,
            &mut self.point_gen_b,
            &mut self.static_channel,
            &mut self.static_point,
            &mut self.channel_ln_gain,
            &mut self.channel_ln_shift,
            &mut self.point_ln_gain,
            &mut self.point_ln_shift,
            &mut self.agg_w,
            &mut self.agg_b,
            &mut self.out_ln_gain,
            &mut self.out_ln_shift,
        ];
        v.extend(self.reg.arrays_mut());
        v.extend(self.cls.arrays_mut());
        v
    }
}

fn check_sampled(f: &DenseArray, p: &MixingParams) -> Result<()> {
    if f.shape() != [p.points, p.channels] {
        return Err(Error::config(format!(
            "sampled features have shape {:?}, mixing expects [{}, {}]",
            f.shape(),
            p.points,
            p.channels
        )));
    }
    Ok(())
}

/// `ReLU(LN(x · W))` with LN over the last axis; `x` is `rows × k`, `W` is
/// `k × k`.
fn mix_rows(
    x: &[f64],
    rows: usize,
    k: usize,
    w: &[f64],
    gain: &DenseArray,
    shift: &DenseArray,
) -> Vec<f64> {
    let mut y = matmul(x, rows, k, w, k);
    for row in y.chunks_mut(k) {
        layer_norm_slice(row, gain.values(), shift.values(), LAYER_NORM_EPS);
        row.iter_mut().for_each(|v| *v = v.max(0.0));
    }
    y
}

fn channel_weights(feat: &[f64], p: &MixingParams) -> Result<Vec<f64>> {
    if p.order == MixingOrder::Static {
        return Ok(p.static_channel.values().to_vec());
    }
    numerics::linear_vec(feat, &p.channel_gen_w, &p.channel_gen_b)
}

fn point_weights(feat: &[f64], p: &MixingParams) -> Result<Vec<f64>> {
    if p.order == MixingOrder::Static {
        return Ok(p.static_point.values().to_vec());
    }
    numerics::linear_vec(feat, &p.point_gen_w, &p.point_gen_b)
}

/// `ReLU(LN(f · W_c))` with `W_c` reshaped row-major from the generator
/// output. Returns `P × C`.
pub fn channel_mix(f: &DenseArray, feat: &[f64], p: &MixingParams) -> Result<DenseArray> {
    check_sampled(f, p)?;
    let wc = channel_weights(feat, p)?;
    let y = mix_rows(
        f.values(),
        p.points,
        p.channels,
        &wc,
        &p.channel_ln_gain,
        &p.channel_ln_shift,
    );
    DenseArray::new(vec![p.points, p.channels], y)
}

/// `ReLU(LN(fᵀ · W_p))`. Returns `C × P`.
pub fn point_mix(f: &DenseArray, feat: &[f64], p: &MixingParams) -> Result<DenseArray> {
    check_sampled(f, p)?;
    let wp = point_weights(feat, p)?;
    let ft = f.transpose();
    let y = mix_rows(
        ft.values(),
        p.channels,
        p.points,
        &wp,
        &p.point_ln_gain,
        &p.point_ln_shift,
    );
    DenseArray::new(vec![p.channels, p.points], y)
}

/// Applies the configured mixing order and flattens the result row-major
/// (length `P·C`).
pub fn mix(f: &DenseArray, feat: &[f64], p: &MixingParams) -> Result<Vec<f64>> {
    check_sampled(f, p)?;
    let out = match p.order {
        MixingOrder::ChannelThenPoint | MixingOrder::Static => {
            point_mix(&channel_mix(f, feat, p)?, feat, p)?
        }
        MixingOrder::PointThenChannel => channel_mix(&point_mix(f, feat, p)?.transpose(), feat, p)?,
        MixingOrder::ChannelOnly => channel_mix(f, feat, p)?,
        MixingOrder::PointOnly => point_mix(f, feat, p)?,
        MixingOrder::None => {
            let mut mean = vec![0.0; p.channels];
            for row in f.rows() {
                for (m, v) in mean.iter_mut().zip(row) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= p.points as f64);
            return Ok(mean.repeat(p.points));
        }
    };
    Ok(out.into_values())
}

/// Linear aggregation of the flattened mixed features, residual-added to the
/// incoming query feature and layer-normed.
pub fn aggregate(mixed: &[f64], feat: &[f64], p: &MixingParams) -> Result<Vec<f64>> {
    if feat.len() != p.d_model() {
        return Err(Error::config(
            "query feature width does not match mixing params",
        ));
    }
    let mut out = numerics::linear_vec(mixed, &p.agg_w, &p.agg_b)?;
    for (o, f) in out.iter_mut().zip(feat) {
        *o += f;
    }
    layer_norm_slice(
        &mut out,
        p.out_ln_gain.values(),
        p.out_ln_shift.values(),
        LAYER_NORM_EPS,
    );
    Ok(out)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput {
    /// `(Δx, Δy, Δz, δlog w, δlog l, δlog h, Δθ, vx, vy)`.
    pub deltas: [f64; 9],
    pub logits: Vec<f64>,
}

impl HeadOutput {
    /// Independent per-class scores.
    pub fn scores(&self) -> Vec<f64> {
        self.logits.iter().map(|&l| sigmoid(l)).collect()
    }
}

pub fn predict_heads(feat: &[f64], p: &MixingParams) -> Result<HeadOutput> {
    let r = p.reg.forward(feat)?;
    let deltas: [f64; 9] = r
        .try_into()
        .map_err(|_| Error::config("regression head must emit 9 values"))?;
    Ok(HeadOutput {
        deltas,
        logits: p.cls.forward(feat)?,
    })
}

/// Centers add deltas, sizes scale by `exp(δlog)`, yaw adds and wraps,
/// velocity is replaced by the predicted absolute velocity.
pub fn apply_box_update(b: &QueryBox, d: &[f64; 9]) -> Result<QueryBox> {
    let out = QueryBox {
        x: b.x + d[0],
        y: b.y + d[1],
        z: b.z + d[2],
        w: b.w * d[3].exp(),
        l: b.l * d[4].exp(),
        h: b.h * d[5].exp(),
        yaw: wrap_angle(b.yaw + d[6]),
        vx: d[7],
        vy: d[8],
    };
    if out.to_vector().iter().any(|v| !v.is_finite())
        || !(out.w > 0.0 && out.l > 0.0 && out.h > 0.0)
    {
        return Err(Error::contract(format!(
            "box update produced an invalid box {:?}",
            out.to_vector()
        )));
    }
    Ok(out)
}
