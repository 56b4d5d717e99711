//! Scale-adaptive self attention over the query set.
//!
//! Multi-head self attention whose logits carry a distance penalty
//! `-τ · g(D_ij)`, where `D` is the BEV distance between query centers and
//! `τ` is produced per query and per head from the query feature (or, in the
//! shared mode, is one learnable scalar per head).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, layer_norm_slice, softmax_slice, DenseArray, LAYER_NORM_EPS};
use crate::queries::{QueryBox, QuerySet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauMode {
    /// τ generated from each query feature by a linear map.
    #[default]
    Adaptive,
    /// One learnable τ per head, shared by all queries.
    SharedLearnable,
}

/// How the BEV distance enters the attention bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceFn {
    #[default]
    Linear,
    Squared,
    Sqrt,
}

impl DistanceFn {
    pub fn apply(self, d: f64) -> f64 {
        match self {
            DistanceFn::Linear => d,
            DistanceFn::Squared => d * d,
            DistanceFn::Sqrt => d.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SasaParams {
    pub heads: usize,
    pub head_dim: usize,
    pub tau_mode: TauMode,
    pub distance: DistanceFn,
    /// `D × H·d` projections and their biases.
    pub wq: DenseArray,
    pub bq: DenseArray,
    pub wk: DenseArray,
    pub bk: DenseArray,
    pub wv: DenseArray,
    pub bv: DenseArray,
    /// `H·d × D` output projection.
    pub wo: DenseArray,
    pub bo: DenseArray,
    /// `D × H` τ generator.
    pub tau_w: DenseArray,
    pub tau_b: DenseArray,
    /// Per-head τ used in [`TauMode::SharedLearnable`].
    pub shared_tau: DenseArray,
    pub ln_gain: DenseArray,
    pub ln_shift: DenseArray,
}

impl SasaParams {
    /// Random initialization. τ biases start spread over `[0, 2]` across
    /// heads so each head begins with a different receptive field.
    pub fn init(
        rng: &mut impl Rng,
        d_model: usize,
        heads: usize,
        head_dim: usize,
        tau_mode: TauMode,
        distance: DistanceFn,
    ) -> Self {
        let hd = heads * head_dim;
        let bound_in = 1.0 / (d_model as f64).sqrt();
        let bound_out = 1.0 / (hd as f64).sqrt();
        let tau_init: Vec<f64> = (0..heads)
            .map(|h| {
                if heads == 1 {
                    0.5
                } else {
                    2.0 * h as f64 / (heads - 1) as f64
                }
            })
            .collect();
        Self {
            heads,
            head_dim,
            tau_mode,
            distance,
            wq: numerics::uniform_array(rng, &[d_model, hd], bound_in),
            bq: DenseArray::zeros(&[hd]),
            wk: numerics::uniform_array(rng, &[d_model, hd], bound_in),
            bk: DenseArray::zeros(&[hd]),
            wv: numerics::uniform_array(rng, &[d_model, hd], bound_in),
            bv: DenseArray::zeros(&[hd]),
            wo: numerics::uniform_array(rng, &[hd, d_model], bound_out),
            bo: DenseArray::zeros(&[d_model]),
            tau_w: numerics::uniform_array(rng, &[d_model, heads], 0.01),
            tau_b: DenseArray::vector(tau_init.clone()).expect("finite"),
            shared_tau: DenseArray::vector(tau_init).expect("finite"),
            ln_gain: DenseArray::filled(&[d_model], 1.0),
            ln_shift: DenseArray::zeros(&[d_model]),
        }
    }

    pub fn d_model(&self) -> usize {
        self.ln_gain.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.head_dim == 0 {
            return Err(Error::config("heads and head_dim must be at least 1"));
        }
        let d = self.d_model();
        let hd = self.heads * self.head_dim;
        let expect = [
            ("wq", &self.wq, vec![d, hd]),
            ("bq", &self.bq, vec![hd]),
            ("wk", &self.wk, vec![d, hd]),
            ("bk", &self.bk, vec![hd]),
            ("wv", &self.wv, vec![d, hd]),
            ("bv", &self.bv, vec![hd]),
            ("wo", &self.wo, vec![hd, d]),
            ("bo", &self.bo, vec![d]),
            ("tau_w", &self.tau_w, vec![d, self.heads]),
            ("tau_b", &self.tau_b, vec![self.heads]),
            ("shared_tau", &self.shared_tau, vec![self.heads]),
            ("ln_shift", &self.ln_shift, vec![d]),
        ];
        for (name, arr, shape) in expect {
            if arr.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "sasa.{name}: expected shape {shape:?}, got {:?}",
                    arr.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn arrays(&self) -> Vec<(&'static str, &DenseArray)> {
        vec![
            ("wq", &self.wq),
            ("bq", &self.bq),
            ("wk", &self.wk),
            ("bk", &self.bk),
            ("wv", &self.wv),
            ("bv", &self.bv),
            ("wo", &self.wo),
            ("bo", &self.bo),
            ("tau_w", &self.tau_w),
            ("tau_b", &self.tau_b),
            ("shared_tau", &self.shared_tau),
            ("ln_gain", &self.ln_gain),
            ("ln_shift", &self.ln_shift),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut DenseArray> {
        vec![
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.tau_w,
            &mut self.tau_b,
            &mut self.shared_tau,
            &mut self.ln_gain,
            &mut self.ln_shift,
        ]
    }
}

/// All-pair BEV distances between query centers. Panics on an empty slice.
pub fn pairwise_bev_distance(boxes: &[QueryBox]) -> DenseArray {
    let n = boxes.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dx = boxes[i].x - boxes[j].x;
            let dy = boxes[i].y - boxes[j].y;
            d[i * n + j] = (dx * dx + dy * dy).sqrt();
        }
    }
    DenseArray::new(vec![n, n], d).expect("at least one query with a finite center")
}

/// Per-head τ for one query feature.
pub fn head_taus(feat: &[f64], p: &SasaParams) -> Result<Vec<f64>> {
    match p.tau_mode {
        TauMode::Adaptive => numerics::linear_vec(feat, &p.tau_w, &p.tau_b),
        TauMode::SharedLearnable => Ok(p.shared_tau.values().to_vec()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SasaOutput {
    /// Updated `N × D` features.
    pub features: DenseArray,
    /// `N × H` receptive-field coefficients.
    pub taus: DenseArray,
    /// One `N × N` attention-weight matrix per head.
    pub weights: Vec<DenseArray>,
}

/// One attention block: per head
/// `softmax(Q Kᵀ / √d − τ_h(i) · g(D))`, heads concatenated, projected,
/// residual-added to the input and layer-normed.
pub fn sasa_layer(qs: &QuerySet, p: &SasaParams) -> Result<SasaOutput> {
    p.validate()?;
    let x = &qs.features;
    if x.last_dim() != p.d_model() {
        return Err(Error::config(format!(
            "query features have width {}, attention expects {}",
            x.last_dim(),
            p.d_model()
        )));
    }
    let n = qs.len();
    let (heads, hd) = (p.heads, p.head_dim);
    let q = numerics::linear(x, &p.wq, &p.bq)?;
    let k = numerics::linear(x, &p.wk, &p.bk)?;
    let v = numerics::linear(x, &p.wv, &p.bv)?;
    let dist = pairwise_bev_distance(&qs.boxes);
    let bias: Vec<f64> = dist.values().iter().map(|&d| p.distance.apply(d)).collect();

    let mut taus = Vec::with_capacity(n * heads);
    for i in 0..n {
        taus.extend(head_taus(qs.feature(i), p)?);
    }
    let scale = 1.0 / (hd as f64).sqrt();
    let width = heads * hd;
    let mut concat = vec![0.0; n * width];
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = h * hd..(h + 1) * hd;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            let qi = &q.row(i)[cols.clone()];
            let tau = taus[i * heads + h];
            let row = &mut w[i * n..(i + 1) * n];
            for (j, slot) in row.iter_mut().enumerate() {
                let kj = &k.row(j)[cols.clone()];
                let dot: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                *slot = dot * scale - tau * bias[i * n + j];
            }
            softmax_slice(row);
            let out = &mut concat[i * width + h * hd..i * width + (h + 1) * hd];
            for (j, &wij) in row.iter().enumerate() {
                for (o, &vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                    *o += wij * vj;
                }
            }
        }
        weights.push(DenseArray::new(vec![n, n], w)?);
    }
    let concat = DenseArray::new(vec![n, width], concat)?;
    let projected = numerics::linear(&concat, &p.wo, &p.bo)?;
    let mut out: Vec<f64> = projected
        .values()
        .iter()
        .zip(x.values())
        .map(|(a, b)| a + b)
        .collect();
    for row in out.chunks_mut(p.d_model()) {
        layer_norm_slice(row, p.ln_gain.values(), p.ln_shift.values(), LAYER_NORM_EPS);
    }
    Ok(SasaOutput {
        features: DenseArray::new(vec![n, p.d_model()], out)?,
        taus: DenseArray::new(vec![n, heads], taus)?,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pillar(x: f64, y: f64) -> QueryBox {
        QueryBox {
            x,
            y,
            z: 0.0,
            w: 1.0,
            l: 1.0,
            h: 4.0,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
        }
    }

    fn random_queries(rng: &mut ChaCha8Rng, n: usize, d: usize) -> QuerySet {
        let boxes = (0..n)
            .map(|_| pillar(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
            .collect();
        QuerySet::new(boxes, numerics::uniform_array(rng, &[n, d], 1.0)).unwrap()
    }

    #[test]
    fn distance_examples() {
        let d = pairwise_bev_distance(&[pillar(0.0, 0.0), pillar(3.0, 4.0), pillar(3.0, 4.0)]);
        assert_eq!(d.get(&[0, 1]), 5.0);
        assert_eq!(d.get(&[1, 2]), 0.0);
        assert_eq!(d.get(&[1, 1]), 0.0);
    }

    #[test]
    fn distance_matches_scalar_loop_and_metric_axioms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let qs = random_queries(&mut rng, 8, 4);
        let d = pairwise_bev_distance(&qs.boxes);
        for i in 0..8 {
            assert_eq!(d.get(&[i, i]), 0.0);
            for j in 0..8 {
                let (a, b) = (&qs.boxes[i], &qs.boxes[j]);
                let want = ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
                assert!((d.get(&[i, j]) - want).abs() < 1e-12);
                assert_eq!(d.get(&[i, j]), d.get(&[j, i]));
                for k in 0..8 {
                    assert!(d.get(&[i, k]) <= d.get(&[i, j]) + d.get(&[j, k]) + 1e-9);
                }
            }
        }
    }

    #[test]
    fn tau_generation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = SasaParams::init(&mut rng, 2, 2, 1, TauMode::Adaptive, DistanceFn::Linear);
        p.tau_w = DenseArray::zeros(&[2, 2]);
        p.tau_b = DenseArray::zeros(&[2]);
        assert_eq!(head_taus(&[0.3, -0.7], &p).unwrap(), vec![0.0, 0.0]);

        // τ_h = Σ_c f_c W[c,h] + b_h, evaluated by hand
        p.tau_w = DenseArray::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        p.tau_b = DenseArray::vector(vec![0.25, -1.0]).unwrap();
        let t = head_taus(&[2.0, 4.0], &p).unwrap();
        assert_eq!(t, vec![2.0 + 2.0 + 0.25, -4.0 + 12.0 - 1.0]);

        p.tau_mode = TauMode::SharedLearnable;
        p.shared_tau = DenseArray::vector(vec![0.7, 1.3]).unwrap();
        assert_eq!(head_taus(&[2.0, 4.0], &p).unwrap(), vec![0.7, 1.3]);
    }

    #[test]
    fn equal_features_give_equal_taus() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = SasaParams::init(&mut rng, 8, 2, 4, TauMode::Adaptive, DistanceFn::Linear);
        let boxes = vec![pillar(0.0, 0.0), pillar(5.0, 1.0)];
        let feats = DenseArray::from_rows(&[vec![0.2; 8], vec![0.2; 8]]).unwrap();
        let out = sasa_layer(&QuerySet::new(boxes, feats).unwrap(), &p).unwrap();
        assert_eq!(out.taus.row(0), out.taus.row(1));
    }

    #[test]
    fn single_query_attends_to_itself() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = SasaParams::init(&mut rng, 6, 2, 3, TauMode::Adaptive, DistanceFn::Linear);
        let feat = numerics::uniform_array(&mut rng, &[1, 6], 1.0);
        let qs = QuerySet::new(vec![pillar(1.0, 2.0)], feat.clone()).unwrap();
        let out = sasa_layer(&qs, &p).unwrap();
        for w in &out.weights {
            assert_eq!(w.values(), &[1.0]);
        }
        let v = numerics::linear(&feat, &p.wv, &p.bv).unwrap();
        let proj = numerics::linear(&v, &p.wo, &p.bo).unwrap();
        let mut want: Vec<f64> = proj
            .values()
            .iter()
            .zip(feat.values())
            .map(|(a, b)| a + b)
            .collect();
        layer_norm_slice(
            &mut want,
            p.ln_gain.values(),
            p.ln_shift.values(),
            LAYER_NORM_EPS,
        );
        let got = out.features.values();
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn raising_tau_narrows_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = SasaParams::init(
            &mut rng,
            8,
            1,
            8,
            TauMode::SharedLearnable,
            DistanceFn::Linear,
        );
        let qs = random_queries(&mut rng, 5, 8);
        p.shared_tau = DenseArray::vector(vec![0.5]).unwrap();
        let lo = sasa_layer(&qs, &p).unwrap();
        p.shared_tau = DenseArray::vector(vec![1.0]).unwrap();
        let hi = sasa_layer(&qs, &p).unwrap();
        for i in 0..5 {
            for j in 0..5 {
                if i == j {
                    continue;
                }
                let r_lo = lo.weights[0].get(&[i, j]) / lo.weights[0].get(&[i, i]);
                let r_hi = hi.weights[0].get(&[i, j]) / hi.weights[0].get(&[i, i]);
                assert!(r_hi < r_lo);
            }
        }
    }

    #[test]
    fn distance_function_variants() {
        assert_eq!(DistanceFn::Squared.apply(3.0), 9.0);
        assert_eq!(DistanceFn::Sqrt.apply(4.0), 2.0);
        assert_eq!(DistanceFn::Linear.apply(4.0), 4.0);
    }

    #[test]
    fn mismatched_width_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = SasaParams::init(&mut rng, 8, 2, 4, TauMode::Adaptive, DistanceFn::Linear);
        let qs = random_queries(&mut rng, 3, 6);
        assert!(matches!(sasa_layer(&qs, &p), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn permuting_queries_permutes_outputs(seed in 0u64..500, rot in 1usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let p = SasaParams::init(&mut rng, 8, 2, 4, TauMode::Adaptive, DistanceFn::Linear);
            let qs = random_queries(&mut rng, 6, 8);
            let perm: Vec<usize> = (0..6).map(|i| (i + rot) % 6).collect();
            let boxes = perm.iter().map(|&i| qs.boxes[i]).collect();
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| qs.feature(i).to_vec()).collect();
            let permuted = QuerySet::new(boxes, DenseArray::from_rows(&rows).unwrap()).unwrap();
            let a = sasa_layer(&qs, &p).unwrap();
            let b = sasa_layer(&permuted, &p).unwrap();
            for (new_i, &old_i) in perm.iter().enumerate() {
                for (x, y) in b.features.row(new_i).iter().zip(a.features.row(old_i)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
