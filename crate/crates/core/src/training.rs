//! Set matching, detection losses and a forward-only fit harness.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{run_decoder, Detections, LayerOutput, ModelParams};
use crate::error::{Error, Result};
use crate::numerics::DenseArray;
use crate::queries::wrap_angle;
use crate::scene::{GtBox, SensorInputs};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
const P_CLAMP: f64 = 1e-7;
/// L1 weights over `(x, y, z, w, l, h, yaw, vx, vy)`.
pub const BOX_WEIGHTS: [f64; 9] = [2.0, 2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0];

/// Minimum-cost assignment for an `n × m` cost matrix. Returns
/// `min(n, m)` `(row, col)` pairs sorted by row.
pub fn hungarian(cost: &DenseArray) -> Result<Vec<(usize, usize)>> {
    if cost.rank() != 2 {
        return Err(Error::config("cost matrix must be two-dimensional"));
    }
    if cost.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::config("cost matrix has non-finite entries"));
    }
    let (n, m) = (cost.shape()[0], cost.shape()[1]);
    if n <= m {
        Ok(kuhn_munkres(cost.values(), n, m)
            .into_iter()
            .enumerate()
            .collect())
    } else {
        let cols = kuhn_munkres(cost.transpose().values(), m, n);
        let mut pairs: Vec<(usize, usize)> =
            cols.into_iter().enumerate().map(|(c, r)| (r, c)).collect();
        pairs.sort_unstable();
        Ok(pairs)
    }
}

/// Shortest augmenting path with potentials; `n ≤ m`. Returns the column of
/// every row.
fn kuhn_munkres(a: &[f64], n: usize, m: usize) -> Vec<usize> {
    let at = |i: usize, j: usize| a[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // p[j]: row matched to column j (1-based, 0 = free)
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = at(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Binary focal loss of one score against label `positive`.
pub fn focal_term(p: f64, positive: bool, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(P_CLAMP, 1.0 - P_CLAMP);
    if positive {
        -alpha * (1.0 - p).powf(gamma) * p.ln()
    } else {
        -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln()
    }
}

fn focal_pos(p: f64) -> f64 {
    focal_term(p, true, FOCAL_ALPHA, FOCAL_GAMMA)
}

fn focal_neg(p: f64) -> f64 {
    focal_term(p, false, FOCAL_ALPHA, FOCAL_GAMMA)
}

/// Extra focal loss incurred by calling a score positive rather than negative.
pub fn focal_cost(p: f64) -> f64 {
    focal_pos(p) - focal_neg(p)
}

pub fn box_l1(pred: &[f64; 9], gt: &[f64; 9], weights: &[f64; 9]) -> f64 {
    let mut total = 0.0;
    for d in 0..9 {
        let diff = if d == 6 {
            wrap_angle(pred[d] - gt[d])
        } else {
            pred[d] - gt[d]
        };
        total += weights[d] * diff.abs();
    }
    total
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub cls: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            reg: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SetLoss {
    pub total: f64,
    pub per_layer: Vec<f64>,
}

/// Matching cost `N × G` for one layer.
pub fn matching_cost(out: &LayerOutput, gts: &[GtBox], w: LossWeights) -> Result<DenseArray> {
    let n = out.boxes.len();
    let mut cost = Vec::with_capacity(n * gts.len());
    for (q, b) in out.boxes.iter().enumerate() {
        let pred = b.to_vector();
        for gt in gts {
            let p = out.scores.get(&[q, gt.class_id]);
            cost.push(
                w.cls * focal_cost(p) + w.reg * box_l1(&pred, &gt.bbox.to_vector(), &BOX_WEIGHTS),
            );
        }
    }
    DenseArray::new(vec![n, gts.len()], cost)
}

/// Loss of one layer, normalized by `max(1, G)`.
pub fn layer_loss(out: &LayerOutput, gts: &[GtBox], w: LossWeights) -> Result<f64> {
    let k = out.scores.shape()[1];
    if let Some(gt) = gts.iter().find(|g| g.class_id >= k) {
        return Err(Error::config(format!(
            "ground-truth class {} exceeds the {k} model classes",
            gt.class_id
        )));
    }
    let mut target: Vec<Option<usize>> = vec![None; out.boxes.len()];
    if !gts.is_empty() {
        let cost = matching_cost(out, gts, w)?;
        for (q, g) in hungarian(&cost)? {
            target[q] = Some(g);
        }
    }
    let mut total = 0.0;
    for (q, b) in out.boxes.iter().enumerate() {
        let scores = out.scores.row(q);
        let positive = target[q].map(|g| gts[g].class_id);
        for (c, &p) in scores.iter().enumerate() {
            total += w.cls
                * if positive == Some(c) {
                    focal_pos(p)
                } else {
                    focal_neg(p)
                };
        }
        if let Some(g) = target[q] {
            total += w.reg * box_l1(&b.to_vector(), &gts[g].bbox.to_vector(), &BOX_WEIGHTS);
        }
    }
    Ok(total / gts.len().max(1) as f64)
}

/// Sum of the per-layer losses (every layer is supervised).
pub fn set_loss(dets: &Detections, gts: &[GtBox], w: LossWeights) -> Result<SetLoss> {
    let per_layer = dets
        .layers
        .iter()
        .map(|l| layer_loss(l, gts, w))
        .collect::<Result<Vec<_>>>()?;
    Ok(SetLoss {
        total: per_layer.iter().sum(),
        per_layer,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub steps: usize,
    /// Update gain `a`.
    pub step_size: f64,
    /// Probe radius `c`.
    pub perturbation: f64,
    pub seed: u64,
    /// Decoder depth used during fitting.
    pub layers: usize,
    pub loss: LossWeights,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 1e-3,
            perturbation: 1e-2,
            seed: 0,
            layers: 2,
            loss: LossWeights::default(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::config("fit.step_size must be positive"));
        }
        if !(self.perturbation > 0.0 && self.perturbation.is_finite()) {
            return Err(Error::config("fit.perturbation must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub params: ModelParams,
    /// Loss before each update.
    pub trace: Vec<f64>,
}

/// Set loss of the decoder output at parameters `flat`.
pub fn evaluate_loss(
    template: &ModelParams,
    flat: &[f64],
    inputs: &SensorInputs,
    gts: &[GtBox],
    fit: &FitConfig,
) -> Result<f64> {
    let mut params = template.clone();
    params.set_flat(flat)?;
    let dets = run_decoder(&params, inputs, fit.layers)?;
    Ok(set_loss(&dets, gts, fit.loss)?.total)
}

/// Simultaneous-perturbation stochastic approximation on the flat parameter
/// vector with Rademacher directions and constant gains.
pub fn spsa_fit(
    params: &ModelParams,
    inputs: &SensorInputs,
    gts: &[GtBox],
    fit: &FitConfig,
) -> Result<FitResult> {
    fit.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(fit.seed);
    let mut theta = params.flatten();
    let mut trace = Vec::with_capacity(fit.steps);
    let c = fit.perturbation;
    let finite = |value: f64, step: usize, what: &str| {
        if value.is_finite() {
            Ok(value)
        } else {
            Err(Error::contract(format!(
                "non-finite {what} loss at step {step}"
            )))
        }
    };
    for step in 0..fit.steps {
        let delta: Vec<f64> = (0..theta.len())
            .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        let plus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t + c * d).collect();
        let minus: Vec<f64> = theta.iter().zip(&delta).map(|(t, d)| t - c * d).collect();
        let (base, (lp, lm)) = rayon::join(
            || evaluate_loss(params, &theta, inputs, gts, fit),
            || {
                rayon::join(
                    || evaluate_loss(params, &plus, inputs, gts, fit),
                    || evaluate_loss(params, &minus, inputs, gts, fit),
                )
            },
        );
        trace.push(finite(base?, step, "current")?);
        let lp = finite(lp?, step, "positive probe")?;
        let lm = finite(lm?, step, "negative probe")?;
        let g = (lp - lm) / (2.0 * c);
        for (t, d) in theta.iter_mut().zip(&delta) {
            *t -= fit.step_size * g * d;
        }
    }
    let mut out = params.clone();
    out.set_flat(&theta)?;
    Ok(FitResult { params: out, trace })
}

/// Trailing moving average over `window` entries.
pub fn smoothed(trace: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..trace.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(window);
            trace[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

/// `step,loss` rows.
pub fn trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}
