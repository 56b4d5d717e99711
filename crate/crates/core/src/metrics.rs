//! Center-distance detection metrics.
//!
//! desk-NDS is `(5·mAP + Σ (1 − min(1, mTP))) / 9` over the four true-positive
//! errors ATE, ASE, AOE and AVE. There is no attribute error because the
//! model has no attribute head, hence the divisor 9 rather than 10.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::decoder::Detection;
use crate::queries::wrap_angle;
use crate::scene::GtBox;

pub const DISTANCE_THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which true-positive errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;
pub const NDS_NOTE: &str =
    "desk_NDS = (5*mAP + sum(1 - min(1, mTP)) over ATE, ASE, AOE, AVE) / 9; attribute error excluded";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// TP flag per prediction, in input order.
    pub tp: Vec<bool>,
    /// `(prediction index, gt index)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

fn center_distance(pred: &[f64; 9], gt: &GtBox) -> f64 {
    (pred[0] - gt.bbox.x).hypot(pred[1] - gt.bbox.y)
}

/// Walks predictions in the given order; each takes the nearest unmatched
/// same-class ground truth closer than `threshold` (ties to the lower gt
/// index).
pub fn greedy_match(preds: &[Detection], gts: &[GtBox], threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(preds.len());
    let mut pairs = Vec::new();
    for (pi, p) in preds.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.class_id != p.class {
                continue;
            }
            let d = center_distance(&p.bbox, g);
            if d < threshold && best.is_none_or(|(_, bd)| d < bd) {
                best = Some((gi, d));
            }
        }
        match best {
            Some((gi, _)) => {
                taken[gi] = true;
                tp.push(true);
                pairs.push((pi, gi));
            }
            None => tp.push(false),
        }
    }
    MatchResult { tp, pairs }
}

/// Area under the precision/recall curve as `Σ Δrecall · precision` over the
/// ranked predictions. `None` when there is nothing to score (no ground truth
/// and no predictions).
pub fn average_precision(tp: &[bool], num_gt: usize) -> Option<f64> {
    if num_gt == 0 {
        return if tp.is_empty() { None } else { Some(0.0) };
    }
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (k, &t) in tp.iter().enumerate() {
        if t {
            hits += 1;
            ap += (hits as f64 / (k + 1) as f64) / num_gt as f64;
        }
    }
    Some(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpErrors {
    pub ate: f64,
    pub ase: f64,
    pub aoe: f64,
    pub ave: f64,
}

impl TpErrors {
    /// Errors assigned when a class has no true positive.
    pub const WORST: TpErrors = TpErrors {
        ate: 1.0,
        ase: 1.0,
        aoe: 1.0,
        ave: 1.0,
    };

    fn as_array(&self) -> [f64; 4] {
        [self.ate, self.ase, self.aoe, self.ave]
    }
}

/// Errors of one matched pair.
pub fn pair_errors(pred: &[f64; 9], gt: &GtBox) -> TpErrors {
    let g = gt.bbox.to_vector();
    let mut overlap = 1.0;
    for d in 3..6 {
        overlap *= pred[d].min(g[d]) / pred[d].max(g[d]);
    }
    TpErrors {
        ate: center_distance(pred, gt),
        ase: 1.0 - overlap,
        aoe: wrap_angle(pred[6] - g[6]).abs(),
        ave: (pred[7] - g[7]).hypot(pred[8] - g[8]),
    }
}

/// Mean errors over matched pairs; `None` without pairs.
pub fn tp_errors(preds: &[Detection], gts: &[GtBox], pairs: &[(usize, usize)]) -> Option<TpErrors> {
    if pairs.is_empty() {
        return None;
    }
    let mut sum = [0.0; 4];
    for &(p, g) in pairs {
        for (s, e) in sum
            .iter_mut()
            .zip(pair_errors(&preds[p].bbox, &gts[g]).as_array())
        {
            *s += e;
        }
    }
    let n = pairs.len() as f64;
    Some(TpErrors {
        ate: sum[0] / n,
        ase: sum[1] / n,
        aoe: sum[2] / n,
        ave: sum[3] / n,
    })
}

pub fn nds(map: f64, errors: &TpErrors) -> f64 {
    let tp: f64 = errors.as_array().iter().map(|e| 1.0 - e.min(1.0)).sum();
    (5.0 * map + tp) / 9.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub num_gt: usize,
    pub num_pred: usize,
    /// AP per distance threshold, keyed by the threshold in meters.
    pub ap: BTreeMap<String, f64>,
    pub mean_ap: f64,
    /// Errors at the 2 m threshold; absent for classes without ground truth.
    pub tp_errors: Option<TpErrors>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    #[serde(rename = "mATE")]
    pub mate: f64,
    #[serde(rename = "mASE")]
    pub mase: f64,
    #[serde(rename = "mAOE")]
    pub maoe: f64,
    #[serde(rename = "mAVE")]
    pub mave: f64,
    #[serde(rename = "desk_NDS")]
    pub desk_nds: f64,
    pub note: String,
    pub per_class: BTreeMap<usize, ClassReport>,
}

impl MetricsReport {
    pub fn to_json(&self) -> crate::Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn tp_errors(&self) -> TpErrors {
        TpErrors {
            ate: self.mate,
            ase: self.mase,
            aoe: self.maoe,
            ave: self.mave,
        }
    }
}

fn sorted(preds: &[Detection]) -> Vec<Detection> {
    let mut out = preds.to_vec();
    out.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.query_id.cmp(&b.query_id))
    });
    out
}

/// Full evaluation of one frame. Classes count when they have ground truth
/// or predictions; mAP averages over those classes and the four thresholds.
/// True-positive errors average over classes with ground truth, a class
/// without any true positive contributing 1 to each error.
pub fn evaluate(preds: &[Detection], gts: &[GtBox]) -> MetricsReport {
    let classes: BTreeSet<usize> = gts
        .iter()
        .map(|g| g.class_id)
        .chain(preds.iter().map(|p| p.class))
        .collect();
    let mut per_class = BTreeMap::new();
    let mut ap_sum = 0.0;
    let mut ap_count = 0usize;
    let mut err_sum = [0.0; 4];
    let mut err_count = 0usize;
    for &c in &classes {
        let cp = sorted(
            &preds
                .iter()
                .filter(|p| p.class == c)
                .cloned()
                .collect::<Vec<_>>(),
        );
        let cg: Vec<GtBox> = gts.iter().filter(|g| g.class_id == c).cloned().collect();
        let mut ap = BTreeMap::new();
        let mut class_sum = 0.0;
        for &t in &DISTANCE_THRESHOLDS {
            let m = greedy_match(&cp, &cg, t);
            let a = average_precision(&m.tp, cg.len()).expect("class has gt or predictions");
            ap.insert(format!("{t}"), a);
            class_sum += a;
        }
        ap_sum += class_sum;
        ap_count += DISTANCE_THRESHOLDS.len();
        let errors = if cg.is_empty() {
            None
        } else {
            let m = greedy_match(&cp, &cg, TP_THRESHOLD);
            let e = tp_errors(&cp, &cg, &m.pairs).unwrap_or(TpErrors::WORST);
            for (s, v) in err_sum.iter_mut().zip(e.as_array()) {
                *s += v;
            }
            err_count += 1;
            Some(e)
        };
        per_class.insert(
            c,
            ClassReport {
                num_gt: cg.len(),
                num_pred: cp.len(),
                ap,
                mean_ap: class_sum / DISTANCE_THRESHOLDS.len() as f64,
                tp_errors: errors,
            },
        );
    }
    let map = if ap_count == 0 {
        0.0
    } else {
        ap_sum / ap_count as f64
    };
    let errors = if err_count == 0 {
        TpErrors::WORST
    } else {
        let n = err_count as f64;
        TpErrors {
            ate: err_sum[0] / n,
            ase: err_sum[1] / n,
            aoe: err_sum[2] / n,
            ave: err_sum[3] / n,
        }
    };
    MetricsReport {
        map,
        mate: errors.ate,
        mase: errors.ase,
        maoe: errors.aoe,
        mave: errors.ave,
        desk_nds: nds(map, &errors),
        note: NDS_NOTE.to_string(),
        per_class,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queries::QueryBox;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn qbox(x: f64, y: f64) -> QueryBox {
        QueryBox {
            x,
            y,
            z: 0.8,
            w: 2.0,
            l: 4.5,
            h: 1.6,
            yaw: 0.3,
            vx: 1.0,
            vy: -0.5,
        }
    }

    fn gt(id: usize, class_id: usize, bbox: QueryBox) -> GtBox {
        GtBox {
            object_id: id,
            class_id,
            bbox,
        }
    }

    fn det(q: usize, class: usize, score: f64, b: QueryBox) -> Detection {
        Detection {
            query_id: q,
            layer: 1,
            bbox: b.to_vector(),
            class,
            score,
        }
    }

    /// Enumerates every injective partial matching that respects class and
    /// threshold and keeps the lexicographically smallest one, ranking each
    /// prediction's outcome by (unmatched, distance, gt index) in score order.
    fn exhaustive_tp(preds: &[Detection], gts: &[GtBox], thr: f64) -> Vec<bool> {
        type Key = Vec<(bool, f64, usize)>;
        fn rec(
            k: usize,
            preds: &[Detection],
            gts: &[GtBox],
            thr: f64,
            free: &mut Vec<bool>,
            key: &mut Key,
            best: &mut Option<Key>,
        ) {
            if k == preds.len() {
                let better = best.as_ref().is_none_or(|b| {
                    key.iter()
                        .zip(b)
                        .find(|(x, y)| x != y)
                        .is_some_and(|(x, y)| x.partial_cmp(y) == Some(std::cmp::Ordering::Less))
                });
                if better {
                    *best = Some(key.clone());
                }
                return;
            }
            key.push((true, 0.0, usize::MAX));
            rec(k + 1, preds, gts, thr, free, key, best);
            key.pop();
            for g in 0..gts.len() {
                let d = center_distance(&preds[k].bbox, &gts[g]);
                if free[g] && gts[g].class_id == preds[k].class && d < thr {
                    free[g] = false;
                    key.push((false, d, g));
                    rec(k + 1, preds, gts, thr, free, key, best);
                    key.pop();
                    free[g] = true;
                }
            }
        }
        let mut best = None;
        rec(
            0,
            preds,
            gts,
            thr,
            &mut vec![true; gts.len()],
            &mut Vec::new(),
            &mut best,
        );
        best.expect("at least the empty matching")
            .iter()
            .map(|k| !k.0)
            .collect()
    }

    #[test]
    fn match_basic_cases() {
        let gts = vec![gt(0, 0, qbox(0.0, 0.0)), gt(1, 0, qbox(5.0, 0.0))];
        let perfect: Vec<Detection> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| det(i, 0, 0.9, g.bbox))
            .collect();
        assert_eq!(greedy_match(&perfect, &gts, 0.5).tp, vec![true, true]);
        assert!(greedy_match(&[], &gts, 2.0).tp.is_empty());
    }

    #[test]
    fn three_predictions_two_gts() {
        let gts = vec![gt(0, 0, qbox(0.0, 0.0)), gt(1, 0, qbox(3.0, 0.0))];
        // highest score sits between both gts but closer to gt 0; the second
        // has gt 0 as its nearest; the third lands next to gt 1
        let preds = vec![
            det(0, 0, 0.9, qbox(1.2, 0.0)),
            det(1, 0, 0.8, qbox(0.1, 0.0)),
            det(2, 0, 0.7, qbox(3.3, 0.0)),
        ];
        let m = greedy_match(&preds, &gts, 2.0);
        assert_eq!(m.tp, exhaustive_tp(&preds, &gts, 2.0));
        assert_eq!(m.tp, vec![true, false, true]);
        assert_eq!(m.pairs, vec![(0, 0), (2, 1)]);
        // hand integration: p = 1, 1/2, 2/3 at recalls 1/2, 1/2, 1
        let want = 0.5 * 1.0 + 0.5 * (2.0 / 3.0);
        assert!((average_precision(&m.tp, 2).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn ap_cases() {
        assert_eq!(average_precision(&[true, true], 2), Some(1.0));
        assert_eq!(average_precision(&[], 3), Some(0.0));
        assert_eq!(average_precision(&[false, false], 2), Some(0.0));
        assert_eq!(average_precision(&[true], 0), Some(0.0));
        assert_eq!(average_precision(&[], 0), None);
        // two TP then one FP over two gts: 0.5·1 + 0.5·1
        assert_eq!(average_precision(&[true, true, false], 2), Some(1.0));
        // TP, FP, TP over three gts: (1 + 2/3) / 3
        let want = (1.0 + 2.0 / 3.0) / 3.0;
        assert!((average_precision(&[true, false, true], 3).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn tp_error_cases() {
        let g = gt(0, 0, qbox(1.0, 1.0));
        let same = pair_errors(&g.bbox.to_vector(), &g);
        assert_eq!(
            same,
            TpErrors {
                ate: 0.0,
                ase: 0.0,
                aoe: 0.0,
                ave: 0.0
            }
        );
        let mut b = g.bbox;
        b.w *= 2.0;
        assert!((pair_errors(&b.to_vector(), &g).ase - 0.5).abs() < 1e-12);
        let mut b = g.bbox;
        b.yaw += FRAC_PI_2;
        assert!((pair_errors(&b.to_vector(), &g).aoe - FRAC_PI_2).abs() < 1e-12);
        let mut b = g.bbox;
        b.yaw += PI;
        assert!((pair_errors(&b.to_vector(), &g).aoe - PI).abs() < 1e-12);
        let mut b = g.bbox;
        b.x += 3.0;
        b.y += 4.0;
        b.vx += 0.6;
        b.vy += 0.8;
        let e = pair_errors(&b.to_vector(), &g);
        assert!((e.ate - 5.0).abs() < 1e-12 && (e.ave - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nds_cases() {
        let zero = TpErrors {
            ate: 0.0,
            ase: 0.0,
            aoe: 0.0,
            ave: 0.0,
        };
        assert_eq!(nds(1.0, &zero), 1.0);
        assert_eq!(
            nds(
                0.0,
                &TpErrors {
                    ate: 3.0,
                    ..TpErrors::WORST
                }
            ),
            0.0
        );
        let e = TpErrors {
            ate: 0.6,
            ase: 0.3,
            aoe: 0.4,
            ave: 0.25,
        };
        let want = (2.25 + 0.4 + 0.7 + 0.6 + 0.75) / 9.0;
        assert!((nds(0.45, &e) - want).abs() < 1e-12);
        assert!((want - 0.5222).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_empty_reports() {
        let gts: Vec<GtBox> = (0..10)
            .map(|i| gt(i, i % 3, qbox(i as f64 * 3.0, -(i as f64))))
            .collect();
        let preds: Vec<Detection> = gts
            .iter()
            .enumerate()
            .map(|(i, g)| det(i, g.class_id, 1.0, g.bbox))
            .collect();
        let r = evaluate(&preds, &gts);
        assert_eq!(r.map, 1.0);
        assert_eq!(
            r.tp_errors(),
            TpErrors {
                ate: 0.0,
                ase: 0.0,
                aoe: 0.0,
                ave: 0.0
            }
        );
        assert_eq!(r.desk_nds, 1.0);
        let empty = evaluate(&[], &gts);
        assert_eq!(empty.map, 0.0);
        assert_eq!(empty.desk_nds, 0.0);
        let json = r.to_json().unwrap();
        for key in ["\"mAP\"", "\"mATE\"", "\"desk_NDS\"", "\"per_class\""] {
            assert!(json.contains(key), "{key}");
        }
    }

    #[test]
    fn class_without_gt_scores_zero_ap() {
        let gts = vec![gt(0, 0, qbox(0.0, 0.0))];
        let preds = vec![
            det(0, 0, 0.9, qbox(0.0, 0.0)),
            det(1, 1, 0.8, qbox(9.0, 9.0)),
        ];
        let r = evaluate(&preds, &gts);
        assert_eq!(r.per_class[&1].mean_ap, 0.0);
        assert_eq!(r.per_class[&1].tp_errors, None);
        assert_eq!(r.map, 0.5);
        assert_eq!(r.mate, 0.0);
    }

    type Scenario = (Vec<(f64, f64, usize, f64)>, Vec<(f64, f64, usize)>);

    fn scenario() -> impl Strategy<Value = Scenario> {
        (
            prop::collection::vec((-6.0f64..6.0, -6.0f64..6.0, 0usize..2, 0.0f64..1.0), 0..7),
            prop::collection::vec((-6.0f64..6.0, -6.0f64..6.0, 0usize..2), 1..6),
        )
    }

    proptest! {
        #[test]
        fn greedy_agrees_with_reference((p, g) in scenario(), thr in 0.5f64..4.0) {
            let gts: Vec<GtBox> = g.iter().enumerate().map(|(i, &(x, y, c))| gt(i, c, qbox(x, y))).collect();
            let preds: Vec<Detection> = p.iter().enumerate().map(|(i, &(x, y, c, s))| det(i, c, s, qbox(x, y))).collect();
            prop_assert_eq!(greedy_match(&preds, &gts, thr).tp, exhaustive_tp(&preds, &gts, thr));
        }

        #[test]
        fn nds_is_bounded(map in 0.0f64..=1.0, e in prop::array::uniform4(0.0f64..3.0)) {
            let v = nds(map, &TpErrors { ate: e[0], ase: e[1], aoe: e[2], ave: e[3] });
            prop_assert!((0.0..=1.0).contains(&v));
        }

        #[test]
        fn equal_scores_order_does_not_matter((p, g) in scenario()) {
            let gts: Vec<GtBox> = g.iter().enumerate().map(|(i, &(x, y, c))| gt(i, c, qbox(x, y))).collect();
            let preds: Vec<Detection> = p.iter().enumerate().map(|(i, &(x, y, c, _))| det(i, c, 0.5, qbox(x, y))).collect();
            let mut rev = preds.clone();
            rev.reverse();
            prop_assert_eq!(evaluate(&preds, &gts), evaluate(&rev, &gts));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(512))]
        #[test]
        fn ap_grows_with_threshold((p, g) in scenario()) {
            let gts: Vec<GtBox> = g.iter().enumerate().map(|(i, &(x, y, c))| gt(i, c, qbox(x, y))).collect();
            let preds: Vec<Detection> = p.iter().enumerate().map(|(i, &(x, y, c, s))| det(i, c, s, qbox(x, y))).collect();
            for c in 0..2 {
                let cp = sorted(&preds.iter().filter(|d| d.class == c).cloned().collect::<Vec<_>>());
                let cg: Vec<GtBox> = gts.iter().filter(|d| d.class_id == c).cloned().collect();
                let aps: Vec<Option<f64>> = DISTANCE_THRESHOLDS
                    .iter()
                    .map(|&t| average_precision(&greedy_match(&cp, &cg, t).tp, cg.len()))
                    .collect();
                for w in aps.windows(2) {
                    if let (Some(a), Some(b)) = (w[0], w[1]) {
                        prop_assert!(b >= a - 1e-12, "{:?}", aps);
                    }
                }
            }
        }
    }
}
