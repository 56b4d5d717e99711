//! SVG emitters for sampling points and receptive-field statistics.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::decoder::LayerOutput;
use crate::geometry::CameraModel;
use crate::sampling::SamplePoint;

/// Only queries scoring above this enter the per-class τ statistics.
pub const TAU_SCORE_THRESHOLD: f64 = 0.3;
const MIN_RADIUS: f64 = 0.5;
const MAX_RADIUS: f64 = 8.0;
const RADIUS_SCALE: f64 = 40.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotPoint {
    pub query: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

fn query_color(q: usize) -> String {
    format!("hsl({:.1},70%,45%)", (q as f64 * 137.508) % 360.0)
}

/// Circle radius in pixels, inversely proportional to depth.
pub fn point_radius(depth: f64) -> f64 {
    (RADIUS_SCALE / depth).clamp(MIN_RADIUS, MAX_RADIUS)
}

/// Points of `frame` that land in `view`, at full-resolution pixels.
pub fn view_points(
    trace: &[Vec<SamplePoint>],
    cameras: &[CameraModel],
    frame: usize,
    view: usize,
) -> Vec<PlotPoint> {
    let cam = &cameras[view];
    let mut out = Vec::new();
    for (q, points) in trace.iter().enumerate() {
        for sp in points.iter().filter(|sp| sp.frame == frame) {
            if sp.hits.iter().any(|h| h.view == view) {
                let pr = cam.project(&sp.warped);
                out.push(PlotPoint {
                    query: q,
                    u: pr.u,
                    v: pr.v,
                    depth: pr.depth,
                });
            }
        }
    }
    out
}

pub fn sampling_svg(camera: &CameraModel, points: &[PlotPoint], title: &str) -> String {
    let (w, h) = (camera.image_width, camera.image_height);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(s, "<title>{}</title>", escape(title)).unwrap();
    writeln!(
        s,
        r##"<rect x="0" y="0" width="{w}" height="{h}" fill="#101010"/>"##
    )
    .unwrap();
    for p in points {
        writeln!(
            s,
            r#"<circle cx="{:.3}" cy="{:.3}" r="{:.3}" fill="{}" fill-opacity="0.8" data-query="{}"/>"#,
            p.u,
            p.v,
            point_radius(p.depth),
            query_color(p.query),
            p.query
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauRecord {
    pub query_id: usize,
    pub class: usize,
    pub score: f64,
    pub taus: Vec<f64>,
}

/// Per-query τ with the query's best class and score.
pub fn tau_records(out: &LayerOutput) -> Vec<TauRecord> {
    (0..out.boxes.len())
        .map(|q| {
            let row = out.scores.row(q);
            let mut class = 0;
            for (c, &s) in row.iter().enumerate() {
                if s > row[class] {
                    class = c;
                }
            }
            TauRecord {
                query_id: q,
                class,
                score: row[class],
                taus: out.taus.row(q).to_vec(),
            }
        })
        .collect()
}

/// Mean τ over heads and confident queries, per class.
pub fn class_mean_tau(records: &[TauRecord], min_score: f64) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records.iter().filter(|r| r.score > min_score) {
        let e = acc.entry(r.class).or_insert((0.0, 0));
        for t in &r.taus {
            e.0 += t;
            e.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(c, (s, n))| (c, s / n as f64))
        .collect()
}

/// Mean τ per head over all queries.
pub fn head_mean_tau(records: &[TauRecord]) -> Vec<f64> {
    let heads = records.first().map_or(0, |r| r.taus.len());
    (0..heads)
        .map(|h| records.iter().map(|r| r.taus[h]).sum::<f64>() / records.len() as f64)
        .collect()
}

const CHART_W: f64 = 480.0;
const CHART_H: f64 = 300.0;
const MARGIN: f64 = 40.0;

pub fn tau_bar_svg(means: &BTreeMap<usize, f64>) -> String {
    let mut s = chart_header("mean tau per class");
    let n = means.len().max(1) as f64;
    let top = means.values().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-9);
    let slot = (CHART_W - 2.0 * MARGIN) / n;
    let base = CHART_H - MARGIN;
    for (i, (class, tau)) in means.iter().enumerate() {
        let height = tau.abs() / top * (CHART_H - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * slot + 0.1 * slot;
        let y = if *tau >= 0.0 { base - height } else { base };
        writeln!(
            s,
            r##"<rect class="bar" x="{x:.3}" y="{y:.3}" width="{:.3}" height="{height:.3}" fill="#3b7dd8" data-class="{class}" data-tau="{tau}"/>"##,
            0.8 * slot
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.3}" y="{:.3}" font-size="12" text-anchor="middle">class {class}</text>"#,
            x + 0.4 * slot,
            base + 16.0
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// `exp(−τ d)` per head over `[0, max_distance]`, heads sorted by τ.
pub fn tau_curves(
    head_taus: &[f64],
    max_distance: f64,
    samples: usize,
) -> Vec<(f64, Vec<(f64, f64)>)> {
    let mut taus = head_taus.to_vec();
    taus.sort_by(f64::total_cmp);
    taus.into_iter()
        .map(|t| {
            let pts = (0..samples)
                .map(|k| {
                    let d = max_distance * k as f64 / (samples - 1).max(1) as f64;
                    (d, (-t * d).exp())
                })
                .collect();
            (t, pts)
        })
        .collect()
}

pub fn tau_curve_svg(head_taus: &[f64], max_distance: f64) -> String {
    let mut s = chart_header("exp(-tau d) per head");
    let curves = tau_curves(head_taus, max_distance, 64);
    let top = curves
        .iter()
        .flat_map(|(_, p)| p.iter().map(|q| q.1))
        .fold(1.0f64, f64::max);
    let sx = (CHART_W - 2.0 * MARGIN) / max_distance;
    let sy = (CHART_H - 2.0 * MARGIN) / top;
    for (i, (tau, pts)) in curves.iter().enumerate() {
        let path: Vec<String> = pts
            .iter()
            .map(|(d, y)| format!("{:.3},{:.3}", MARGIN + d * sx, CHART_H - MARGIN - y * sy))
            .collect();
        writeln!(
            s,
            r#"<polyline class="curve" points="{}" fill="none" stroke="{}" data-tau="{tau}"/>"#,
            path.join(" "),
            query_color(i)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn chart_header(title: &str) -> String {
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{CHART_W}" height="{CHART_H}" viewBox="0 0 {CHART_W} {CHART_H}">"#
    )
    .unwrap();
    writeln!(s, "<title>{}</title>", escape(title)).unwrap();
    writeln!(
        s,
        r#"<line x1="{MARGIN}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/>"#,
        y = CHART_H - MARGIN,
        x2 = CHART_W - MARGIN
    )
    .unwrap();
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::DenseArray;
    use crate::queries::QueryBox;

    fn out() -> LayerOutput {
        let b = QueryBox {
            x: 0.0,
            y: 0.0,
            z: 0.0,
            w: 1.0,
            l: 1.0,
            h: 1.0,
            yaw: 0.0,
            vx: 0.0,
            vy: 0.0,
        };
        LayerOutput {
            boxes: vec![b; 3],
            scores: DenseArray::from_rows(&[vec![0.9, 0.1], vec![0.2, 0.5], vec![0.25, 0.1]])
                .unwrap(),
            taus: DenseArray::from_rows(&[vec![1.0, 3.0], vec![0.5, 0.5], vec![9.0, 9.0]]).unwrap(),
        }
    }

    #[test]
    fn class_means_skip_low_scores() {
        let recs = tau_records(&out());
        assert_eq!(recs[1].class, 1);
        let means = class_mean_tau(&recs, TAU_SCORE_THRESHOLD);
        assert_eq!(means.len(), 2);
        assert_eq!(means[&0], 2.0);
        assert_eq!(means[&1], 0.5);
        assert_eq!(head_mean_tau(&recs), vec![10.5 / 3.0, 12.5 / 3.0]);
    }

    #[test]
    fn curves_are_sorted_and_monotone() {
        let curves = tau_curves(&[2.0, 0.5, 1.0], 10.0, 16);
        let taus: Vec<f64> = curves.iter().map(|c| c.0).collect();
        assert_eq!(taus, vec![0.5, 1.0, 2.0]);
        for (_, pts) in &curves {
            assert!(pts.windows(2).all(|w| w[1].1 < w[0].1));
        }
    }

    #[test]
    fn radius_shrinks_with_depth() {
        assert!(point_radius(5.0) > point_radius(20.0));
        assert_eq!(point_radius(1e-3), MAX_RADIUS);
    }
}
