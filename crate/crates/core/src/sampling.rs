//! Adaptive spatio-temporal sampling.
//!
//! For every query, a linear head emits `S` offsets per frame. Offsets are
//! placed inside the query pillar, warped back in time with the query
//! velocity, carried into each past frame's ego coordinates, projected into
//! every camera, and sampled from the multi-scale feature maps. Per point the
//! levels are blended with query-generated weights (softmax over levels) and
//! the views that see the point are averaged.
//!
//! Output rows are stacked stream by stream, then frame by frame in the order
//! the stream lists them, then point by point.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{self, CameraModel, EgoPose, ViewHit};
use crate::numerics::{self, softmax_slice, DenseArray};
use crate::queries::QueryBox;
use crate::scene::{ResolutionScale, SensorInputs};

/// Frames routed to one sensor stream at one resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub frames: Vec<usize>,
    pub resolution_scale: ResolutionScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplingConfig {
    /// Frames per query (T).
    pub frames: usize,
    /// Sampling points per frame (S).
    pub points: usize,
    /// Feature levels per view.
    pub levels: usize,
    pub align_ego: bool,
    pub align_object: bool,
    /// Empty means one full-resolution stream over all frames.
    pub streams: Vec<StreamSpec>,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            points: 16,
            levels: 4,
            align_ego: true,
            align_object: true,
            streams: Vec::new(),
        }
    }
}

impl SamplingConfig {
    pub fn effective_streams(&self) -> Vec<StreamSpec> {
        if self.streams.is_empty() {
            vec![StreamSpec {
                frames: (0..self.frames).collect(),
                resolution_scale: ResolutionScale::Full,
            }]
        } else {
            self.streams.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.points == 0 || self.levels == 0 {
            return Err(Error::config(
                "frames, points and levels must be at least 1",
            ));
        }
        let streams = self.effective_streams();
        let mut covered = vec![false; self.frames];
        for (s, spec) in streams.iter().enumerate() {
            if spec.frames.is_empty() {
                return Err(Error::config(format!("stream {s} has no frames")));
            }
            let mut seen = vec![false; self.frames];
            for &f in &spec.frames {
                if f >= self.frames {
                    return Err(Error::config(format!(
                        "stream {s} lists frame {f}, but only {} frames exist",
                        self.frames
                    )));
                }
                if seen[f] {
                    return Err(Error::config(format!("stream {s} lists frame {f} twice")));
                }
                seen[f] = true;
                covered[f] = true;
            }
        }
        if let Some(f) = covered.iter().position(|c| !c) {
            return Err(Error::config(format!(
                "frame {f} is not covered by any stream"
            )));
        }
        Ok(())
    }

    /// Total stacked sampling points per query.
    pub fn total_points(&self) -> usize {
        self.effective_streams()
            .iter()
            .map(|s| s.frames.len())
            .sum::<usize>()
            * self.points
    }

    /// Every `(frame, scale)` pair that must be rendered.
    pub fn render_requests(&self) -> Vec<(usize, ResolutionScale)> {
        self.effective_streams()
            .iter()
            .flat_map(|s| s.frames.iter().map(move |&f| (f, s.resolution_scale)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingTask {
    pub stream: usize,
    pub frame: usize,
    pub scale: ResolutionScale,
}

/// Evaluation plan in stacking order.
pub fn route_streams(cfg: &SamplingConfig) -> Result<Vec<SamplingTask>> {
    cfg.validate()?;
    Ok(cfg
        .effective_streams()
        .iter()
        .enumerate()
        .flat_map(|(stream, spec)| {
            spec.frames.iter().map(move |&frame| SamplingTask {
                stream,
                frame,
                scale: spec.resolution_scale,
            })
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    /// `D × T·S·3` offset generator.
    pub offset_w: DenseArray,
    pub offset_b: DenseArray,
    /// `D × T·S·levels` scale-weight generator.
    pub scale_w: DenseArray,
    pub scale_b: DenseArray,
}

impl SamplingParams {
    /// Offsets start spread across the pillar (bias in `[-0.5, 0.5]`) with a
    /// small feature-dependent part.
    pub fn init(rng: &mut impl Rng, d_model: usize, cfg: &SamplingConfig) -> Self {
        let n_off = cfg.frames * cfg.points * 3;
        let n_scale = cfg.frames * cfg.points * cfg.levels;
        Self {
            offset_w: numerics::uniform_array(rng, &[d_model, n_off], 0.01),
            offset_b: numerics::uniform_array(rng, &[n_off], 0.5),
            scale_w: numerics::uniform_array(rng, &[d_model, n_scale], 0.01),
            scale_b: DenseArray::zeros(&[n_scale]),
        }
    }

    pub fn validate(&self, d_model: usize, cfg: &SamplingConfig) -> Result<()> {
        let n_off = cfg.frames * cfg.points * 3;
        let n_scale = cfg.frames * cfg.points * cfg.levels;
        let expect = [
            ("offset_w", &self.offset_w, vec![d_model, n_off]),
            ("offset_b", &self.offset_b, vec![n_off]),
            ("scale_w", &self.scale_w, vec![d_model, n_scale]),
            ("scale_b", &self.scale_b, vec![n_scale]),
        ];
        for (name, arr, shape) in expect {
            if arr.shape() != shape.as_slice() {
                return Err(Error::config(format!(
                    "sampling.{name}: expected shape {shape:?}, got {:?}",
                    arr.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn arrays(&self) -> Vec<(&'static str, &DenseArray)> {
        vec![
            ("offset_w", &self.offset_w),
            ("offset_b", &self.offset_b),
            ("scale_w", &self.scale_w),
            ("scale_b", &self.scale_b),
        ]
    }

    pub fn arrays_mut(&mut self) -> Vec<&mut DenseArray> {
        vec![
            &mut self.offset_w,
            &mut self.offset_b,
            &mut self.scale_w,
            &mut self.scale_b,
        ]
    }
}

/// Raw offsets, indexed `[t · S + s]`.
pub fn gen_offsets(
    feat: &[f64],
    p: &SamplingParams,
    cfg: &SamplingConfig,
) -> Result<Vec<[f64; 3]>> {
    let flat = numerics::linear_vec(feat, &p.offset_w, &p.offset_b)?;
    if flat.len() != cfg.frames * cfg.points * 3 {
        return Err(Error::config("offset head width does not match T·S·3"));
    }
    Ok(flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
}

/// Level weights, indexed `[(t · S + s) · levels + j]`; each point's weights
/// sum to one.
pub fn scale_weights(feat: &[f64], p: &SamplingParams, cfg: &SamplingConfig) -> Result<Vec<f64>> {
    let mut flat = numerics::linear_vec(feat, &p.scale_w, &p.scale_b)?;
    if flat.len() != cfg.frames * cfg.points * cfg.levels {
        return Err(Error::config(
            "scale-weight head width does not match T·S·levels",
        ));
    }
    for point in flat.chunks_mut(cfg.levels) {
        softmax_slice(point);
    }
    Ok(flat)
}

/// Places a normalized offset inside the query pillar: scale by the box size,
/// rotate by yaw about z, translate to the box center.
pub fn pillar_to_ego(b: &QueryBox, delta: [f64; 3]) -> Vector3<f64> {
    let (s, c) = b.yaw.sin_cos();
    let lx = b.w * delta[0];
    let ly = b.l * delta[1];
    Vector3::new(
        c * lx - s * ly + b.x,
        s * lx + c * ly + b.y,
        b.h * delta[2] + b.z,
    )
}

/// Moves a point along a BEV velocity by `dt = T_t − T_0` seconds.
pub fn warp_object_motion(pt: &Vector3<f64>, velocity: (f64, f64), dt: f64) -> Vector3<f64> {
    Vector3::new(pt.x + velocity.0 * dt, pt.y + velocity.1 * dt, pt.z)
}

pub fn warp_ego_motion(pts: &[Vector3<f64>], e0: &EgoPose, et: &EgoPose) -> Vec<Vector3<f64>> {
    geometry::ego_align(pts, e0, et)
}

/// Carries a current-frame point into frame `frame`'s ego coordinates,
/// applying whichever alignments the config enables. Frame 0 is returned
/// unchanged.
pub fn align_point(
    pt: &Vector3<f64>,
    velocity: (f64, f64),
    poses: &[EgoPose],
    frame: usize,
    cfg: &SamplingConfig,
) -> Vector3<f64> {
    let (e0, et) = (&poses[0], &poses[frame]);
    let mut p = *pt;
    if cfg.align_object {
        p = warp_object_motion(&p, velocity, et.timestamp - e0.timestamp);
    }
    if cfg.align_ego && frame != 0 {
        p = geometry::ego_alignment(e0, et).apply(&p);
    }
    p
}

/// One stacked sampling point with its geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePoint {
    pub stream: usize,
    pub frame: usize,
    pub point: usize,
    /// Position in current-frame ego coordinates before any warping.
    pub anchor: Vector3<f64>,
    /// Position in frame-`frame` ego coordinates.
    pub warped: Vector3<f64>,
    /// Views that see the point, with pixel coordinates at the stream's
    /// resolution.
    pub hits: Vec<ViewHit>,
    pub scale: ResolutionScale,
}

fn check_inputs(inputs: &SensorInputs, cfg: &SamplingConfig) -> Result<()> {
    if inputs.ego_poses.len() < cfg.frames {
        return Err(Error::config(format!(
            "sampling needs {} frames, scene has {}",
            cfg.frames,
            inputs.ego_poses.len()
        )));
    }
    if let Some(cam) = inputs.cameras.iter().find(|c| c.num_levels() != cfg.levels) {
        return Err(Error::config(format!(
            "sampling expects {} levels, camera has {}",
            cfg.levels,
            cam.num_levels()
        )));
    }
    Ok(())
}

/// Geometry of every sampling point of one query, in stacking order.
pub fn sample_points(
    b: &QueryBox,
    feat: &[f64],
    inputs: &SensorInputs,
    p: &SamplingParams,
    cfg: &SamplingConfig,
) -> Result<Vec<SamplePoint>> {
    check_inputs(inputs, cfg)?;
    let tasks = route_streams(cfg)?;
    let offsets = gen_offsets(feat, p, cfg)?;
    let rigs: Vec<(ResolutionScale, Vec<CameraModel>)> = [
        ResolutionScale::Full,
        ResolutionScale::Half,
        ResolutionScale::Quarter,
    ]
    .into_iter()
    .filter(|s| tasks.iter().any(|t| t.scale == *s))
    .map(|s| {
        (
            s,
            inputs
                .cameras
                .iter()
                .map(|c| c.scaled(s.factor()))
                .collect(),
        )
    })
    .collect();
    let mut out = Vec::with_capacity(tasks.len() * cfg.points);
    for task in &tasks {
        let rig = &rigs
            .iter()
            .find(|(s, _)| *s == task.scale)
            .expect("rig per scale")
            .1;
        for s in 0..cfg.points {
            let anchor = pillar_to_ego(b, offsets[task.frame * cfg.points + s]);
            let warped = align_point(&anchor, (b.vx, b.vy), &inputs.ego_poses, task.frame, cfg);
            out.push(SamplePoint {
                stream: task.stream,
                frame: task.frame,
                point: s,
                anchor,
                warped,
                hits: geometry::view_hits(rig, &warped),
                scale: task.scale,
            });
        }
    }
    Ok(out)
}

/// Sampled features `f ∈ [P_total × C]` for one query. Points that no camera
/// sees produce zero rows.
pub fn sample_spatiotemporal(
    b: &QueryBox,
    feat: &[f64],
    inputs: &SensorInputs,
    p: &SamplingParams,
    cfg: &SamplingConfig,
) -> Result<DenseArray> {
    let points = sample_points(b, feat, inputs, p, cfg)?;
    let weights = scale_weights(feat, p, cfg)?;
    let channels = inputs
        .channels()
        .ok_or_else(|| Error::config("no feature pyramids rendered"))?;
    let mut out = vec![0.0; points.len() * channels];
    let mut view_acc = vec![0.0; channels];
    for (row, sp) in out.chunks_mut(channels).zip(&points) {
        if sp.hits.is_empty() {
            continue;
        }
        let pyramids = inputs.pyramids_for(sp.frame, sp.scale)?;
        let w = &weights[(sp.frame * cfg.points + sp.point) * cfg.levels..][..cfg.levels];
        for hit in &sp.hits {
            view_acc.iter_mut().for_each(|v| *v = 0.0);
            let pyramid = &pyramids[hit.view];
            for (level, &wj) in pyramid.levels.iter().zip(w) {
                let stride = f64::from(level.stride);
                numerics::bilinear_accumulate(
                    &level.map,
                    hit.u / stride,
                    hit.v / stride,
                    wj,
                    &mut view_acc,
                )?;
            }
            for (o, a) in row.iter_mut().zip(&view_acc) {
                *o += a;
            }
        }
        let n = sp.hits.len() as f64;
        row.iter_mut().for_each(|v| *v /= n);
    }
    DenseArray::new(vec![points.len(), channels], out)
}
