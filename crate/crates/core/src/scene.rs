//! Deterministic synthetic world.
//!
//! Objects move at constant velocity on the ground plane, the ego vehicle
//! drives at constant speed with an optional constant yaw rate, and a ring of
//! cameras observes the scene. Instead of images the simulator renders dense
//! feature pyramids directly: Gaussian noise plus, for every visible object, a
//! splat of the object's unit-norm signature centered at its projection.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, EgoPose};
use crate::numerics::DenseArray;
use crate::queries::{wrap_angle, QueryBox};

pub const SCENE_FORMAT: &str = "pillar-scene";
pub const SCENE_VERSION: u32 = 1;

/// Minimum splat radius in feature-level pixels.
const MIN_SPLAT_SIGMA: f64 = 2.0;

/// Nominal (w, l, h) per class; w is the extent along the heading.
const CLASS_SIZES: [[f64; 3]; 5] = [
    [4.6, 1.9, 1.7],
    [0.7, 0.7, 1.8],
    [11.0, 2.9, 3.4],
    [1.8, 0.6, 1.4],
    [7.5, 2.5, 3.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub num_cameras: usize,
    pub hfov_deg: f64,
    pub image_width: u32,
    pub image_height: u32,
    pub strides: Vec<u32>,
    pub mount_height: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            num_cameras: 6,
            hfov_deg: 70.0,
            image_width: 320,
            image_height: 192,
            strides: vec![8, 16, 32, 64],
            mount_height: 1.6,
        }
    }
}

impl RigConfig {
    /// Cameras at yaw `k · 360° / num_cameras`.
    pub fn build(&self) -> Result<Vec<CameraModel>> {
        if self.num_cameras == 0 {
            return Err(Error::config("rig needs at least one camera"));
        }
        if !(self.hfov_deg > 0.0 && self.hfov_deg < 180.0) {
            return Err(Error::config("hfov_deg must lie in (0, 180)"));
        }
        let step = 2.0 * std::f64::consts::PI / self.num_cameras as f64;
        (0..self.num_cameras)
            .map(|k| {
                CameraModel::looking_along(
                    k as f64 * step,
                    Vector3::new(0.0, 0.0, self.mount_height),
                    self.hfov_deg.to_radians(),
                    self.image_width,
                    self.image_height,
                    self.strides.clone(),
                )
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub num_objects: usize,
    pub num_classes: usize,
    /// Objects are placed at ranges in `[min_range, roi_half_extent]`.
    pub roi_half_extent: f64,
    pub min_range: f64,
    pub max_speed: f64,
    pub frames: usize,
    /// Seconds between adjacent frames.
    pub frame_interval: f64,
    /// Timestamp of the current frame.
    pub time_origin: f64,
    pub channels: usize,
    pub noise_std: f64,
    pub ego_speed: f64,
    /// Radians per second.
    pub ego_yaw_rate: f64,
    pub rig: RigConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            num_objects: 8,
            num_classes: 3,
            roi_half_extent: 30.0,
            min_range: 5.0,
            max_speed: 5.0,
            frames: 8,
            frame_interval: 0.5,
            time_origin: 0.0,
            channels: 32,
            noise_std: 0.05,
            ego_speed: 5.0,
            ego_yaw_rate: 0.1,
            rig: RigConfig::default(),
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::config(m.to_string()));
        if self.num_classes == 0 {
            return bad("num_classes must be at least 1");
        }
        if !(self.min_range >= 0.0 && self.roi_half_extent > self.min_range) {
            return bad("need 0 <= min_range < roi_half_extent");
        }
        if !(self.max_speed >= 0.0 && self.max_speed.is_finite()) {
            return bad("max_speed must be finite and non-negative");
        }
        if self.frames == 0 {
            return bad("frames must be at least 1");
        }
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            return bad("frame_interval must be positive");
        }
        if !self.time_origin.is_finite() {
            return bad("time_origin must be finite");
        }
        if self.channels == 0 {
            return bad("channels must be at least 1");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and non-negative");
        }
        if !(self.ego_speed.is_finite() && self.ego_yaw_rate.is_finite()) {
            return bad("ego motion must be finite");
        }
        Ok(())
    }
}

/// Image resampling factor of a sensor stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub enum ResolutionScale {
    Full,
    Half,
    Quarter,
}

impl ResolutionScale {
    pub fn factor(self) -> f64 {
        match self {
            ResolutionScale::Full => 1.0,
            ResolutionScale::Half => 0.5,
            ResolutionScale::Quarter => 0.25,
        }
    }

    fn code(self) -> u64 {
        match self {
            ResolutionScale::Full => 0,
            ResolutionScale::Half => 1,
            ResolutionScale::Quarter => 2,
        }
    }
}

impl TryFrom<f64> for ResolutionScale {
    type Error = Error;

    fn try_from(s: f64) -> Result<Self> {
        [
            ResolutionScale::Full,
            ResolutionScale::Half,
            ResolutionScale::Quarter,
        ]
        .into_iter()
        .find(|r| r.factor() == s)
        .ok_or_else(|| {
            Error::config(format!(
                "resolution_scale must be one of 1, 0.5, 0.25; got {s}"
            ))
        })
    }
}

impl From<ResolutionScale> for f64 {
    fn from(s: ResolutionScale) -> f64 {
        s.factor()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub id: usize,
    pub class_id: usize,
    /// World position at the current timestamp.
    pub center0: Vector3<f64>,
    /// (w, l, h) in meters.
    pub size: [f64; 3],
    pub yaw0: f64,
    /// World ground-plane velocity, m/s.
    pub velocity: [f64; 2],
    pub signature: Vec<f64>,
}

impl SceneObject {
    pub fn center_at(&self, dt: f64) -> Vector3<f64> {
        self.center0 + Vector3::new(self.velocity[0] * dt, self.velocity[1] * dt, 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub config: SceneConfig,
    pub seed: u64,
    pub objects: Vec<SceneObject>,
    pub cameras: Vec<CameraModel>,
    /// One pose per frame; frame 0 is the current frame.
    pub ego_poses: Vec<EgoPose>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub object_id: usize,
    pub class_id: usize,
    pub bbox: QueryBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame: usize,
    pub timestamp: f64,
    pub boxes: Vec<GtBox>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLevel {
    pub stride: u32,
    /// `C × H × W`.
    pub map: DenseArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<FeatureLevel>,
}

/// SplitMix64 folded over `parts`; used to derive independent RNG substreams.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut z: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const SIGNATURE_TAG: u64 = 0x5349_474e;
const NOISE_TAG: u64 = 0x4e4f_4953;

/// Unit-norm feature signature for an object id.
pub fn signature(seed: u64, id: usize, channels: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, SIGNATURE_TAG, id as u64]));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..channels).map(|_| normal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

pub fn build_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    config.validate()?;
    let cameras = config.rig.build()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0x4f42_4a53]));
    let tau = 2.0 * std::f64::consts::PI;
    let objects = (0..config.num_objects)
        .map(|id| {
            let class_id = rng.random_range(0..config.num_classes);
            let base = CLASS_SIZES[class_id % CLASS_SIZES.len()];
            let size = base.map(|s| s * rng.random_range(0.9..1.1));
            let range = rng.random_range(config.min_range..=config.roi_half_extent);
            let bearing = rng.random_range(0.0..tau);
            let speed = if config.max_speed > 0.0 {
                rng.random_range(0.0..=config.max_speed)
            } else {
                0.0
            };
            let heading = rng.random_range(0.0..tau);
            SceneObject {
                id,
                class_id,
                center0: Vector3::new(range * bearing.cos(), range * bearing.sin(), size[2] / 2.0),
                size,
                yaw0: wrap_angle(heading),
                velocity: [speed * heading.cos(), speed * heading.sin()],
                signature: signature(seed, id, config.channels),
            }
        })
        .collect();
    let ego_poses = (0..config.frames)
        .map(|t| {
            let ts = timestamp(config, t);
            let dt = ts - config.time_origin;
            EgoPose::from_world_placement(
                config.ego_yaw_rate * dt,
                Vector3::new(config.ego_speed * dt, 0.0, 0.0),
                ts,
            )
        })
        .collect();
    Ok(Scene {
        config: config.clone(),
        seed,
        objects,
        cameras,
        ego_poses,
    })
}

/// `T_t = time_origin − t · frame_interval`.
pub fn timestamp(config: &SceneConfig, frame: usize) -> f64 {
    config.time_origin - frame as f64 * config.frame_interval
}

fn check_frame(scene: &Scene, frame: usize) -> Result<()> {
    if frame >= scene.ego_poses.len() {
        return Err(Error::config(format!(
            "frame {frame} out of range (scene has {})",
            scene.ego_poses.len()
        )));
    }
    Ok(())
}

impl Scene {
    pub fn num_frames(&self) -> usize {
        self.ego_poses.len()
    }

    /// Object center at frame `frame` in that frame's ego coordinates.
    pub fn object_center_in_frame(&self, obj: &SceneObject, frame: usize) -> Vector3<f64> {
        let pose = &self.ego_poses[frame];
        let world = obj.center_at(pose.timestamp - self.config.time_origin);
        pose.ego_from_world.apply(&world)
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Envelope<'a> {
            format: &'a str,
            version: u32,
            scene: &'a Scene,
        }
        Ok(serde_json::to_string_pretty(&Envelope {
            format: SCENE_FORMAT,
            version: SCENE_VERSION,
            scene: self,
        })?)
    }

    pub fn from_json(text: &str) -> Result<Scene> {
        #[derive(Deserialize)]
        struct Envelope {
            format: String,
            version: u32,
            scene: Scene,
        }
        let env: Envelope = serde_json::from_str(text)?;
        if env.format != SCENE_FORMAT || env.version != SCENE_VERSION {
            return Err(Error::Format(format!(
                "unsupported scene file {} v{}",
                env.format, env.version
            )));
        }
        for cam in &env.scene.cameras {
            cam.validate()?;
        }
        Ok(env.scene)
    }
}

/// Ground truth at frame `frame`, expressed in that frame's ego coordinates.
/// Frame 0 is the supervision target of the decoder.
pub fn gt_at(scene: &Scene, frame: usize) -> Result<GroundTruthFrame> {
    check_frame(scene, frame)?;
    let pose = &scene.ego_poses[frame];
    let rot = pose.ego_from_world.rotation;
    let ego_yaw = rot[(1, 0)].atan2(rot[(0, 0)]);
    let boxes = scene
        .objects
        .iter()
        .map(|obj| {
            let c = scene.object_center_in_frame(obj, frame);
            let v = rot * Vector3::new(obj.velocity[0], obj.velocity[1], 0.0);
            GtBox {
                object_id: obj.id,
                class_id: obj.class_id,
                bbox: QueryBox {
                    x: c.x,
                    y: c.y,
                    z: c.z,
                    w: obj.size[0],
                    l: obj.size[1],
                    h: obj.size[2],
                    yaw: wrap_angle(obj.yaw0 + ego_yaw),
                    vx: v.x,
                    vy: v.y,
                },
            }
        })
        .collect();
    Ok(GroundTruthFrame {
        frame,
        timestamp: pose.timestamp,
        boxes,
    })
}

/// Feature pyramids for every view of one frame at one resolution.
pub fn render_features(
    scene: &Scene,
    frame: usize,
    scale: ResolutionScale,
) -> Result<Vec<FeaturePyramid>> {
    check_frame(scene, frame)?;
    let centers: Vec<Vector3<f64>> = scene
        .objects
        .iter()
        .map(|o| scene.object_center_in_frame(o, frame))
        .collect();
    (0..scene.cameras.len())
        .into_par_iter()
        .map(|view| render_view(scene, frame, view, scale, &centers))
        .collect()
}

fn render_view(
    scene: &Scene,
    frame: usize,
    view: usize,
    scale: ResolutionScale,
    centers: &[Vector3<f64>],
) -> Result<FeaturePyramid> {
    let cfg = &scene.config;
    let cam = scene.cameras[view].scaled(scale.factor());
    let channels = cfg.channels;
    let levels = (0..cam.num_levels())
        .map(|j| {
            let stride = cam.strides[j];
            let (w, h) = cam.level_extent(j);
            let plane = w * h;
            let mut values = vec![0.0; channels * plane];
            if cfg.noise_std > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                    scene.seed,
                    NOISE_TAG,
                    frame as u64,
                    view as u64,
                    j as u64,
                    scale.code(),
                ]));
                let normal = Normal::new(0.0, cfg.noise_std).expect("valid std");
                values.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
            }
            let mut splat = vec![0.0; plane];
            for (obj, center) in scene.objects.iter().zip(centers) {
                let pr = cam.project(center);
                if !pr.hit {
                    continue;
                }
                let (u0, v0) = pr.level_coords(stride);
                let sigma =
                    MIN_SPLAT_SIGMA.max(cam.fx * obj.size[0] / (pr.depth * f64::from(stride)));
                let denom = 2.0 * sigma * sigma;
                for y in 0..h {
                    let dy = y as f64 - v0;
                    for x in 0..w {
                        let dx = x as f64 - u0;
                        splat[y * w + x] = (-(dx * dx + dy * dy) / denom).exp();
                    }
                }
                for (c, &s) in obj.signature.iter().enumerate() {
                    let chan = &mut values[c * plane..(c + 1) * plane];
                    for (v, &g) in chan.iter_mut().zip(&splat) {
                        *v += s * g;
                    }
                }
            }
            Ok(FeatureLevel {
                stride,
                map: DenseArray::new(vec![channels, h, w], values)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(FeaturePyramid { levels })
}

/// Everything the decoder reads from the sensors: the full-resolution rig,
/// per-frame ego poses and pyramids keyed by `(frame, scale)`.
#[derive(Debug, Clone)]
pub struct SensorInputs {
    pub cameras: Vec<CameraModel>,
    pub ego_poses: Vec<EgoPose>,
    pub pyramids: BTreeMap<(usize, ResolutionScale), Vec<FeaturePyramid>>,
}

impl SensorInputs {
    pub fn pyramids_for(&self, frame: usize, scale: ResolutionScale) -> Result<&[FeaturePyramid]> {
        self.pyramids
            .get(&(frame, scale))
            .map(Vec::as_slice)
            .ok_or_else(|| {
                Error::config(format!(
                    "no pyramids rendered for frame {frame} at scale {}",
                    scale.factor()
                ))
            })
    }

    pub fn channels(&self) -> Option<usize> {
        self.pyramids
            .values()
            .next()
            .and_then(|views| views.first())
            .and_then(|p| p.levels.first())
            .map(|l| l.map.shape()[0])
    }
}

/// Renders every requested `(frame, scale)` pair.
pub fn prepare_inputs(
    scene: &Scene,
    requests: &[(usize, ResolutionScale)],
) -> Result<SensorInputs> {
    let mut keys: Vec<_> = requests.to_vec();
    keys.sort();
    keys.dedup();
    let rendered = keys
        .par_iter()
        .map(|&(frame, scale)| render_features(scene, frame, scale).map(|p| ((frame, scale), p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SensorInputs {
        cameras: scene.cameras.clone(),
        ego_poses: scene.ego_poses.clone(),
        pyramids: rendered.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ego_align;
    use crate::numerics::bilinear_sample;

    fn quiet_config() -> SceneConfig {
        SceneConfig {
            num_objects: 5,
            noise_std: 0.0,
            frames: 4,
            channels: 8,
            ..SceneConfig::default()
        }
    }

    #[test]
    fn build_is_deterministic_and_counts_objects() {
        let cfg = quiet_config();
        let a = build_scene(&cfg, 7).unwrap();
        assert_eq!(a, build_scene(&cfg, 7).unwrap());
        assert_eq!(a.objects.len(), 5);
        assert_ne!(a.objects, build_scene(&cfg, 8).unwrap().objects);
        for o in &a.objects {
            let n: f64 = o.signature.iter().map(|s| s * s).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(o.size.iter().all(|&s| s > 0.0));
        }
        let empty = build_scene(
            &SceneConfig {
                num_objects: 0,
                ..cfg
            },
            1,
        )
        .unwrap();
        assert!(gt_at(&empty, 0).unwrap().boxes.is_empty());
    }

    #[test]
    fn invalid_ranges_are_rejected() {
        let cfg = SceneConfig {
            min_range: 40.0,
            ..quiet_config()
        };
        assert!(matches!(build_scene(&cfg, 1), Err(Error::Config(_))));
        let cfg = SceneConfig {
            frames: 0,
            ..quiet_config()
        };
        assert!(build_scene(&cfg, 1).is_err());
    }

    #[test]
    fn timestamps_decrease_into_the_past() {
        let s = build_scene(&quiet_config(), 3).unwrap();
        for w in s.ego_poses.windows(2) {
            assert!((w[0].timestamp - w[1].timestamp - 0.5).abs() < 1e-15);
        }
    }

    #[test]
    fn static_world_is_frame_invariant() {
        let cfg = SceneConfig {
            max_speed: 0.0,
            ego_speed: 0.0,
            ego_yaw_rate: 0.0,
            ..quiet_config()
        };
        let s = build_scene(&cfg, 2).unwrap();
        let g0 = gt_at(&s, 0).unwrap();
        for t in 1..4 {
            assert_eq!(gt_at(&s, t).unwrap().boxes, g0.boxes);
        }
    }

    #[test]
    fn moving_object_shifts_by_velocity_times_dt() {
        let cfg = SceneConfig {
            ego_speed: 0.0,
            ego_yaw_rate: 0.0,
            ..quiet_config()
        };
        let mut s = build_scene(&cfg, 2).unwrap();
        s.objects[0].velocity = [1.0, 2.0];
        let c0 = s.object_center_in_frame(&s.objects[0], 0);
        let c1 = s.object_center_in_frame(&s.objects[0], 1);
        assert!((c1 - c0 - Vector3::new(-0.5, -1.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn moving_ego_matches_world_motion_plus_alignment() {
        let s = build_scene(&quiet_config(), 4).unwrap();
        let g3 = gt_at(&s, 3).unwrap();
        for (obj, gt) in s.objects.iter().zip(&g3.boxes) {
            let dt = s.ego_poses[3].timestamp - s.config.time_origin;
            let world_t = obj.center_at(dt);
            // express the time-t world point in frame-0 ego coords, then align to frame 3
            let in0 = s.ego_poses[0].ego_from_world.apply(&world_t);
            let want = ego_align(&[in0], &s.ego_poses[0], &s.ego_poses[3])[0];
            let got = Vector3::new(gt.bbox.x, gt.bbox.y, gt.bbox.z);
            assert!((got - want).norm() < 1e-9);
        }
    }

    #[test]
    fn empty_noiseless_scene_renders_zeros() {
        let cfg = SceneConfig {
            num_objects: 0,
            ..quiet_config()
        };
        let s = build_scene(&cfg, 1).unwrap();
        let p = render_features(&s, 0, ResolutionScale::Full).unwrap();
        assert_eq!(p.len(), 6);
        for pyr in &p {
            assert_eq!(pyr.levels.len(), 4);
            assert!(pyr
                .levels
                .iter()
                .all(|l| l.map.values().iter().all(|&v| v == 0.0)));
        }
    }

    #[test]
    fn level_extents_follow_scale() {
        let s = build_scene(&quiet_config(), 1).unwrap();
        let half = render_features(&s, 0, ResolutionScale::Half).unwrap();
        assert_eq!(half[0].levels[0].map.shape(), &[8, 12, 20]);
        let full = render_features(&s, 0, ResolutionScale::Full).unwrap();
        assert_eq!(full[0].levels[0].map.shape(), &[8, 24, 40]);
        assert_eq!(full[0].levels[3].map.shape(), &[8, 3, 5]);
    }

    #[test]
    fn splat_peaks_at_projection() {
        let cfg = SceneConfig {
            num_objects: 1,
            ego_speed: 0.0,
            ego_yaw_rate: 0.0,
            ..quiet_config()
        };
        let mut s = build_scene(&cfg, 5).unwrap();
        // dead ahead of view 0 at camera height so it lands on the principal point
        s.objects[0].center0 = Vector3::new(12.0, 0.0, 1.6);
        s.objects[0].velocity = [0.0, 0.0];
        let pyr = render_features(&s, 0, ResolutionScale::Full).unwrap();
        let pr = s.cameras[0].project(&Vector3::new(12.0, 0.0, 1.6));
        let (u0, v0) = pr.level_coords(8);
        let level = &pyr[0].levels[0].map;
        let (h, w) = (level.shape()[1], level.shape()[2]);
        let mut best = (0, 0, f64::MIN);
        for y in 0..h {
            for x in 0..w {
                let v = level.get(&[0, y, x]) * s.objects[0].signature[0].signum();
                if v > best.2 {
                    best = (x, y, v);
                }
            }
        }
        assert!((best.0 as f64 - u0).abs() < 0.5 && (best.1 as f64 - v0).abs() < 0.5);
        let at = bilinear_sample(level, u0, v0).unwrap();
        for (a, sig) in at.iter().zip(&s.objects[0].signature) {
            assert!((a - sig).abs() < 1e-12);
        }
        // other views do not see it
        assert!(pyr[3].levels[0].map.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rendering_is_bit_identical_across_runs() {
        let cfg = SceneConfig {
            noise_std: 0.1,
            ..quiet_config()
        };
        let s = build_scene(&cfg, 9).unwrap();
        let a = render_features(&s, 2, ResolutionScale::Half).unwrap();
        let b = render_features(&s, 2, ResolutionScale::Half).unwrap();
        assert_eq!(a, b);
        let c = render_features(&s, 1, ResolutionScale::Half).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn scene_json_round_trip() {
        let s = build_scene(&quiet_config(), 11).unwrap();
        let text = s.to_json().unwrap();
        let back = Scene::from_json(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_json().unwrap(), text);
        assert!(Scene::from_json(&text.replace("pillar-scene", "other")).is_err());
    }

    #[test]
    fn resolution_scale_parsing() {
        assert_eq!(
            ResolutionScale::try_from(0.5).unwrap(),
            ResolutionScale::Half
        );
        assert!(ResolutionScale::try_from(0.3).is_err());
    }
}
