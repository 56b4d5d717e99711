use std::fs;
use std::io::Write;
use std::path::Path;

use pillar_core::config::RunConfig;
use pillar_core::decoder::{
    finalize_layer, run_decoder, sampling_trace, Detection, ModelParams, MAX_LAYERS,
};
use pillar_core::metrics::evaluate;
use pillar_core::plot::{
    class_mean_tau, head_mean_tau, sampling_svg, tau_bar_svg, tau_curve_svg, tau_records,
    view_points, TauRecord, TAU_SCORE_THRESHOLD,
};
use pillar_core::queries::QueryBox;
use pillar_core::scene::{build_scene, gt_at, prepare_inputs, GtBox, Scene, SensorInputs};
use pillar_core::training::{spsa_fit, trace_csv, FitConfig};
use pillar_core::{Error, Result};
use serde::{Deserialize, Serialize};

pub const THREADS_ENV: &str = "PILLAR_THREADS";

pub fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Error::config(format!(
            "{THREADS_ENV} must be a positive integer, got {raw:?}"
        ))
    })?;
    if n == 0 {
        return Err(Error::config(format!("{THREADS_ENV} must be positive")));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::config(e.to_string()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

/// Writes through a temp file in the target directory, then renames.
fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(&read_text(path)?)
        .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_scene(path: &Path) -> Result<Scene> {
    Scene::from_json(&read_text(path)?)
}

fn load_params(path: &Path) -> Result<ModelParams> {
    ModelParams::from_json(&read_text(path)?)
}

fn inputs_for(scene: &Scene, params: &ModelParams) -> Result<SensorInputs> {
    prepare_inputs(scene, &params.config.sampling.render_requests())
}

fn jsonl<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

fn parse_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// One ground-truth row of `gt.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GtRow {
    pub frame: usize,
    pub timestamp: f64,
    pub object_id: usize,
    pub class: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 9],
}

impl GtRow {
    fn to_gt(&self) -> Result<GtBox> {
        Ok(GtBox {
            object_id: self.object_id,
            class_id: self.class,
            bbox: QueryBox::from_vector(self.bbox)?,
        })
    }
}

pub fn simulate(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let scene = build_scene(&cfg.scene, seed)?;
    let mut rows = Vec::new();
    for frame in 0..scene.num_frames() {
        let gt = gt_at(&scene, frame)?;
        rows.extend(gt.boxes.iter().map(|b| GtRow {
            frame,
            timestamp: gt.timestamp,
            object_id: b.object_id,
            class: b.class_id,
            bbox: b.bbox.to_vector(),
        }));
    }
    fs::create_dir_all(out)?;
    write_atomic(&out.join("scene.json"), scene.to_json()?.as_bytes())?;
    write_atomic(&out.join("gt.jsonl"), jsonl(&rows)?.as_bytes())
}

pub fn init(config: &Path, out: &Path, seed: u64) -> Result<()> {
    let cfg = load_config(config)?;
    let params = ModelParams::init(&cfg.model_config(), seed)?;
    write_atomic(out, params.to_json()?.as_bytes())
}

fn check_layers(layers: usize) -> Result<usize> {
    if layers == 0 || layers > MAX_LAYERS {
        return Err(Error::config(format!(
            "layers must be in 1..={MAX_LAYERS}, got {layers}"
        )));
    }
    Ok(layers)
}

pub fn infer(
    scene: &Path,
    params: &Path,
    layers: Option<usize>,
    threshold: f64,
    out: &Path,
) -> Result<()> {
    let params = load_params(params)?;
    let layers = check_layers(layers.unwrap_or(params.config.layers))?;
    let scene = load_scene(scene)?;
    let inputs = inputs_for(&scene, &params)?;
    let dets = run_decoder(&params, &inputs, layers)?;
    let rows: Vec<Detection> = dets
        .layers
        .iter()
        .enumerate()
        .flat_map(|(l, out)| finalize_layer(out, l + 1, threshold))
        .collect();
    write_atomic(out, jsonl(&rows)?.as_bytes())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct FitOverrides {
    pub steps: Option<usize>,
    pub seed: Option<u64>,
    pub step_size: Option<f64>,
    pub perturbation: Option<f64>,
    pub layers: Option<usize>,
}

pub fn fit(
    scene: &Path,
    params: &Path,
    config: Option<&Path>,
    overrides: FitOverrides,
    out_params: &Path,
    trace: &Path,
) -> Result<()> {
    let mut fit = match config {
        Some(c) => load_config(c)?.fit,
        None => FitConfig::default(),
    };
    fit.steps = overrides.steps.unwrap_or(fit.steps);
    fit.seed = overrides.seed.unwrap_or(fit.seed);
    fit.step_size = overrides.step_size.unwrap_or(fit.step_size);
    fit.perturbation = overrides.perturbation.unwrap_or(fit.perturbation);
    fit.layers = overrides.layers.unwrap_or(fit.layers);
    fit.validate()?;
    let params = load_params(params)?;
    let scene = load_scene(scene)?;
    let inputs = inputs_for(&scene, &params)?;
    let gts = gt_at(&scene, 0)?.boxes;
    let result = spsa_fit(&params, &inputs, &gts, &fit)?;
    write_atomic(out_params, result.params.to_json()?.as_bytes())?;
    write_atomic(trace, trace_csv(&result.trace).as_bytes())
}

pub fn eval(
    detections: &Path,
    ground_truth: &Path,
    layer: Option<usize>,
    frame: usize,
    out: &Path,
) -> Result<()> {
    let dets: Vec<Detection> = parse_jsonl(detections)?;
    let gts: Vec<GtBox> = parse_jsonl::<GtRow>(ground_truth)?
        .iter()
        .filter(|r| r.frame == frame)
        .map(GtRow::to_gt)
        .collect::<Result<_>>()?;
    let layer = layer.or_else(|| dets.iter().map(|d| d.layer).max());
    let preds: Vec<Detection> = dets
        .into_iter()
        .filter(|d| Some(d.layer) == layer)
        .collect();
    let report = evaluate(&preds, &gts);
    let mut text = report.to_json()?;
    text.push('\n');
    write_atomic(out, text.as_bytes())
}

fn parse_frame_range(text: &str, frames: usize) -> Result<std::ops::Range<usize>> {
    let bad = || Error::config(format!("frame range must look like `a..b`, got {text:?}"));
    let (a, b) = text.split_once("..").ok_or_else(bad)?;
    let a: usize = a.trim().parse().map_err(|_| bad())?;
    let b: usize = b.trim().parse().map_err(|_| bad())?;
    if a >= b || b > frames {
        return Err(Error::config(format!(
            "frame range {a}..{b} outside 0..{frames}"
        )));
    }
    Ok(a..b)
}

pub fn plot_sampling(scene: &Path, params: &Path, frames: &str, out_dir: &Path) -> Result<()> {
    let params = load_params(params)?;
    let scene = load_scene(scene)?;
    let range = parse_frame_range(frames, params.config.sampling.frames)?;
    let inputs = inputs_for(&scene, &params)?;
    let trace = sampling_trace(&params, &inputs)?;
    fs::create_dir_all(out_dir)?;
    for frame in range {
        for (view, cam) in scene.cameras.iter().enumerate() {
            let pts = view_points(&trace, &scene.cameras, frame, view);
            let svg = sampling_svg(cam, &pts, &format!("frame {frame} view {view}"));
            write_atomic(
                &out_dir.join(format!("sampling_f{frame}_v{view}.svg")),
                svg.as_bytes(),
            )?;
        }
    }
    Ok(())
}

/// Contents of `tau.json` written by `plot-tau`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauDump {
    pub layer: usize,
    pub score_threshold: f64,
    pub queries: Vec<TauRecord>,
    pub class_mean: std::collections::BTreeMap<usize, f64>,
    pub head_mean: Vec<f64>,
}

pub fn plot_tau(scene: &Path, params: &Path, layers: Option<usize>, out_dir: &Path) -> Result<()> {
    let params = load_params(params)?;
    let layers = check_layers(layers.unwrap_or(params.config.layers))?;
    let scene = load_scene(scene)?;
    let inputs = inputs_for(&scene, &params)?;
    let dets = run_decoder(&params, &inputs, layers)?;
    let records = tau_records(dets.last());
    let dump = TauDump {
        layer: layers,
        score_threshold: TAU_SCORE_THRESHOLD,
        class_mean: class_mean_tau(&records, TAU_SCORE_THRESHOLD),
        head_mean: head_mean_tau(&records),
        queries: records,
    };
    fs::create_dir_all(out_dir)?;
    write_atomic(
        &out_dir.join("tau_by_class.svg"),
        tau_bar_svg(&dump.class_mean).as_bytes(),
    )?;
    write_atomic(
        &out_dir.join("tau_curves.svg"),
        tau_curve_svg(&dump.head_mean, params.config.roi_half_extent).as_bytes(),
    )?;
    let mut text = serde_json::to_string_pretty(&dump)?;
    text.push('\n');
    write_atomic(&out_dir.join("tau.json"), text.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frame_ranges() {
        assert_eq!(parse_frame_range("0..2", 4).unwrap(), 0..2);
        assert!(parse_frame_range("2..2", 4).is_err());
        assert!(parse_frame_range("0..5", 4).is_err());
        assert!(parse_frame_range("x", 4).is_err());
    }

    #[test]
    fn layer_bounds() {
        assert!(check_layers(0).is_err());
        assert!(check_layers(MAX_LAYERS + 1).is_err());
        assert_eq!(check_layers(3).unwrap(), 3);
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.txt");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "two");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
