//! Weight-shared decoder stack.
//!
//! One layer runs self attention over all queries, then per query samples the
//! sensor features, mixes them, aggregates into the query feature and refines
//! the box. The same parameters serve every layer, so a shorter run is an
//! exact prefix of a longer one.
//!
//! Parameters serialize to a flat vector in a fixed order: `query_embed`,
//! the attention arrays, the sampling arrays, then the mixing arrays (each in
//! the order of its `arrays()` listing). A manifest records name, shape and
//! offset of every array.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{sasa_layer, DistanceFn, SasaParams, TauMode};
use crate::error::{Error, Result};
use crate::mixing::{self, MixingOrder, MixingParams};
use crate::numerics::{self, DenseArray};
use crate::queries::{init_queries, QueryBox, QuerySet};
use crate::sampling::{self, SamplePoint, SamplingConfig, SamplingParams};
use crate::scene::SensorInputs;

pub const MAX_LAYERS: usize = 6;
pub const PARAMS_FORMAT: &str = "pillar-params";
pub const PARAMS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_queries: usize,
    pub d_model: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub num_classes: usize,
    /// Feature channels of the sensor pyramids.
    pub channels: usize,
    pub mlp_hidden: usize,
    /// Default layer count for inference.
    pub layers: usize,
    pub roi_half_extent: f64,
    /// Seed of the initial pillar boxes.
    pub query_seed: u64,
    /// Initial score of every class.
    pub class_prior: f64,
    pub tau_mode: TauMode,
    pub distance: DistanceFn,
    pub mixing_order: MixingOrder,
    pub sampling: SamplingConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_queries: 64,
            d_model: 32,
            heads: 4,
            head_dim: 8,
            num_classes: 3,
            channels: 32,
            mlp_hidden: 32,
            layers: MAX_LAYERS,
            roi_half_extent: 30.0,
            query_seed: 0,
            class_prior: 0.1,
            tau_mode: TauMode::default(),
            distance: DistanceFn::default(),
            mixing_order: MixingOrder::default(),
            sampling: SamplingConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_queries", self.num_queries),
            ("d_model", self.d_model),
            ("heads", self.heads),
            ("head_dim", self.head_dim),
            ("num_classes", self.num_classes),
            ("channels", self.channels),
            ("mlp_hidden", self.mlp_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be at least 1")));
        }
        check_layers(self.layers)?;
        if self.roi_half_extent.is_nan() || self.roi_half_extent <= 0.0 {
            return Err(Error::config("model.roi_half_extent must be positive"));
        }
        if !(self.class_prior > 0.0 && self.class_prior < 1.0) {
            return Err(Error::config("model.class_prior must lie in (0, 1)"));
        }
        self.sampling.validate()
    }
}

fn check_layers(layers: usize) -> Result<()> {
    if !(1..=MAX_LAYERS).contains(&layers) {
        return Err(Error::config(format!(
            "layer count {layers} outside 1..={MAX_LAYERS}"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

/// One parameter set shared by every decoder layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `N × D` learnable query features.
    pub query_embed: DenseArray,
    pub sasa: SasaParams,
    pub sampling: SamplingParams,
    pub mixing: MixingParams,
}

impl ModelParams {
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        Ok(Self {
            config: config.clone(),
            query_embed: numerics::uniform_array(&mut rng, &[config.num_queries, d], 1.0),
            sasa: SasaParams::init(
                &mut rng,
                d,
                config.heads,
                config.head_dim,
                config.tau_mode,
                config.distance,
            ),
            sampling: SamplingParams::init(&mut rng, d, &config.sampling),
            mixing: MixingParams::init(
                &mut rng,
                config.mixing_order,
                d,
                config.channels,
                config.sampling.total_points(),
                config.mlp_hidden,
                config.num_classes,
                config.class_prior,
            ),
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.query_embed.shape() != [self.config.num_queries, self.config.d_model] {
            return Err(Error::config(
                "query_embed shape does not match the model config",
            ));
        }
        self.sasa.validate()?;
        self.sampling
            .validate(self.config.d_model, &self.config.sampling)?;
        self.mixing.validate()
    }

    pub fn arrays(&self) -> Vec<(String, &DenseArray)> {
        let mut out = vec![("query_embed".to_string(), &self.query_embed)];
        out.extend(
            self.sasa
                .arrays()
                .into_iter()
                .map(|(n, a)| (format!("sasa.{n}"), a)),
        );
        out.extend(
            self.sampling
                .arrays()
                .into_iter()
                .map(|(n, a)| (format!("sampling.{n}"), a)),
        );
        out.extend(
            self.mixing
                .arrays()
                .into_iter()
                .map(|(n, a)| (format!("mixing.{n}"), a)),
        );
        out
    }

    fn arrays_mut(&mut self) -> Vec<&mut DenseArray> {
        let mut out = vec![&mut self.query_embed];
        out.extend(self.sasa.arrays_mut());
        out.extend(self.sampling.arrays_mut());
        out.extend(self.mixing.arrays_mut());
        out
    }

    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.arrays()
            .into_iter()
            .map(|(name, a)| {
                let e = ManifestEntry {
                    name,
                    shape: a.shape().to_vec(),
                    offset,
                };
                offset += a.len();
                e
            })
            .collect()
    }

    pub fn num_values(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_values());
        for (_, a) in self.arrays() {
            out.extend_from_slice(a.values());
        }
        out
    }

    /// Overwrites every array from a flat vector in manifest order.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::config(format!(
                "flat parameter vector has {} values, model needs {}",
                flat.len(),
                self.num_values()
            )));
        }
        let mut offset = 0;
        for a in self.arrays_mut() {
            let n = a.len();
            *a = DenseArray::new(a.shape().to_vec(), flat[offset..offset + n].to_vec())?;
            offset += n;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Envelope<'a> {
            format: &'a str,
            version: u32,
            config: &'a ModelConfig,
            manifest: Vec<ManifestEntry>,
            values: Vec<f64>,
        }
        Ok(serde_json::to_string(&Envelope {
            format: PARAMS_FORMAT,
            version: PARAMS_VERSION,
            config: &self.config,
            manifest: self.manifest(),
            values: self.flatten(),
        })?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        #[serde(deny_unknown_fields)]
        struct Envelope {
            format: String,
            version: u32,
            config: ModelConfig,
            manifest: Vec<ManifestEntry>,
            values: Vec<f64>,
        }
        let env: Envelope = serde_json::from_str(text)?;
        if env.format != PARAMS_FORMAT || env.version != PARAMS_VERSION {
            return Err(Error::Format(format!(
                "unsupported parameter file {} v{}",
                env.format, env.version
            )));
        }
        let mut params = Self::init(&env.config, 0)?;
        if params.manifest() != env.manifest {
            return Err(Error::Format(
                "parameter manifest does not match the stored model config".into(),
            ));
        }
        params.set_flat(&env.values)?;
        Ok(params)
    }
}

/// Snapshot of all queries after one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub boxes: Vec<QueryBox>,
    /// `N × K` per-class scores in `[0, 1]`.
    pub scores: DenseArray,
    /// `N × H` receptive-field coefficients used by this layer.
    pub taus: DenseArray,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detections {
    /// One entry per executed layer, first layer first.
    pub layers: Vec<LayerOutput>,
}

impl Detections {
    pub fn last(&self) -> &LayerOutput {
        self.layers.last().expect("at least one layer")
    }
}

fn check_inputs(params: &ModelParams, inputs: &SensorInputs) -> Result<()> {
    match inputs.channels() {
        Some(c) if c == params.config.channels => Ok(()),
        Some(c) => Err(Error::config(format!(
            "scene renders {c} channels, model expects {}",
            params.config.channels
        ))),
        None => Err(Error::config("no feature pyramids rendered")),
    }
}

/// Initial pillar queries carrying the learned embeddings.
pub fn initial_queries(params: &ModelParams) -> Result<QuerySet> {
    let cfg = &params.config;
    init_queries(
        cfg.num_queries,
        cfg.query_seed,
        cfg.roi_half_extent,
        &params.query_embed,
    )
}

/// One refinement step. Returns the refined queries and their layer output.
pub fn decoder_layer(
    qs: &QuerySet,
    inputs: &SensorInputs,
    params: &ModelParams,
) -> Result<(QuerySet, LayerOutput)> {
    let attended = sasa_layer(qs, &params.sasa)?;
    let cfg = &params.config.sampling;
    let per_query = (0..qs.len())
        .into_par_iter()
        .map(|i| {
            let b = &qs.boxes[i];
            let feat = attended.features.row(i);
            let f = sampling::sample_spatiotemporal(b, feat, inputs, &params.sampling, cfg)?;
            let mixed = mixing::mix(&f, feat, &params.mixing)?;
            let new_feat = mixing::aggregate(&mixed, feat, &params.mixing)?;
            let heads = mixing::predict_heads(&new_feat, &params.mixing)?;
            let new_box = mixing::apply_box_update(b, &heads.deltas)?;
            Ok((new_box, new_feat, heads.scores()))
        })
        .collect::<Result<Vec<_>>>()?;
    let n = qs.len();
    let k = params.config.num_classes;
    let mut boxes = Vec::with_capacity(n);
    let mut feats = Vec::with_capacity(n * params.config.d_model);
    let mut scores = Vec::with_capacity(n * k);
    for (b, f, s) in per_query {
        boxes.push(b);
        feats.extend(f);
        scores.extend(s);
    }
    let next = QuerySet::new(
        boxes.clone(),
        DenseArray::new(vec![n, params.config.d_model], feats)?,
    )?;
    let out = LayerOutput {
        boxes,
        scores: DenseArray::new(vec![n, k], scores)?,
        taus: attended.taus,
    };
    Ok((next, out))
}

/// Runs `layers` weight-shared layers starting from `initial`.
pub fn run_decoder_from(
    params: &ModelParams,
    initial: QuerySet,
    inputs: &SensorInputs,
    layers: usize,
) -> Result<Detections> {
    check_layers(layers)?;
    params.validate()?;
    check_inputs(params, inputs)?;
    let mut qs = initial;
    let mut outputs = Vec::with_capacity(layers);
    for _ in 0..layers {
        let (next, out) = decoder_layer(&qs, inputs, params)?;
        outputs.push(out);
        qs = next;
    }
    Ok(Detections { layers: outputs })
}

pub fn run_decoder(
    params: &ModelParams,
    inputs: &SensorInputs,
    layers: usize,
) -> Result<Detections> {
    check_layers(layers)?;
    run_decoder_from(params, initial_queries(params)?, inputs, layers)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub query_id: usize,
    /// 1-based layer index.
    pub layer: usize,
    #[serde(rename = "box")]
    pub bbox: [f64; 9],
    pub class: usize,
    pub score: f64,
}

/// Detections of one layer whose best class score reaches `threshold`,
/// highest score first, ties by ascending query index.
pub fn finalize_layer(out: &LayerOutput, layer: usize, threshold: f64) -> Vec<Detection> {
    let mut dets: Vec<Detection> = out
        .boxes
        .iter()
        .enumerate()
        .filter_map(|(q, b)| {
            let row = out.scores.row(q);
            let (class, &score) = row.iter().enumerate().fold(
                None,
                |best: Option<(usize, &f64)>, (c, s)| match best {
                    Some((_, bs)) if bs >= s => best,
                    _ => Some((c, s)),
                },
            )?;
            (score >= threshold).then(|| Detection {
                query_id: q,
                layer,
                bbox: b.to_vector(),
                class,
                score,
            })
        })
        .collect();
    dets.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.query_id.cmp(&b.query_id))
    });
    dets
}

/// Final-layer detections.
pub fn finalize(dets: &Detections, threshold: f64) -> Vec<Detection> {
    finalize_layer(dets.last(), dets.layers.len(), threshold)
}

/// Sampling geometry of every query in the first layer.
pub fn sampling_trace(
    params: &ModelParams,
    inputs: &SensorInputs,
) -> Result<Vec<Vec<SamplePoint>>> {
    params.validate()?;
    let qs = initial_queries(params)?;
    let attended = sasa_layer(&qs, &params.sasa)?;
    (0..qs.len())
        .map(|i| {
            sampling::sample_points(
                &qs.boxes[i],
                attended.features.row(i),
                inputs,
                &params.sampling,
                &params.config.sampling,
            )
        })
        .collect()
}
