use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{Separation, SynthSpec};
use crate::embedder::PreprocessSpec;
use crate::error::{Error, Result};
use crate::knn::{Bandwidth, KernelParams, Metric};
use crate::trainer::{HeadSpec, TrainConfig};
use crate::tsne::TsneConfig;

/// Whole-run configuration document: one table per pipeline stage.
/// Unknown keys are rejected at parse time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub synth: SynthSection,
    pub ingest: IngestSection,
    pub preprocess: PreprocessSection,
    pub split: SplitSection,
    pub embed: EmbedSection,
    pub knn: KnnSection,
    pub train: TrainSection,
    pub pseudo: PseudoSection,
    pub tsne: TsneSection,
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub num_classes: usize,
    pub images_per_class: usize,
    pub image_size: [usize; 2],
    pub separation: Separation,
    pub wafers_per_class: usize,
}

impl Default for SynthSection {
    fn default() -> Self {
        let spec = SynthSpec::default();
        SynthSection {
            num_classes: spec.num_classes,
            images_per_class: spec.images_per_class,
            image_size: [spec.image_size.0, spec.image_size.1],
            separation: spec.separation,
            wafers_per_class: spec.wafers_per_class,
        }
    }
}

impl SynthSection {
    pub fn to_spec(&self, seed: u64) -> SynthSpec {
        SynthSpec {
            num_classes: self.num_classes,
            images_per_class: self.images_per_class,
            image_size: (self.image_size[0], self.image_size[1]),
            separation: self.separation,
            wafers_per_class: self.wafers_per_class,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct IngestSection {
    /// Path of an external manifest to ingest.
    pub manifest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    /// Top-left (row, col) of the crop window; omitted means centered.
    pub origin: Option<[usize; 2]>,
    pub crop_size: [usize; 2],
    pub output_size: [usize; 2],
    /// Per-layer overrides of the base geometry.
    pub layers: Vec<LayerPreprocess>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        PreprocessSection {
            origin: None,
            crop_size: [340, 340],
            output_size: [224, 224],
            layers: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LayerPreprocess {
    pub layer: u32,
    pub origin: Option<[usize; 2]>,
    pub crop_size: Option<[usize; 2]>,
    pub output_size: Option<[usize; 2]>,
}

impl PreprocessSection {
    /// Geometry for one inspection layer.
    pub fn for_layer(&self, layer: u32) -> PreprocessSpec {
        let mut spec = PreprocessSpec {
            origin: self.origin.map(|o| (o[0], o[1])),
            crop_size: (self.crop_size[0], self.crop_size[1]),
            output_size: (self.output_size[0], self.output_size[1]),
        };
        if let Some(delta) = self.layers.iter().find(|l| l.layer == layer) {
            if let Some(o) = delta.origin {
                spec.origin = Some((o[0], o[1]));
            }
            if let Some(c) = delta.crop_size {
                spec.crop_size = (c[0], c[1]);
            }
            if let Some(o) = delta.output_size {
                spec.output_size = (o[0], o[1]);
            }
        }
        spec
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSection {
    pub ratios: [f64; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        SplitSection {
            ratios: [0.7, 0.1, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedSection {
    /// "reference" or "onnx".
    pub backend: String,
    pub model_file: String,
    pub channel_mean: [f32; 3],
    pub channel_std: [f32; 3],
    /// Expected embedding length for the onnx backend; 0 disables the check.
    pub expected_dim: usize,
}

impl Default for EmbedSection {
    fn default() -> Self {
        EmbedSection {
            backend: "reference".into(),
            model_file: String::new(),
            channel_mean: [0.485, 0.456, 0.406],
            channel_std: [0.229, 0.224, 0.225],
            expected_dim: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnnSection {
    pub k: usize,
    /// "euclidean" or "cosine".
    pub metric: String,
    /// "median" or "fixed".
    pub bandwidth_mode: String,
    /// Bandwidth value when `bandwidth_mode = "fixed"`.
    pub bandwidth: f64,
    pub l2_normalize: bool,
    /// Labeled shots per class for the index; 0 uses the full train split.
    pub shots: usize,
    /// Extra k values to evaluate alongside `k`.
    pub sweep_k: Vec<usize>,
}

impl Default for KnnSection {
    fn default() -> Self {
        KnnSection {
            k: 10,
            metric: "euclidean".into(),
            bandwidth_mode: "median".into(),
            bandwidth: 1.0,
            l2_normalize: false,
            shots: 0,
            sweep_k: Vec::new(),
        }
    }
}

impl KnnSection {
    pub fn metric(&self) -> Result<Metric> {
        match self.metric.as_str() {
            "euclidean" => Ok(Metric::Euclidean),
            "cosine" => Ok(Metric::CosineDistance),
            other => Err(Error::Config(format!(
                "knn.metric must be \"euclidean\" or \"cosine\", got \"{other}\""
            ))),
        }
    }

    pub fn kernel_params(&self, k: usize) -> Result<KernelParams> {
        let bandwidth = match self.bandwidth_mode.as_str() {
            "median" => Bandwidth::MedianHeuristic,
            "fixed" => Bandwidth::Fixed(self.bandwidth),
            other => {
                return Err(Error::Config(format!(
                    "knn.bandwidth_mode must be \"median\" or \"fixed\", got \"{other}\""
                )))
            }
        };
        Ok(KernelParams::new(k, bandwidth))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// "linear" or "mlp".
    pub head: String,
    pub hidden: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    /// Labeled shots per class; 0 uses the full train split.
    pub shots: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            head: "linear".into(),
            hidden: 512,
            peak_lr: 1e-3,
            min_lr: 0.0,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 200,
            shots: 0,
        }
    }
}

impl TrainSection {
    pub fn head_spec(&self) -> Result<HeadSpec> {
        match self.head.as_str() {
            "linear" => Ok(HeadSpec::Linear),
            "mlp" => Ok(HeadSpec::Mlp {
                hidden: self.hidden,
            }),
            other => Err(Error::Config(format!(
                "train.head must be \"linear\" or \"mlp\", got \"{other}\""
            ))),
        }
    }

    pub fn train_config(&self, seed: u64) -> Result<TrainConfig> {
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "train.warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        let config = TrainConfig {
            peak_lr: self.peak_lr,
            min_lr: self.min_lr,
            total_steps: self.epochs,
            warmup_steps: ((self.epochs as f64) * self.warmup_fraction) as usize,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            seed,
            epochs: self.epochs,
        };
        config.validate()?;
        Ok(config)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PseudoSection {
    pub tau: f64,
    pub alpha: f64,
    pub rounds: usize,
    pub alpha_ramp: bool,
    pub continue_head: bool,
    /// Labeled shots per class for the supervised stage.
    pub shots: usize,
}

impl Default for PseudoSection {
    fn default() -> Self {
        PseudoSection {
            tau: 0.9,
            alpha: 1.0,
            rounds: 1,
            alpha_ramp: false,
            continue_head: false,
            shots: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneSection {
    pub perplexity: f64,
    pub iterations: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: usize,
    pub eta: f64,
    pub init_scale: f64,
    /// Stratified subsample size; 0 embeds every row.
    pub max_points: usize,
    /// Which rows to embed: "test", "train" or "all".
    pub source: String,
    /// "embedding" for raw vectors, "head" for the trained head's
    /// penultimate representation (requires a head checkpoint).
    pub representation: String,
}

impl Default for TsneSection {
    fn default() -> Self {
        let t = TsneConfig::default();
        TsneSection {
            perplexity: t.perplexity,
            iterations: t.iterations,
            exaggeration: t.exaggeration,
            exaggeration_iters: t.exaggeration_iters,
            momentum_initial: t.momentum_initial,
            momentum_final: t.momentum_final,
            momentum_switch: t.momentum_switch,
            eta: t.eta,
            init_scale: t.init_scale,
            max_points: 300,
            source: "test".into(),
            representation: "embedding".into(),
        }
    }
}

impl TsneSection {
    pub fn tsne_config(&self, seed: u64) -> TsneConfig {
        TsneConfig {
            perplexity: self.perplexity,
            iterations: self.iterations,
            exaggeration: self.exaggeration,
            exaggeration_iters: self.exaggeration_iters,
            momentum_initial: self.momentum_initial,
            momentum_final: self.momentum_final,
            momentum_switch: self.momentum_switch,
            eta: self.eta,
            init_scale: self.init_scale,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub shots: Vec<usize>,
    pub methods: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection {
            shots: vec![1, 2, 5, 10, 15, 25, 50],
            methods: vec!["knn".into(), "finetune".into(), "pseudo".into()],
        }
    }
}

impl RunConfig {
    /// Parse a TOML document, rejecting unknown keys.
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Apply dotted-path overrides (`knn.k=5`); values parse as TOML
    /// scalars/arrays, falling back to strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let text = self.to_toml()?;
        let mut doc: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
        for entry in overrides {
            let (path, raw) = entry.split_once('=').ok_or_else(|| {
                Error::Config(format!("override \"{entry}\" must look like key.path=value"))
            })?;
            let value = parse_scalar(raw.trim());
            set_path(&mut doc, path.trim(), value)?;
        }
        let merged = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml(&merged)
    }

    pub fn validate(&self) -> Result<()> {
        let [a, b, c] = self.split.ratios;
        if a < 0.0 || b < 0.0 || c < 0.0 || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split.ratios must be nonnegative and sum to 1, got {:?}",
                self.split.ratios
            )));
        }
        if self.knn.k < 1 {
            return Err(Error::Config("knn.k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.pseudo.tau) && self.pseudo.tau <= 1.0 {
            return Err(Error::Config(format!(
                "pseudo.tau must be in [0, 1] (or above 1 to disable), got {}",
                self.pseudo.tau
            )));
        }
        if self.pseudo.alpha < 0.0 {
            return Err(Error::Config(format!(
                "pseudo.alpha must be >= 0, got {}",
                self.pseudo.alpha
            )));
        }
        if self.pseudo.rounds < 1 {
            return Err(Error::Config("pseudo.rounds must be at least 1".into()));
        }
        self.knn.metric()?;
        self.knn.kernel_params(self.knn.k)?;
        self.train.head_spec()?;
        self.train.train_config(self.seed)?;
        match self.embed.backend.as_str() {
            "reference" | "onnx" => {}
            other => {
                return Err(Error::Config(format!(
                    "embed.backend must be \"reference\" or \"onnx\", got \"{other}\""
                )))
            }
        }
        match self.tsne.source.as_str() {
            "test" | "train" | "all" => {}
            other => {
                return Err(Error::Config(format!(
                    "tsne.source must be \"test\", \"train\" or \"all\", got \"{other}\""
                )))
            }
        }
        match self.tsne.representation.as_str() {
            "embedding" | "head" => {}
            other => {
                return Err(Error::Config(format!(
                    "tsne.representation must be \"embedding\" or \"head\", got \"{other}\""
                )))
            }
        }
        for method in &self.sweep.methods {
            if !matches!(method.as_str(), "knn" | "finetune" | "pseudo") {
                return Err(Error::Config(format!(
                    "sweep.methods entries must be knn, finetune or pseudo, got \"{method}\""
                )));
            }
        }
        Ok(())
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    if let Ok(table) = wrapped.parse::<toml::Table>() {
        if let Some(v) = table.get("v") {
            return v.clone();
        }
    }
    toml::Value::String(raw.to_string())
}

fn set_path(doc: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override path \"{path}\"")));
    }
    let mut table = doc;
    for part in &parts[..parts.len() - 1] {
        table = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("\"{part}\" in \"{path}\" is not a table")))?;
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}
