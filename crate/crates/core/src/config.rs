//! Model and training configuration, the versioned run-file schema, and
//! `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::neuron::SurrogateSpec;

pub const SCHEMA_VERSION: u32 = 1;

fn default_true() -> bool {
    true
}
fn default_ratio() -> usize {
    4
}
fn default_n_max() -> u32 {
    20
}
fn default_theta() -> f32 {
    1.0
}
fn default_pool() -> usize {
    2
}

/// Geometry and hyperparameters of a burst-spiking transformer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub timesteps: usize,
    pub depth: usize,
    pub dim: usize,
    #[serde(default = "default_ratio")]
    pub mlp_ratio: usize,
    /// Attention heads; `None` picks 8 for `dim >= 256`, else 1.
    #[serde(default)]
    pub heads: Option<usize>,
    #[serde(default = "default_n_max")]
    pub n_max: u32,
    #[serde(default = "default_theta")]
    pub v_theta: f32,
    #[serde(default = "default_true")]
    pub mask_enabled: bool,
    /// Per-block mask switch; `None` means every block follows `mask_enabled`.
    #[serde(default)]
    pub mask_blocks: Option<Vec<bool>>,
    #[serde(default)]
    pub surrogate: SurrogateSpec,
    pub num_classes: usize,
    #[serde(default)]
    pub seed: u64,
    /// Number of trailing stem stages followed by a 2x2 max-pool.
    #[serde(default = "default_pool")]
    pub stem_pool_stages: usize,
    /// Burst keys; `false` makes K binary.
    #[serde(default = "default_true")]
    pub burst_key: bool,
    /// Dual value channels; `false` drops V⁻.
    #[serde(default = "default_true")]
    pub dual_value: bool,
}

pub const STEM_STAGES: usize = 4;

impl ModelConfig {
    /// `BSViT-L-D` on 3×32×32 inputs with the CIFAR defaults.
    pub fn cifar(depth: usize, dim: usize) -> Self {
        Self {
            in_channels: 3,
            height: 32,
            width: 32,
            timesteps: 2,
            depth,
            dim,
            mlp_ratio: 4,
            heads: None,
            n_max: 20,
            v_theta: 1.0,
            mask_enabled: true,
            mask_blocks: None,
            surrogate: SurrogateSpec::default(),
            num_classes: 10,
            seed: 0,
            stem_pool_stages: 2,
            burst_key: true,
            dual_value: true,
        }
    }

    /// `BSViT-L-D` on 1×16×16 two-class inputs with `n_max = 4`.
    pub fn toy(depth: usize, dim: usize) -> Self {
        Self {
            in_channels: 1,
            height: 16,
            width: 16,
            n_max: 4,
            num_classes: 2,
            ..Self::cifar(depth, dim)
        }
    }

    pub fn heads(&self) -> usize {
        self.heads.unwrap_or(if self.dim >= 256 { 8 } else { 1 })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads()
    }

    pub fn hidden_dim(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn stem_stride(&self) -> usize {
        1 << self.stem_pool_stages
    }

    /// Stem output channels per stage: `D/8, D/4, D/2, D`.
    pub fn stem_channels(&self) -> [usize; STEM_STAGES] {
        [self.dim / 8, self.dim / 4, self.dim / 2, self.dim]
    }

    /// Whether stem stage `i` ends with a max-pool.
    pub fn stage_pools(&self, i: usize) -> bool {
        i >= STEM_STAGES - self.stem_pool_stages
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.stem_stride(), self.width / self.stem_stride())
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn block_masked(&self, block: usize) -> bool {
        match &self.mask_blocks {
            Some(v) => v.get(block).copied().unwrap_or(false),
            None => self.mask_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("in_channels", self.in_channels),
            ("height", self.height),
            ("width", self.width),
            ("timesteps", self.timesteps),
            ("depth", self.depth),
            ("dim", self.dim),
            ("mlp_ratio", self.mlp_ratio),
            ("num_classes", self.num_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        if self.n_max == 0 {
            return Err(Error::config("n_max", "must be at least 1"));
        }
        if !(self.v_theta > 0.0 && self.v_theta.is_finite()) {
            return Err(Error::config("v_theta", "must be positive"));
        }
        if !self.dim.is_multiple_of(8) {
            return Err(Error::config("dim", format!("{} is not divisible by 8 (stem widths D/8..D)", self.dim)));
        }
        let heads = self.heads();
        if heads == 0 || !self.dim.is_multiple_of(heads) {
            return Err(Error::config("heads", format!("dim {} is not divisible by {heads} heads", self.dim)));
        }
        if self.stem_pool_stages > STEM_STAGES {
            return Err(Error::config("stem_pool_stages", format!("at most {STEM_STAGES}")));
        }
        let stride = self.stem_stride();
        if !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::config(
                "height",
                format!("{}x{} input is not divisible by stem stride {stride}", self.height, self.width),
            ));
        }
        if let Some(blocks) = &self.mask_blocks {
            if blocks.len() != self.depth {
                return Err(Error::config(
                    "mask_blocks",
                    format!("has {} entries for depth {}", blocks.len(), self.depth),
                ));
            }
        }
        if !(self.surrogate.width > 0.0) {
            return Err(Error::config("surrogate.width", "must be positive"));
        }
        Ok(())
    }
}

fn default_epochs() -> usize {
    300
}
fn default_batch() -> usize {
    64
}
fn default_lr() -> f64 {
    1.1e-2
}
fn default_warmup() -> usize {
    20
}
fn default_cooldown() -> usize {
    10
}
fn default_wd() -> f64 {
    0.06
}
fn default_smoothing() -> f64 {
    0.1
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_adam_eps() -> f64 {
    1e-8
}

/// Optimizer, schedule and loop settings. Defaults are the CIFAR column of
/// the usual direct-training recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub min_lr: f64,
    #[serde(default = "default_warmup")]
    pub warmup_epochs: usize,
    #[serde(default = "default_cooldown")]
    pub cooldown_epochs: usize,
    #[serde(default = "default_wd")]
    pub weight_decay: f64,
    #[serde(default = "default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_adam_eps")]
    pub eps: f64,
    /// Stop once the measured training accuracy reaches this fraction.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Write a checkpoint every this many epochs (0 = final only).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all train fields have defaults")
    }
}

impl TrainConfig {
    /// Short schedule for the 16×16 synthetic task; stops at 95% accuracy.
    pub fn toy() -> Self {
        Self {
            epochs: 200,
            batch_size: 32,
            lr: 1e-2,
            warmup_epochs: 2,
            cooldown_epochs: 0,
            target_accuracy: Some(0.95),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        for (field, v) in [("lr", self.lr), ("min_lr", self.min_lr), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be finite and nonnegative"));
            }
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing", "must lie in [0, 1)"));
        }
        for (field, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("eps", "must be positive"));
        }
        if self.target_accuracy.is_some_and(|t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::config("target_accuracy", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// A complete run file: `{"schema_version": 1, "model": {...}, "train": {...}}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn new(model: ModelConfig, train: TrainConfig) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            model,
            train,
        }
    }

    /// `BSViT-1-32` on the synthetic task.
    pub fn toy() -> Self {
        Self::new(ModelConfig::toy(1, 32), TrainConfig::toy())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text)?;
        Self::from_value(value)
    }

    fn from_value(value: Value) -> Result<Self> {
        match value.get("schema_version").and_then(Value::as_u64) {
            Some(v) if v == SCHEMA_VERSION as u64 => {}
            Some(v) => {
                return Err(Error::config(
                    "schema_version",
                    format!("unsupported version {v}, expected {SCHEMA_VERSION}"),
                ))
            }
            None => return Err(Error::config("schema_version", "missing")),
        }
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config("config", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Applies `key=value` overrides. Keys are dotted paths
    /// (`model.depth`, `train.lr`, `model.surrogate.width`) or bare field
    /// names, which are looked up in `model` first, then `train`. Values are
    /// JSON; anything that fails to parse is taken as a string.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        for item in overrides {
            let item = item.as_ref();
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("override `{item}` is not key=value")))?;
            let key = key.trim();
            let parsed: Value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
            let path: Vec<&str> = if key.contains('.') {
                key.split('.').collect()
            } else if value["model"].get(key).is_some() || model_field(key) {
                vec!["model", key]
            } else if value["train"].get(key).is_some() {
                vec!["train", key]
            } else {
                return Err(Error::config(key, "unknown override key"));
            };
            set_path(&mut value, &path, parsed).map_err(|m| Error::config(key, m))?;
        }
        Self::from_value(value)
    }
}

// Optional model fields serialize as null but still exist.
fn model_field(key: &str) -> bool {
    matches!(key, "heads" | "mask_blocks")
}

fn set_path(root: &mut Value, path: &[&str], v: Value) -> std::result::Result<(), String> {
    let (last, parents) = path.split_last().ok_or("empty key")?;
    let mut cur = root;
    for p in parents {
        cur = cur
            .get_mut(*p)
            .filter(|c| c.is_object())
            .ok_or_else(|| format!("no section `{p}`"))?;
    }
    let obj = cur.as_object_mut().ok_or("not an object")?;
    if !obj.contains_key(*last) {
        return Err("unknown override key".to_string());
    }
    obj.insert((*last).to_string(), v);
    Ok(())
}
