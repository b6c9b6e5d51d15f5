//! Named parameter storage and initialization.
//!
//! Values live in `f64` so training and gradient checks run at double
//! precision; inference and checkpoints use the `f32` rounding.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::config::{ModelConfig, STEM_STAGES};
use crate::error::{Error, Result};
use crate::neuron::{unsquash, ALPHA_INIT, BETA_INIT};
use crate::tensor::{Array, BnParams, Tensor, BN_EPS, BN_MOMENTUM};

pub type Tensor64 = Array<f64>;

/// Standard deviation of the truncated-normal linear init.
pub const LINEAR_INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor64,
    /// Running statistics are stored alongside but never optimized.
    pub trainable: bool,
}

impl Param {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Ordered, name-indexed parameters of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor64, trainable: bool) -> usize {
        let name = name.into();
        if let Some(&id) = self.index.get(&name) {
            self.params[id] = Param { name, value, trainable };
            return id;
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, value, trainable });
        id
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("no parameter named `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.id(name).map(|i| &self.params[i])
    }

    pub fn by_id(&self, id: usize) -> &Param {
        &self.params[id]
    }

    pub fn by_id_mut(&mut self, id: usize) -> &mut Param {
        &mut self.params[id]
    }

    pub fn value(&self, name: &str) -> Result<&Tensor64> {
        self.get(name).map(|p| &p.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor64> {
        let id = self.id(name)?;
        Ok(&mut self.params[id].value)
    }

    /// First element of a scalar parameter.
    pub fn scalar(&self, name: &str) -> Result<f64> {
        Ok(self.value(name)?.data()[0])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(Param::numel).sum()
    }

    /// `f32` copy of a parameter.
    pub fn tensor(&self, name: &str) -> Result<Tensor> {
        Ok(self.value(name)?.map(|v| v as f32))
    }

    /// BN parameters stored under `{prefix}.gamma` etc.
    pub fn bn(&self, prefix: &str) -> Result<BnParams> {
        let v = |s: &str| -> Result<Vec<f32>> { Ok(self.tensor(&format!("{prefix}.{s}"))?.into_data()) };
        Ok(BnParams {
            gamma: v("gamma")?,
            beta: v("beta")?,
            running_mean: v("running_mean")?,
            running_var: v("running_var")?,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        })
    }

    /// Rounds every value to the nearest `f32`.
    pub fn round_to_f32(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x: f64 = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

struct Builder {
    set: ParamSet,
    rng: ChaCha8Rng,
}

impl Builder {
    fn conv(&mut self, name: &str, co: usize, ci: usize) {
        let std = (2.0 / (co * 9) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let v = Tensor64::from_fn(&[co, ci, 3, 3], |_| normal.sample(&mut self.rng));
        self.set.insert(format!("{name}.weight"), v, true);
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) {
        let rng = &mut self.rng;
        let v = Tensor64::from_fn(&[fan_in, fan_out], |_| trunc_normal(rng, LINEAR_INIT_STD));
        self.set.insert(format!("{name}.weight"), v, true);
    }

    fn bn(&mut self, name: &str, c: usize, gamma: f64) {
        self.set.insert(format!("{name}.gamma"), Tensor64::full(&[c], gamma), true);
        self.set.insert(format!("{name}.beta"), Tensor64::zeros(&[c]), true);
        self.set.insert(format!("{name}.running_mean"), Tensor64::zeros(&[c]), false);
        self.set.insert(format!("{name}.running_var"), Tensor64::full(&[c], 1.0), false);
    }

    fn lif(&mut self, name: &str) {
        self.set.insert(format!("{name}.beta"), Tensor64::full(&[1], unsquash(BETA_INIT)), true);
        self.set.insert(format!("{name}.alpha"), Tensor64::full(&[1], unsquash(ALPHA_INIT)), true);
    }
}

/// Initial `ln s` for the attention scale, `s = 1/√(d_head·n_K)` where `n_K`
/// is the largest key level.
pub fn initial_log_scale(cfg: &ModelConfig) -> f64 {
    let n_k = if cfg.burst_key { cfg.n_max } else { 1 };
    -0.5 * ((cfg.head_dim() as f64) * n_k as f64).ln()
}

/// Draws every parameter of the model described by `cfg` from its seed.
pub fn init_params(cfg: &ModelConfig) -> Result<ParamSet> {
    cfg.validate()?;
    let mut b = Builder {
        set: ParamSet::new(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let d = cfg.dim;
    let mut cin = cfg.in_channels;
    for (i, &co) in cfg.stem_channels().iter().enumerate() {
        b.conv(&format!("stem.{i}.conv"), co, cin);
        b.bn(&format!("stem.{i}.bn"), co, 1.0);
        if i + 1 < STEM_STAGES {
            b.lif(&format!("stem.{i}.lif"));
        }
        cin = co;
    }
    b.lif("rpe.lif");
    b.conv("rpe.conv", d, d);
    b.bn("rpe.bn", d, 0.0);
    b.lif("embed.lif");
    let hidden = cfg.hidden_dim();
    for l in 0..cfg.depth {
        let p = format!("blocks.{l}");
        let mut branches = vec!["q", "k", "vp"];
        if cfg.dual_value {
            branches.push("vm");
        }
        for br in branches {
            b.linear(&format!("{p}.attn.{br}"), d, d);
            b.bn(&format!("{p}.attn.{br}.bn"), d, 1.0);
            b.lif(&format!("{p}.attn.{br}.lif"));
        }
        b.set.insert(format!("{p}.attn.log_scale"), Tensor64::full(&[1], initial_log_scale(cfg)), true);
        b.lif(&format!("{p}.attn.out_lif"));
        b.linear(&format!("{p}.attn.proj"), d, d);
        b.bn(&format!("{p}.attn.proj.bn"), d, 0.0);
        b.lif(&format!("{p}.res1.lif"));
        b.linear(&format!("{p}.mlp.fc1"), d, hidden);
        b.bn(&format!("{p}.mlp.fc1.bn"), hidden, 1.0);
        b.lif(&format!("{p}.mlp.lif"));
        b.linear(&format!("{p}.mlp.fc2"), hidden, d);
        b.bn(&format!("{p}.mlp.fc2.bn"), d, 0.0);
        b.lif(&format!("{p}.res2.lif"));
    }
    b.linear("head", d, cfg.num_classes);
    b.set.insert("head.bias", Tensor64::zeros(&[cfg.num_classes]), true);
    Ok(b.set)
}

/// Closed-form trainable-parameter count for `cfg`.
pub fn expected_param_count(cfg: &ModelConfig) -> usize {
    let d = cfg.dim;
    let hidden = cfg.hidden_dim();
    let lif = 2;
    let bn = |c: usize| 2 * c;
    let mut total = 0;
    let mut cin = cfg.in_channels;
    for (i, &co) in cfg.stem_channels().iter().enumerate() {
        total += co * cin * 9 + bn(co);
        if i + 1 < STEM_STAGES {
            total += lif;
        }
        cin = co;
    }
    total += lif + d * d * 9 + bn(d) + lif;
    let values = if cfg.dual_value { 2 } else { 1 };
    let per_block = (2 + values) * (d * d + bn(d) + lif)
        + 1
        + lif
        + d * d
        + bn(d)
        + lif
        + d * hidden
        + bn(hidden)
        + lif
        + hidden * d
        + bn(d)
        + lif;
    total + cfg.depth * per_block + d * cfg.num_classes + cfg.num_classes
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> ModelConfig {
        let mut m = ModelConfig::cifar(1, 32);
        m.in_channels = 1;
        m.height = 16;
        m.width = 16;
        m.num_classes = 2;
        m
    }

    #[test]
    fn same_seed_same_parameters() {
        assert_eq!(init_params(&toy()).unwrap(), init_params(&toy()).unwrap());
        let mut other = toy();
        other.seed = 9;
        assert_ne!(init_params(&toy()).unwrap(), init_params(&other).unwrap());
    }

    #[test]
    fn count_matches_closed_form() {
        for cfg in [toy(), ModelConfig::cifar(2, 64)] {
            let set = init_params(&cfg).unwrap();
            assert_eq!(set.trainable_count(), expected_param_count(&cfg));
        }
    }

    #[test]
    fn mask_is_parameter_free() {
        let mut off = toy();
        off.mask_enabled = false;
        assert_eq!(
            init_params(&toy()).unwrap().trainable_count(),
            init_params(&off).unwrap().trainable_count()
        );
    }

    #[test]
    fn large_model_near_published_size() {
        let n = expected_param_count(&ModelConfig::cifar(4, 384)) as f64;
        assert!((n / 9.91e6 - 1.0).abs() < 0.05, "{n}");
    }

    #[test]
    fn residual_branch_gammas_start_at_zero() {
        let set = init_params(&toy()).unwrap();
        for name in ["rpe.bn.gamma", "blocks.0.attn.proj.bn.gamma", "blocks.0.mlp.fc2.bn.gamma"] {
            assert!(set.value(name).unwrap().data().iter().all(|&g| g == 0.0));
        }
        assert!(set.value("stem.0.bn.gamma").unwrap().data().iter().all(|&g| g == 1.0));
    }

    #[test]
    fn linear_init_is_truncated() {
        let set = init_params(&ModelConfig::cifar(1, 64)).unwrap();
        let w = set.value("blocks.0.mlp.fc1.weight").unwrap();
        assert!(w.data().iter().all(|x| x.abs() <= 0.04));
        let mean = w.data().iter().sum::<f64>() / w.len() as f64;
        let var = w.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64;
        // a normal truncated at 2σ has std ≈ 0.88σ
        assert!((var.sqrt() / LINEAR_INIT_STD - 0.88).abs() < 0.03);
    }

    #[test]
    fn log_scale_init() {
        let cfg = ModelConfig::cifar(1, 384);
        let s = initial_log_scale(&cfg).exp();
        assert!((s - 1.0 / (48.0f64 * 20.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rounding_is_idempotent() {
        let mut set = init_params(&toy()).unwrap();
        set.round_to_f32();
        let once = set.clone();
        set.round_to_f32();
        assert_eq!(set, once);
    }
}
