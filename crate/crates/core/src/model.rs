//! Model assembly: parameters, the compiled inference engine, the taped
//! training forward and checkpoints.
//!
//! A [`Model`] owns trainable `f64` parameters. [`Model::compile`] folds
//! batch-norm into `f32` weights and produces an [`Engine`] that runs the
//! spike-driven pipeline with operation counting. [`forward_tape`] records the
//! same computation on an autodiff tape for a minibatch.

use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;

use crate::attention::{build_adjacency, AdjacencyMask, AttentionParams, Projection};
use crate::autodiff::{BatchStats, BnStats, SpikeFn, SpikeMode, Tape, Var};
use crate::blocks::{bsps_forward, classification_head, encoder_block_forward, Bmlp, Bsps, EncoderBlock, Head, StemStage};
use crate::config::{ModelConfig, RunConfig, STEM_STAGES};
use crate::data::{load_tensors, save_tensors, Dataset, NamedTensor, TensorData};
use crate::energy::EnergyLedger;
use crate::error::{Error, Result};
use crate::neuron::{squash, NeuronKind, NeuronLayer, NeuronParams};
use crate::params::{init_params, ParamSet, Tensor64};
use crate::tensor::{Array, Tensor, BN_MOMENTUM};

pub const CONFIG_FILE: &str = "config.json";

/// Configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamSet,
}

/// Validates `cfg` and draws the initial parameters from its seed.
pub fn build_model(cfg: &ModelConfig) -> Result<Model> {
    Ok(Model {
        config: cfg.clone(),
        params: init_params(cfg)?,
    })
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn neuron(&self, prefix: &str) -> Result<NeuronParams> {
        let c = &self.config;
        NeuronParams::new(
            squash(self.params.scalar(&format!("{prefix}.beta"))?) as f32,
            squash(self.params.scalar(&format!("{prefix}.alpha"))?) as f32,
            c.v_theta,
            c.n_max,
        )
    }

    fn linear(&self, prefix: &str) -> Result<Projection> {
        let w = self.params.tensor(&format!("{prefix}.weight"))?;
        let (w, b) = self.params.bn(&format!("{prefix}.bn"))?.fold_linear(&w)?;
        Projection::new(w, b)
    }

    /// Folds batch-norm and neuron parameters into an inference engine.
    pub fn compile(&self) -> Result<Engine> {
        let c = &self.config;
        c.validate()?;
        let mut stages = Vec::with_capacity(STEM_STAGES);
        for i in 0..STEM_STAGES {
            let p = format!("stem.{i}");
            let k = self.params.tensor(&format!("{p}.conv.weight"))?;
            let (kernel, bias) = self.params.bn(&format!("{p}.bn"))?.fold_conv(&k)?;
            let neuron = if i + 1 < STEM_STAGES { Some(self.neuron(&format!("{p}.lif"))?) } else { None };
            stages.push(StemStage {
                kernel,
                bias,
                neuron,
                pool: c.stage_pools(i),
            });
        }
        let rk = self.params.tensor("rpe.conv.weight")?;
        let (rpe_kernel, rpe_bias) = self.params.bn("rpe.bn")?.fold_conv(&rk)?;
        let bsps = Bsps {
            stages,
            rpe_neuron: self.neuron("rpe.lif")?,
            rpe_kernel,
            rpe_bias,
        };
        let (gh, gw) = c.grid();
        let mask = build_adjacency(gh, gw)?;
        let mut blocks = Vec::with_capacity(c.depth);
        for l in 0..c.depth {
            let p = format!("blocks.{l}");
            let a = format!("{p}.attn");
            let attn = AttentionParams {
                q: self.linear(&format!("{a}.q"))?,
                k: self.linear(&format!("{a}.k"))?,
                vp: self.linear(&format!("{a}.vp"))?,
                vm: if c.dual_value { Some(self.linear(&format!("{a}.vm"))?) } else { None },
                scale_s: self.params.scalar(&format!("{a}.log_scale"))?.exp() as f32,
                heads: c.heads(),
            };
            let vm_neuron = if c.dual_value { self.neuron(&format!("{a}.vm.lif"))? } else { self.neuron(&format!("{a}.vp.lif"))? };
            blocks.push(EncoderBlock {
                name: p.clone(),
                attn,
                q_neuron: self.neuron(&format!("{a}.q.lif"))?,
                k_neuron: self.neuron(&format!("{a}.k.lif"))?,
                k_kind: if c.burst_key { NeuronKind::Burst } else { NeuronKind::Binary },
                vp_neuron: self.neuron(&format!("{a}.vp.lif"))?,
                vm_neuron,
                out_neuron: self.neuron(&format!("{a}.out_lif"))?,
                proj: self.linear(&format!("{a}.proj"))?,
                res1: self.neuron(&format!("{p}.res1.lif"))?,
                mlp: Bmlp {
                    fc1: self.linear(&format!("{p}.mlp.fc1"))?,
                    neuron: self.neuron(&format!("{p}.mlp.lif"))?,
                    fc2: self.linear(&format!("{p}.mlp.fc2"))?,
                },
                res2: self.neuron(&format!("{p}.res2.lif"))?,
                mask: c.block_masked(l).then(|| mask.clone()),
            });
        }
        let head = Head {
            weight: self.params.tensor("head.weight")?,
            bias: self.params.tensor("head.bias")?.into_data(),
        };
        Ok(Engine {
            config: c.clone(),
            bsps,
            embed: self.neuron("embed.lif")?,
            blocks,
            head,
        })
    }

    /// Writes `config.json` and an `f32` tensor manifest into `dir`.
    pub fn save_checkpoint(&self, dir: &Path, run: &RunConfig) -> Result<()> {
        if run.model != self.config {
            return Err(Error::Mismatch("run config does not describe this model".into()));
        }
        let tensors = self
            .params
            .iter()
            .map(|p| {
                let data = p.value.data().iter().map(|&v| v as f32).collect();
                NamedTensor::new(p.name.clone(), p.shape(), TensorData::F32(data))
            })
            .collect::<Result<Vec<_>>>()?;
        save_tensors(dir, &tensors)?;
        run.save(&dir.join(CONFIG_FILE))
    }

    /// Reads a checkpoint written by [`Model::save_checkpoint`]. Every tensor
    /// must match the layout its config implies.
    pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, Model)> {
        let run = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let model = Self::load_weights(dir, &run.model)?;
        Ok((run, model))
    }

    /// Loads checkpoint tensors into a model described by `cfg`.
    pub fn load_weights(dir: &Path, cfg: &ModelConfig) -> Result<Model> {
        let mut model = build_model(cfg)?;
        let tensors = load_tensors(dir)?;
        if tensors.len() != model.params.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint holds {} tensors, config expects {}",
                tensors.len(),
                model.params.len()
            )));
        }
        for t in tensors {
            let id = model
                .params
                .id(&t.name)
                .map_err(|_| Error::Mismatch(format!("unexpected tensor `{}`", t.name)))?;
            let p = model.params.by_id_mut(id);
            if p.shape() != t.shape.as_slice() {
                return Err(Error::Mismatch(format!(
                    "tensor `{}` has shape {:?}, config expects {:?}",
                    t.name,
                    t.shape,
                    p.shape()
                )));
            }
            let TensorData::F32(v) = t.data else {
                return Err(Error::Mismatch(format!("tensor `{}` is not f32", t.name)));
            };
            p.value = Tensor64::new(&t.shape, v.into_iter().map(f64::from).collect())?;
        }
        Ok(model)
    }
}

/// Compiled, immutable inference network.
#[derive(Clone, Debug)]
pub struct Engine {
    pub config: ModelConfig,
    pub bsps: Bsps,
    pub embed: NeuronParams,
    pub blocks: Vec<EncoderBlock>,
    pub head: Head,
}

/// Top-1 results over a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub samples: usize,
    pub correct: usize,
    /// `[true class][predicted class]` counts.
    pub confusion: Vec<Vec<usize>>,
    pub ledger: EnergyLedger,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.samples as f64
    }

    /// Correct predictions per class.
    pub fn per_class_correct(&self) -> Vec<usize> {
        self.confusion.iter().enumerate().map(|(c, row)| row[c]).collect()
    }

    pub fn per_class_total(&self) -> Vec<usize> {
        self.confusion.iter().map(|row| row.iter().sum()).collect()
    }
}

/// Index of the largest logit; ties go to the lower class.
pub fn argmax(logits: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

impl Engine {
    pub fn grid(&self) -> (usize, usize) {
        self.config.grid()
    }

    /// The adjacency mask the engine would use, whether or not any block
    /// enables it.
    pub fn mask(&self) -> Result<AdjacencyMask> {
        let (h, w) = self.grid();
        build_adjacency(h, w)
    }

    /// Classifies one static `[C, H, W]` image, repeated over `T` steps.
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, EnergyLedger)> {
        let c = &self.config;
        if image.shape() != [c.in_channels, c.height, c.width] {
            return Err(Error::dim(format!(
                "image {:?} does not match configured geometry {:?}",
                image.shape(),
                [c.in_channels, c.height, c.width]
            )));
        }
        let t = c.timesteps;
        let per = image.len();
        let frames = Tensor::from_fn(&[t, c.in_channels, c.height, c.width], |i| image.data()[i % per]);
        self.run(&frames)
    }

    /// Classifies a `[T, C, H, W]` frame stack without repetition.
    pub fn infer_frames(&self, frames: &Tensor) -> Result<(Tensor, EnergyLedger)> {
        let c = &self.config;
        let (t, ch, h, w) = frames.dims4()?;
        if t == 0 || (ch, h, w) != (c.in_channels, c.height, c.width) {
            return Err(Error::dim(format!(
                "frames {:?} do not match configured geometry {:?}",
                frames.shape(),
                [c.in_channels, c.height, c.width]
            )));
        }
        self.run(frames)
    }

    /// Dispatches on rank: `[C, H, W]` images or `[T, C, H, W]` frames.
    pub fn infer_input(&self, x: &Tensor) -> Result<(Tensor, EnergyLedger)> {
        if x.rank() == 4 {
            self.infer_frames(x)
        } else {
            self.infer(x)
        }
    }

    fn run(&self, frames: &Tensor) -> Result<(Tensor, EnergyLedger)> {
        let mut ledger = EnergyLedger::new();
        let (u0, _) = bsps_forward(&self.bsps, frames, &mut ledger)?;
        let mut s = NeuronLayer::burst(self.embed).run_sequence(&u0, ledger.layer("embed"))?;
        let mut u = u0;
        for block in &self.blocks {
            (s, u) = encoder_block_forward(block, &s, &u, &mut ledger)?;
        }
        let logits = classification_head(&self.head, &s, &mut ledger)?;
        Ok((logits, ledger))
    }

    /// Runs every input independently in parallel; results keep input order.
    pub fn infer_batch(&self, inputs: &[Tensor]) -> Result<Vec<(Tensor, EnergyLedger)>> {
        inputs.par_iter().map(|x| self.infer_input(x)).collect()
    }

    /// Top-1 accuracy, confusion counts and the summed ledger over `ds`.
    pub fn evaluate(&self, ds: &Dataset) -> Result<EvalReport> {
        if ds.is_empty() {
            return Err(Error::Argument("evaluation set is empty".into()));
        }
        if ds.num_classes != self.config.num_classes {
            return Err(Error::Mismatch(format!(
                "dataset has {} classes, model {}",
                ds.num_classes, self.config.num_classes
            )));
        }
        let outs = self.infer_batch(&ds.inputs)?;
        let k = ds.num_classes;
        let mut confusion = vec![vec![0; k]; k];
        let mut ledger = EnergyLedger::new();
        let mut correct = 0;
        for ((logits, l), &y) in outs.iter().zip(&ds.labels) {
            let p = argmax(logits.data());
            confusion[y][p] += 1;
            correct += usize::from(p == y);
            ledger.merge(l);
        }
        Ok(EvalReport {
            samples: ds.len(),
            correct,
            confusion,
            ledger,
        })
    }
}

/// Runs `model` on one static image.
pub fn infer(model: &Model, image: &Tensor) -> Result<(Tensor, EnergyLedger)> {
    model.compile()?.infer(image)
}

/// How batch-norm layers behave on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapeBn {
    /// Normalize with minibatch statistics over batch, time and space.
    Batch,
    /// Normalize with the stored running statistics.
    Running,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TapeOptions {
    pub bn: TapeBn,
    pub spike: SpikeMode,
}

impl TapeOptions {
    pub fn train() -> Self {
        Self {
            bn: TapeBn::Batch,
            spike: SpikeMode::Hard,
        }
    }
}

/// Output of [`forward_tape`].
pub struct TapeForward {
    /// `[B, classes]`.
    pub logits: Var,
    /// Minibatch statistics per BN prefix, in layer order (train mode only).
    pub bn_stats: Vec<(String, BatchStats)>,
}

/// Stacks samples into a time-major `[T·B, C, H, W]` batch. Static images
/// are repeated over `T`; frame stacks must already have `T` frames.
pub fn stack_batch(cfg: &ModelConfig, samples: &[&Tensor]) -> Result<Tensor64> {
    let (t, c, h, w) = (cfg.timesteps, cfg.in_channels, cfg.height, cfg.width);
    let per = c * h * w;
    let b = samples.len();
    if b == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut out = vec![0.0; t * b * per];
    for (bi, x) in samples.iter().enumerate() {
        let frames = match x.shape() {
            s if s == [c, h, w] => false,
            s if s == [t, c, h, w] => true,
            s => {
                return Err(Error::dim(format!("sample {s:?} does not match configured geometry {:?}", [c, h, w])));
            }
        };
        for ti in 0..t {
            let src = if frames { &x.data()[ti * per..(ti + 1) * per] } else { x.data() };
            let dst = &mut out[(ti * b + bi) * per..][..per];
            dst.iter_mut().zip(src).for_each(|(d, &s)| *d = f64::from(s));
        }
    }
    Array::new(&[t * b, c, h, w], out)
}

struct TapeNet<'a> {
    tape: &'a mut Tape,
    params: &'a ParamSet,
    cfg: &'a ModelConfig,
    opts: TapeOptions,
    stats: Vec<(String, BatchStats)>,
}

impl TapeNet<'_> {
    fn p(&mut self, name: &str) -> Result<Var> {
        self.tape.param_named(self.params, name)
    }

    fn bn(&mut self, x: Var, prefix: &str, axis: usize) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let (y, st) = match self.opts.bn {
            TapeBn::Batch => self.tape.batchnorm(x, gamma, beta, axis, BnStats::Batch)?,
            TapeBn::Running => {
                let mean = self.params.value(&format!("{prefix}.running_mean"))?.data();
                let var = self.params.value(&format!("{prefix}.running_var"))?.data();
                self.tape.batchnorm(x, gamma, beta, axis, BnStats::Running { mean, var })?
            }
        };
        if let Some(st) = st {
            self.stats.push((prefix.to_string(), st));
        }
        Ok(y)
    }

    fn neuron(&mut self, x: Var, prefix: &str, kind: NeuronKind) -> Result<Var> {
        let beta = self.p(&format!("{prefix}.beta"))?;
        let alpha = self.p(&format!("{prefix}.alpha"))?;
        let f = SpikeFn {
            kind,
            v_theta: f64::from(self.cfg.v_theta),
            n_max: self.cfg.n_max,
            surrogate: self.cfg.surrogate,
            mode: self.opts.spike,
        };
        self.tape.neuron(x, beta, alpha, f, self.cfg.timesteps)
    }

    fn conv_bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.p(&format!("{prefix}.conv.weight"))?;
        let y = self.tape.conv2d(x, w, 1)?;
        self.bn(y, &format!("{prefix}.bn"), 1)
    }

    /// `[G, N, D]` tokens through `x·W` and BN, back to `[G, N, P]`.
    fn linear_bn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let [g, n, d] = self.tape.shape(x)[..] else {
            return Err(Error::dim(format!("linear input must be [G, N, D], got {:?}", self.tape.shape(x))));
        };
        let flat = self.tape.reshape(x, &[g * n, d])?;
        let w = self.p(&format!("{prefix}.weight"))?;
        let y = self.tape.matmul(flat, w)?;
        let y = self.bn(y, &format!("{prefix}.bn"), 1)?;
        let p = self.tape.shape(y)[1];
        self.tape.reshape(y, &[g, n, p])
    }

    fn block(&mut self, l: usize, s: Var, u: Var, mask: Option<&Arc<[u8]>>) -> Result<(Var, Var)> {
        let cfg = self.cfg;
        let p = format!("blocks.{l}");
        let a = format!("{p}.attn");
        let branch = |net: &mut Self, name: &str, kind: NeuronKind| -> Result<Var> {
            let cur = net.linear_bn(s, &format!("{a}.{name}"))?;
            net.neuron(cur, &format!("{a}.{name}.lif"), kind)
        };
        let q = branch(self, "q", NeuronKind::Binary)?;
        let k_kind = if cfg.burst_key { NeuronKind::Burst } else { NeuronKind::Binary };
        let k = branch(self, "k", k_kind)?;
        let vp = branch(self, "vp", NeuronKind::Binary)?;
        let v = if cfg.dual_value {
            let vm = branch(self, "vm", NeuronKind::Binary)?;
            self.tape.sub(vp, vm)?
        } else {
            vp
        };
        let heads = cfg.heads();
        let mut scores = self.tape.attn_scores(q, k, heads)?;
        if let (true, Some(m)) = (cfg.block_masked(l), mask) {
            scores = self.tape.attn_mask(scores, Arc::clone(m))?;
        }
        let agg = self.tape.attn_apply(scores, v, heads)?;
        let log_s = self.p(&format!("{a}.log_scale"))?;
        let cur = self.tape.scale_exp(agg, log_s);
        let attn = self.neuron(cur, &format!("{a}.out_lif"), NeuronKind::Burst)?;
        let z = self.linear_bn(attn, &format!("{a}.proj"))?;
        let u_mid = self.tape.add(z, u)?;
        let s_mid = self.neuron(u_mid, &format!("{p}.res1.lif"), NeuronKind::Burst)?;
        let hid = self.linear_bn(s_mid, &format!("{p}.mlp.fc1"))?;
        let hs = self.neuron(hid, &format!("{p}.mlp.lif"), NeuronKind::Burst)?;
        let m = self.linear_bn(hs, &format!("{p}.mlp.fc2"))?;
        let u_out = self.tape.add(m, u_mid)?;
        let s_out = self.neuron(u_out, &format!("{p}.res2.lif"), NeuronKind::Burst)?;
        Ok((s_out, u_out))
    }
}

/// Records the network on `tape` for a time-major `[T·B, C, H, W]` batch
/// built by [`stack_batch`]; returns `[B, classes]` logits.
pub fn forward_tape(
    tape: &mut Tape,
    params: &ParamSet,
    cfg: &ModelConfig,
    input: Tensor64,
    opts: TapeOptions,
) -> Result<TapeForward> {
    let (rows, c, h, w) = input.dims4()?;
    if rows % cfg.timesteps != 0 || (c, h, w) != (cfg.in_channels, cfg.height, cfg.width) {
        return Err(Error::dim(format!("tape input {:?} does not match the configuration", input.shape())));
    }
    let mut net = TapeNet {
        tape,
        params,
        cfg,
        opts,
        stats: Vec::new(),
    };
    let mut x = net.tape.leaf(input);
    for i in 0..STEM_STAGES {
        let p = format!("stem.{i}");
        x = net.conv_bn(x, &p)?;
        if i + 1 < STEM_STAGES {
            x = net.neuron(x, &format!("{p}.lif"), NeuronKind::Burst)?;
        }
        if cfg.stage_pools(i) {
            x = net.tape.maxpool2(x)?;
        }
    }
    let hmap = x;
    let s = net.neuron(hmap, "rpe.lif", NeuronKind::Burst)?;
    let pe = net.conv_bn(s, "rpe")?;
    let u0 = net.tape.add(hmap, pe)?;
    let mut u = net.tape.to_tokens(u0)?;
    let mut s = net.neuron(u, "embed.lif", NeuronKind::Burst)?;
    let mask: Option<Arc<[u8]>> = if (0..cfg.depth).any(|l| cfg.block_masked(l)) {
        let (gh, gw) = cfg.grid();
        Some(Arc::from(build_adjacency(gh, gw)?.bits()))
    } else {
        None
    };
    for l in 0..cfg.depth {
        (s, u) = net.block(l, s, u, mask.as_ref())?;
    }
    let pooled = net.tape.mean_tokens(s)?;
    let hw = net.p("head.weight")?;
    let hb = net.p("head.bias")?;
    let y = net.tape.matmul(pooled, hw)?;
    let y = net.tape.add_bias(y, hb, 1)?;
    let logits = net.tape.mean_time(y, cfg.timesteps)?;
    Ok(TapeForward {
        logits,
        bn_stats: net.stats,
    })
}

/// Exponential moving update of BN running statistics,
/// `r ← (1 - m)·r + m·batch`, with population variance.
pub fn update_running_stats(params: &mut ParamSet, stats: &[(String, BatchStats)]) -> Result<()> {
    let m = f64::from(BN_MOMENTUM);
    for (prefix, st) in stats {
        for (field, batch) in [("running_mean", &st.mean), ("running_var", &st.var)] {
            let r = params.value_mut(&format!("{prefix}.{field}"))?;
            if r.len() != batch.len() {
                return Err(Error::dim(format!("{prefix}.{field} has {} channels, batch {}", r.len(), batch.len())));
            }
            r.data_mut().iter_mut().zip(batch).for_each(|(r, b)| *r = (1.0 - m) * *r + m * b);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::expected_param_count;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            ..ModelConfig::toy(1, 16)
        }
    }

    fn image(cfg: &ModelConfig, seed: u32) -> Tensor {
        Tensor::from_fn(&[cfg.in_channels, cfg.height, cfg.width], |i| {
            (((i as u32).wrapping_mul(2654435761).wrapping_add(seed * 97)) % 1000) as f32 / 250.0 - 1.0
        })
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let a = build_model(&tiny()).unwrap();
        let b = build_model(&tiny()).unwrap();
        for (x, y) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(x.name, y.name);
            assert_eq!(x.value, y.value);
        }
        assert_eq!(a.param_count(), expected_param_count(&tiny()));
    }

    #[test]
    fn mask_switch_leaves_parameter_count() {
        let on = build_model(&tiny()).unwrap();
        let off = build_model(&ModelConfig {
            mask_enabled: false,
            ..tiny()
        })
        .unwrap();
        assert_eq!(on.param_count(), off.param_count());
    }

    #[test]
    fn zero_image_with_zero_affines_gives_head_bias() {
        let cfg = tiny();
        let mut m = build_model(&cfg).unwrap();
        let names: Vec<String> = m.params.iter().map(|p| p.name.clone()).collect();
        for n in names {
            if n.contains(".bn.") && (n.ends_with(".gamma") || n.ends_with(".beta")) {
                m.params.value_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let bias = [0.25, -0.5];
        m.params.value_mut("head.bias").unwrap().data_mut().copy_from_slice(&bias);
        let (logits, ledger) = infer(&m, &Tensor::zeros(&[1, 8, 8])).unwrap();
        assert_eq!(logits.data(), &[0.25f32, -0.5]);
        assert_eq!(ledger.total_sop(), 0);
    }

    #[test]
    fn inference_is_stateless_across_calls() {
        let cfg = tiny();
        let e = build_model(&cfg).unwrap().compile().unwrap();
        let x = image(&cfg, 1);
        let a = e.infer(&x).unwrap();
        let _ = e.infer(&image(&cfg, 2)).unwrap();
        let b = e.infer(&x).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn constant_zero_model_is_time_invariant() {
        let cfg = tiny();
        let mut m = build_model(&cfg).unwrap();
        for p in m.params.iter().map(|p| p.name.clone()).collect::<Vec<_>>() {
            if p.ends_with(".weight") && p != "head.weight" {
                m.params.value_mut(&p).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let x = image(&cfg, 3);
        let two = infer(&m, &x).unwrap().0;
        m.config.timesteps = 1;
        let one = infer(&m, &x).unwrap().0;
        assert_eq!(one, two);
    }

    #[test]
    fn geometry_mismatch_is_rejected() {
        let e = build_model(&tiny()).unwrap().compile().unwrap();
        assert!(matches!(e.infer(&Tensor::zeros(&[1, 8, 9])), Err(Error::Dimension(_))));
        assert!(matches!(e.infer(&Tensor::zeros(&[3, 8, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn batch_results_follow_input_permutation() {
        let cfg = tiny();
        let e = build_model(&cfg).unwrap().compile().unwrap();
        let xs: Vec<Tensor> = (0..4).map(|i| image(&cfg, i)).collect();
        let rev: Vec<Tensor> = xs.iter().rev().cloned().collect();
        let a = e.infer_batch(&xs).unwrap();
        let mut b = e.infer_batch(&rev).unwrap();
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn hard_tape_matches_engine_logits() {
        let cfg = tiny();
        let mut m = build_model(&cfg).unwrap();
        m.params.round_to_f32();
        let e = m.compile().unwrap();
        let xs: Vec<Tensor> = (0..3).map(|i| image(&cfg, i)).collect();
        let refs: Vec<&Tensor> = xs.iter().collect();
        let mut tape = Tape::new();
        let input = stack_batch(&cfg, &refs).unwrap();
        let out = forward_tape(
            &mut tape,
            &m.params,
            &cfg,
            input,
            TapeOptions {
                bn: TapeBn::Running,
                spike: SpikeMode::Hard,
            },
        )
        .unwrap();
        assert!(out.bn_stats.is_empty());
        let logits = tape.value(out.logits);
        for (b, x) in xs.iter().enumerate() {
            let (el, _) = e.infer(x).unwrap();
            for c in 0..cfg.num_classes {
                let t = logits.data()[b * cfg.num_classes + c];
                assert!((t - el.data()[c] as f64).abs() < 1e-4, "sample {b} class {c}: {t} vs {}", el.data()[c]);
            }
        }
    }

    #[test]
    fn train_mode_reports_every_bn() {
        let cfg = tiny();
        let m = build_model(&cfg).unwrap();
        let x = image(&cfg, 0);
        let mut tape = Tape::new();
        let input = stack_batch(&cfg, &[&x, &x]).unwrap();
        let out = forward_tape(&mut tape, &m.params, &cfg, input, TapeOptions::train()).unwrap();
        let bns = m.params.iter().filter(|p| p.name.ends_with(".running_mean")).count();
        assert_eq!(out.bn_stats.len(), bns);
        let mut p = m.params.clone();
        update_running_stats(&mut p, &out.bn_stats).unwrap();
        let (name, st) = &out.bn_stats[0];
        let rm = p.value(&format!("{name}.running_mean")).unwrap();
        assert!((rm.data()[0] - f64::from(BN_MOMENTUM) * st.mean[0]).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let mut m = build_model(&cfg).unwrap();
        m.params.round_to_f32();
        let run = RunConfig::new(cfg.clone(), Default::default());
        m.save_checkpoint(dir.path(), &run).unwrap();
        let (run2, m2) = Model::load_checkpoint(dir.path()).unwrap();
        assert_eq!(run2, run);
        for (a, b) in m.params.iter().zip(m2.params.iter()) {
            assert_eq!(a.value, b.value, "{}", a.name);
        }
        let wider = ModelConfig { dim: 32, ..cfg };
        assert!(matches!(Model::load_weights(dir.path(), &wider), Err(Error::Mismatch(_))));
    }

    #[test]
    fn frames_and_repeated_image_agree() {
        let cfg = tiny();
        let e = build_model(&cfg).unwrap().compile().unwrap();
        let x = image(&cfg, 5);
        let frames = Tensor::from_fn(&[2, 1, 8, 8], |i| x.data()[i % 64]);
        assert_eq!(e.infer(&x).unwrap().0, e.infer_frames(&frames).unwrap().0);
    }
}
