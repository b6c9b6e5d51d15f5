//! Wall-clock micro-benchmarks of the spike kernels and the full engine.
//! Operation counts are deterministic; timings are not.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::attention::{build_adjacency, dbssa_forward_path, MaskPath, SpikeProjections};
use crate::config::{ModelConfig, TrainConfig};
use crate::data::{synth_dataset, SynthSpec};
use crate::energy::LayerRecord;
use crate::error::{Error, Result};
use crate::model::build_model;
use crate::neuron::{NeuronLayer, NeuronParams};
use crate::tensor::{matmul_addonly, matmul_float, IntTensor, Tensor};
use crate::train::{train_step, OptimState};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub name: String,
    pub iters: usize,
    pub mean_us: f64,
    /// Accumulate operations per iteration (0 for float kernels).
    pub sop: u64,
}

fn time<T>(name: &str, iters: usize, mut f: impl FnMut() -> Result<(T, u64)>) -> Result<BenchRow> {
    let (_, sop) = f()?;
    let start = Instant::now();
    for _ in 0..iters {
        std::hint::black_box(f()?);
    }
    Ok(BenchRow {
        name: name.to_string(),
        iters,
        mean_us: start.elapsed().as_secs_f64() * 1e6 / iters as f64,
        sop,
    })
}

fn spikes(rng: &mut ChaCha8Rng, shape: &[usize], max: i32, rate: f64) -> IntTensor {
    IntTensor::from_fn(shape, |_| if rng.random_bool(rate) { rng.random_range(1..=max) } else { 0 })
}

/// Times the projection kernels, the attention core (masked sparse, masked
/// dense, unmasked), one engine inference and one training step at the
/// geometry of `cfg`.
pub fn run_bench(cfg: &ModelConfig, iters: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if iters == 0 {
        return Err(Error::Argument("bench needs at least one iteration".into()));
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (t, n, d) = (cfg.timesteps, cfg.tokens(), cfg.dim);
    let w = Tensor::from_fn(&[d, d], |_| rng.random_range(-1.0f32..1.0));
    let x = spikes(&mut rng, &[t * n, d], cfg.n_max as i32, 0.2);
    let xf = x.to_float();
    let mut rows = vec![
        time("matmul_float", iters, || Ok((matmul_float(&xf, &w)?, 0)))?,
        time("matmul_addonly", iters, || {
            let mut rec = LayerRecord::default();
            let y = matmul_addonly(&x, &w, &mut rec)?;
            Ok((y, rec.sop))
        })?,
    ];
    let proj = SpikeProjections {
        q: spikes(&mut rng, &[t, n, d], 1, 0.2),
        k: spikes(&mut rng, &[t, n, d], cfg.n_max as i32, 0.2),
        vp: spikes(&mut rng, &[t, n, d], 1, 0.1),
        vm_raw: spikes(&mut rng, &[t, n, d], 1, 0.1),
    };
    let (gh, gw) = cfg.grid();
    let mask = build_adjacency(gh, gw)?;
    let out = NeuronParams::new(0.5, 0.98, cfg.v_theta, cfg.n_max)?;
    for (name, m, path) in [
        ("dbssa_masked_sparse", Some(&mask), MaskPath::Sparse),
        ("dbssa_masked_dense", Some(&mask), MaskPath::Dense),
        ("dbssa_unmasked", None, MaskPath::Dense),
    ] {
        rows.push(time(name, iters, || {
            let mut rec = LayerRecord::default();
            let mut neuron = NeuronLayer::burst(out);
            let y = dbssa_forward_path(&proj, m, cfg.heads(), 0.1, path, &mut neuron, &mut rec)?;
            Ok((y, rec.sop))
        })?);
    }
    let model = build_model(cfg)?;
    let engine = model.compile()?;
    let ds = synth_dataset(&SynthSpec {
        classes: cfg.num_classes.max(2),
        samples: 8,
        channels: cfg.in_channels,
        height: cfg.height,
        width: cfg.width,
        noise: 0.1,
        jitter: 1,
        seed,
    })?;
    rows.push(time("engine_infer", iters, || {
        let (y, ledger) = engine.infer(&ds.inputs[0])?;
        Ok((y, ledger.total_sop()))
    })?);
    let tcfg = TrainConfig::default();
    let mut m = model.clone();
    let mut state = OptimState::new(&m.params, &tcfg);
    let refs: Vec<&Tensor> = ds.inputs.iter().collect();
    let labels: Vec<usize> = ds.labels.iter().map(|&y| y % cfg.num_classes).collect();
    rows.push(time("train_step_batch8", iters, || {
        Ok((train_step(&mut m, &refs, &labels, 0.1, &mut state, 0.0)?, 0))
    })?);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_reports_every_kernel_with_stable_counts() {
        let cfg = ModelConfig {
            height: 8,
            width: 8,
            ..ModelConfig::toy(1, 16)
        };
        let a = run_bench(&cfg, 1, 7).unwrap();
        let b = run_bench(&cfg, 1, 7).unwrap();
        assert_eq!(a.len(), 7);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!((&x.name, x.sop), (&y.name, y.sop));
        }
        let sop = |n: &str| a.iter().find(|r| r.name == n).unwrap().sop;
        assert!(sop("dbssa_masked_sparse") <= sop("dbssa_unmasked"));
        assert_eq!(sop("dbssa_masked_sparse"), sop("dbssa_masked_dense"));
    }
}
