//! Acceptance criteria. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use burst_vit::attention::{
    build_adjacency, dbssa_aggregate, dbssa_forward, dbssa_forward_path, ssa_attend, AdjacencyMask, MaskPath,
    SpikeProjections,
};
use burst_vit::config::{ModelConfig, RunConfig, TrainConfig};
use burst_vit::data::{synth_dataset, Dataset, SynthSpec};
use burst_vit::energy::{energy_from_counts, to_microjoules, LayerRecord};
use burst_vit::model::build_model;
use burst_vit::neuron::{
    binary_lif_step, burst_lif_step, MembraneState, NeuronLayer, NeuronParams, SurrogateSpec,
};
use burst_vit::tensor::{matmul_addonly, matmul_float, IntTensor, Tensor};
use burst_vit::train::{
    adamw_step, batch_gradients, fit, grad_check_point, gradient_check, GradCheckSpec, OptimState, Schedule,
    GRAD_CHECK_SHARPNESS, GRAD_CHECK_SURROGATE_WIDTH,
};
use burst_vit::trap::multiply_trap;

const ENERGY_TOL_UJ: f64 = 0.01;
const ADDONLY_CASES: usize = 1000;
const ADDONLY_MAX_DIM: usize = 16;
const ADDONLY_MAX_SPIKE: i32 = 20;
const EXPANSION_CASES: usize = 1000;
const MASK_CASES: usize = 100;
const MASK_RATIO_SLACK: f64 = 1.1;
const REDUCTION_CASES: usize = 100;
const GRAD_EPS: f64 = 1e-3;
const GRAD_TOL: f64 = 1e-3;
const GRAD_PROBES: usize = 200;
const LEARN_SAMPLES: usize = 500;
const LEARN_EPOCHS: usize = 200;
const LEARN_TARGET: f64 = 0.95;
const OVERFIT_STEPS: usize = 35;
const OVERFIT_WARMUP: usize = 5;
const OVERFIT_LR: f64 = 3e-3;
const OVERFIT_MIN_FRACTION: f64 = 0.9;
const NEURON_STEPS: usize = 10_000;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn spikes(rng: &mut ChaCha8Rng, shape: &[usize], max: i32, rate: f64) -> IntTensor {
    IntTensor::from_fn(shape, |_| if rng.random_bool(rate) { rng.random_range(1..=max) } else { 0 })
}

fn c1_energy_rows() -> Outcome {
    let rows = [
        (178.78e6, 0.22e6, 14.58),
        (255.03e6, 0.26e6, 20.59),
        (513.82e6, 0.54e6, 41.58),
        (204.88e6, 0.23e6, 16.64),
        (411.43e6, 0.47e6, 33.44),
    ];
    let mut misses = Vec::new();
    let mut worst: f64 = 0.0;
    for (i, (sop, sign, published)) in rows.into_iter().enumerate() {
        let uj = to_microjoules(energy_from_counts(sop, sign));
        let err = (uj - published).abs();
        worst = worst.max(err);
        if err > ENERGY_TOL_UJ + 1e-12 {
            misses.push(format!("row {}: {uj:.3} vs {published}", i + 1));
        }
    }
    check(
        misses.is_empty(),
        format!("max |err| {worst:.4} uJ (tol {ENERGY_TOL_UJ}); misses: [{}]", misses.join("; ")),
    )
}

fn c2_addition_only() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..ADDONLY_CASES {
        let (m, k, p) = (
            rng.random_range(1..=ADDONLY_MAX_DIM),
            rng.random_range(1..=ADDONLY_MAX_DIM),
            rng.random_range(1..=ADDONLY_MAX_DIM),
        );
        let s = spikes(&mut rng, &[m, k], ADDONLY_MAX_SPIKE, 0.5);
        let w = Tensor::from_fn(&[k, p], |_| rng.random_range(-1.0f32..1.0));
        let add = matmul_addonly(&s, &w, &mut LayerRecord::default()).map_err(|e| e.to_string())?;
        let float = matmul_float(&s.to_float(), &w).map_err(|e| e.to_string())?;
        if add != float {
            return Err(format!("case {case} ({m}x{k}x{p}) differs"));
        }
    }
    let cfg = ModelConfig::toy(1, 32);
    let engine = build_model(&cfg).and_then(|m| m.compile()).map_err(|e| e.to_string())?;
    let ds = synth_dataset(&SynthSpec::toy(4, 2)).map_err(|e| e.to_string())?;
    let (out, report) = multiply_trap(|| engine.infer(&ds.inputs[0]));
    out.map_err(|e| e.to_string())?;
    check(
        report.violations == 0 && report.kernel_entries > 0,
        format!(
            "{ADDONLY_CASES} instances exact; trap: {} violations over {} kernel entries",
            report.violations, report.kernel_entries
        ),
    )
}

fn c3_expansion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..EXPANSION_CASES {
        let k = rng.random_range(1..=32);
        let s = spikes(&mut rng, &[1, k], ADDONLY_MAX_SPIKE, 0.6);
        let w = Tensor::from_fn(&[k, 1], |_| rng.random_range(-100..=100) as f32);
        let mut literal = 0f64;
        for (&si, &wi) in s.data().iter().zip(w.data()) {
            for _ in 0..si {
                literal += wi as f64;
            }
        }
        let product: i64 = s.data().iter().zip(w.data()).map(|(&si, &wi)| si as i64 * wi as i64).sum();
        let mut rec = LayerRecord::default();
        let got = matmul_addonly(&s, &w, &mut rec).map_err(|e| e.to_string())?.data()[0];
        if got as f64 != literal || literal != product as f64 || rec.sop != s.total() as u64 {
            return Err(format!("case {case}: kernel {got}, literal {literal}, product {product}"));
        }
    }
    Ok(format!("{EXPANSION_CASES} vectors exact"))
}

fn c4_adjacency() -> Outcome {
    for h in 1..=8usize {
        for w in 1..=8usize {
            let m = build_adjacency(h, w).map_err(|e| e.to_string())?;
            let n = h * w;
            for i in 0..n {
                for j in 0..n {
                    let (ri, ci, rj, cj) = (i / w, i % w, j / w, j % w);
                    let cheb = ri.abs_diff(rj).max(ci.abs_diff(cj));
                    if m.get(i, j) != (cheb <= 1) || m.get(i, j) != m.get(j, i) {
                        return Err(format!("{h}x{w}: entry ({i},{j})"));
                    }
                }
                if !m.get(i, i) {
                    return Err(format!("{h}x{w}: diagonal {i}"));
                }
                if h >= 3 && w >= 3 && ![4, 6, 9].contains(&m.row_nnz(i)) {
                    return Err(format!("{h}x{w}: row {i} sums to {}", m.row_nnz(i)));
                }
            }
        }
    }
    Ok("grids 1x1..8x8 match brute force; symmetric, unit diagonal, row sums in {4,6,9}".into())
}

/// Dense similarity, Hadamard with the mask, then aggregation.
fn dense_masked_oracle(p: &SpikeProjections, mask: &AdjacencyMask, heads: usize) -> IntTensor {
    let [t, n, d] = p.q.shape()[..] else { unreachable!() };
    let dh = d / heads;
    let at = |x: &IntTensor, s: usize, i: usize, c: usize| x.data()[(s * n + i) * d + c];
    let mut out = vec![0i32; t * n * d];
    for s in 0..t {
        for h in 0..heads {
            let cs = h * dh..(h + 1) * dh;
            let mut attn = vec![0i32; n * n];
            for i in 0..n {
                for j in 0..n {
                    attn[i * n + j] = cs.clone().map(|c| at(&p.q, s, i, c) * at(&p.k, s, j, c)).sum();
                }
            }
            mask.hadamard(&mut attn);
            for i in 0..n {
                for c in cs.clone() {
                    out[(s * n + i) * d + c] =
                        (0..n).map(|j| attn[i * n + j] * (at(&p.vp, s, j, c) - at(&p.vm_raw, s, j, c))).sum();
                }
            }
        }
    }
    IntTensor::new(&[t, n, d], out).unwrap()
}

fn random_projections(rng: &mut ChaCha8Rng, t: usize, n: usize, d: usize, k_max: i32) -> SpikeProjections {
    SpikeProjections {
        q: spikes(rng, &[t, n, d], 1, 0.3),
        k: spikes(rng, &[t, n, d], k_max, 0.3),
        vp: spikes(rng, &[t, n, d], 1, 0.3),
        vm_raw: spikes(rng, &[t, n, d], 1, 0.3),
    }
}

fn out_neuron() -> NeuronLayer {
    NeuronLayer::burst(NeuronParams::new(0.5, 0.98, 1.0, 4).unwrap())
}

fn c5_masked_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let grids = [(1, 1), (2, 3), (3, 3), (4, 4), (8, 8)];
    for case in 0..MASK_CASES {
        let (gh, gw) = grids[case % grids.len()];
        let heads = [1, 2][rng.random_range(0..2)];
        let (t, d) = (rng.random_range(1..=2), heads * rng.random_range(1..=8));
        let mask = build_adjacency(gh, gw).map_err(|e| e.to_string())?;
        let p = random_projections(&mut rng, t, gh * gw, d, 4);
        let sparse = dbssa_aggregate(&p, Some(&mask), heads, MaskPath::Sparse, &mut LayerRecord::default())
            .map_err(|e| e.to_string())?;
        if sparse != dense_masked_oracle(&p, &mask, heads) {
            return Err(format!("case {case}: sparse aggregate differs from dense-then-Hadamard"));
        }
        let fwd = |path| {
            dbssa_forward_path(&p, Some(&mask), heads, 0.25, path, &mut out_neuron(), &mut LayerRecord::default())
        };
        if fwd(MaskPath::Sparse).map_err(|e| e.to_string())? != fwd(MaskPath::Dense).map_err(|e| e.to_string())? {
            return Err(format!("case {case}: sparse and dense outputs differ"));
        }
    }
    let mut ratios = Vec::new();
    for (side, n) in [(8, 64usize), (16, 256)] {
        let mask = build_adjacency(side, side).map_err(|e| e.to_string())?;
        let p = random_projections(&mut rng, 2, n, 16, 4);
        let mut rec = LayerRecord::default();
        dbssa_aggregate(&p, Some(&mask), 1, MaskPath::Sparse, &mut rec).map_err(|e| e.to_string())?;
        let ratio = rec.aggregation_ac as f64 / rec.aggregation_ac_dense as f64;
        let bound = 9.0 / n as f64 * MASK_RATIO_SLACK;
        if ratio > bound {
            return Err(format!("N={n}: ratio {ratio:.4} > {bound:.4}"));
        }
        ratios.push(format!("N={n} {ratio:.4} <= {bound:.4}"));
    }
    Ok(format!("{MASK_CASES} cases exact; AC ratio {}", ratios.join(", ")))
}

fn c6_ssa_reduction() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for case in 0..REDUCTION_CASES {
        let heads = [1, 2, 4][rng.random_range(0..3)];
        let (t, n, d) = (rng.random_range(1..=3), rng.random_range(1..=12), heads * rng.random_range(1..=6));
        let mut p = random_projections(&mut rng, t, n, d, 1);
        p.vm_raw = IntTensor::zeros(&[t, n, d]);
        let s = rng.random_range(0.05f32..1.0);
        let a = dbssa_forward(&p, None, heads, s, &mut out_neuron(), &mut LayerRecord::default())
            .map_err(|e| e.to_string())?;
        let b = ssa_attend(&p.q, &p.k, &p.vp, heads, s, &mut out_neuron(), &mut LayerRecord::default())
            .map_err(|e| e.to_string())?;
        if a != b {
            return Err(format!("case {case} differs"));
        }
    }
    Ok(format!("{REDUCTION_CASES} cases exact"))
}

fn c7_gradient_check() -> Outcome {
    let cfg = ModelConfig {
        height: 4,
        width: 4,
        stem_pool_stages: 0,
        surrogate: SurrogateSpec::arctan(GRAD_CHECK_SURROGATE_WIDTH),
        seed: 1,
        ..ModelConfig::toy(1, 16)
    };
    if cfg.tokens() != 16 || cfg.timesteps != 2 {
        return Err(format!("network has N={} T={}", cfg.tokens(), cfg.timesteps));
    }
    let mut model = build_model(&cfg).map_err(|e| e.to_string())?;
    grad_check_point(&mut model, 1);
    let xs: Vec<Tensor> = (0..2)
        .map(|i| Tensor::from_fn(&[1, 4, 4], |j| ((i * 7 + j * 13) % 17) as f32 / 8.0 - 1.0))
        .collect();
    let refs: Vec<&Tensor> = xs.iter().collect();
    let spec = GradCheckSpec {
        sharpness: GRAD_CHECK_SHARPNESS,
        eps: GRAD_EPS,
        probes: GRAD_PROBES,
        smoothing: 0.1,
        seed: 7,
    };
    let r = gradient_check(&model, &refs, &[0, 1], &spec).map_err(|e| e.to_string())?;
    let worst = r.probes.iter().max_by(|a, b| a.rel_err.total_cmp(&b.rel_err)).unwrap();
    check(
        r.max_rel_err < GRAD_TOL,
        format!(
            "{GRAD_PROBES} probes, eps {GRAD_EPS}: max rel err {:.2e} at {}[{}] (tol {GRAD_TOL:.0e})",
            r.max_rel_err, worst.param, worst.index
        ),
    )
}

struct LearnRun {
    epochs: usize,
    acc: f64,
    log: Vec<u8>,
}

fn learn(ds: &Dataset, mask: bool) -> Result<LearnRun, String> {
    let mut run = RunConfig::toy();
    run.model.mask_enabled = mask;
    run.train.epochs = LEARN_EPOCHS;
    run.train.target_accuracy = Some(LEARN_TARGET);
    let fitted = fit(&run, ds, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let mut log = Vec::new();
    for m in &fitted.history {
        log.extend(serde_json::to_vec(m).unwrap());
        log.push(b'\n');
    }
    let eval = fitted.model.compile().and_then(|e| e.evaluate(ds)).map_err(|e| e.to_string())?;
    log.extend(format!("eval {} {}\n", eval.correct, eval.samples).bytes());
    Ok(LearnRun {
        epochs: fitted.history.len(),
        acc: fitted.history.last().map_or(0.0, |m| m.acc),
        log,
    })
}

fn overfit_fraction(seed: u64) -> Result<(usize, usize), String> {
    let ds = synth_dataset(&SynthSpec::toy(8, seed)).map_err(|e| e.to_string())?;
    let mut model = build_model(&ModelConfig::toy(1, 32)).map_err(|e| e.to_string())?;
    let cfg = TrainConfig {
        epochs: OVERFIT_STEPS,
        batch_size: 1,
        lr: OVERFIT_LR,
        min_lr: OVERFIT_LR,
        warmup_epochs: OVERFIT_WARMUP,
        cooldown_epochs: 0,
        weight_decay: 0.0,
        label_smoothing: 0.0,
        ..TrainConfig::toy()
    };
    let schedule = Schedule::new(&cfg, 1);
    let mut state = OptimState::new(&model.params, &cfg);
    let mut losses = Vec::new();
    for step in 0..OVERFIT_STEPS {
        let (out, stats) = batch_gradients(&model, &[&ds.inputs[0]], &[ds.labels[0]], 0.0).map_err(|e| e.to_string())?;
        adamw_step(&mut model.params, &out.grads, &mut state, schedule.lr(step)).map_err(|e| e.to_string())?;
        burst_vit::model::update_running_stats(&mut model.params, &stats).map_err(|e| e.to_string())?;
        losses.push(out.loss);
    }
    let after = &losses[OVERFIT_WARMUP..];
    let down = after.windows(2).filter(|w| w[1] < w[0]).count();
    Ok((down, after.len() - 1))
}

fn c8_learning(masked: &LearnRun, unmasked: &LearnRun) -> Outcome {
    let (down, steps) = overfit_fraction(0)?;
    let frac = down as f64 / steps as f64;
    check(
        masked.acc >= LEARN_TARGET && unmasked.acc >= LEARN_TARGET && frac >= OVERFIT_MIN_FRACTION,
        format!(
            "masked {:.3} after {} epochs, unmasked {:.3} after {} epochs (target {LEARN_TARGET}); \
             overfit {down}/{steps} steps decreasing ({frac:.2} >= {OVERFIT_MIN_FRACTION})",
            masked.acc, masked.epochs, unmasked.acc, unmasked.epochs
        ),
    )
}

fn c9_neurons() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let width = 16;
    let random_params = |rng: &mut ChaCha8Rng, beta: Option<f32>| {
        NeuronParams::new(
            beta.unwrap_or_else(|| rng.random_range(0.0..1.0)),
            rng.random_range(0.0..=1.0),
            rng.random_range(0.25..2.0),
            rng.random_range(1..=20),
        )
        .unwrap()
    };
    let current = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[width], |_| rng.random_range(-10.0f32..30.0));
    let mut steps = 0;
    // Ranges and reset sign over long random sequences.
    while steps < NEURON_STEPS {
        let p = random_params(&mut rng, None);
        let (mut burst, mut binary) = (MembraneState::zeros(&[width]), MembraneState::zeros(&[width]));
        for _ in 0..50 {
            let i = current(&mut rng);
            let pre: Vec<f32> = burst.potential.data().iter().zip(i.data()).map(|(&u, &x)| p.beta * u + x).collect();
            let s = burst_lif_step(&mut burst, &i, &p).map_err(|e| e.to_string())?;
            let b = binary_lif_step(&mut binary, &i, &p).map_err(|e| e.to_string())?;
            if s.data().iter().any(|&v| v < 0 || v > p.n_max as i32) {
                return Err(format!("burst out of range: {:?}", s.data()));
            }
            if b.data().iter().any(|&v| v != 0 && v != 1) {
                return Err(format!("binary out of range: {:?}", b.data()));
            }
            for (&u, &q) in burst.potential.data().iter().zip(&pre) {
                if u != 0.0 && u.signum() != q.signum() {
                    return Err(format!("reset inverted sign: {q} -> {u}"));
                }
            }
            steps += 1;
        }
    }
    // Monotonicity in the input current from a shared random state.
    for _ in 0..NEURON_STEPS {
        let p = random_params(&mut rng, None);
        let mut state = MembraneState::zeros(&[width]);
        for _ in 0..rng.random_range(0..4) {
            burst_lif_step(&mut state, &current(&mut rng), &p).map_err(|e| e.to_string())?;
        }
        let lo = current(&mut rng);
        let bump = Tensor::from_fn(&[width], |_| rng.random_range(0.0f32..5.0));
        let hi = Tensor::new(&[width], lo.data().iter().zip(bump.data()).map(|(x, b)| x + b).collect()).unwrap();
        let (mut a, mut b) = (state.clone(), state.clone());
        let sa = burst_lif_step(&mut a, &lo, &p).map_err(|e| e.to_string())?;
        let sb = burst_lif_step(&mut b, &hi, &p).map_err(|e| e.to_string())?;
        let (mut ba, mut bb) = (state.clone(), state);
        let ya = binary_lif_step(&mut ba, &lo, &p).map_err(|e| e.to_string())?;
        let yb = binary_lif_step(&mut bb, &hi, &p).map_err(|e| e.to_string())?;
        if sa.data().iter().zip(sb.data()).any(|(x, y)| y < x) || ya.data().iter().zip(yb.data()).any(|(x, y)| y < x) {
            return Err("more input current lowered the output".into());
        }
    }
    // beta = 0: the membrane carries nothing forward. Two histories that end
    // in the same emission give identical steps; with alpha = 0 any history
    // matches a fresh neuron.
    for k in 0..NEURON_STEPS {
        let alpha_zero = k % 2 == 0;
        let mut p = random_params(&mut rng, Some(0.0));
        if alpha_zero {
            p.alpha = 0.0;
        }
        let mut a = MembraneState::zeros(&[width]);
        let mut b = MembraneState::zeros(&[width]);
        for _ in 0..rng.random_range(1..4) {
            burst_lif_step(&mut a, &current(&mut rng), &p).map_err(|e| e.to_string())?;
        }
        if alpha_zero {
            b = MembraneState::zeros(&[width]);
        } else {
            b.prev_spikes = a.prev_spikes.clone();
            b.potential = Tensor::from_fn(&[width], |_| rng.random_range(-50.0f32..50.0));
        }
        let i = current(&mut rng);
        let sa = burst_lif_step(&mut a, &i, &p).map_err(|e| e.to_string())?;
        let sb = burst_lif_step(&mut b, &i, &p).map_err(|e| e.to_string())?;
        if sa != sb || a.potential != b.potential {
            return Err(format!("beta = 0 step depends on history (alpha {})", p.alpha));
        }
    }
    Ok(format!(
        "{NEURON_STEPS} steps each: ranges, reset sign, monotonicity, beta = 0 memorylessness"
    ))
}

fn c10_determinism(first: &LearnRun, second: &LearnRun) -> Outcome {
    check(
        !first.log.is_empty() && first.log == second.log,
        format!("two seeded train+eval logs of {} bytes identical: {}", first.log.len(), first.log == second.log),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |id: usize, name: &str, start: Instant, r: Outcome| {
        let secs = start.elapsed().as_secs_f64();
        match r {
            Ok(d) => println!("criterion {id:>2} PASS {name} [{secs:.1}s]: {d}"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL {name} [{secs:.1}s]: {d}");
            }
        }
    };
    let t = Instant::now();
    report(1, "energy model reproduces published rows", t, c1_energy_rows());
    let t = Instant::now();
    report(2, "addition-only equivalence and multiply trap", t, c2_addition_only());
    let t = Instant::now();
    report(3, "burst product equals repeated addition", t, c3_expansion());
    let t = Instant::now();
    report(4, "adjacency mask", t, c4_adjacency());
    let t = Instant::now();
    report(5, "masked path equivalence and savings", t, c5_masked_path());
    let t = Instant::now();
    report(6, "dual-channel attention reduces to baseline", t, c6_ssa_reduction());
    let t = Instant::now();
    report(7, "gradient check", t, c7_gradient_check());

    let t = Instant::now();
    let runs = synth_dataset(&SynthSpec::toy(LEARN_SAMPLES, 0)).map_err(|e| e.to_string()).and_then(|ds| {
        let masked = learn(&ds, true)?;
        let unmasked = learn(&ds, false)?;
        let repeat = learn(&ds, true)?;
        Ok((masked, unmasked, repeat))
    });
    match &runs {
        Ok((masked, unmasked, repeat)) => {
            report(8, "desk-scale learning", t, c8_learning(masked, unmasked));
            let t = Instant::now();
            report(9, "neuron contracts", t, c9_neurons());
            report(10, "determinism", t, c10_determinism(masked, repeat));
        }
        Err(e) => {
            report(8, "desk-scale learning", t, Err(e.clone()));
            let t = Instant::now();
            report(9, "neuron contracts", t, c9_neurons());
            report(10, "determinism", t, Err(e.clone()));
        }
    }
    println!("acceptance: {} of 10 criteria failed", failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
