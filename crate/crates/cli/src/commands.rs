use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use burst_vit::attention::build_adjacency;
use burst_vit::bench::run_bench;
use burst_vit::config::RunConfig;
use burst_vit::data::{load_cifar_batch, load_event_dataset, synth_dataset, Dataset, SynthSpec};
use burst_vit::energy::{complexity_from_ledger, energy_from_counts, to_microjoules, ComplexityReport, EnergyLedger};
use burst_vit::model::{build_model, Engine, EvalReport, Model};
use burst_vit::report::{bar_chart_svg, line_chart_svg, write_json, write_text, Series, Table};
use burst_vit::train::{fit, EpochMetrics};
use burst_vit::Error;

use crate::args::{AdjacencyArgs, BenchArgs, DataArgs, DatasetKind, EnergyArgs, EvalArgs, RunArgs, SweepArgs, TrainArgs};

/// Exit status classes: usage/config problems exit 2, everything else 1.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } | Error::Usage(_) | Error::Mismatch(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Loads the config (or the built-in default), applies overrides and the
/// seed, creates the output directory and echoes the result into it.
fn effective_config(run: &RunArgs) -> Result<RunConfig, Failure> {
    let base = match &run.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io { .. } | Error::Json(_) => usage(format!("--config {}: {e}", p.display())),
            other => other.into(),
        })?,
        None => RunConfig::toy(),
    };
    let mut cfg = base.apply_overrides(&run.overrides)?;
    if let Some(seed) = run.seed {
        cfg.model.seed = seed;
    }
    cfg.validate()?;
    fs::create_dir_all(&run.out).map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", run.out.display())))?;
    cfg.save(&run.out.join("config.json"))?;
    Ok(cfg)
}

fn need_path(data: &DataArgs) -> Result<&PathBuf, Failure> {
    data.data_path
        .as_ref()
        .ok_or_else(|| usage(format!("--data-path is required for --dataset {:?}", data.dataset).to_lowercase()))
}

fn load_dataset(data: &DataArgs, cfg: &RunConfig) -> Result<Dataset, Failure> {
    let m = &cfg.model;
    let ds = match data.dataset {
        DatasetKind::Synth if data.samples == 0 => return Err(Failure::Runtime("dataset is empty".into())),
        DatasetKind::Synth => synth_dataset(&SynthSpec {
            classes: m.num_classes,
            samples: data.samples,
            channels: m.in_channels,
            height: m.height,
            width: m.width,
            noise: 0.1,
            jitter: (m.height.min(m.width) / 8).max(1),
            seed: m.seed,
        })?,
        DatasetKind::Cifar => load_cifar_batch(need_path(data)?)?,
        DatasetKind::Events => {
            let dir = need_path(data)?;
            if m.in_channels != 2 {
                return Err(usage(format!(
                    "--dataset events yields 2 polarity channels but in_channels = {}",
                    m.in_channels
                )));
            }
            load_event_dataset(dir, m.width, m.height, m.timesteps, data.event_cap)?
        }
        DatasetKind::Manifest => Dataset::load(need_path(data)?)?,
    };
    if ds.is_empty() {
        return Err(Failure::Runtime("dataset is empty".into()));
    }
    if ds.labels.iter().any(|&y| y >= m.num_classes) {
        return Err(usage(format!(
            "dataset labels exceed num_classes = {} of the model",
            m.num_classes
        )));
    }
    Ok(Dataset::new(ds.inputs, ds.labels, m.num_classes)?)
}

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn write_metrics_line(w: &mut impl Write, m: &EpochMetrics, path: &Path) -> Result<(), Failure> {
    let line = serde_json::to_string(m).map_err(|e| Failure::Runtime(e.to_string()))?;
    writeln!(w, "{line}").map_err(|e| io_err(path, e))
}

fn learning_curves(history: &[EpochMetrics]) -> String {
    let series = |label: &str, f: fn(&EpochMetrics) -> f64| Series {
        label: label.into(),
        points: history.iter().map(|m| (m.epoch as f64, f(m))).collect(),
    };
    line_chart_svg(
        "Training",
        "epoch",
        "value",
        &[series("loss", |m| m.loss), series("accuracy", |m| m.acc)],
    )
}

#[derive(Serialize)]
struct TrainSummary {
    param_count: usize,
    epochs_run: usize,
    final_metrics: Option<EpochMetrics>,
}

pub fn train(a: &TrainArgs) -> Outcome {
    let cfg = effective_config(&a.run)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let out = &a.run.out;
    let log_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&log_path).map_err(|e| io_err(&log_path, e))?);
    let every = cfg.train.checkpoint_every;
    let mut sink_error = None;
    let fitted = fit(&cfg, &ds, |m, model| {
        if let Err(e) = write_metrics_line(&mut log, m, &log_path) {
            sink_error = Some(e);
            return Err(Error::Usage("metrics sink failed".into()));
        }
        if every > 0 && (m.epoch + 1) % every == 0 {
            model.save_checkpoint(&out.join(format!("checkpoints/epoch_{:04}", m.epoch + 1)), &cfg)?;
        }
        Ok(())
    });
    if let Some(e) = sink_error {
        return Err(e);
    }
    let fitted = fitted?;
    log.flush().map_err(|e| io_err(&log_path, e))?;
    fitted.model.save_checkpoint(&out.join("checkpoint"), &cfg)?;
    write_text(&out.join("training.svg"), &learning_curves(&fitted.history))?;
    let summary = TrainSummary {
        param_count: fitted.model.param_count(),
        epochs_run: fitted.history.len(),
        final_metrics: fitted.history.last().cloned(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    if let Some(m) = &summary.final_metrics {
        println!(
            "trained {} epochs: loss {:.4}, train accuracy {:.4} ({} parameters)",
            summary.epochs_run, m.loss, m.acc, summary.param_count
        );
    }
    Ok(())
}

/// Loads checkpoint weights under the effective model config. The layout
/// must match; behavioural fields (mask, levels) may differ.
fn load_for(cfg: &RunConfig, checkpoint: &Path) -> Result<Model, Failure> {
    let (saved, _) = Model::load_checkpoint(checkpoint)?;
    if saved.model != cfg.model {
        log::warn!("model config differs from the checkpoint's; loading weights under the effective config");
    }
    Ok(Model::load_weights(checkpoint, &cfg.model)?)
}

#[derive(Serialize)]
struct ClassCount {
    class: usize,
    correct: usize,
    total: usize,
}

#[derive(Serialize)]
struct EvalJson {
    accuracy: f64,
    correct: usize,
    samples: usize,
    per_class: Vec<ClassCount>,
    confusion: Vec<Vec<usize>>,
}

fn eval_json(r: &EvalReport) -> EvalJson {
    EvalJson {
        accuracy: r.accuracy(),
        correct: r.correct,
        samples: r.samples,
        per_class: r
            .per_class_correct()
            .into_iter()
            .zip(r.per_class_total())
            .enumerate()
            .map(|(class, (correct, total))| ClassCount { class, correct, total })
            .collect(),
        confusion: r.confusion.clone(),
    }
}

pub fn eval(a: &EvalArgs) -> Outcome {
    let mut run = RunArgs {
        config: a.run.config.clone(),
        overrides: a.run.overrides.clone(),
        seed: a.run.seed,
        out: a.run.out.clone(),
    };
    if run.config.is_none() {
        run.config = Some(a.checkpoint.join("config.json"));
    }
    let cfg = effective_config(&run)?;
    let model = load_for(&cfg, &a.checkpoint)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let report = model.compile()?.evaluate(&ds)?;
    let j = eval_json(&report);
    write_json(&a.run.out.join("eval.json"), &j)?;
    let mut t = Table::new(["class", "correct", "total"]);
    for c in &j.per_class {
        t.push([c.class.to_string(), c.correct.to_string(), c.total.to_string()])?;
    }
    t.write_csv(&a.run.out.join("eval_per_class.csv"))?;
    println!("top-1 accuracy: {:.4} ({}/{})", j.accuracy, j.correct, j.samples);
    print!("{}", t.to_text());
    Ok(())
}

#[derive(Serialize)]
struct SweepRow {
    level: u32,
    train_accuracy: f64,
    eval_accuracy: f64,
    epochs_run: usize,
}

pub fn sweep_burst(a: &SweepArgs) -> Outcome {
    if a.levels.is_empty() {
        return Err(usage("--levels needs at least one level"));
    }
    if let Some(&l) = a.levels.iter().find(|&&l| l == 0) {
        return Err(usage(format!("--levels: burst level {l} must be at least 1")));
    }
    let mut seen = std::collections::BTreeSet::new();
    if let Some(&d) = a.levels.iter().find(|&&l| !seen.insert(l)) {
        return Err(usage(format!("--levels: duplicate burst level {d}")));
    }
    let cfg = effective_config(&a.run)?;
    let ds = load_dataset(&a.data, &cfg)?;
    let held_out = match a.data.dataset {
        DatasetKind::Synth => {
            let mut c = cfg.clone();
            c.model.seed = cfg.model.seed.wrapping_add(1);
            load_dataset(&a.data, &c)?
        }
        _ => ds.clone(),
    };
    let mut rows = Vec::new();
    for &level in &a.levels {
        let mut c = cfg.clone();
        c.model.n_max = level;
        // Same epoch budget for every level; early stopping would confound the comparison.
        c.train.target_accuracy = None;
        let fitted = fit(&c, &ds, |_, _| Ok(()))?;
        let eval = fitted.model.compile()?.evaluate(&held_out)?;
        let last = fitted.history.last().map_or(0.0, |m| m.acc);
        log::info!("level {level}: train {last:.4}, eval {:.4}", eval.accuracy());
        rows.push(SweepRow {
            level,
            train_accuracy: last,
            eval_accuracy: eval.accuracy(),
            epochs_run: fitted.history.len(),
        });
    }
    let mut t = Table::new(["level", "train_accuracy", "eval_accuracy", "epochs_run"]);
    for r in &rows {
        t.push([
            r.level.to_string(),
            format!("{:.4}", r.train_accuracy),
            format!("{:.4}", r.eval_accuracy),
            r.epochs_run.to_string(),
        ])?;
    }
    let out = &a.run.out;
    t.write_csv(&out.join("sweep.csv"))?;
    write_json(&out.join("sweep.json"), &rows)?;
    let labels: Vec<String> = rows.iter().map(|r| r.level.to_string()).collect();
    let values: Vec<f64> = rows.iter().map(|r| r.eval_accuracy).collect();
    write_text(
        &out.join("sweep.svg"),
        &bar_chart_svg("Accuracy by burst level", "burst level", "accuracy", &labels, &values),
    )?;
    print!("{}", t.to_text());
    Ok(())
}

#[derive(Clone, Serialize)]
struct LayerMean {
    layer: String,
    sop: f64,
    sign: f64,
    mac: f64,
}

#[derive(Clone, Serialize)]
struct EnergyJson {
    variant: String,
    samples: usize,
    mean_sop: f64,
    mean_sign: f64,
    mean_mac: f64,
    energy_uj: f64,
    mean_aggregation_ac: f64,
    mean_aggregation_ac_dense: f64,
    layers: Vec<LayerMean>,
    complexity: ComplexityReport,
}

fn profile(engine: &Engine, ds: &Dataset, variant: &str) -> Result<EnergyJson, Failure> {
    let outs = engine.infer_batch(&ds.inputs)?;
    let mut ledger = EnergyLedger::new();
    for (_, l) in &outs {
        ledger.merge(l);
    }
    let n = ds.len() as f64;
    let mean_sop = ledger.total_sop() as f64 / n;
    let mean_sign = ledger.total_sign() as f64 / n;
    Ok(EnergyJson {
        variant: variant.into(),
        samples: ds.len(),
        mean_sop,
        mean_sign,
        mean_mac: ledger.total_mac() as f64 / n,
        energy_uj: to_microjoules(energy_from_counts(mean_sop, mean_sign)),
        mean_aggregation_ac: ledger.total_aggregation_ac() as f64 / n,
        mean_aggregation_ac_dense: ledger.total_aggregation_ac_dense() as f64 / n,
        layers: ledger
            .records()
            .iter()
            .map(|r| LayerMean {
                layer: r.layer.clone(),
                sop: r.sop as f64 / n,
                sign: r.sign as f64 / n,
                mac: r.mac as f64 / n,
            })
            .collect(),
        complexity: complexity_from_ledger(&ledger),
    })
}

fn millions(v: f64) -> String {
    format!("{:.2}M", v / 1e6)
}

fn summary_row(t: &mut Table, e: &EnergyJson) -> Result<(), Failure> {
    t.push([
        e.variant.clone(),
        millions(e.mean_sop),
        millions(e.mean_sign),
        format!("{:.2}", e.energy_uj),
    ])?;
    Ok(())
}

pub fn energy(a: &EnergyArgs) -> Outcome {
    let cfg = effective_config(&a.run)?;
    let out = &a.run.out;
    let mut summary = Table::new(["model", "#Sops", "#Sign", "Energy (uJ)"]);
    if let Some(r) = &a.replay {
        let [sop, sign] = r[..] else {
            return Err(usage("--replay takes SOP,SIGN"));
        };
        let uj = to_microjoules(energy_from_counts(sop, sign));
        summary.push(["replay".to_string(), millions(sop), millions(sign), format!("{uj:.2}")])?;
        #[derive(Serialize)]
        struct Replay {
            sop: f64,
            sign: f64,
            energy_uj: f64,
        }
        write_json(&out.join("energy.json"), &Replay { sop, sign, energy_uj: uj })?;
        summary.write_csv(&out.join("energy.csv"))?;
        print!("{}", summary.to_text());
        return Ok(());
    }
    let model = match &a.checkpoint {
        Some(dir) => load_for(&cfg, dir)?,
        None => {
            log::warn!("no --checkpoint given; profiling a freshly initialized model");
            build_model(&cfg.model)?
        }
    };
    let mut ds = load_dataset(&a.data, &cfg)?;
    if let Some(k) = a.limit {
        if k == 0 {
            return Err(usage("--limit must be positive"));
        }
        ds = ds.select(&(0..k.min(ds.len())).collect::<Vec<_>>());
    }
    let mut reports = vec![profile(&model.compile()?, &ds, "model")?];
    if a.compare_mask {
        let mut masked = model.clone();
        masked.config.mask_enabled = true;
        masked.config.mask_blocks = None;
        let mut dense = model.clone();
        dense.config.mask_enabled = false;
        dense.config.mask_blocks = None;
        reports = vec![
            profile(&masked.compile()?, &ds, "masked")?,
            profile(&dense.compile()?, &ds, "unmasked")?,
        ];
    }
    let mut layers = Table::new(["variant", "layer", "sop", "sign", "mac"]);
    for r in &reports {
        summary_row(&mut summary, r)?;
        for l in &r.layers {
            layers.push([
                r.variant.clone(),
                l.layer.clone(),
                format!("{:.1}", l.sop),
                format!("{:.1}", l.sign),
                format!("{:.1}", l.mac),
            ])?;
        }
    }
    summary.write_csv(&out.join("energy.csv"))?;
    layers.write_csv(&out.join("energy_layers.csv"))?;
    write_json(&out.join("energy.json"), &reports)?;
    let labels: Vec<String> = reports.iter().map(|r| r.variant.clone()).collect();
    let values: Vec<f64> = reports.iter().map(|r| r.energy_uj).collect();
    write_text(
        &out.join("energy.svg"),
        &bar_chart_svg("Energy per image", "variant", "energy (uJ)", &labels, &values),
    )?;
    println!("per-image means over {} samples", ds.len());
    print!("{}", layers.to_text());
    println!();
    print!("{}", summary.to_text());
    Ok(())
}

fn parse_grid(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || usage(format!("--grid `{s}` is not HxW"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

#[derive(Serialize)]
struct AdjacencyJson {
    grid: (usize, usize),
    tokens: usize,
    nnz: u64,
    max_row_nnz: usize,
    row_sum_histogram: BTreeMap<usize, usize>,
}

pub fn adjacency_dump(a: &AdjacencyArgs) -> Outcome {
    let cfg = effective_config(&a.run)?;
    let (h, w) = match &a.grid {
        Some(g) => parse_grid(g)?,
        None => cfg.model.grid(),
    };
    let mask = build_adjacency(h, w).map_err(|e| usage(format!("--grid: {e}")))?;
    let path = a.run.out.join("adjacency.bits");
    let mut f = BufWriter::new(File::create(&path).map_err(|e| io_err(&path, e))?);
    mask.write_portable(&mut f).map_err(|e| io_err(&path, e))?;
    f.flush().map_err(|e| io_err(&path, e))?;
    let mut hist = BTreeMap::new();
    for i in 0..mask.tokens() {
        *hist.entry(mask.row_nnz(i)).or_insert(0) += 1;
    }
    let j = AdjacencyJson {
        grid: (h, w),
        tokens: mask.tokens(),
        nnz: mask.nnz(),
        max_row_nnz: mask.max_row_nnz(),
        row_sum_histogram: hist,
    };
    write_json(&a.run.out.join("adjacency.json"), &j)?;
    println!(
        "grid {h}x{w}: {} tokens, {} nonzeros, row sums {:?}",
        j.tokens, j.nnz, j.row_sum_histogram
    );
    Ok(())
}

pub fn bench(a: &BenchArgs) -> Outcome {
    let cfg = effective_config(&a.run)?;
    let rows = run_bench(&cfg.model, a.iters, cfg.model.seed)?;
    let mut t = Table::new(["kernel", "iters", "mean_us", "sop"]);
    for r in &rows {
        t.push([r.name.clone(), r.iters.to_string(), format!("{:.1}", r.mean_us), r.sop.to_string()])?;
    }
    t.write_csv(&a.run.out.join("bench.csv"))?;
    write_json(&a.run.out.join("bench.json"), &rows)?;
    print!("{}", t.to_text());
    Ok(())
}
