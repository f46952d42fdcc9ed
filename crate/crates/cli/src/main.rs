use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use discrete_grad::analysis::{
    bias_variance_rows, bias_variance_sweep, gap_rows, gradient_gap_sweep, mean_gaps, schedule_csv, schedule_grid,
};
use discrete_grad::config::{merge, ExperimentConfig, Preset};
use discrete_grad::csv::{aggregate_rows, cell_rows, emit_csv, format_f64, CsvRow, SeedField};
use discrete_grad::data::DatasetHandle;
use discrete_grad::experiments::{aggregate, best, run_grid};
use discrete_grad::selftest;
use discrete_grad::train::train;
use discrete_grad::Error;

#[derive(Parser)]
#[command(name = "discrete-grad", version, about = "Decoupled ST-GS training, grids and gradient-fidelity analyses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a single model.
    Train(Common),
    /// Sweep the (tau_f, tau_b, seed) grid.
    Grid(Common),
    /// Relative bias and spread of estimator gradients against the exact gradient.
    BiasVariance(Common),
    /// Gradient gap between the relaxed and straight-through paths.
    GradientGap(Common),
    /// Temperature-schedule matrix.
    ScheduleGrid(Common),
    /// Finite-difference, collapse, marginal and exact-gradient suites on synthetic data.
    Selftest(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config merged over the preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    dataset: Option<DatasetArg>,
    /// Training images (MNIST prefix or synthetic count).
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Mnist,
    Synthetic,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    #[value(name = "binary_ae")]
    BinaryAe,
    #[value(name = "vae_8x4")]
    Vae8x4,
    #[value(name = "vae_16x12")]
    Vae16x12,
}

enum Failure {
    Usage(String),
    Check(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(e.into())
    }
}

impl Failure {
    fn kind_and_code(&self) -> (&'static str, u8) {
        match self {
            Failure::Check(_) => ("check_failed", 1),
            Failure::Usage(_) => ("usage", 2),
            Failure::Core(e) => match e {
                Error::Config(_) | Error::Json(_) | Error::EnumerationCap { .. } => ("config", 3),
                Error::MissingDataset(_)
                | Error::BadMagic { .. }
                | Error::Truncated { .. }
                | Error::CountMismatch { .. }
                | Error::EmptySplit(_) => ("dataset", 4),
                Error::Io(_) | Error::Csv(_) | Error::Checkpoint(_) => ("io", 5),
                _ => ("runtime", 6),
            },
        }
    }

    fn message(&self) -> String {
        match self {
            Failure::Usage(m) | Failure::Check(m) => m.clone(),
            Failure::Core(e) => e.to_string(),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(Failure::Usage(e.to_string().lines().next().unwrap_or("").to_string())),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => report(f),
    }
}

fn report(f: Failure) -> ExitCode {
    let (kind, code) = f.kind_and_code();
    let line = json!({"error": kind, "exit_code": code, "message": f.message().replace('\n', " ")});
    eprintln!("{line}");
    ExitCode::from(code)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Train(c) => cmd_train(&c),
        Command::Grid(c) => cmd_grid(&c),
        Command::BiasVariance(c) => cmd_bias_variance(&c),
        Command::GradientGap(c) => cmd_gradient_gap(&c),
        Command::ScheduleGrid(c) => cmd_schedule_grid(&c),
        Command::Selftest(c) => cmd_selftest(&c),
    }
}

/// Config file, then flags, merged over the preset.
fn resolve(common: &Common, default_preset: Preset) -> Result<ExperimentConfig, Failure> {
    let mut patch = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => json!({}),
    };
    if !patch.is_object() {
        return Err(Error::Config("config must be a JSON object".into()).into());
    }
    let mut flags = json!({});
    if let Some(p) = common.preset {
        let name = match p {
            PresetArg::BinaryAe => "binary_ae",
            PresetArg::Vae8x4 => "vae_8x4",
            PresetArg::Vae16x12 => "vae_16x12",
        };
        flags["preset"] = json!(name);
    }
    if let Some(w) = common.workers {
        flags["workers"] = json!(w);
    }
    if let Some(s) = common.seed {
        flags["run"]["seed"] = json!(s);
        for section in ["grid", "gradient_gap", "schedule_grid"] {
            flags[section]["seeds"] = json!([s]);
        }
    }
    if let Some(d) = common.dataset {
        flags["run"]["dataset"]["id"] = json!(match d {
            DatasetArg::Mnist => "mnist",
            DatasetArg::Synthetic => "synthetic",
        });
    }
    if let Some(n) = common.subset {
        flags["run"]["dataset"]["subset"] = json!(n);
    }
    merge(&mut patch, flags);
    Ok(ExperimentConfig::from_json(patch, default_preset)?)
}

fn run_dir(common: &Common, name: &str) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| Path::new("runs").join(name));
    std::fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn prepare(common: &Common, name: &str, preset: Preset) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let cfg = resolve(common, preset)?;
    let dir = run_dir(common, name)?;
    write_json(&dir.join("config.json"), &cfg)?;
    Ok((cfg, dir))
}

fn load_data(cfg: &ExperimentConfig) -> Result<DatasetHandle, Failure> {
    Ok(cfg.run.dataset.load(&cfg.data_root())?)
}

fn cmd_train(common: &Common) -> Result<(), Failure> {
    let (cfg, dir) = prepare(common, "train", Preset::BinaryAe)?;
    let data = load_data(&cfg)?;
    let result = train(&cfg.run, &data)?;
    result.params.save(&dir.join("checkpoint.bin"))?;

    let (tf, tb) = cfg.run.estimator.temperatures(0);
    let seed = SeedField::Seed(cfg.run.seed);
    let v = &result.final_validation;
    let mut rows = vec![CsvRow::new(tf, tb, seed, "final_val_loss", v.reconstruction)];
    if let Some(kl) = v.kl {
        rows.push(CsvRow::new(tf, tb, seed, "final_val_kl", kl));
    }
    rows.push(CsvRow::new(tf, tb, seed, "final_val_total", v.total));
    if let Some(e) = result.epochs.last() {
        rows.push(CsvRow::new(tf, tb, seed, "final_train_loss", e.train_loss));
    }
    rows.push(CsvRow::new(tf, tb, seed, "runtime_seconds", result.wall_clock_seconds));
    emit_csv(&rows, &dir.join("results.csv"))?;

    let mut curve = String::from("epoch,train_loss,val_reconstruction,val_kl,val_total\n");
    for e in &result.epochs {
        let (r, kl, t) = match e.validation {
            Some(v) => (format_f64(v.reconstruction), v.kl.map(format_f64).unwrap_or_default(), format_f64(v.total)),
            None => Default::default(),
        };
        curve.push_str(&format!("{},{},{r},{kl},{t}\n", e.epoch, format_f64(e.train_loss)));
    }
    std::fs::write(dir.join("curve.csv"), curve)?;
    write_json(&dir.join("summary.json"), &result)?;
    println!(
        "final validation {:.6} after {} steps ({:.1}s) -> {}",
        v.total,
        result.steps,
        result.wall_clock_seconds,
        dir.display()
    );
    Ok(())
}

fn cmd_grid(common: &Common) -> Result<(), Failure> {
    let (cfg, dir) = prepare(common, "grid", Preset::BinaryAe)?;
    let data = load_data(&cfg)?;
    let results = run_grid(&cfg.grid(), &data, cfg.workers)?;
    let aggs = aggregate(&results);
    let mut rows = cell_rows(&results);
    rows.extend(aggregate_rows(&aggs));
    emit_csv(&rows, &dir.join("results.csv"))?;

    let pick = |a: Option<&discrete_grad::experiments::Aggregate>| {
        a.map(|a| json!({"tau_f": a.tau_forward, "tau_b": a.tau_backward, "mean": a.mean, "std": a.std}))
    };
    let failed: Vec<Value> = results
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| json!({"tau_f": r.tau_forward, "tau_b": r.tau_backward, "seed": r.seed, "error": r.error}))
        .collect();
    let summary = json!({
        "cells": results.len(),
        "failed": failed,
        "best": pick(best(&aggs, "final_val_loss", |_| true)),
        "best_diagonal": pick(best(&aggs, "final_val_loss", |a| a.tau_forward == a.tau_backward)),
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{} cells, {} failed -> {}", results.len(), failed.len(), dir.display());
    Ok(())
}

fn cmd_bias_variance(common: &Common) -> Result<(), Failure> {
    let (cfg, dir) = prepare(common, "bias-variance", Preset::Vae8x4)?;
    let data = load_data(&cfg)?;
    let (report, params) = bias_variance_sweep(&cfg.run, &cfg.bias_variance, &data, cfg.workers)?;
    if cfg.bias_variance.checkpoint.is_none() {
        params.save(&dir.join("checkpoint.bin"))?;
    }
    emit_csv(&bias_variance_rows(&report), &dir.join("results.csv"))?;
    let stats: Vec<Value> = report
        .stats
        .iter()
        .map(|s| {
            json!({"tau_f": s.tau_forward, "tau_b": s.tau_backward, "relative_bias": s.relative_bias,
                   "relative_std": s.relative_std, "n_draws": s.n_draws})
        })
        .collect();
    let summary = json!({
        "snapshot_seed": report.snapshot_seed,
        "snapshot_steps": report.snapshot_steps,
        "snapshot_validation": report.snapshot_validation,
        "exact_grad_norm": report.exact_grad_norm,
        "stats": stats,
    });
    write_json(&dir.join("summary.json"), &summary)?;
    println!("{} pairs, |exact grad| {:.3e} -> {}", report.stats.len(), report.exact_grad_norm, dir.display());
    Ok(())
}

fn cmd_gradient_gap(common: &Common) -> Result<(), Failure> {
    let (cfg, dir) = prepare(common, "gradient-gap", Preset::BinaryAe)?;
    let data = load_data(&cfg)?;
    let cells = gradient_gap_sweep(&cfg.run, &cfg.gradient_gap, &data, cfg.workers)?;
    emit_csv(&gap_rows(&cells), &dir.join("results.csv"))?;
    let means: Vec<Value> = mean_gaps(&cells)
        .into_iter()
        .map(|(f, b, m, s, n)| json!({"tau_f": f, "tau_b": b, "gap_mean": m, "gap_std": s, "seeds": n}))
        .collect();
    write_json(&dir.join("summary.json"), &json!({"cells": cells, "mean_gaps": means}))?;
    println!("{} cells -> {}", cells.len(), dir.display());
    Ok(())
}

fn cmd_schedule_grid(common: &Common) -> Result<(), Failure> {
    let (cfg, dir) = prepare(common, "schedule-grid", Preset::Vae8x4)?;
    let data = load_data(&cfg)?;
    let cells = schedule_grid(&cfg.run, &cfg.schedule_grid, &data, cfg.workers)?;
    std::fs::write(dir.join("results.csv"), schedule_csv(&cells)?)?;
    let failed = cells.iter().filter(|c| c.error.is_some()).count();
    write_json(&dir.join("summary.json"), &json!({"cells": cells, "failed": failed}))?;
    println!("{} cells, {failed} failed -> {}", cells.len(), dir.display());
    Ok(())
}

fn cmd_selftest(common: &Common) -> Result<(), Failure> {
    let seed = common.seed.unwrap_or(0);
    let dir = run_dir(common, "selftest")?;
    write_json(&dir.join("config.json"), &json!({"seed": seed}))?;
    let report = selftest::run_all(seed);
    let mut csv = String::from("check,passed,cases,seconds\n");
    for c in &report.checks {
        println!("{} {} ({} cases, {:.2}s) {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.cases, c.seconds, c.detail);
        csv.push_str(&format!("{},{},{},{}\n", c.name, c.passed, c.cases, format_f64(c.seconds)));
    }
    std::fs::write(dir.join("results.csv"), csv)?;
    write_json(&dir.join("summary.json"), &report)?;
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Check(format!("failed checks: {}", failed.join(" "))))
    }
}
