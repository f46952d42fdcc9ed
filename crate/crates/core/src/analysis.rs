//! Gradient-fidelity sweeps and the temperature-schedule matrix.

use std::path::PathBuf;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::csv::{format_f64, CsvRow, SeedField};
use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::estimators::{EstimatorConfig, Interpolation, Schedule};
use crate::experiments::{mean_std, run_grid_with, run_pool, Cell, ExperimentGrid};
use crate::models::ModelParams;
use crate::oracle::{bias_variance, gradient_gap, ExactOracle, GapNorm, GradStats, DEFAULT_DRAWS};
use crate::train::{steps_per_epoch, train, LossReport, RunConfig};

const GAP_STREAM: u64 = 0x0067_6170;

/// τb sweep at τf = 1.6.
pub const TAU_BACKWARD_SWEEP: [f64; 4] = [0.5, 1.0, 1.3, 2.5];
/// τf sweep at τb = 1.3.
pub const TAU_FORWARD_SWEEP: [f64; 4] = [0.5, 1.0, 1.6, 2.5];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasVarianceSettings {
    /// Load the snapshot from here instead of training it from the run config.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    /// Leading validation images forming the analysed batch.
    pub eval_images: usize,
    pub n_draws: usize,
    pub noise_seed: u64,
    /// `[τf, τb]` pairs.
    pub pairs: Vec<[f64; 2]>,
}

impl Default for BiasVarianceSettings {
    fn default() -> Self {
        let mut pairs: Vec<[f64; 2]> = TAU_BACKWARD_SWEEP.iter().map(|&b| [1.6, b]).collect();
        pairs.extend(TAU_FORWARD_SWEEP.iter().filter(|&&f| f != 1.6).map(|&f| [f, 1.3]));
        Self {
            checkpoint: None,
            eval_images: 64,
            n_draws: DEFAULT_DRAWS,
            noise_seed: 0,
            pairs,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BiasVarianceReport {
    pub snapshot_seed: u64,
    pub snapshot_steps: usize,
    pub snapshot_validation: LossReport,
    pub exact_grad_norm: f64,
    pub stats: Vec<GradStats>,
}

impl BiasVarianceReport {
    pub fn find(&self, tau_forward: f64, tau_backward: f64) -> Option<&GradStats> {
        self.stats
            .iter()
            .find(|s| s.tau_forward == tau_forward && s.tau_backward == tau_backward)
    }
}

/// Trains (or loads) the snapshot described by `run`, then measures every pair.
pub fn bias_variance_sweep(
    run: &RunConfig,
    settings: &BiasVarianceSettings,
    data: &DatasetHandle,
    workers: usize,
) -> Result<(BiasVarianceReport, ModelParams)> {
    let (params, steps) = match &settings.checkpoint {
        Some(path) => {
            let p = ModelParams::load(path)?;
            p.check_spec(&run.model)?;
            (p, 0)
        }
        None => {
            let r = train(run, data)?;
            (r.params, r.steps)
        }
    };
    let report = bias_variance_on(run, &params, steps, settings, data, workers)?;
    Ok((report, params))
}

pub fn bias_variance_on(
    run: &RunConfig,
    params: &ModelParams,
    snapshot_steps: usize,
    settings: &BiasVarianceSettings,
    data: &DatasetHandle,
    workers: usize,
) -> Result<BiasVarianceReport> {
    let n = settings.eval_images.min(data.validation_len());
    if n == 0 {
        return Err(Error::EmptySplit("bias/variance batch".into()));
    }
    let x = data.validation.slice_rows(0, n);
    let oracle = ExactOracle::new(&run.model, params, &x)?;
    let exact_grad_norm = oracle.gradient()?.norm();
    let stats = run_pool(settings.pairs.len(), workers, |i| {
        let [tf, tb] = settings.pairs[i];
        let mut rng = ChaCha8Rng::seed_from_u64(settings.noise_seed);
        rng.set_stream(i as u64);
        let cfg = EstimatorConfig::decoupled(tf, tb);
        bias_variance(&oracle, &run.model, params, &x, &cfg, settings.n_draws, &mut rng)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(BiasVarianceReport {
        snapshot_seed: run.seed,
        snapshot_steps,
        snapshot_validation: crate::train::evaluate(&run.model, params, &data.validation)?,
        exact_grad_norm,
        stats,
    })
}

pub fn bias_variance_rows(report: &BiasVarianceReport) -> Vec<CsvRow> {
    let seed = SeedField::Seed(report.snapshot_seed);
    let mut rows = Vec::new();
    for s in &report.stats {
        let (f, b) = (s.tau_forward, s.tau_backward);
        rows.push(CsvRow::new(f, b, seed, "relative_bias", s.relative_bias));
        rows.push(CsvRow::new(f, b, seed, "relative_std", s.relative_std));
        rows.push(CsvRow::new(f, b, seed, "exact_grad_norm", s.exact_grad.norm()));
        rows.push(CsvRow::new(f, b, seed, "mean_grad_norm", s.mean_est.norm()));
        rows.push(CsvRow::new(f, b, seed, "n_draws", s.n_draws as f64));
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapSettings {
    pub tau_forward_values: Vec<f64>,
    pub tau_backward_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub eval_images: usize,
    #[serde(default)]
    pub squared: bool,
}

impl Default for GapSettings {
    fn default() -> Self {
        Self {
            tau_forward_values: vec![0.3],
            tau_backward_values: vec![0.3, 1.0, 3.0, 6.0],
            seeds: (0..5).collect(),
            eval_images: 256,
            squared: false,
        }
    }
}

impl GapSettings {
    pub fn norm(&self) -> GapNorm {
        if self.squared {
            GapNorm::SquaredL2
        } else {
            GapNorm::L2
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapCell {
    pub tau_forward: f64,
    pub tau_backward: f64,
    pub seed: u64,
    pub gap: Option<f64>,
    pub final_val_loss: Option<f64>,
    pub error: Option<String>,
}

/// Gap of a model trained at `cell`, on the leading validation images with the cell's own noise.
pub fn gap_for_params(
    run: &RunConfig,
    params: &ModelParams,
    cell: &Cell,
    settings: &GapSettings,
    data: &DatasetHandle,
) -> Result<f64> {
    let n = settings.eval_images.min(data.validation_len());
    if n == 0 {
        return Err(Error::EmptySplit("gradient-gap batch".into()));
    }
    let x = data.validation.slice_rows(0, n);
    let mut rng = ChaCha8Rng::seed_from_u64(cell.seed);
    rng.set_stream(GAP_STREAM);
    let cfg = EstimatorConfig::decoupled(cell.tau_forward, cell.tau_backward);
    Ok(gradient_gap(&run.model, params, &x, &cfg, &mut rng, cell.seed, settings.norm())?.gap)
}

/// Trains one model per (τf, τb, seed) cell and measures its gradient gap.
pub fn gradient_gap_sweep(
    run: &RunConfig,
    settings: &GapSettings,
    data: &DatasetHandle,
    workers: usize,
) -> Result<Vec<GapCell>> {
    let grid = ExperimentGrid::new(
        settings.tau_forward_values.clone(),
        settings.tau_backward_values.clone(),
        settings.seeds.clone(),
        run.clone(),
    );
    let trained = run_grid_with(&grid, data, workers, true)?;
    Ok(trained
        .into_iter()
        .map(|r| {
            let cell = r.cell();
            let gap = r
                .params
                .as_ref()
                .map(|p| gap_for_params(run, p, &cell, settings, data))
                .transpose();
            let (gap, error) = match gap {
                Ok(g) => (g, r.error.clone()),
                Err(e) => (None, Some(e.to_string())),
            };
            GapCell {
                tau_forward: cell.tau_forward,
                tau_backward: cell.tau_backward,
                seed: cell.seed,
                gap,
                final_val_loss: r.final_val_loss,
                error,
            }
        })
        .collect())
}

/// Mean gap per (τf, τb) over the seeds that produced one.
pub fn mean_gaps(cells: &[GapCell]) -> Vec<(f64, f64, f64, Option<f64>, usize)> {
    let mut out: Vec<(f64, f64, Vec<f64>)> = Vec::new();
    for c in cells {
        let Some(g) = c.gap else { continue };
        match out.iter_mut().find(|(f, b, _)| *f == c.tau_forward && *b == c.tau_backward) {
            Some((_, _, v)) => v.push(g),
            None => out.push((c.tau_forward, c.tau_backward, vec![g])),
        }
    }
    out.into_iter()
        .map(|(f, b, v)| {
            let (m, s) = mean_std(&v);
            (f, b, m, s, v.len())
        })
        .collect()
}

pub fn gap_rows(cells: &[GapCell]) -> Vec<CsvRow> {
    let mut rows = Vec::new();
    for c in cells {
        let seed = SeedField::Seed(c.seed);
        match (c.gap, &c.error) {
            (Some(g), None) => {
                rows.push(CsvRow::new(c.tau_forward, c.tau_backward, seed, "gap", g));
                if let Some(v) = c.final_val_loss {
                    rows.push(CsvRow::new(c.tau_forward, c.tau_backward, seed, "final_val_loss", v));
                }
            }
            _ => rows.push(CsvRow::new(c.tau_forward, c.tau_backward, seed, "failed", 1.0)),
        }
    }
    for (f, b, m, s, _) in mean_gaps(cells) {
        rows.push(CsvRow::new(f, b, SeedField::Agg, "gap_mean", m));
        if let Some(s) = s {
            rows.push(CsvRow::new(f, b, SeedField::Agg, "gap_std", s));
        }
    }
    rows
}

/// Start and end temperature; equal values mean a fixed temperature.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Ramp {
    pub start: f64,
    pub end: f64,
}

impl Ramp {
    pub const fn fixed(t: f64) -> Self {
        Self { start: t, end: t }
    }

    pub const fn ramp(start: f64, end: f64) -> Self {
        Self { start, end }
    }

    fn schedule(&self, total_steps: usize, interpolation: Interpolation) -> Result<Option<Schedule>> {
        if self.start == self.end {
            return Ok(None);
        }
        Schedule::new(self.start, self.end, total_steps, interpolation).map(Some)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulePair {
    pub forward: Ramp,
    pub backward: Ramp,
}

/// The thirteen forward/backward schedule pairs of the scheduling table.
pub fn schedule_table() -> Vec<SchedulePair> {
    let pair = |forward, backward| SchedulePair { forward, backward };
    let (down, one, up) = (Ramp::ramp(1.0, 0.3), Ramp::fixed(1.0), Ramp::ramp(1.0, 2.0));
    let mut out = Vec::new();
    for f in [down, one, up] {
        for b in [down, one, up] {
            out.push(pair(f, b));
        }
    }
    for f in [Ramp::ramp(0.3, 0.03), Ramp::ramp(0.3, 2.0)] {
        for b in [Ramp::ramp(5.0, 3.0), Ramp::ramp(1.0, 3.0)] {
            out.push(pair(f, b));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSettings {
    pub pairs: Vec<SchedulePair>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Default for ScheduleSettings {
    fn default() -> Self {
        Self {
            pairs: schedule_table(),
            seeds: vec![0, 1, 2],
            interpolation: Interpolation::Linear,
        }
    }
}

/// Decoupled estimator whose temperatures follow `pair` over the whole run.
pub fn scheduled_estimator(
    pair: &SchedulePair,
    total_steps: usize,
    interpolation: Interpolation,
) -> Result<EstimatorConfig> {
    let total = total_steps.max(1);
    Ok(EstimatorConfig::decoupled(pair.forward.start, pair.backward.start).with_schedules(
        pair.forward.schedule(total, interpolation)?,
        pair.backward.schedule(total, interpolation)?,
    ))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScheduleCell {
    pub pair: SchedulePair,
    pub seed: u64,
    pub final_val_loss: Option<f64>,
    pub runtime_seconds: f64,
    pub error: Option<String>,
}

pub fn schedule_grid(
    run: &RunConfig,
    settings: &ScheduleSettings,
    data: &DatasetHandle,
    workers: usize,
) -> Result<Vec<ScheduleCell>> {
    if settings.pairs.is_empty() || settings.seeds.is_empty() {
        return Err(Error::Config("schedule grid needs pairs and seeds".into()));
    }
    if workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    run.validate()?;
    let total = run.epochs * steps_per_epoch(data.train_len(), run.batch_size);
    let jobs: Vec<(SchedulePair, u64)> = settings
        .pairs
        .iter()
        .flat_map(|p| settings.seeds.iter().map(move |&s| (*p, s)))
        .collect();
    Ok(run_pool(jobs.len(), workers, |i| {
        let (pair, seed) = jobs[i];
        let started = Instant::now();
        let outcome = scheduled_estimator(&pair, total, settings.interpolation).and_then(|estimator| {
            train(
                &RunConfig {
                    estimator,
                    seed,
                    ..run.clone()
                },
                data,
            )
        });
        let (final_val_loss, error) = match outcome {
            Ok(r) => (Some(r.final_validation.reconstruction), None),
            Err(e) => (None, Some(e.to_string())),
        };
        ScheduleCell {
            pair,
            seed,
            final_val_loss,
            runtime_seconds: started.elapsed().as_secs_f64(),
            error,
        }
    }))
}

pub const SCHEDULE_HEADER: &str = "tau_f_start,tau_f_end,tau_b_start,tau_b_end,seed,metric,value";

/// Long-format schedule results with both endpoints of each ramp, plus `agg` mean/std rows.
pub fn schedule_csv(cells: &[ScheduleCell]) -> Result<String> {
    if cells.is_empty() {
        return Err(Error::Csv("no result rows to write".into()));
    }
    let mut out = String::from(SCHEDULE_HEADER);
    out.push('\n');
    let line = |out: &mut String, p: &SchedulePair, seed: &str, metric: &str, v: f64| {
        out.push_str(&format!(
            "{},{},{},{},{seed},{metric},{}\n",
            format_f64(p.forward.start),
            format_f64(p.forward.end),
            format_f64(p.backward.start),
            format_f64(p.backward.end),
            format_f64(v)
        ));
    };
    let mut pairs: Vec<SchedulePair> = Vec::new();
    for c in cells {
        if !pairs.contains(&c.pair) {
            pairs.push(c.pair);
        }
        let seed = c.seed.to_string();
        match c.final_val_loss {
            Some(v) => {
                line(&mut out, &c.pair, &seed, "final_val_loss", v);
                line(&mut out, &c.pair, &seed, "runtime_seconds", c.runtime_seconds);
            }
            None => line(&mut out, &c.pair, &seed, "failed", 1.0),
        }
    }
    for p in &pairs {
        let v: Vec<f64> = cells.iter().filter(|c| c.pair == *p).filter_map(|c| c.final_val_loss).collect();
        if v.is_empty() {
            continue;
        }
        let (m, s) = mean_std(&v);
        line(&mut out, p, "agg", "final_val_loss_mean", m);
        if let Some(s) = s {
            line(&mut out, p, "agg", "final_val_loss_std", s);
        }
    }
    Ok(out)
}
