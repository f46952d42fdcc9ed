//! (τf, τb, seed) grids over a worker pool, and their aggregation.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::DatasetHandle;
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::models::ModelParams;
use crate::train::{train, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub tau_forward: f64,
    pub tau_backward: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentGrid {
    pub tau_forward_values: Vec<f64>,
    pub tau_backward_values: Vec<f64>,
    pub seeds: Vec<u64>,
    pub base: RunConfig,
    /// Only the τf == τb diagonal, trained with vanilla ST-GS.
    #[serde(default)]
    pub coupled_only: bool,
}

/// Autoencoder axes: τf ∈ {0.3, 0.7, 1, 2, 3}, τb ∈ {0.3, 0.7, 1, 2, 3, 6}.
pub const AE_TAU_FORWARD: [f64; 5] = [0.3, 0.7, 1.0, 2.0, 3.0];
pub const AE_TAU_BACKWARD: [f64; 6] = [0.3, 0.7, 1.0, 2.0, 3.0, 6.0];
/// VAE axes, both temperatures: {0.3, 0.7, 1, 2, 3}.
pub const VAE_TAU: [f64; 5] = [0.3, 0.7, 1.0, 2.0, 3.0];
pub const DESK_SEEDS: [u64; 3] = [0, 1, 2];

impl ExperimentGrid {
    pub fn new(tau_forward_values: Vec<f64>, tau_backward_values: Vec<f64>, seeds: Vec<u64>, base: RunConfig) -> Self {
        Self {
            tau_forward_values,
            tau_backward_values,
            seeds,
            base,
            coupled_only: false,
        }
    }

    pub fn binary_ae_desk() -> Self {
        let base = RunConfig::binary_ae(EstimatorConfig::decoupled(1.0, 1.0), 0);
        Self::new(AE_TAU_FORWARD.to_vec(), AE_TAU_BACKWARD.to_vec(), DESK_SEEDS.to_vec(), base)
    }

    pub fn vae_desk() -> Self {
        let base = RunConfig::vae_8x4(EstimatorConfig::decoupled(1.0, 1.0), 0);
        Self::new(VAE_TAU.to_vec(), VAE_TAU.to_vec(), DESK_SEEDS.to_vec(), base)
    }

    pub fn coupled(mut self) -> Self {
        self.coupled_only = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_forward_values.is_empty() || self.tau_backward_values.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("grid axes must be non-empty".into()));
        }
        for &t in self.tau_forward_values.iter().chain(&self.tau_backward_values) {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("temperatures must be positive, got {t}")));
            }
        }
        if self.coupled_only && self.diagonal().is_empty() {
            return Err(Error::Config("coupled_only grid has no τf == τb values".into()));
        }
        self.base.validate()
    }

    fn diagonal(&self) -> Vec<f64> {
        self.tau_forward_values
            .iter()
            .copied()
            .filter(|t| self.tau_backward_values.contains(t))
            .collect()
    }

    /// Cells in τf-major, then τb, then seed order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        let pairs: Vec<(f64, f64)> = if self.coupled_only {
            self.diagonal().into_iter().map(|t| (t, t)).collect()
        } else {
            self.tau_forward_values
                .iter()
                .flat_map(|&f| self.tau_backward_values.iter().map(move |&b| (f, b)))
                .collect()
        };
        for (tau_forward, tau_backward) in pairs {
            for &seed in &self.seeds {
                out.push(Cell {
                    tau_forward,
                    tau_backward,
                    seed,
                });
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &Cell) -> RunConfig {
        let estimator = if self.coupled_only {
            EstimatorConfig::st_gs(cell.tau_forward)
        } else {
            EstimatorConfig::decoupled(cell.tau_forward, cell.tau_backward)
        };
        RunConfig {
            estimator,
            seed: cell.seed,
            ..self.base.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CellResult {
    pub tau_forward: f64,
    pub tau_backward: f64,
    pub seed: u64,
    /// MSE (autoencoder) or BCE (VAE) on the validation split.
    pub final_val_loss: Option<f64>,
    pub final_val_kl: Option<f64>,
    pub final_val_total: Option<f64>,
    pub final_train_loss: Option<f64>,
    pub runtime_seconds: f64,
    pub error: Option<String>,
    #[serde(skip)]
    pub params: Option<ModelParams>,
}

impl CellResult {
    pub fn cell(&self) -> Cell {
        Cell {
            tau_forward: self.tau_forward,
            tau_backward: self.tau_backward,
            seed: self.seed,
        }
    }

    /// Same numbers, ignoring timing and checkpoints.
    pub fn same_outcome(&self, other: &CellResult) -> bool {
        self.cell() == other.cell()
            && self.final_val_loss.map(f64::to_bits) == other.final_val_loss.map(f64::to_bits)
            && self.final_val_kl.map(f64::to_bits) == other.final_val_kl.map(f64::to_bits)
            && self.final_val_total.map(f64::to_bits) == other.final_val_total.map(f64::to_bits)
            && self.final_train_loss.map(f64::to_bits) == other.final_train_loss.map(f64::to_bits)
            && self.error == other.error
    }
}

/// Runs `job(i)` for `i in 0..n` on `workers` threads; results come back in index order.
pub fn run_pool<T, F>(n: usize, workers: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let next = AtomicUsize::new(0);
    let sink: Mutex<Vec<(usize, T)>> = Mutex::new(Vec::with_capacity(n));
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = job(i);
                sink.lock().expect("result sink poisoned").push((i, out));
            });
        }
    });
    let mut done = sink.into_inner().expect("result sink poisoned");
    done.sort_by_key(|(i, _)| *i);
    done.into_iter().map(|(_, t)| t).collect()
}

/// Trains one cell; failures become error rows.
pub fn run_cell(grid: &ExperimentGrid, cell: &Cell, data: &DatasetHandle, keep_params: bool) -> CellResult {
    let started = Instant::now();
    let outcome = train(&grid.cell_config(cell), data);
    let runtime_seconds = started.elapsed().as_secs_f64();
    let mut r = CellResult {
        tau_forward: cell.tau_forward,
        tau_backward: cell.tau_backward,
        seed: cell.seed,
        final_val_loss: None,
        final_val_kl: None,
        final_val_total: None,
        final_train_loss: None,
        runtime_seconds,
        error: None,
        params: None,
    };
    match outcome {
        Ok(run) => {
            r.final_val_loss = Some(run.final_validation.reconstruction);
            r.final_val_kl = run.final_validation.kl;
            r.final_val_total = Some(run.final_validation.total);
            r.final_train_loss = run.epochs.last().map(|e| e.train_loss);
            if keep_params {
                r.params = Some(run.params);
            }
        }
        Err(e) => r.error = Some(e.to_string()),
    }
    r
}

pub fn run_grid(grid: &ExperimentGrid, data: &DatasetHandle, workers: usize) -> Result<Vec<CellResult>> {
    run_grid_with(grid, data, workers, false)
}

/// As [`run_grid`], optionally keeping each cell's trained parameters.
pub fn run_grid_with(
    grid: &ExperimentGrid,
    data: &DatasetHandle,
    workers: usize,
    keep_params: bool,
) -> Result<Vec<CellResult>> {
    grid.validate()?;
    if workers == 0 {
        return Err(Error::Config("workers must be >= 1".into()));
    }
    let cells = grid.cells();
    Ok(run_pool(cells.len(), workers, |i| run_cell(grid, &cells[i], data, keep_params)))
}

/// Mean and sample standard deviation of one metric over the seeds of a (τf, τb) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub tau_forward: f64,
    pub tau_backward: f64,
    pub metric: String,
    pub mean: f64,
    /// Absent with a single seed.
    pub std: Option<f64>,
    pub n: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = (values.len() > 1)
        .then(|| (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Aggregates successful cells per (τf, τb), in first-appearance order.
pub fn aggregate(results: &[CellResult]) -> Vec<Aggregate> {
    let metrics: [(&str, fn(&CellResult) -> Option<f64>); 3] = [
        ("final_val_loss", |r| r.final_val_loss),
        ("final_val_kl", |r| r.final_val_kl),
        ("final_val_total", |r| r.final_val_total),
    ];
    let mut order: Vec<(u64, u64)> = Vec::new();
    let mut groups: BTreeMap<(u64, u64), Vec<&CellResult>> = BTreeMap::new();
    for r in results {
        let key = (r.tau_forward.to_bits(), r.tau_backward.to_bits());
        if !groups.contains_key(&key) {
            order.push(key);
        }
        groups.entry(key).or_default().push(r);
    }
    let mut out = Vec::new();
    for key in order {
        let group = &groups[&key];
        for (name, get) in metrics {
            let values: Vec<f64> = group.iter().filter_map(|r| get(r)).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&values);
            out.push(Aggregate {
                tau_forward: f64::from_bits(key.0),
                tau_backward: f64::from_bits(key.1),
                metric: name.to_string(),
                mean,
                std,
                n: values.len(),
            });
        }
    }
    out
}

/// Lowest mean of `metric` among aggregates accepted by `filter`.
pub fn best<'a>(aggs: &'a [Aggregate], metric: &str, filter: impl Fn(&Aggregate) -> bool) -> Option<&'a Aggregate> {
    aggs.iter()
        .filter(|a| a.metric == metric && filter(a))
        .min_by(|a, b| a.mean.total_cmp(&b.mean))
}
