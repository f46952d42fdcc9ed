//! Versioned JSON experiment configuration, merged over per-model presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::analysis::{BiasVarianceSettings, GapSettings, ScheduleSettings};
use crate::error::{Error, Result};
use crate::estimators::EstimatorConfig;
use crate::experiments::{ExperimentGrid, AE_TAU_BACKWARD, AE_TAU_FORWARD, DESK_SEEDS, VAE_TAU};
use crate::train::RunConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    BinaryAe,
    #[serde(rename = "vae_8x4")]
    Vae8x4,
    #[serde(rename = "vae_16x12")]
    Vae16x12,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridAxes {
    pub tau_forward_values: Vec<f64>,
    pub tau_backward_values: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub coupled_only: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub preset: Preset,
    /// Base run: model, estimator, dataset, optimizer, epochs, batch size, seed.
    pub run: RunConfig,
    pub grid: GridAxes,
    pub bias_variance: BiasVarianceSettings,
    pub gradient_gap: GapSettings,
    pub schedule_grid: ScheduleSettings,
    pub workers: usize,
    /// Dataset root; falls back to `DISCRETE_GRAD_DATA_DIR`, then `./data`.
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let (run, grid) = match preset {
            Preset::BinaryAe => (
                RunConfig::binary_ae(EstimatorConfig::decoupled(0.3, 3.0), 0),
                GridAxes {
                    tau_forward_values: AE_TAU_FORWARD.to_vec(),
                    tau_backward_values: AE_TAU_BACKWARD.to_vec(),
                    seeds: DESK_SEEDS.to_vec(),
                    coupled_only: false,
                },
            ),
            Preset::Vae8x4 | Preset::Vae16x12 => {
                let est = EstimatorConfig::decoupled(1.6, 1.3);
                let run = if preset == Preset::Vae8x4 {
                    RunConfig::vae_8x4(est, 0)
                } else {
                    RunConfig::vae_16x12(est, 0)
                };
                let grid = GridAxes {
                    tau_forward_values: VAE_TAU.to_vec(),
                    tau_backward_values: VAE_TAU.to_vec(),
                    seeds: DESK_SEEDS.to_vec(),
                    coupled_only: false,
                };
                (run, grid)
            }
        };
        Self {
            schema_version: SCHEMA_VERSION,
            preset,
            run,
            grid,
            bias_variance: BiasVarianceSettings::default(),
            gradient_gap: GapSettings::default(),
            schedule_grid: ScheduleSettings::default(),
            workers: 1,
            data_dir: None,
        }
    }

    /// Deep-merges `patch` over the preset it names (or `default_preset`).
    pub fn from_json(patch: Value, default_preset: Preset) -> Result<Self> {
        if !patch.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        match patch.get("schema_version") {
            None => {}
            Some(v) if v.as_u64() == Some(SCHEMA_VERSION as u64) => {}
            Some(v) => {
                return Err(Error::Config(format!(
                    "unsupported schema_version {v}, expected {SCHEMA_VERSION}"
                )))
            }
        }
        let preset = match patch.get("preset") {
            Some(p) => serde_json::from_value(p.clone())
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
            None => default_preset,
        };
        let mut base = serde_json::to_value(Self::preset(preset))?;
        merge(&mut base, patch);
        let cfg: Self = serde_json::from_value(base).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, default_preset: Preset) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let value: Value =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(value, default_preset)
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.run.validate()?;
        self.grid().validate()
    }

    pub fn grid(&self) -> ExperimentGrid {
        ExperimentGrid {
            tau_forward_values: self.grid.tau_forward_values.clone(),
            tau_backward_values: self.grid.tau_backward_values.clone(),
            seeds: self.grid.seeds.clone(),
            base: self.run.clone(),
            coupled_only: self.grid.coupled_only,
        }
    }

    pub fn data_root(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(crate::data::data_dir)
    }
}

/// Recursive object merge; non-object values in `patch` replace those in `base`.
pub fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
