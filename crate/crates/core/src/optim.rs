//! Adam and RAdam over [`ModelParams`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    Adam,
    Radam,
}

impl OptimKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OptimKind::Adam => "adam",
            OptimKind::Radam => "radam",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimConfig {
    pub fn adam(learning_rate: f64) -> Self {
        Self {
            kind: OptimKind::Adam,
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn radam(learning_rate: f64) -> Self {
        Self {
            kind: OptimKind::Radam,
            ..Self::adam(learning_rate)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Optimizer state: step counter and per-parameter moment estimates.
#[derive(Clone, Debug)]
pub struct OptimState {
    pub config: OptimConfig,
    pub step_count: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimState {
    pub fn new(config: OptimConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let zeros = || {
            params
                .iter()
                .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
                .collect::<BTreeMap<_, _>>()
        };
        Ok(Self {
            config,
            step_count: 0,
            first: zeros(),
            second: zeros(),
        })
    }

    /// RAdam's rectification multiplier at step `t`, or `None` while the
    /// variance estimate is not yet tractable (`rho_t <= 4`).
    pub fn rectification(beta2: f64, t: u64) -> Option<f64> {
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let b2t = beta2.powi(t as i32);
        let rho_t = rho_inf - 2.0 * t as f64 * b2t / (1.0 - b2t);
        (rho_t > 4.0).then(|| {
            (((rho_t - 4.0) * (rho_t - 2.0) * rho_inf) / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        })
    }

    /// One update from the gradients stored on `params`. Gradients are left in place.
    pub fn step(&mut self, params: &mut ModelParams) -> Result<()> {
        if let Some((name, _)) = params.iter().find(|(_, t)| t.grad.is_none()) {
            return Err(Error::MissingGradient(name.clone()));
        }
        self.step_count += 1;
        let OptimConfig {
            kind,
            learning_rate: lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step_count;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let rect = match kind {
            OptimKind::Adam => Some(1.0),
            OptimKind::Radam => Self::rectification(beta2, t),
        };
        for (name, p) in params.iter_mut() {
            let m = self.first.get_mut(name).expect("moments exist for every parameter");
            let v = self.second.get_mut(name).expect("moments exist for every parameter");
            let grad = p.grad.take().expect("checked above");
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                *x -= match rect {
                    Some(r) => lr * r * m_hat / ((v[i] / bc2).sqrt() + eps),
                    None => lr * m_hat,
                };
            }
            p.grad = Some(grad);
        }
        Ok(())
    }
}
