//! Training runs and noise-free evaluation.

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::data::{self, DatasetHandle};
use crate::error::{Error, Result};
use crate::estimators::{estimate, eval_latent, EstimatorConfig};
use crate::models::{self, init_params, ModelKind, ModelParams, ModelSpec};
use crate::optim::{OptimConfig, OptimState};
use crate::tensor::Tensor;

/// RNG stream reserved for Gumbel noise; the shuffle uses its own per-epoch streams.
const NOISE_STREAM: u64 = 0x006e_6f69_7365;

const EVAL_BATCH: usize = 500;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetId {
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub id: DatasetId,
    /// Stratified train prefix (MNIST) or total image count (synthetic).
    #[serde(default)]
    pub subset: Option<usize>,
    #[serde(default)]
    pub test_subset: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl DatasetSpec {
    /// 2 000 train / 1 000 test MNIST digits.
    pub fn mnist_desk() -> Self {
        Self {
            id: DatasetId::Mnist,
            subset: Some(2000),
            test_subset: Some(1000),
            seed: 0,
        }
    }

    pub fn synthetic(n: usize, seed: u64) -> Self {
        Self {
            id: DatasetId::Synthetic,
            subset: Some(n),
            test_subset: None,
            seed,
        }
    }

    pub fn load(&self, root: &Path) -> Result<DatasetHandle> {
        match self.id {
            DatasetId::Mnist => data::mnist(root, self.subset, self.test_subset),
            DatasetId::Synthetic => data::synthetic(self.subset.unwrap_or(2000), self.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub estimator: EstimatorConfig,
    pub dataset: DatasetSpec,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub optimizer: OptimConfig,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

fn default_eval_every() -> usize {
    1
}

impl RunConfig {
    /// Desk-scale binary autoencoder: 64 bits, Adam 3e-4, batch 64, 20 epochs.
    pub fn binary_ae(estimator: EstimatorConfig, seed: u64) -> Self {
        Self {
            model: ModelSpec::binary_ae(data::PIXELS, 64),
            estimator,
            dataset: DatasetSpec::mnist_desk(),
            batch_size: 64,
            epochs: 20,
            seed,
            optimizer: OptimConfig::adam(3e-4),
            eval_every: 1,
        }
    }

    /// 8-category x 4-variable VAE: RAdam 5e-4, batch 64, 20 epochs.
    pub fn vae_8x4(estimator: EstimatorConfig, seed: u64) -> Self {
        Self {
            model: ModelSpec::categorical_vae(data::PIXELS, 4, 8),
            estimator,
            dataset: DatasetSpec::mnist_desk(),
            batch_size: 64,
            epochs: 20,
            seed,
            optimizer: OptimConfig::radam(5e-4),
            eval_every: 1,
        }
    }

    /// 16-category x 12-variable VAE: RAdam 7e-4.
    pub fn vae_16x12(estimator: EstimatorConfig, seed: u64) -> Self {
        Self {
            model: ModelSpec::categorical_vae(data::PIXELS, 12, 16),
            optimizer: OptimConfig::radam(7e-4),
            ..Self::vae_8x4(estimator, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.estimator.validate()?;
        self.optimizer.validate()?;
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }

    fn echo(&self) -> String {
        serde_json::to_string(self).unwrap_or_default()
    }
}

/// Noise-free losses on one split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// MSE (autoencoder) or BCE (VAE).
    pub reconstruction: f64,
    /// `Σ_dims KL(p ‖ uniform)` for the VAE.
    pub kl: Option<f64>,
    /// The training objective: MSE, or BCE + beta * KL.
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation: Option<LossReport>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub config: RunConfig,
    pub initial_validation: LossReport,
    pub epochs: Vec<EpochRecord>,
    pub final_validation: LossReport,
    pub steps: usize,
    pub wall_clock_seconds: f64,
    #[serde(skip)]
    pub params: ModelParams,
}

impl RunResult {
    /// Per-epoch losses without timing, for determinism comparisons.
    pub fn curve(&self) -> Vec<(f64, Option<LossReport>)> {
        self.epochs.iter().map(|e| (e.train_loss, e.validation)).collect()
    }
}

/// Deterministic losses with `z = one_hot(argmax(p))`, no noise.
pub fn evaluate(spec: &ModelSpec, params: &ModelParams, images: &Tensor) -> Result<LossReport> {
    if images.rank() != 2 || images.shape()[0] == 0 {
        return Err(Error::EmptySplit(format!("evaluation on {:?}", images.shape())));
    }
    if images.shape()[1] != spec.input_dim() {
        return Err(Error::Shape {
            op: "evaluate",
            lhs: vec![0, spec.input_dim()],
            rhs: images.shape().to_vec(),
        });
    }
    let n = images.shape()[0];
    let (mut rec, mut kl) = (0.0, 0.0);
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_BATCH).min(n);
        let x = images.slice_rows(start, end);
        let g = Graph::new();
        let bound = params.bind_frozen(&g);
        let logits = models::encode(spec, &bound, g.constant(x.clone()))?;
        let z = g.constant(eval_latent(&logits.value()));
        let xhat = models::decode(spec, &bound, z)?;
        let w = (end - start) as f64;
        rec += w * models::reconstruction_loss(spec, xhat, &x)?.value().item().unwrap();
        if spec.kind == ModelKind::CategoricalVae {
            kl += w * models::kl_to_uniform(logits.softmax()?)?.value().item().unwrap();
        }
        start = end;
    }
    let rec = rec / n as f64;
    Ok(match spec.kind {
        ModelKind::BinaryAe => LossReport {
            reconstruction: rec,
            kl: None,
            total: rec,
        },
        ModelKind::CategoricalVae => {
            let kl = kl / n as f64;
            LossReport {
                reconstruction: rec,
                kl: Some(kl),
                total: rec + spec.beta * kl,
            }
        }
    })
}

/// Trains from a fresh seeded initialisation.
pub fn train(run: &RunConfig, data: &DatasetHandle) -> Result<RunResult> {
    train_from(run, data, init_params(&run.model, run.seed))
}

/// Trains starting from `params`. Bitwise deterministic in `(run, data, params)`.
pub fn train_from(run: &RunConfig, data: &DatasetHandle, mut params: ModelParams) -> Result<RunResult> {
    run.validate()?;
    params.check_spec(&run.model)?;
    if data.input_dim() != run.model.input_dim() {
        return Err(Error::Shape {
            op: "train",
            lhs: vec![0, run.model.input_dim()],
            rhs: data.train.shape().to_vec(),
        });
    }
    if data.train_len() == 0 {
        return Err(Error::EmptySplit("training split".into()));
    }
    let started = Instant::now();
    let initial_validation = evaluate(&run.model, &params, &data.validation)?;
    let mut optim = OptimState::new(run.optimizer, &params)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(run.seed);
    noise_rng.set_stream(NOISE_STREAM);

    let diverged = |step: usize| Error::Diverged {
        step,
        config: run.echo(),
    };

    let mut step = 0;
    let mut epochs = Vec::with_capacity(run.epochs);
    let mut last_validation = initial_validation;
    for epoch in 0..run.epochs {
        let (mut loss_sum, mut count) = (0.0, 0usize);
        for x in data::batches(&data.train, run.batch_size, run.seed, epoch as u64, true)? {
            let g = Graph::new();
            let bound = params.bind(&g);
            let result = (|| {
                let logits = models::encode(&run.model, &bound, g.constant(x.clone()))?;
                let z = estimate(logits, &run.estimator, &mut noise_rng, step)?.output;
                let xhat = models::decode(&run.model, &bound, z)?;
                models::training_loss(&run.model, xhat, &x, logits)
            })();
            let loss = match result {
                Ok(loss) => loss,
                Err(Error::NonFinite { .. }) => return Err(diverged(step)),
                Err(e) => return Err(e),
            };
            let value = loss.value().item().unwrap();
            if !value.is_finite() {
                return Err(diverged(step));
            }
            loss.backward()?;
            params.zero_grad();
            params.accumulate_grads(&bound);
            optim.step(&mut params)?;
            if !params.is_finite() {
                return Err(diverged(step));
            }
            let b = x.shape()[0];
            loss_sum += value * b as f64;
            count += b;
            step += 1;
        }
        let validation = if (epoch + 1) % run.eval_every == 0 || epoch + 1 == run.epochs {
            let v = evaluate(&run.model, &params, &data.validation)?;
            last_validation = v;
            Some(v)
        } else {
            None
        };
        epochs.push(EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / count as f64,
            validation,
        });
    }
    params.zero_grad();

    Ok(RunResult {
        config: run.clone(),
        initial_validation,
        epochs,
        final_validation: last_validation,
        steps: step,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        params,
    })
}

/// Number of optimizer steps one epoch takes.
pub fn steps_per_epoch(train_len: usize, batch_size: usize) -> usize {
    train_len.div_ceil(batch_size.max(1))
}
