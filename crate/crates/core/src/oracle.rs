//! Exact expected-loss gradients by enumeration, estimator bias/std, and the gradient gap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::estimators::{estimate, estimate_with_noise, relax, sample_gumbel, EstimatorConfig};
use crate::models::{self, CategoricalLatentSpec, ModelKind, ModelParams, ModelSpec, LOG_FLOOR};
use crate::tensor::Tensor;

/// Largest number of latent configurations the oracle will enumerate.
pub const ENUMERATION_CAP: usize = 65_536;

/// Draws per temperature pair in the bias/variance analysis.
pub const DEFAULT_DRAWS: usize = 1024;

/// All `k^dims` one-hot configurations as rows of `[C, dims * k]`.
/// Configuration `c` reads its categories as base-`k` digits, first latent most significant.
pub fn enumerate_configurations(latent: CategoricalLatentSpec, cap: usize) -> Result<Tensor> {
    let count = latent.configurations();
    if count > cap as u128 {
        return Err(Error::EnumerationCap { count, cap });
    }
    let (dims, k, c) = (latent.dims, latent.k, count as usize);
    let mut out = Tensor::zeros(vec![c, dims * k]);
    for (idx, row) in out.data_mut().chunks_exact_mut(dims * k).enumerate() {
        let mut rest = idx;
        for d in (0..dims).rev() {
            row[d * k + rest % k] = 1.0;
            rest /= k;
        }
    }
    Ok(out)
}

/// Per-sample loss of every configuration: `[B, C]`.
///
/// Matches [`models::reconstruction_loss`] row by row: mean squared error over pixels
/// for the autoencoder, pixel-summed BCE for the VAE.
pub fn configuration_losses(spec: &ModelSpec, xhat: &Tensor, x: &Tensor) -> Result<Tensor> {
    let d = x.shape()[1] as f64;
    match spec.kind {
        ModelKind::CategoricalVae => {
            let log_p = xhat.map(|v| v.max(LOG_FLOOR).ln());
            let log_q = xhat.map(|v| (1.0 - v).max(LOG_FLOOR).ln());
            let pos = x.matmul_transposed(&log_p)?;
            let neg = x.map(|v| 1.0 - v).matmul_transposed(&log_q)?;
            let data = pos.data().iter().zip(neg.data()).map(|(a, b)| -(a + b)).collect();
            Tensor::new(pos.shape().to_vec(), data)
        }
        ModelKind::BinaryAe => {
            let cross = x.matmul_transposed(xhat)?;
            let sq = |t: &Tensor| t.rows().map(|r| r.iter().map(|v| v * v).sum()).collect::<Vec<f64>>();
            let (xx, hh) = (sq(x), sq(xhat));
            let c = xhat.shape()[0];
            let mut out = cross;
            for (b, row) in out.data_mut().chunks_exact_mut(c).enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (xx[b] - 2.0 * *v + hh[j]) / d;
                }
            }
            Ok(out)
        }
    }
}

/// Enumerated expectation of the reconstruction loss for one frozen model and batch.
#[derive(Clone, Debug)]
pub struct ExactOracle {
    latent: CategoricalLatentSpec,
    configs_t: Tensor,
    losses: Tensor,
    logits: Tensor,
}

impl ExactOracle {
    /// Runs the encoder on `x` and the decoder on every configuration once.
    pub fn new(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<Self> {
        let g = Graph::new();
        let bound = params.bind_frozen(&g);
        let logits = models::encode(spec, &bound, g.constant(x.clone()))?.value();
        Self::with_logits(spec, params, x, logits)
    }

    /// As [`ExactOracle::new`] with caller-chosen encoder output.
    pub fn with_logits(spec: &ModelSpec, params: &ModelParams, x: &Tensor, logits: Tensor) -> Result<Self> {
        let latent = spec.latent;
        let configs = enumerate_configurations(latent, ENUMERATION_CAP)?;
        let c = configs.shape()[0];
        let want = [x.shape()[0], latent.dims, latent.k];
        if logits.shape() != want {
            return Err(Error::Shape {
                op: "oracle",
                lhs: want.to_vec(),
                rhs: logits.shape().to_vec(),
            });
        }
        let g = Graph::new();
        let bound = params.bind_frozen(&g);
        let z = g.constant(configs.clone().reshape(vec![c, latent.dims, latent.k])?);
        let xhat = models::decode(spec, &bound, z)?.value();
        let losses = configuration_losses(spec, &xhat, x)?;
        Ok(Self {
            latent,
            configs_t: transpose(&configs),
            losses,
            logits,
        })
    }

    pub fn logits(&self) -> &Tensor {
        &self.logits
    }

    /// `[B, C]` per-sample loss of each configuration.
    pub fn losses(&self) -> &Tensor {
        &self.losses
    }

    pub fn num_configurations(&self) -> usize {
        self.configs_t.shape()[1]
    }

    /// `P(c) = Π_d p_{d, c_d}` per batch row: `[B, C]`.
    pub fn probabilities(&self, logits: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        Ok(self.log_probs(g.constant(logits.clone()))?.exp()?.value())
    }

    fn log_probs<'g>(&self, logits: Var<'g>) -> Result<Var<'g>> {
        let b = logits.shape()[0];
        let w = self.latent.dims * self.latent.k;
        logits
            .log_softmax()?
            .reshape(vec![b, w])?
            .matmul(logits.graph().constant(self.configs_t.clone()))
    }

    /// `mean_b Σ_c P_b(c) L_b(c)` as a node differentiable in `logits`.
    pub fn expected_loss<'g>(&self, logits: Var<'g>) -> Result<Var<'g>> {
        let b = logits.shape()[0];
        if b != self.losses.shape()[0] {
            return Err(Error::Shape {
                op: "expected_loss",
                lhs: self.losses.shape().to_vec(),
                rhs: logits.shape(),
            });
        }
        let losses = logits.graph().constant(self.losses.clone());
        self.log_probs(logits)?.exp()?.mul(losses)?.sum()?.scale(1.0 / b as f64)
    }

    pub fn expected_loss_value(&self, logits: &Tensor) -> Result<f64> {
        let g = Graph::new();
        Ok(self.expected_loss(g.constant(logits.clone()))?.value().item().unwrap())
    }

    /// `∂E[L]/∂l` at `logits`.
    pub fn gradient_at(&self, logits: &Tensor) -> Result<Tensor> {
        let g = Graph::new();
        let l = g.param(logits.clone());
        self.expected_loss(l)?.backward()?;
        l.grad().ok_or_else(|| Error::MissingGradient("logits".into()))
    }

    /// `∂E[L]/∂l` at the encoder output.
    pub fn gradient(&self) -> Result<Tensor> {
        self.gradient_at(&self.logits)
    }
}

fn transpose(m: &Tensor) -> Tensor {
    let (r, c) = (m.shape()[0], m.shape()[1]);
    let mut out = Tensor::zeros(vec![c, r]);
    let src = m.data();
    for (j, row) in out.data_mut().chunks_exact_mut(r).enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = src[i * c + j];
        }
    }
    out
}

/// Expected-loss node for `x` together with the logits leaf it differentiates in.
pub fn exact_expected_loss<'g>(
    graph: &'g Graph,
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
) -> Result<(Var<'g>, Var<'g>)> {
    let oracle = ExactOracle::new(spec, params, x)?;
    let logits = graph.param(oracle.logits().clone());
    Ok((oracle.expected_loss(logits)?, logits))
}

pub fn exact_gradient(spec: &ModelSpec, params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    ExactOracle::new(spec, params, x)?.gradient()
}

/// Estimator gradient statistics against the exact gradient.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradStats {
    pub tau_forward: f64,
    pub tau_backward: f64,
    pub exact_grad: Tensor,
    pub mean_est: Tensor,
    pub std_est: Tensor,
    /// `‖exact − mean‖₂ / ‖exact‖₂`
    pub relative_bias: f64,
    /// `‖std‖₂ / ‖exact‖₂`
    pub relative_std: f64,
    pub n_draws: usize,
}

/// Logit gradient of the batch reconstruction loss for one estimator draw.
pub fn estimator_gradient(
    spec: &ModelSpec,
    params: &ModelParams,
    logits: &Tensor,
    x: &Tensor,
    config: &EstimatorConfig,
    noise: Option<&Tensor>,
) -> Result<Tensor> {
    let g = Graph::new();
    let bound = params.bind_frozen(&g);
    let l = g.param(logits.clone());
    let z = estimate_with_noise(l, config, noise, 0)?.output;
    let xhat = models::decode(spec, &bound, z)?;
    models::reconstruction_loss(spec, xhat, x)?.backward()?;
    l.grad().ok_or_else(|| Error::MissingGradient("logits".into()))
}

/// Mean and sample standard deviation of `n_draws` estimator gradients with fresh noise.
pub fn bias_variance<R: Rng + ?Sized>(
    oracle: &ExactOracle,
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    config: &EstimatorConfig,
    n_draws: usize,
    rng: &mut R,
) -> Result<GradStats> {
    if n_draws < 2 {
        return Err(Error::Config(format!("n_draws must be >= 2, got {n_draws}")));
    }
    let shape = oracle.logits().shape().to_vec();
    let mut draws = Vec::with_capacity(n_draws);
    for _ in 0..n_draws {
        let noise = config.uses_noise().then(|| sample_gumbel(&shape, rng));
        draws.push(noise);
    }
    let grads = draws
        .iter()
        .map(|noise| estimator_gradient(spec, params, oracle.logits(), x, config, noise.as_ref()))
        .collect::<Result<Vec<_>>>()?;
    grad_stats(oracle.gradient()?, &grads, config)
}

/// Summarises precomputed estimator gradients against `exact`.
pub fn grad_stats(exact: Tensor, grads: &[Tensor], config: &EstimatorConfig) -> Result<GradStats> {
    let n = grads.len();
    if n < 2 {
        return Err(Error::Config(format!("n_draws must be >= 2, got {n}")));
    }
    let exact_norm = exact.norm();
    if exact_norm == 0.0 {
        return Err(Error::ZeroExactGradient);
    }
    let len = exact.len();
    let mut mean = vec![0.0; len];
    for g in grads {
        for (m, v) in mean.iter_mut().zip(g.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; len];
    for g in grads {
        for ((s, v), m) in var.iter_mut().zip(g.data()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<f64> = var.iter().map(|s| (s / (n - 1) as f64).sqrt()).collect();
    let shape = exact.shape().to_vec();
    let mean_est = Tensor::new(shape.clone(), mean)?;
    let std_est = Tensor::new(shape, std)?;
    let bias = exact
        .data()
        .iter()
        .zip(mean_est.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let (tau_forward, tau_backward) = config.temperatures(0);
    Ok(GradStats {
        tau_forward,
        tau_backward,
        relative_bias: bias / exact_norm,
        relative_std: std_est.norm() / exact_norm,
        exact_grad: exact,
        mean_est,
        std_est,
        n_draws: n,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GapNorm {
    /// `‖·‖₂`
    #[default]
    L2,
    /// `‖·‖₂²`
    SquaredL2,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GapRecord {
    pub tau_forward: f64,
    pub tau_backward: f64,
    pub seed: u64,
    /// Mean of `per_sample`.
    pub gap: f64,
    pub per_sample: Vec<f64>,
    pub norm: GapNorm,
}

/// Per-sample logit gradients: row `b` of the result only depends on sample `b`.
fn per_sample_gradient<'g>(
    spec: &ModelSpec,
    params: &ModelParams,
    logits: &Tensor,
    x: &Tensor,
    build: impl FnOnce(Var<'g>) -> Result<Var<'g>>,
    graph: &'g Graph,
) -> Result<Tensor> {
    let bound = params.bind_frozen(graph);
    let l = graph.param(logits.clone());
    let z = build(l)?;
    let xhat = models::decode(spec, &bound, z)?;
    let batch = x.shape()[0] as f64;
    models::reconstruction_loss(spec, xhat, x)?.scale(batch)?.backward()?;
    l.grad().ok_or_else(|| Error::MissingGradient("logits".into()))
}

/// Gap between the relaxed-forward gradient and the straight-through gradient,
/// both driven by the same Gumbel draw `noise`.
pub fn gradient_gap_with_noise(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    config: &EstimatorConfig,
    noise: &Tensor,
    seed: u64,
    norm: GapNorm,
) -> Result<GapRecord> {
    let g = Graph::new();
    let bound = params.bind_frozen(&g);
    let logits = models::encode(spec, &bound, g.constant(x.clone()))?.value();
    let (tau_f, tau_b) = config.temperatures(0);
    let decoupled = EstimatorConfig::decoupled(tau_f, tau_b);

    let ga = Graph::new();
    let relaxed = per_sample_gradient(spec, params, &logits, x, |l| relax(l, noise, tau_f), &ga)?;
    let gb = Graph::new();
    let straight = per_sample_gradient(
        spec,
        params,
        &logits,
        x,
        |l| Ok(estimate_with_noise(l, &decoupled, Some(noise), 0)?.output),
        &gb,
    )?;

    let row = spec.latent.width();
    let per_sample: Vec<f64> = relaxed
        .data()
        .chunks_exact(row)
        .zip(straight.data().chunks_exact(row))
        .map(|(a, b)| {
            let sq: f64 = a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum();
            match norm {
                GapNorm::L2 => sq.sqrt(),
                GapNorm::SquaredL2 => sq,
            }
        })
        .collect();
    let gap = per_sample.iter().sum::<f64>() / per_sample.len().max(1) as f64;
    Ok(GapRecord {
        tau_forward: tau_f,
        tau_backward: tau_b,
        seed,
        gap,
        per_sample,
        norm,
    })
}

pub fn gradient_gap<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    config: &EstimatorConfig,
    rng: &mut R,
    seed: u64,
    norm: GapNorm,
) -> Result<GapRecord> {
    let noise = sample_gumbel(&[x.shape()[0], spec.latent.dims, spec.latent.k], rng);
    gradient_gap_with_noise(spec, params, x, config, &noise, seed, norm)
}

/// One estimator draw through the full model, for Monte Carlo checks.
pub fn sampled_loss<R: Rng + ?Sized>(
    spec: &ModelSpec,
    params: &ModelParams,
    x: &Tensor,
    config: &EstimatorConfig,
    rng: &mut R,
) -> Result<f64> {
    let g = Graph::new();
    let bound = params.bind_frozen(&g);
    let logits = models::encode(spec, &bound, g.constant(x.clone()))?;
    let z = estimate(logits, config, rng, 0)?.output;
    let xhat = models::decode(spec, &bound, z)?;
    Ok(models::reconstruction_loss(spec, xhat, x)?.value().item().unwrap())
}

/// Average ranks, ties sharing the mean of their positions (1-based).
fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

/// Spearman rank correlation; `None` when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt())
}
