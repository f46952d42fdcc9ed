//! Gumbel noise, temperature-scaled relaxation and the straight-through
//! estimator family.
//!
//! Temperatures divide the logits only: `softmax(l / tau + g)`. The noise is
//! never scaled, so at `tau -> 0` the sample approaches deterministic argmax
//! of the logits and at large `tau` it approaches `softmax(g)`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{argmax, softmax_row, Tensor};

/// Uniform draws are kept inside `(EPS, 1 - EPS)`.
pub const UNIFORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    /// Deterministic one-hot of the probabilities, `p` as backward surrogate.
    Ste,
    /// Relaxed sample fed downstream, no discretisation.
    GumbelSoftmax,
    /// Straight-through Gumbel-Softmax with one temperature.
    StGs,
    /// Straight-through Gumbel-Softmax with separate forward/backward temperatures.
    DecoupledStGs,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 4] = [
        EstimatorKind::Ste,
        EstimatorKind::GumbelSoftmax,
        EstimatorKind::StGs,
        EstimatorKind::DecoupledStGs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorKind::Ste => "ste",
            EstimatorKind::GumbelSoftmax => "gumbel_softmax",
            EstimatorKind::StGs => "st_gs",
            EstimatorKind::DecoupledStGs => "decoupled_st_gs",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown estimator kind `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Linear,
    Geometric,
}

/// Temperature annealed from `start` to `end` over `total_steps` optimizer steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub start: f64,
    pub end: f64,
    pub total_steps: usize,
    #[serde(default)]
    pub interpolation: Interpolation,
}

impl Schedule {
    pub fn new(start: f64, end: f64, total_steps: usize, interpolation: Interpolation) -> Result<Self> {
        let s = Self {
            start,
            end,
            total_steps,
            interpolation,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn linear(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        Self::new(start, end, total_steps, Interpolation::Linear)
    }

    pub fn geometric(start: f64, end: f64, total_steps: usize) -> Result<Self> {
        Self::new(start, end, total_steps, Interpolation::Geometric)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.end > 0.0 && self.start.is_finite() && self.end.is_finite()) {
            return Err(Error::Config(format!(
                "schedule endpoints must be positive, got {} -> {}",
                self.start, self.end
            )));
        }
        if self.total_steps == 0 {
            return Err(Error::Config("schedule total_steps must be positive".into()));
        }
        Ok(())
    }

    /// Value at `step`; steps past `total_steps` clamp to `end`.
    pub fn value(&self, step: usize) -> f64 {
        if step == 0 {
            return self.start;
        }
        if step >= self.total_steps {
            return self.end;
        }
        let frac = step as f64 / self.total_steps as f64;
        match self.interpolation {
            Interpolation::Linear => self.start + (self.end - self.start) * frac,
            Interpolation::Geometric => self.start * (self.end / self.start).powf(frac),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorConfig {
    pub kind: EstimatorKind,
    pub tau_forward: f64,
    pub tau_backward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_forward: Option<Schedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule_backward: Option<Schedule>,
}

impl EstimatorConfig {
    pub fn ste() -> Self {
        Self::fixed(EstimatorKind::Ste, 1.0, 1.0)
    }

    pub fn gumbel_softmax(tau: f64) -> Self {
        Self::fixed(EstimatorKind::GumbelSoftmax, tau, tau)
    }

    pub fn st_gs(tau: f64) -> Self {
        Self::fixed(EstimatorKind::StGs, tau, tau)
    }

    pub fn decoupled(tau_forward: f64, tau_backward: f64) -> Self {
        Self::fixed(EstimatorKind::DecoupledStGs, tau_forward, tau_backward)
    }

    fn fixed(kind: EstimatorKind, tau_forward: f64, tau_backward: f64) -> Self {
        Self {
            kind,
            tau_forward,
            tau_backward,
            schedule_forward: None,
            schedule_backward: None,
        }
    }

    pub fn with_schedules(mut self, forward: Option<Schedule>, backward: Option<Schedule>) -> Self {
        self.schedule_forward = forward;
        self.schedule_backward = backward;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (name, tau) in [("tau_forward", self.tau_forward), ("tau_backward", self.tau_backward)] {
            if !(tau > 0.0 && tau.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {tau}")));
            }
        }
        for s in self.schedule_forward.iter().chain(&self.schedule_backward) {
            s.validate()?;
        }
        if self.kind != EstimatorKind::DecoupledStGs
            && (self.tau_backward != self.tau_forward || self.schedule_backward != self.schedule_forward)
        {
            return Err(Error::Config(format!(
                "{} uses a single temperature; tau_backward must equal tau_forward",
                self.kind
            )));
        }
        Ok(())
    }

    /// `(tau_forward, tau_backward)` after evaluating schedules at `step`.
    pub fn temperatures(&self, step: usize) -> (f64, f64) {
        let tf = self.schedule_forward.as_ref().map_or(self.tau_forward, |s| s.value(step));
        if self.kind != EstimatorKind::DecoupledStGs {
            return (tf, tf);
        }
        let tb = self.schedule_backward.as_ref().map_or(self.tau_backward, |s| s.value(step));
        (tf, tb)
    }

    pub fn uses_noise(&self) -> bool {
        self.kind != EstimatorKind::Ste
    }
}

/// Uniform draw on the open interval `(0, 1)`.
fn open_unit<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
}

/// `-ln(-ln(u))`.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

/// Standard Gumbel draw with `u` kept inside `(EPS, 1 - EPS)`.
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = UNIFORM_EPS + (1.0 - 2.0 * UNIFORM_EPS) * open_unit(rng);
    gumbel_from_uniform(u)
}

pub fn sample_gumbel<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| gumbel(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("length matches shape")
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("temperature must be positive, got {tau}")))
    }
}

/// `softmax(l / tau + g)` over the last axis, as a graph node.
pub fn relax<'g>(logits: Var<'g>, noise: &Tensor, tau: f64) -> Result<Var<'g>> {
    check_tau(tau)?;
    let g = logits.graph().constant(noise.clone());
    logits.scale(1.0 / tau)?.add(g)?.softmax()
}

/// Same arithmetic as [`relax`], without recording a node.
pub fn relax_values(logits: &Tensor, noise: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    if logits.shape() != noise.shape() {
        return Err(Error::Shape {
            op: "relax",
            lhs: logits.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let c = 1.0 / tau;
    let shifted: Vec<f64> = logits.data().iter().zip(noise.data()).map(|(l, g)| c * l + g).collect();
    let mut out = vec![0.0; shifted.len()];
    let k = logits.last_dim();
    for (src, dst) in shifted.chunks_exact(k).zip(out.chunks_exact_mut(k)) {
        softmax_row(src, dst);
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// One-hot of the rowwise argmax; ties go to the lowest index.
pub fn hard_sample(relaxed: &Tensor) -> Tensor {
    let k = relaxed.last_dim();
    let mut out = Tensor::zeros(relaxed.shape().to_vec());
    let idx: Vec<usize> = relaxed.rows().map(argmax).collect();
    for (row, j) in out.data_mut().chunks_exact_mut(k).zip(idx) {
        row[j] = 1.0;
    }
    out
}

pub fn softmax_values(logits: &Tensor) -> Tensor {
    let mut out = logits.clone().with_requires_grad(false);
    let k = logits.last_dim();
    for (src, dst) in logits.rows().zip(out.data_mut().chunks_exact_mut(k)) {
        softmax_row(src, dst);
    }
    out
}

/// Noise-free evaluation latent: `one_hot(argmax(softmax(l)))`.
pub fn eval_latent(logits: &Tensor) -> Tensor {
    hard_sample(&softmax_values(logits))
}

/// Everything one estimator call computed for a batch of categorical latents.
#[derive(Clone, Debug)]
pub struct LatentBlock {
    pub logits: Tensor,
    pub probs: Tensor,
    pub gumbel: Option<Tensor>,
    pub relaxed_forward: Option<Tensor>,
    pub relaxed_backward: Option<Tensor>,
    pub hard: Tensor,
    pub tau_forward: f64,
    pub tau_backward: f64,
}

pub struct Estimate<'g> {
    /// What the decoder consumes.
    pub output: Var<'g>,
    pub block: LatentBlock,
}

/// Draws fresh noise for `config` and applies the estimator to `logits`.
pub fn estimate<'g, R: Rng + ?Sized>(
    logits: Var<'g>,
    config: &EstimatorConfig,
    rng: &mut R,
    step: usize,
) -> Result<Estimate<'g>> {
    let noise = config
        .uses_noise()
        .then(|| sample_gumbel(&logits.shape(), rng));
    estimate_with_noise(logits, config, noise.as_ref(), step)
}

/// Applies the estimator with caller-supplied Gumbel noise. The same noise
/// tensor feeds both the forward and the backward relaxation.
pub fn estimate_with_noise<'g>(
    logits: Var<'g>,
    config: &EstimatorConfig,
    noise: Option<&Tensor>,
    step: usize,
) -> Result<Estimate<'g>> {
    config.validate()?;
    let graph: &'g Graph = logits.graph();
    let (tau_f, tau_b) = config.temperatures(step);
    let l = logits.value();
    let probs = softmax_values(&l);
    let need_noise = || {
        noise
            .cloned()
            .ok_or_else(|| Error::Config(format!("{} needs Gumbel noise", config.kind)))
    };

    let (output, gumbel, zf, zb, hard) = match config.kind {
        EstimatorKind::Ste => {
            let p = logits.softmax()?;
            let z = hard_sample(&probs);
            (graph.straight_through(z.clone(), p)?, None, None, None, z)
        }
        EstimatorKind::GumbelSoftmax => {
            let g = need_noise()?;
            let zhat = relax(logits, &g, tau_f)?;
            let zf = zhat.value();
            let z = hard_sample(&zf);
            (zhat, Some(g), Some(zf.clone()), Some(zf), z)
        }
        EstimatorKind::StGs => {
            let g = need_noise()?;
            let zhat = relax(logits, &g, tau_f)?;
            let zf = zhat.value();
            let z = hard_sample(&zf);
            let out = graph.straight_through(z.clone(), zhat)?;
            (out, Some(g), Some(zf.clone()), Some(zf), z)
        }
        EstimatorKind::DecoupledStGs => {
            let g = need_noise()?;
            let zf = relax_values(&l, &g, tau_f)?;
            let z = hard_sample(&zf);
            let zb = relax(logits, &g, tau_b)?;
            let zb_value = zb.value();
            let out = graph.straight_through(z.clone(), zb)?;
            (out, Some(g), Some(zf), Some(zb_value), z)
        }
    };

    Ok(Estimate {
        output,
        block: LatentBlock {
            logits: l,
            probs,
            gumbel,
            relaxed_forward: zf,
            relaxed_backward: zb,
            hard,
            tau_forward: tau_f,
            tau_backward: tau_b,
        },
    })
}

/// `(diag(z) - z zᵀ) / tau` applied to `c`, row by row: the gradient a
/// softmax relaxation at temperature `tau` hands back to its logits.
pub fn softmax_jacobian_vjp(relaxed: &Tensor, upstream: &Tensor, tau: f64) -> Tensor {
    let k = relaxed.last_dim();
    let mut out = Tensor::zeros(relaxed.shape().to_vec());
    for ((z, c), o) in relaxed
        .rows()
        .zip(upstream.data().chunks_exact(k))
        .zip(out.data_mut().chunks_exact_mut(k))
    {
        let dot: f64 = z.iter().zip(c).map(|(a, b)| a * b).sum();
        for j in 0..k {
            o[j] = z[j] * (c[j] - dot) / tau;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn leaf_grad(config: &EstimatorConfig, l: &Tensor, g: &Tensor, c: &Tensor) -> (Tensor, Tensor) {
        let graph = Graph::new();
        let lv = graph.param(l.clone());
        let est = estimate_with_noise(lv, config, Some(g), 0).unwrap();
        let cv = graph.constant(c.clone());
        est.output.mul(cv).unwrap().sum().unwrap().backward().unwrap();
        (est.output.value(), lv.grad().unwrap())
    }

    #[test]
    fn gumbel_analytic_points() {
        assert_eq!(gumbel_from_uniform((-1.0f64).exp()), 0.0);
        let u = (-(-1.0f64).exp()).exp();
        assert!((gumbel_from_uniform(u) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn relax_symmetric_and_analytic() {
        let z = relax_values(&t(&[2], &[0., 0.]), &t(&[2], &[0., 0.]), 0.37).unwrap();
        assert_eq!(z.data(), &[0.5, 0.5]);
        let z = relax_values(&t(&[2], &[1., 0.]), &t(&[2], &[0., 0.]), 1.0).unwrap();
        let e = std::f64::consts::E;
        assert!((z.data()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((z.data()[0] - 0.7311).abs() < 1e-4);
        assert!((z.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn relax_tends_to_softmax_of_noise_at_high_temperature() {
        let z = relax_values(&t(&[2], &[3., -1.]), &t(&[2], &[0.2, -0.1]), 1e6).unwrap();
        assert!((z.data()[0] - 0.5744).abs() < 1e-4);
        assert!((z.data()[1] - 0.4256).abs() < 1e-4);
    }

    #[test]
    fn relax_rejects_non_positive_temperature() {
        let l = t(&[2], &[0., 0.]);
        assert!(matches!(relax_values(&l, &l, 0.0), Err(Error::Config(_))));
        let g = Graph::new();
        assert!(relax(g.param(l.clone()), &l, -1.0).is_err());
    }

    #[test]
    fn hard_sample_one_hot_with_tie_break() {
        assert_eq!(hard_sample(&t(&[3], &[0.1, 0.7, 0.2])).data(), &[0., 1., 0.]);
        assert_eq!(hard_sample(&t(&[2], &[0.5, 0.5])).data(), &[1., 0.]);
    }

    #[test]
    fn schedule_closed_forms() {
        let s = Schedule::linear(1.0, 0.3, 100).unwrap();
        assert_eq!(s.value(100), 0.3);
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(500), 0.3);
        let geo = Schedule::geometric(0.3, 0.03, 10).unwrap();
        assert!((geo.value(5) - 0.3 * 0.1f64.sqrt()).abs() < 1e-12);
        assert!((geo.value(5) - 0.09487).abs() < 1e-5);
        assert!(Schedule::linear(0.0, 1.0, 10).is_err());
        assert!(Schedule::geometric(1.0, -1.0, 10).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig::decoupled(0.0, 1.0).validate().is_err());
        let mut c = EstimatorConfig::st_gs(1.0);
        c.tau_backward = 2.0;
        assert!(c.validate().is_err());
        assert!("reinforce".parse::<EstimatorKind>().is_err());
        assert_eq!("decoupled_st_gs".parse::<EstimatorKind>().unwrap(), EstimatorKind::DecoupledStGs);
    }

    #[test]
    fn scheduled_temperatures() {
        let c = EstimatorConfig::decoupled(1.0, 1.0).with_schedules(
            Some(Schedule::linear(1.0, 0.3, 10).unwrap()),
            Some(Schedule::linear(1.0, 2.0, 10).unwrap()),
        );
        assert_eq!(c.temperatures(0), (1.0, 1.0));
        assert_eq!(c.temperatures(10), (0.3, 2.0));
    }

    #[test]
    fn decoupled_gradient_is_backward_jacobian() {
        let l = t(&[2, 3], &[0.3, -1.2, 0.8, 2.0, 0.1, -0.5]);
        let g = t(&[2, 3], &[0.4, 1.1, -0.3, -0.2, 0.9, 0.05]);
        let c = t(&[2, 3], &[1.0, -2.0, 0.5, 0.3, 0.7, -1.5]);
        for tau_b in [0.3, 1.0, 3.0] {
            let cfg = EstimatorConfig::decoupled(0.5, tau_b);
            let (_, grad) = leaf_grad(&cfg, &l, &g, &c);
            let zb = relax_values(&l, &g, tau_b).unwrap();
            let expected = softmax_jacobian_vjp(&zb, &c, tau_b);
            for (a, b) in grad.data().iter().zip(expected.data()) {
                assert!((a - b).abs() < 1e-14, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_value_ignores_backward_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let l = sample_gumbel(&[4, 3, 5], &mut rng);
        let g = sample_gumbel(&[4, 3, 5], &mut rng);
        let c = Tensor::full(vec![4, 3, 5], 1.0);
        let z: Vec<Tensor> = [0.3, 3.0, 30.0]
            .iter()
            .map(|&tb| leaf_grad(&EstimatorConfig::decoupled(0.7, tb), &l, &g, &c).0)
            .collect();
        assert_eq!(z[0], z[1]);
        assert_eq!(z[1], z[2]);
    }

    #[test]
    fn ste_is_deterministic_and_uses_probabilities() {
        let l = t(&[1, 3], &[0.2, 1.5, -0.3]);
        let c = t(&[1, 3], &[1.0, 0.0, 2.0]);
        let graph = Graph::new();
        let lv = graph.param(l.clone());
        let est = estimate_with_noise(lv, &EstimatorConfig::ste(), None, 0).unwrap();
        assert_eq!(est.output.value().data(), &[0., 1., 0.]);
        let cv = graph.constant(c.clone());
        est.output.mul(cv).unwrap().sum().unwrap().backward().unwrap();
        let expected = softmax_jacobian_vjp(&softmax_values(&l), &c, 1.0);
        assert_eq!(lv.grad().unwrap().data(), expected.data());
    }

    #[test]
    fn gumbel_softmax_emits_relaxed_sample() {
        let l = t(&[1, 3], &[0.2, 1.5, -0.3]);
        let g = t(&[1, 3], &[0.0, -0.5, 0.3]);
        let graph = Graph::new();
        let est = estimate_with_noise(graph.param(l.clone()), &EstimatorConfig::gumbel_softmax(0.5), Some(&g), 0)
            .unwrap();
        assert_eq!(est.output.value(), relax_values(&l, &g, 0.5).unwrap());
    }

    #[test]
    fn noise_required_for_gumbel_kinds() {
        let graph = Graph::new();
        let l = graph.param(t(&[1, 2], &[0., 1.]));
        assert!(estimate_with_noise(l, &EstimatorConfig::st_gs(1.0), None, 0).is_err());
    }

    #[test]
    fn shared_noise_between_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let graph = Graph::new();
        let l = sample_gumbel(&[2, 4, 3], &mut rng);
        let est = estimate(graph.param(l.clone()), &EstimatorConfig::decoupled(0.4, 2.0), &mut rng, 0).unwrap();
        let b = &est.block;
        let g = b.gumbel.as_ref().unwrap();
        assert_eq!(b.relaxed_forward.as_ref().unwrap(), &relax_values(&l, g, 0.4).unwrap());
        assert_eq!(b.relaxed_backward.as_ref().unwrap(), &relax_values(&l, g, 2.0).unwrap());
    }

    proptest! {
        #[test]
        fn decoupled_collapses_to_st_gs(seed in any::<u64>(), tau in 0.05f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = sample_gumbel(&[3, 2, 4], &mut rng);
            let g = sample_gumbel(&[3, 2, 4], &mut rng);
            let c = sample_gumbel(&[3, 2, 4], &mut rng);
            let (za, ga) = leaf_grad(&EstimatorConfig::decoupled(tau, tau), &l, &g, &c);
            let (zb, gb) = leaf_grad(&EstimatorConfig::st_gs(tau), &l, &g, &c);
            prop_assert_eq!(za, zb);
            for (a, b) in ga.data().iter().zip(gb.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn one_hot_rows_and_gradient_null_direction(
            seed in any::<u64>(),
            tf in 0.05f64..5.0,
            tb in 0.05f64..5.0,
            k in 2usize..9,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [2, 3, k];
            let l = sample_gumbel(&shape, &mut rng);
            let g = sample_gumbel(&shape, &mut rng);
            let c = sample_gumbel(&shape, &mut rng);
            let (z, grad) = leaf_grad(&EstimatorConfig::decoupled(tf, tb), &l, &g, &c);
            for row in z.rows() {
                prop_assert_eq!(row.iter().filter(|&&v| v == 1.0).count(), 1);
                prop_assert_eq!(row.iter().filter(|&&v| v == 0.0).count(), k - 1);
            }
            for row in grad.rows() {
                prop_assert!(row.iter().sum::<f64>().abs() < 1e-10);
            }
            // argmax of the forward relaxation equals argmax of l / tf + g
            let shifted: Vec<f64> = l.data().iter().zip(g.data()).map(|(a, b)| a / tf + b).collect();
            for (zr, sr) in z.rows().zip(shifted.chunks_exact(k)) {
                prop_assert_eq!(argmax(zr), argmax(sr));
            }
        }

        #[test]
        fn probabilities_sum_to_one(seed in any::<u64>(), k in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let l = sample_gumbel(&[4, k], &mut rng).map(|v| 10.0 * v);
            for row in softmax_values(&l).rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&v| v >= 0.0));
            }
        }

        #[test]
        fn forward_temperature_never_enters_the_backward_jacobian(seed in any::<u64>()) {
            // Linear loss, so dL/dz = c whatever z is selected: the leaf
            // gradient must not depend on the forward temperature at all.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = [1, 1, 4];
            let l = sample_gumbel(&shape, &mut rng);
            let g = sample_gumbel(&shape, &mut rng);
            let c = sample_gumbel(&shape, &mut rng);
            let (_, ga) = leaf_grad(&EstimatorConfig::decoupled(0.2, 1.0), &l, &g, &c);
            let (_, gb) = leaf_grad(&EstimatorConfig::decoupled(4.0, 1.0), &l, &g, &c);
            prop_assert_eq!(ga, gb);
        }
    }
}
