//! Oracle suites runnable without any dataset download: finite-difference checks
//! of every op, estimator collapse, Gumbel-max marginals and the exact-gradient oracle.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::data;
use crate::error::Result;
use crate::estimators::{estimate, softmax_values, EstimatorConfig};
use crate::gradcheck::{central_differences, check, Tolerance};
use crate::models::{self, init_params, Activation, MlpSpec, ModelKind, ModelSpec};
use crate::oracle::ExactOracle;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SelftestReport {
    pub checks: Vec<CheckOutcome>,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, usize, String)>) -> CheckOutcome {
    let started = Instant::now();
    let (passed, cases, detail) = f().unwrap_or_else(|e| (false, 0, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        cases,
        detail,
        seconds: started.elapsed().as_secs_f64(),
    }
}

fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Values with magnitude in [0.05, 2), random sign.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.random_range(0.05..2.0);
            if rng.random::<bool>() { v } else { -v }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Rows whose largest entry leads the runner-up by at least `gap`.
fn separated_rows(rows: usize, cols: usize, gap: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut row: Vec<f64> = (0..cols).map(|_| rng.random_range(-2.0..2.0)).collect();
        let top = rng.random_range(0..cols);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row[top] = max + gap + rng.random::<f64>();
        data.extend(row);
    }
    Tensor::new(vec![rows, cols], data).unwrap()
}

/// `Σ c ⊙ v` with fixed random weights, so no coordinate cancels by symmetry.
fn weighted<'g>(v: Var<'g>, c: &Tensor) -> Result<Var<'g>> {
    v.mul(v.graph().constant(c.clone()))?.sum()
}

type OpCase = Vec<Tensor>;

struct OpSpec {
    name: &'static str,
    make: fn(&mut ChaCha8Rng) -> OpCase,
    apply: for<'g> fn(&[Var<'g>]) -> Result<Var<'g>>,
}

fn dims(rng: &mut ChaCha8Rng) -> (usize, usize) {
    (rng.random_range(1..5), rng.random_range(1..6))
}

fn op_specs() -> Vec<OpSpec> {
    fn binary(rng: &mut ChaCha8Rng) -> OpCase {
        let (r, c) = dims(rng);
        let rhs = if rng.random::<bool>() { vec![r, c] } else { vec![c] };
        vec![uniform(&[r, c], -2.0, 2.0, rng), uniform(&rhs, -2.0, 2.0, rng)]
    }
    fn unary(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng) -> OpCase {
        move |rng| {
            let (r, c) = dims(rng);
            vec![uniform(&[r, c], lo, hi, rng)]
        }
    }
    vec![
        OpSpec { name: "add", make: binary, apply: |v| v[0].add(v[1]) },
        OpSpec { name: "sub", make: binary, apply: |v| v[0].sub(v[1]) },
        OpSpec { name: "mul", make: binary, apply: |v| v[0].mul(v[1]) },
        OpSpec {
            name: "matmul",
            make: |rng| {
                let (m, k) = dims(rng);
                let n = rng.random_range(1..5);
                vec![uniform(&[m, k], -1.0, 1.0, rng), uniform(&[k, n], -1.0, 1.0, rng)]
            },
            apply: |v| v[0].matmul(v[1]),
        },
        OpSpec { name: "scale", make: |rng| unary(-2.0, 2.0)(rng), apply: |v| v[0].scale(-1.7) },
        OpSpec { name: "exp", make: |rng| unary(-2.0, 2.0)(rng), apply: |v| v[0].exp() },
        OpSpec { name: "log", make: |rng| unary(0.2, 3.0)(rng), apply: |v| v[0].log() },
        OpSpec {
            name: "log_clamped",
            make: |rng| {
                let (r, c) = dims(rng);
                let x = uniform(&[r, c], 0.01, 3.0, rng).map(|v| if (v - 0.1).abs() < 1e-3 { v + 0.01 } else { v });
                vec![x]
            },
            apply: |v| v[0].log_clamped(0.1),
        },
        OpSpec { name: "neg", make: |rng| unary(-2.0, 2.0)(rng), apply: |v| v[0].neg() },
        OpSpec {
            name: "sum",
            make: |rng| unary(-2.0, 2.0)(rng),
            apply: |v| v[0].sum(),
        },
        OpSpec {
            name: "mean",
            make: |rng| unary(-2.0, 2.0)(rng),
            apply: |v| v[0].mean(),
        },
        OpSpec {
            name: "max",
            make: |rng| {
                let (r, c) = dims(rng);
                vec![separated_rows(r, c, 0.01, rng)]
            },
            apply: |v| Ok(v[0].max_last()?.0),
        },
        OpSpec {
            name: "relu",
            make: |rng| {
                let (r, c) = dims(rng);
                vec![away_from_zero(&[r, c], rng)]
            },
            apply: |v| v[0].relu(),
        },
        OpSpec { name: "sigmoid", make: |rng| unary(-4.0, 4.0)(rng), apply: |v| v[0].sigmoid() },
        OpSpec { name: "softmax", make: |rng| unary(-3.0, 3.0)(rng), apply: |v| v[0].softmax() },
        OpSpec { name: "log_softmax", make: |rng| unary(-3.0, 3.0)(rng), apply: |v| v[0].log_softmax() },
        OpSpec {
            name: "concat",
            make: |rng| {
                let (r, c) = dims(rng);
                let c2 = rng.random_range(1..4);
                vec![uniform(&[r, c], -2.0, 2.0, rng), uniform(&[r, c2], -2.0, 2.0, rng)]
            },
            apply: |v| v[0].graph().concat(v),
        },
        OpSpec {
            name: "reshape",
            make: |rng| {
                let (r, c) = dims(rng);
                vec![uniform(&[r, c], -2.0, 2.0, rng)]
            },
            apply: |v| {
                let n = v[0].shape().iter().product::<usize>();
                v[0].reshape(vec![n])
            },
        },
    ]
}

/// Finite-difference check of every differentiable op over `cases` random inputs each.
pub fn op_gradient_suite(cases: usize, seed: u64) -> Vec<CheckOutcome> {
    let tol = Tolerance::default();
    let mut out: Vec<CheckOutcome> = op_specs()
        .into_iter()
        .enumerate()
        .map(|(i, op)| {
            timed(&format!("fd/{}", op.name), || {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let (mut failures, mut worst, mut first) = (0, 0.0f64, None);
                for case in 0..cases {
                    let inputs = (op.make)(&mut rng);
                    let apply = op.apply;
                    let out_shape = {
                        let g = Graph::new();
                        let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
                        apply(&vars)?.shape()
                    };
                    let c = uniform(&out_shape, -1.0, 1.0, &mut rng);
                    let r = check(&inputs, |_, v| weighted(apply(v)?, &c), tol)?;
                    worst = worst.max(r.max_abs_err);
                    if !r.passed() {
                        failures += 1;
                        first.get_or_insert((case, r.first_failure));
                    }
                }
                let detail = match first {
                    None => format!("max abs err {worst:.2e}"),
                    Some((case, f)) => format!("{failures} failing cases, first case {case}: {f:?}"),
                };
                Ok((failures == 0, cases, detail))
            })
        })
        .collect();
    out.push(timed("fd/straight_through", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000);
        let mut failures = 0;
        for _ in 0..cases {
            let (r, k) = (rng.random_range(1..4), rng.random_range(2..6));
            let x = uniform(&[r, k], -2.0, 2.0, &mut rng);
            let c = uniform(&[r, k], -1.0, 1.0, &mut rng);
            let tau = rng.random_range(0.3..3.0);
            let g = Graph::new();
            let xv = g.param(x.clone());
            let surrogate = xv.scale(1.0 / tau)?.softmax()?;
            let hard = crate::estimators::hard_sample(&surrogate.value());
            weighted(g.straight_through(hard, surrogate)?, &c)?.backward()?;
            let analytic = xv.grad().unwrap();
            let numeric = central_differences(
                |d| {
                    let p = softmax_values(&Tensor::new(vec![r, k], d.iter().map(|v| v / tau).collect()).unwrap());
                    p.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
                },
                x.data(),
                tol.h,
            );
            if !analytic.data().iter().zip(&numeric).all(|(a, b)| tol.close(*a, *b)) {
                failures += 1;
            }
        }
        Ok((failures == 0, cases, format!("{failures} failing cases")))
    }));
    out
}

/// Decoupled ST-GS with τf = τb = τ against vanilla ST-GS under a shared seed.
pub fn collapse_suite(triples: usize, seed: u64) -> CheckOutcome {
    timed("collapse", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut worst = 0.0f64;
        for _ in 0..triples {
            let (b, d, k) = (rng.random_range(1..5), rng.random_range(1..4), rng.random_range(2..7));
            let logits = uniform(&[b, d, k], -3.0, 3.0, &mut rng);
            let mix = uniform(&[d * k, 3], -1.0, 1.0, &mut rng);
            let tau = rng.random_range(0.1..5.0);
            let noise_seed: u64 = rng.random();
            let run = |cfg: &EstimatorConfig| -> Result<(Tensor, Tensor)> {
                let g = Graph::new();
                let l = g.param(logits.clone());
                let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
                let z = estimate(l, cfg, &mut nrng, 0)?.output;
                let h = z.reshape(vec![b, d * k])?.matmul(g.constant(mix.clone()))?;
                h.mul(h)?.sum()?.backward()?;
                Ok((z.value(), l.grad().unwrap()))
            };
            let (zv, gv) = run(&EstimatorConfig::st_gs(tau))?;
            let (zd, gd) = run(&EstimatorConfig::decoupled(tau, tau))?;
            for (a, b) in zv.data().iter().zip(zd.data()).chain(gv.data().iter().zip(gd.data())) {
                worst = worst.max((a - b).abs());
            }
        }
        Ok((worst <= 1e-12, triples, format!("max abs difference {worst:.2e}")))
    })
}

/// One-hot frequencies of the τf = 1 forward pass against softmax(l), within 3 multinomial σ.
pub fn gumbel_max_suite(draws: usize, seed: u64) -> CheckOutcome {
    timed("gumbel_max_marginals", || {
        let k = 5;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let tiled: Vec<f64> = logits.iter().copied().cycle().take(draws * k).collect();
        let g = Graph::new();
        let l = g.constant(Tensor::new(vec![draws, 1, k], tiled)?);
        let block = estimate(l, &EstimatorConfig::decoupled(1.0, 1.0), &mut rng, 0)?.block;
        let mut counts = vec![0usize; k];
        for row in block.hard.rows() {
            counts[crate::tensor::argmax(row)] += 1;
        }
        let p = softmax_values(&Tensor::new(vec![1, k], logits)?);
        let n = draws as f64;
        let mut worst_z = 0.0f64;
        for (c, &pi) in counts.iter().zip(p.data()) {
            let sd = (pi * (1.0 - pi) / n).sqrt();
            worst_z = worst_z.max((*c as f64 / n - pi).abs() / sd);
        }
        Ok((worst_z <= 3.0, draws, format!("max |z| {worst_z:.2} over {k} categories")))
    })
}

/// Small model on synthetic images: encoder/decoder with one hidden layer of 16 units.
pub fn tiny_model(kind: ModelKind, dims: usize, k: usize) -> ModelSpec {
    let mut spec = match kind {
        ModelKind::CategoricalVae => ModelSpec::categorical_vae(data::PIXELS, dims, k),
        ModelKind::BinaryAe => ModelSpec::binary_ae(data::PIXELS, dims),
    };
    spec.encoder = MlpSpec::new(vec![data::PIXELS, 16, spec.latent.width()], Activation::None);
    spec.decoder = MlpSpec::new(vec![spec.decoder_input_width(), 16, data::PIXELS], Activation::Sigmoid);
    spec
}

/// Every (model, dims, k) with `k^dims <= max_configs`.
pub fn oracle_instances(max_configs: usize) -> Vec<(ModelKind, usize, usize)> {
    let mut out = Vec::new();
    for dims in 1.. {
        if 2usize.pow(dims as u32) > max_configs {
            break;
        }
        for k in 2.. {
            if (k as u128).pow(dims as u32) > max_configs as u128 {
                break;
            }
            out.push((ModelKind::CategoricalVae, dims, k));
        }
        out.push((ModelKind::BinaryAe, dims, 2));
    }
    out
}

/// Exact gradient against central differences of the enumerated expectation.
/// Agreement: `|a - b| <= 1e-5 |b| + 64 ε max(1, |L|) / h` with `h = 1e-4`.
pub fn exact_gradient_fd_suite(max_configs: usize, seed: u64) -> CheckOutcome {
    timed("exact_gradient_vs_fd", || {
        let images = data::synthetic(64, seed)?.train;
        let instances = oracle_instances(max_configs);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut failures, mut worst) = (0usize, 0.0f64);
        for (i, &(kind, dims, k)) in instances.iter().enumerate() {
            let spec = tiny_model(kind, dims, k);
            let params = init_params(&spec, seed + i as u64);
            let n = images.shape()[0];
            let x = images.select_rows(&[rng.random_range(0..n), rng.random_range(0..n)]);
            let logits = uniform(&[2, dims, k], -2.0, 2.0, &mut rng);
            let oracle = ExactOracle::with_logits(&spec, &params, &x, logits.clone())?;
            let exact = oracle.gradient()?;
            let h = 1e-4;
            let atol = 64.0 * f64::EPSILON * oracle.expected_loss_value(&logits)?.abs().max(1.0) / h;
            let numeric = central_differences(
                |d| {
                    oracle
                        .expected_loss_value(&Tensor::new(logits.shape().to_vec(), d.to_vec()).unwrap())
                        .unwrap()
                },
                logits.data(),
                h,
            );
            let mut ok = true;
            for (a, b) in exact.data().iter().zip(&numeric) {
                let ratio = (a - b).abs() / (1e-5 * b.abs() + atol);
                worst = worst.max(ratio);
                ok &= ratio <= 1.0;
            }
            failures += usize::from(!ok);
        }
        Ok((
            failures == 0,
            instances.len(),
            format!("{failures} failing instances, worst error/allowed {worst:.3}"),
        ))
    })
}

/// Inverse-CDF categorical draws decoded through the model, against the enumerated expectation.
pub fn monte_carlo_suite(samples: usize, seed: u64) -> CheckOutcome {
    timed("exact_loss_vs_monte_carlo", || {
        let images = data::synthetic(64, seed)?.train;
        let cases = [
            (ModelKind::CategoricalVae, 2, 3),
            (ModelKind::CategoricalVae, 4, 4),
            (ModelKind::CategoricalVae, 1, 16),
            (ModelKind::BinaryAe, 8, 2),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut details = Vec::new();
        let mut all_ok = true;
        for (i, &(kind, dims, k)) in cases.iter().enumerate() {
            let spec = tiny_model(kind, dims, k);
            let params = init_params(&spec, seed + 100 + i as u64);
            let x = images.select_rows(&[3]);
            let logits = uniform(&[1, dims, k], -1.5, 1.5, &mut rng);
            let exact = ExactOracle::with_logits(&spec, &params, &x, logits.clone())?.expected_loss_value(&logits)?;
            let p = softmax_values(&logits);
            let (mut sum, mut sum_sq) = (0.0, 0.0);
            let chunk = 5000;
            let mut done = 0;
            while done < samples {
                let m = chunk.min(samples - done);
                let mut z = Tensor::zeros(vec![m, dims, k]);
                for j in 0..m {
                    for d in 0..dims {
                        let probs = &p.data()[d * k..(d + 1) * k];
                        let u: f64 = rng.random();
                        let mut acc = 0.0;
                        let mut pick = k - 1;
                        for (c, &pc) in probs.iter().enumerate() {
                            acc += pc;
                            if u < acc {
                                pick = c;
                                break;
                            }
                        }
                        z.data_mut()[(j * dims + d) * k + pick] = 1.0;
                    }
                }
                let g = Graph::new();
                let bound = params.bind_frozen(&g);
                let xhat = models::decode(&spec, &bound, g.constant(z))?.value();
                for v in per_sample_loss(kind, &xhat, &x.select_rows(&vec![0; m])) {
                    sum += v;
                    sum_sq += v * v;
                }
                done += m;
            }
            let n = samples as f64;
            let mean = sum / n;
            let se = ((sum_sq / n - mean * mean).max(0.0) / (n - 1.0)).sqrt();
            let z = (mean - exact).abs() / se;
            all_ok &= z <= 3.0;
            details.push(format!("{dims}x{k}: |z| {z:.2}"));
        }
        Ok((all_ok, cases.len(), details.join(", ")))
    })
}

fn per_sample_loss(kind: ModelKind, xhat: &Tensor, x: &Tensor) -> Vec<f64> {
    xhat.rows()
        .zip(x.rows())
        .map(|(h, t)| match kind {
            ModelKind::BinaryAe => h.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / t.len() as f64,
            ModelKind::CategoricalVae => -h
                .iter()
                .zip(t)
                .map(|(&a, &b)| b * a.max(models::LOG_FLOOR).ln() + (1.0 - b) * (1.0 - a).max(models::LOG_FLOOR).ln())
                .sum::<f64>(),
        })
        .collect()
}

/// Selftest sizes: 100 cases per op, 50 collapse triples, 2·10⁵ Gumbel-max draws,
/// every instance up to 256 configurations, 10⁵ Monte Carlo samples.
pub fn run_all(seed: u64) -> SelftestReport {
    let mut checks = op_gradient_suite(100, seed);
    checks.push(collapse_suite(50, seed));
    checks.push(gumbel_max_suite(200_000, seed));
    checks.push(exact_gradient_fd_suite(256, seed));
    checks.push(monte_carlo_suite(100_000, seed));
    SelftestReport { checks }
}
