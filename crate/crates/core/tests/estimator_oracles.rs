use discrete_grad::estimators::{estimate_with_noise, gumbel, softmax_values, EstimatorConfig};
use discrete_grad::{Graph, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;

#[test]
fn gumbel_sample_mean_is_euler_gamma() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n = 1_000_000;
    let mean = (0..n).map(|_| gumbel(&mut rng)).sum::<f64>() / n as f64;
    assert!((mean - EULER_GAMMA).abs() < 0.01, "mean {mean}");
}

/// `(diag(z) - z zᵀ) / τ` as an explicit matrix.
fn softmax_jacobian(z: &[f64], tau: f64) -> Vec<Vec<f64>> {
    (0..z.len())
        .map(|i| {
            (0..z.len())
                .map(|j| (if i == j { z[i] } else { 0.0 } - z[i] * z[j]) / tau)
                .collect()
        })
        .collect()
}

#[test]
fn decoupled_leaf_gradient_is_the_backward_jacobian_times_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let k = rng.random_range(2..7);
        let l: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
        let g: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..2.0)).collect();
        let c: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let (tf, tb) = (rng.random_range(0.1..3.0), rng.random_range(0.1..6.0));

        let graph = Graph::new();
        let logits = graph.param(Tensor::new(vec![1, 1, k], l.clone()).unwrap());
        let noise = Tensor::new(vec![1, 1, k], g.clone()).unwrap();
        let out = estimate_with_noise(logits, &EstimatorConfig::decoupled(tf, tb), Some(&noise), 0)
            .unwrap()
            .output;
        let weights = graph.constant(Tensor::new(vec![1, 1, k], c.clone()).unwrap());
        out.mul(weights).unwrap().sum().unwrap().backward().unwrap();
        let got = logits.grad().unwrap();

        let scaled: Vec<f64> = l.iter().zip(&g).map(|(a, b)| a / tb + b).collect();
        let zb = softmax_values(&Tensor::new(vec![1, k], scaled).unwrap());
        let jac = softmax_jacobian(zb.data(), tb);
        for i in 0..k {
            let want: f64 = (0..k).map(|j| jac[j][i] * c[j]).sum();
            assert!((got.data()[i] - want).abs() <= 1e-12 + 1e-10 * want.abs());
        }

        let hard = out.value();
        let perturbed: Vec<f64> = l.iter().zip(&g).map(|(a, b)| a / tf + b).collect();
        let winner = (0..k).max_by(|&a, &b| perturbed[a].total_cmp(&perturbed[b])).unwrap();
        for i in 0..k {
            assert_eq!(hard.data()[i], if i == winner { 1.0 } else { 0.0 });
        }
    }
}
