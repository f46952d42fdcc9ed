//! Central finite-difference oracle.
//!
//! Only forward values are used here, so the checks stay independent of the
//! backward rules they validate.

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct Tolerance {
    pub h: f64,
    pub rtol: f64,
    pub atol: f64,
}

impl Default for Tolerance {
    fn default() -> Self {
        Self {
            h: 1e-5,
            rtol: 1e-4,
            atol: 1e-7,
        }
    }
}

impl Tolerance {
    /// `|a - b| <= atol + rtol * |b|`, with `b` the reference.
    pub fn close(&self, a: f64, b: f64) -> bool {
        (a - b).abs() <= self.atol + self.rtol * b.abs()
    }
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub checked: usize,
    pub failures: usize,
    pub max_abs_err: f64,
    /// First failing coordinate: (input, element, analytic, numeric).
    pub first_failure: Option<(usize, usize, f64, f64)>,
}

impl Report {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }

    fn record(&mut self, tol: &Tolerance, input: usize, elem: usize, analytic: f64, numeric: f64) {
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max((analytic - numeric).abs());
        if !tol.close(analytic, numeric) {
            self.failures += 1;
            self.first_failure.get_or_insert((input, elem, analytic, numeric));
        }
    }
}

/// Central differences of a scalar function of a flat vector.
pub fn central_differences(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Compares reverse-mode gradients of a scalar graph function against
/// central differences, coordinate by coordinate, for every input.
pub fn check<F>(inputs: &[Tensor], f: F, tol: Tolerance) -> Result<Report>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        f(&g, &vars)?.backward()?;
        vars.iter()
            .zip(inputs)
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape().to_vec())))
            .collect()
    };

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = xs.iter().map(|t| g.constant(t.clone())).collect();
        Ok(f(&g, &vars)?.value().item().unwrap_or(f64::NAN))
    };

    let mut report = Report::default();
    let mut probe = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            probe[i].data_mut()[e] = orig + tol.h;
            let up = eval(&probe)?;
            probe[i].data_mut()[e] = orig - tol.h;
            let down = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            report.record(&tol, i, e, a.data()[e], (up - down) / (2.0 * tol.h));
        }
    }
    Ok(report)
}
