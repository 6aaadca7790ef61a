//! Central finite differences: the gradient oracle.
//!
//! The quotient (f(x+h·e) - f(x-h·e)) / (2h) is accumulated in f64 per
//! perturbed element. Relative error between an analytic gradient g and the
//! oracle ĝ is |g-ĝ| / max(|g|, |ĝ|, atol); atol guards genuinely-zero
//! entries against 0/0.

use super::{ParamSet, Real, Tensor};

pub const DEFAULT_H: f64 = 1e-3;
pub const DEFAULT_ATOL: f64 = 1e-4;

/// Per-element central differences of a scalar-valued function of a tensor.
/// The function should carry as much precision as it can (graph-backed
/// closures cast their f32 loss up; closed-form oracles compute in f64).
pub fn finite_diff_grad<F>(f: F, x: &Tensor, h: f64) -> Tensor
where
    F: Fn(&Tensor) -> f64,
{
    let mut grad = vec![0.0f32; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = x.data[i];
        let xp = (orig as f64 + h) as f32;
        let xm = (orig as f64 - h) as f32;
        probe.data[i] = xp;
        let fp = f(&probe);
        probe.data[i] = xm;
        let fm = f(&probe);
        probe.data[i] = orig;
        // divide by the realized (f32-rounded) step, not the nominal one
        grad[i] = ((fp - fm) / (xp as f64 - xm as f64)) as f32;
    }
    Tensor {
        shape: x.shape.clone(),
        data: grad,
    }
}

/// Central differences w.r.t. a sampled subset of one named parameter; the
/// closure rebuilds the forward pass from the (perturbed) set.
pub fn finite_diff_param_grad<F>(
    f: F,
    params: &mut ParamSet,
    id: usize,
    indices: &[usize],
    h: f64,
) -> Vec<f32>
where
    F: Fn(&ParamSet) -> f64,
{
    let mut out = Vec::with_capacity(indices.len());
    for &i in indices {
        let orig = params.entry(id).value.data[i];
        let xp = (orig as f64 + h) as f32;
        let xm = (orig as f64 - h) as f32;
        params.entry_mut(id).value.data[i] = xp;
        let fp = f(params);
        params.entry_mut(id).value.data[i] = xm;
        let fm = f(params);
        params.entry_mut(id).value.data[i] = orig;
        out.push(((fp - fm) / (xp as f64 - xm as f64)) as f32);
    }
    out
}

pub fn rel_err<F: Real>(a: F, b: F, atol: f64) -> f64 {
    let (a, b) = (a.to_f64(), b.to_f64());
    (a - b).abs() / (a.abs().max(b.abs()).max(atol))
}

/// Max relative error over paired gradient entries.
pub fn max_rel_err<F: Real>(analytic: &[F], oracle: &[F], atol: f64) -> f64 {
    analytic
        .iter()
        .zip(oracle)
        .map(|(&a, &b)| rel_err(a, b, atol))
        .fold(0.0, f64::max)
}

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl GradCheckReport {
    pub fn line(&self) -> String {
        format!(
            "{:<44} max_rel_err={:.3e} tol={:.1e} {}",
            self.name,
            self.max_rel_err,
            self.tolerance,
            if self.passed { "PASS" } else { "FAIL" }
        )
    }
}

/// Accumulates named checks; used by the grad-check command and tests.
#[derive(Debug, Default)]
pub struct GradCheckSuite {
    pub reports: Vec<GradCheckReport>,
}

impl GradCheckSuite {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record<F: Real>(&mut self, name: &str, analytic: &[F], oracle: &[F], tolerance: f64) {
        let err = max_rel_err(analytic, oracle, DEFAULT_ATOL);
        self.reports.push(GradCheckReport {
            name: name.to_string(),
            max_rel_err: err,
            tolerance,
            passed: err < tolerance,
        });
    }

    pub fn all_passed(&self) -> bool {
        self.reports.iter().all(|r| r.passed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_sum_is_ones() {
        let x = Tensor::new(vec![3], vec![0.5, -2.0, 7.0]).unwrap();
        let g = finite_diff_grad(|t| t.data.iter().map(|&v| v as f64).sum(), &x, DEFAULT_H);
        for v in g.data {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_of_square_at_3() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_grad(|t| (t.data[0] as f64).powi(2), &x, 1e-3);
        assert!((g.data[0] - 6.0).abs() < 1e-6, "got {}", g.data[0]);
    }
}
