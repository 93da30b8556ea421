//! Central finite differences, the verification oracle for every backward rule.

use super::Tensor;

/// Analytic entries smaller than this are compared absolutely.
pub const SMALL_GRADIENT: f64 = 1e-8;
/// Absolute tolerance applied to those small entries.
pub const SMALL_GRADIENT_ABS_TOL: f64 = 1e-7;

/// `(f(x+εe_i) − f(x−εe_i)) / 2ε` for every element of `x`.
pub fn finite_diff_gradient<F>(f: F, x: &Tensor<f64>, step: f64) -> Tensor<f64>
where
    F: Fn(&Tensor<f64>) -> f64,
{
    assert!(step > 0.0, "finite difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    Tensor::new(x.shape().to_vec(), grad).expect("gradient keeps the input shape")
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradComparison {
    /// Worst `|a−n| / max(|a|,|n|)` over entries with `|a| ≥ 1e-8`.
    pub max_relative_error: f64,
    /// Worst `|a−n|` over entries with `|a| < 1e-8`.
    pub max_small_abs_error: f64,
    pub elements: usize,
}

impl GradComparison {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.max_relative_error < rel_tol && self.max_small_abs_error < SMALL_GRADIENT_ABS_TOL
    }
}

pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> GradComparison {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let mut cmp = GradComparison {
        max_relative_error: 0.0,
        max_small_abs_error: 0.0,
        elements: analytic.len(),
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let diff = (a - n).abs();
        if a.abs() < SMALL_GRADIENT {
            cmp.max_small_abs_error = cmp.max_small_abs_error.max(diff);
        } else {
            cmp.max_relative_error = cmp.max_relative_error.max(diff / a.abs().max(n.abs()));
        }
    }
    cmp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::from_f64(vec![2, 3], &[0.3, -1.0, 2.5, 4.0, 0.0, -7.0]).unwrap();
        let g = finite_diff_gradient(|t| t.data().iter().sum(), &x, 1e-4);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::scalar(3.0);
        let g = finite_diff_gradient(|t| t.item() * t.item(), &x, 1e-4);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn small_entries_are_compared_absolutely() {
        let cmp = compare_gradients(&[1.0, 1e-10], &[1.0 + 1e-6, 5e-8]);
        assert!(cmp.max_relative_error < 1e-5);
        assert!(cmp.max_small_abs_error < 1e-7);
        assert!(cmp.passes(1e-4));
        let bad = compare_gradients(&[0.0], &[1e-6]);
        assert!(!bad.passes(1e-4));
    }
}
