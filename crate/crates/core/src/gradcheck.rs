//! Central-difference gradient verification.
//!
//! The standard probe is `s(x) = Σ f(x)`: the analytic side seeds the tape's
//! backward pass with ones, the numeric side perturbs one input element at a
//! time and re-runs the forward pass. The forward pass itself is f32, but the
//! probe sum and all difference arithmetic run in f64 — at the tolerances the
//! test suite demands, f32 accumulation of thousands of outputs would add more
//! noise than the quantity being measured.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst-case disagreement between analytic and numeric gradients.
#[derive(Clone, Copy, Debug)]
pub struct GradCheckReport {
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub num_elements: usize,
}

impl GradCheckReport {
    pub fn within(&self, rel_tol: f64) -> bool {
        self.max_rel_error <= rel_tol
    }
}

/// Central finite differences of a scalar probe, one input element at a time.
/// The perturbed values are rounded through f32 (that is what the forward pass
/// will actually see), and the divisor is the realized f64 step, which removes
/// most of the quantization error of ±eps.
pub fn finite_diff_grad(
    f: &mut dyn FnMut(&Tensor) -> Result<f64>,
    x: &Tensor,
    eps: f64,
) -> Result<Vec<f64>> {
    if eps <= 0.0 {
        return Err(Error::arg("finite_diff_grad eps must be positive"));
    }
    let mut grad = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x.data()[i] as f64;
        let xp = (xi + eps) as f32;
        let xm = (xi - eps) as f32;
        let denom = xp as f64 - xm as f64;
        if denom == 0.0 {
            return Err(Error::arg(format!(
                "finite_diff_grad step vanished at element {i} (|x| too large for eps)"
            )));
        }
        probe.data_mut()[i] = xp;
        let fp = f(&probe)?;
        probe.data_mut()[i] = xm;
        let fm = f(&probe)?;
        probe.data_mut()[i] = x.data()[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "finite_diff_grad probe produced a non-finite value at element {i}"
            )));
        }
        grad.push((fp - fm) / denom);
    }
    Ok(grad)
}

/// Element-wise comparison with relative error floored at magnitude 1 — the
/// checked functions take O(1) inputs and produce O(1) gradients, so a tiny
/// true gradient with f32 round-off should not read as a huge relative error.
pub fn compare(analytic: &Tensor, numeric: &[f64]) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        max_abs_error: 0.0,
        max_rel_error: 0.0,
        num_elements: numeric.len(),
    };
    for (&a, &n) in analytic.data().iter().zip(numeric) {
        let a = a as f64;
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(1.0);
        report.max_abs_error = report.max_abs_error.max(abs);
        report.max_rel_error = report.max_rel_error.max(rel);
    }
    report
}

/// Checks `d(Σ build(x))/dx`: the tape's seeded backward against central
/// differences. `build` is called with a fresh tape per evaluation, so it must
/// be self-contained (capture any fixed co-inputs by value and register them
/// inside).
pub fn check_output_sum_grad(
    build: impl Fn(&Tape, Var) -> Result<Var>,
    x: &Tensor,
    eps: f64,
) -> Result<GradCheckReport> {
    let analytic = {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone());
        let y = build(&tape, xv)?;
        let seed = Tensor::ones(tape.value(y).shape());
        let grads = tape.backward_seeded(y, seed)?;
        grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let numeric = finite_diff_grad(
        &mut |probe| {
            let tape = Tape::new();
            let xv = tape.leaf(probe.clone());
            let y = build(&tape, xv)?;
            let total = tape.value(y).data().iter().map(|&v| v as f64).sum();
            Ok(total)
        },
        x,
        eps,
    )?;
    Ok(compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient_is_recovered() {
        // f(x) = Σ x², so df/dx = 2x.
        let x = Tensor::new(vec![3], vec![0.5, -1.25, 2.0]).unwrap();
        let g = finite_diff_grad(
            &mut |t| Ok(t.data().iter().map(|&v| (v as f64).powi(2)).sum()),
            &x,
            1e-3,
        )
        .unwrap();
        for (gi, xi) in g.iter().zip(x.data()) {
            assert!((gi - 2.0 * *xi as f64).abs() < 1e-4);
        }
    }

    #[test]
    fn harness_accepts_a_correct_op_chain() {
        let x = Tensor::from_fn(&[2, 3], |i| (i as f32 * 0.7).sin());
        let report = check_output_sum_grad(
            |tape, x| {
                let y = tape.gelu(x)?;
                tape.mul(y, y)
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(report.within(1e-3), "report: {report:?}");
        assert_eq!(report.num_elements, 6);
    }

    #[test]
    fn harness_flags_a_gradient_that_disagrees_with_the_secant() {
        // Just right of the abs kink the analytic slope is +1, but a central
        // difference spanning the kink measures ~0.2. The harness must report
        // that disagreement rather than smooth over it.
        let x = Tensor::new(vec![2], vec![2e-4, 3.0]).unwrap();
        let report = check_output_sum_grad(|tape, x| tape.abs(x), &x, 1e-3).unwrap();
        assert!(report.max_rel_error > 0.5, "report: {report:?}");
    }

    #[test]
    fn rejects_non_positive_eps() {
        let x = Tensor::ones(&[1]);
        assert!(finite_diff_grad(&mut |_| Ok(0.0), &x, 0.0).is_err());
    }
}
