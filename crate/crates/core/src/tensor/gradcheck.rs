//! Central finite-difference gradient checking.

use super::Tensor;

/// Function-value ulps treated as round-off in a central difference.
pub const ROUNDOFF_ULPS: f64 = 8.0;

/// One evaluation of the checked function.
#[derive(Clone, Debug)]
pub struct Probe {
    pub value: f64,
    /// Quantities whose sign change marks a non-differentiable point, such as
    /// ReLU pre-activations (see [`crate::tensor::Graph::kink_quantities`]).
    pub kinks: Vec<f64>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self {
            value,
            kinks: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over checked coordinates of
    /// `max(0, |analytic - fd| - noise) / (|fd| + 1e-12)`, where `noise` is
    /// the round-off resolution of the difference quotient.
    pub max_rel_error: f64,
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates skipped because a kink lies within reach of the stencil.
    pub skipped: usize,
}

/// Compares `analytic` against central differences of `f` at `theta`.
///
/// A coordinate is skipped when perturbing it by `±step` moves some kink
/// quantity that is within `10 * step` of zero or flips its sign.
///
/// Differences of a few ulps of `f` are indistinguishable from zero, so an
/// allowance of [`ROUNDOFF_ULPS`] ulps of `max |f(theta ± step)|` divided by
/// `2 * step` is subtracted from each error before it is made relative.
pub fn finite_diff_check<F>(mut f: F, theta: &Tensor, analytic: &Tensor, step: f64) -> GradCheckReport
where
    F: FnMut(&Tensor) -> Probe,
{
    assert_eq!(theta.shape(), analytic.shape(), "analytic gradient shape");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
    };
    let mut probe = theta.clone();
    for i in 0..theta.len() {
        let orig = theta.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if near_kink(&plus.kinks, &minus.kinks, step) {
            report.skipped += 1;
            continue;
        }
        let fd = (plus.value - minus.value) / (2.0 * step);
        let noise = ROUNDOFF_ULPS * f64::EPSILON * plus.value.abs().max(minus.value.abs()) / (2.0 * step);
        let err = ((analytic.data()[i] - fd).abs() - noise).max(0.0) / (fd.abs() + 1e-12);
        report.checked += 1;
        if err > report.max_rel_error || report.worst_index.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst_index = Some(i);
        }
    }
    report
}

fn near_kink(plus: &[f64], minus: &[f64], step: f64) -> bool {
    if plus.len() != minus.len() {
        return true;
    }
    plus.iter().zip(minus).any(|(&p, &m)| {
        let moved = p != m;
        (p > 0.0) != (m > 0.0) || (moved && (p.abs() < 10.0 * step || m.abs() < 10.0 * step))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let theta = Tensor::vector(&[3.0]);
        let grad = Tensor::vector(&[6.0]);
        let r = finite_diff_check(|t| Probe::smooth(t.item() * t.item()), &theta, &grad, 1e-6);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let theta = Tensor::vector(&[1.0, 2.0]);
        let grad = Tensor::vector(&[2.0, 5.0]);
        let r = finite_diff_check(
            |t| Probe::smooth(t.data().iter().map(|v| v * v).sum()),
            &theta,
            &grad,
            1e-6,
        );
        assert!(r.max_rel_error > 0.2);
        assert_eq!(r.worst_index, Some(1));
    }

    #[test]
    fn kink_coordinates_are_skipped() {
        // |x| at x = 1e-7 straddles the kink for step 1e-6.
        let theta = Tensor::vector(&[1e-7, 2.0]);
        let grad = Tensor::vector(&[1.0, 1.0]);
        let r = finite_diff_check(
            |t| Probe {
                value: t.data().iter().map(|v| v.abs()).sum(),
                kinks: t.data().to_vec(),
            },
            &theta,
            &grad,
            1e-6,
        );
        assert_eq!(r.skipped, 1);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-8);
    }
}
