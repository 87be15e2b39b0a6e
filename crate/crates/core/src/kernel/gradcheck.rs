//! Finite-difference gradient oracle. Any scalar-valued function written
//! against [`Engine`] can be checked: reverse-mode gradients from a recorded
//! tape are compared against central differences of plain evaluations.

use crate::kernel::engine::{Engine, EvalEngine, TapeEngine};
use crate::kernel::tensor::Tensor;

/// A scalar-valued differentiable function of some parameter tensors.
/// `eval` must produce a [1,1] tensor and must perform the same computation
/// whichever engine drives it.
pub trait ScalarFn {
    fn eval<E: Engine>(&self, e: &mut E, params: &[E::T]) -> E::T;
}

#[derive(Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all parameter elements.
    pub max_rel_err: f64,
    /// (parameter index, element index) of the worst element.
    pub worst: (usize, usize),
    /// Analytic and numeric gradient at the worst element.
    pub worst_pair: (f64, f64),
    pub pass: bool,
    /// Set when the loss or a probe evaluation was non-finite; the check
    /// reports failure instead of crashing.
    pub failure: Option<String>,
}

/// Relative error with an absolute floor: central differences carry ~1e-10
/// of cancellation noise, so near-zero gradients are compared absolutely.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / (a.abs().max(n.abs())).max(1e-3)
}

/// Compare reverse-mode gradients of `f` at `params` against central
/// differences with the given `step`; pass iff the max relative error over
/// every element of every parameter is below `tol`.
pub fn grad_check(f: &impl ScalarFn, params: &[Tensor], step: f64, tol: f64) -> GradCheckReport {
    let fail = |msg: String| GradCheckReport {
        max_rel_err: f64::INFINITY,
        worst: (0, 0),
        worst_pair: (f64::NAN, f64::NAN),
        pass: false,
        failure: Some(msg),
    };

    // Analytic gradients from one recorded forward pass.
    let mut eng = TapeEngine::new();
    let ids: Vec<usize> = params.iter().map(|p| eng.lift(p)).collect();
    let root = f.eval(&mut eng, &ids);
    let loss = eng.value(&root);
    assert_eq!(loss.shape(), (1, 1), "grad_check target must be scalar");
    if !loss.all_finite() {
        return fail(format!("non-finite loss {}", loss.at(0, 0)));
    }
    let grads = eng.backward(root);

    let eval_at = |probe: &[Tensor]| -> f64 {
        let mut e = EvalEngine::new();
        let ts: Vec<Tensor> = probe.to_vec();
        let out = f.eval(&mut e, &ts);
        out.at(0, 0)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: (0, 0),
        worst_pair: (0.0, 0.0),
        pass: true,
        failure: None,
    };
    let mut probe: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        let analytic = grads[ids[pi]].clone().unwrap_or_else(|| Tensor::zeros(p.rows(), p.cols()));
        for ei in 0..p.data().len() {
            let x = p.data()[ei];
            probe[pi].data_mut()[ei] = x + step;
            let up = eval_at(&probe);
            probe[pi].data_mut()[ei] = x - step;
            let down = eval_at(&probe);
            probe[pi].data_mut()[ei] = x;
            if !up.is_finite() || !down.is_finite() {
                return fail(format!("non-finite probe at param {pi} element {ei}"));
            }
            let numeric = (up - down) / (2.0 * step);
            let a = analytic.data()[ei];
            let e = rel_err(a, numeric);
            if e >= report.max_rel_err {
                report.max_rel_err = e;
                report.worst = (pi, ei);
                report.worst_pair = (a, numeric);
            }
        }
    }
    report.pass = report.max_rel_err < tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::engine::Engine;

    struct Square;

    impl ScalarFn for Square {
        fn eval<E: Engine>(&self, e: &mut E, params: &[E::T]) -> E::T {
            e.matmul(&params[0], &params[0])
        }
    }

    #[test]
    fn quadratic_gradient_is_exact() {
        // x² at x=3: analytic 2x = 6; the central difference is exact for a
        // quadratic, and a power-of-two step keeps the arithmetic exact too.
        let p = [Tensor::scalar(3.0)];
        let r = grad_check(&Square, &p, 0.5, 1e-12);
        assert!(r.pass, "{r:?}");
        assert_eq!(r.worst_pair.0, 6.0);
        assert_eq!(r.worst_pair.1, 6.0);
    }

    struct SoftmaxXent {
        target: usize,
    }

    impl ScalarFn for SoftmaxXent {
        fn eval<E: Engine>(&self, e: &mut E, params: &[E::T]) -> E::T {
            let lp = e.log_softmax(&params[0]);
            let mut pick = Tensor::zeros(1, e.value(&lp).cols());
            pick.set(0, self.target, -1.0);
            e.weighted_sum(&lp, &pick)
        }
    }

    #[test]
    fn softmax_cross_entropy_matches_central_differences() {
        let logits = Tensor::new(1, 3, vec![0.2, -1.3, 0.8]);
        let r = grad_check(&SoftmaxXent { target: 1 }, &[logits], 1e-5, 1e-6);
        assert!(r.pass, "{r:?}");
    }

    struct LogOf;

    impl ScalarFn for LogOf {
        fn eval<E: Engine>(&self, e: &mut E, params: &[E::T]) -> E::T {
            // log_softmax of a single logit is 0 everywhere; weighted by the
            // parameter itself this goes NaN when the parameter is NaN.
            e.weighted_sum(&params[0], &Tensor::scalar(f64::INFINITY))
        }
    }

    #[test]
    fn non_finite_loss_reports_failure_without_crashing() {
        let r = grad_check(&LogOf, &[Tensor::scalar(0.0)], 1e-5, 1e-4);
        assert!(!r.pass);
        assert!(r.failure.is_some());
    }
}
