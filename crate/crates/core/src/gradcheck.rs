//! Central finite-difference checking for reverse-mode gradients.
//!
//! Used by the test suites to verify every loss in the crate at double
//! precision. The check perturbs each element of each tracked input by
//! `±h`, recomputes the scalar loss, and compares the centered difference
//! against the tape gradient.

use crate::autodiff::{Graph, NodeId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error seen over all elements of all inputs.
    pub max_rel_err: f64,
    /// (input index, element index, analytic, numeric) of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub elements_checked: usize,
}

/// Relative error with an absolute floor so that near-zero gradient pairs
/// are compared absolutely (finite differences bottom out around 1e-11 for
/// O(1) losses at double precision).
fn rel_err(a: f64, b: f64) -> f64 {
    if !a.is_finite() || !b.is_finite() {
        return f64::INFINITY;
    }
    (a - b).abs() / (a.abs() + b.abs()).max(1e-4)
}

/// Check the gradient of `build` (a scalar-valued graph over the given
/// inputs, all registered as tracked leaves in order) against central
/// differences. Returns the report, or an error string naming the first
/// offending element if `max_rel_err > tol`.
pub fn check_gradients(
    build: impl Fn(&mut Graph, &[NodeId]) -> NodeId,
    inputs: &[Tensor],
    step: f64,
    tol: f64,
) -> Result<GradCheckReport, String> {
    let eval = |tensors: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t)).collect();
        let root = build(&mut g, &ids);
        g.value(root).scalar_value()
    };

    // Analytic gradients in one pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t)).collect();
    let root = build(&mut g, &ids);
    assert_eq!(g.value(root).shape(), (1, 1), "loss must be scalar");
    let grads = g.backward(root);
    let analytic: Vec<Tensor> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| grads.wrt_or_zeros(id, t.shape()))
        .collect();

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        elements_checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for ei in 0..input.len() {
            let orig = work[pi].data()[ei];
            work[pi].data_mut()[ei] = orig + step;
            let plus = eval(&work);
            work[pi].data_mut()[ei] = orig - step;
            let minus = eval(&work);
            work[pi].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi].data()[ei];
            let err = rel_err(a, numeric);
            report.elements_checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((pi, ei, a, numeric));
            }
        }
    }

    if report.max_rel_err > tol {
        let (pi, ei, a, n) = report.worst.unwrap();
        return Err(format!(
            "gradient check failed: input {pi} element {ei}: analytic {a:.9e} vs numeric {n:.9e} \
             (rel err {:.3e} > tol {tol:.1e})",
            report.max_rel_err
        ));
    }
    Ok(report)
}
