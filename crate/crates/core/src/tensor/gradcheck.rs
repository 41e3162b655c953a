use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing autodiff gradients against central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Tensor,
    pub numeric: Tensor,
    pub max_abs_error: f64,
    /// Largest `|a - n| / max(|a|, |n|, floor)` over all coordinates.
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Denominator floor for relative error, so coordinates whose true gradient is
/// zero are judged on an absolute scale.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Checks `f` at `point`: autodiff gradient versus central differences with step [`FD_STEP`].
pub fn grad_check<F>(f: F, point: &Tensor, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    grad_check_with_step(f, point, tolerance, FD_STEP)
}

pub fn grad_check_with_step<F>(f: F, point: &Tensor, tolerance: f64, h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph, Var) -> Result<Var>,
{
    let g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&g, x)?;
    let analytic = g.backward(loss)?.take(x).expect("tracked leaf");

    let eval = |p: Tensor| -> Result<f64> {
        let g = Graph::new();
        let x = g.constant(p);
        let l = f(&g, x)?;
        g.scalar(l)
    };
    let mut numeric = Tensor::zeros(point.shape().to_vec());
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        numeric.data_mut()[i] = (eval(plus)? - eval(minus)?) / (2.0 * h);
    }

    let (mut max_abs_error, mut max_rel_error) = (0.0f64, 0.0f64);
    for (&a, &n) in analytic.data().iter().zip(numeric.data()) {
        let abs = (a - n).abs();
        max_abs_error = max_abs_error.max(abs);
        max_rel_error = max_rel_error.max(abs / a.abs().max(n.abs()).max(REL_ERROR_FLOOR));
    }
    Ok(GradCheckReport {
        analytic,
        numeric,
        max_abs_error,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}
