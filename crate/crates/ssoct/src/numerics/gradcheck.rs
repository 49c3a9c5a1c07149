//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};

use super::param::ParamSet;
use super::tape::{Tape, Var};

/// Compares tape gradients against central finite differences, one
/// parameter coordinate at a time, and returns the maximum relative error
/// `|g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|)` over all coordinates.
///
/// `f` must rebuild the same scalar loss graph on every call for the
/// current parameter values.
pub fn finite_difference_check<F>(params: &mut ParamSet, eps: f64, f: F) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::arg(
            "finite_difference_check",
            format!("eps must lie in [1e-6, 1e-3], got {}", eps),
        ));
    }

    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::arg(
            "finite_difference_check",
            format!("f must produce a scalar, got shape {:?}", tape.value(loss).shape()),
        ));
    }
    params.zero_grads();
    tape.backward(loss, params)?;
    let analytic: Vec<Vec<f64>> = params.blocks().iter().map(|b| b.grad.data().to_vec()).collect();
    drop(tape);

    let mut max_err = 0.0f64;
    for bi in 0..params.len() {
        for ci in 0..params.block(bi).len() {
            let orig = params.block(bi).value.data()[ci];
            params.block_mut(bi).value.data_mut()[ci] = orig + eps;
            let loss_plus = eval_scalar(&f, params)?;
            params.block_mut(bi).value.data_mut()[ci] = orig - eps;
            let loss_minus = eval_scalar(&f, params)?;
            params.block_mut(bi).value.data_mut()[ci] = orig;

            let g_fd = (loss_plus - loss_minus) / (2.0 * eps);
            let g_ad = analytic[bi][ci];
            let denom = (g_ad.abs() + g_fd.abs()).max(1e-8);
            max_err = max_err.max((g_ad - g_fd).abs() / denom);
        }
    }
    Ok(max_err)
}

fn eval_scalar<F>(f: &F, params: &ParamSet) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    tape.value(loss).scalar_value()
}
