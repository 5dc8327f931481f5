//! Central finite-difference gradient checking.
//!
//! Lives in the library so unit tests, integration tests and the acceptance
//! suite can share it. The check recomputes the loss from scratch after each
//! perturbation, so it is independent of the backward implementation it
//! verifies. Run it with f64 tensors; f32 round-off drowns the signal.

use candle_core::{Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst: String,
}

pub struct GradCheckOpts {
    pub eps: f64,
    pub rtol: f64,
    pub atol: f64,
    /// Elements checked per tensor (deterministic stride subsample).
    pub max_per_tensor: usize,
}

impl Default for GradCheckOpts {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            rtol: 1e-3,
            atol: 1e-5,
            max_per_tensor: 16,
        }
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?
        .reshape(())?
        .to_vec0::<f64>()?)
}

/// Checks d(loss)/d(var) for every listed var against central differences.
/// `loss_fn` must recompute the loss from the vars' current values.
pub fn finite_diff_check<F>(
    vars: &[(String, Var)],
    loss_fn: F,
    opts: &GradCheckOpts,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let loss = loss_fn()?;
    let grads = loss.backward()?;
    let mut report = GradCheckReport {
        checked: 0,
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        worst: String::new(),
    };
    for (name, var) in vars {
        let n = var.elem_count();
        let shape = var.dims().to_vec();
        let analytic: Vec<f64> = match grads.get(var) {
            Some(g) => g
                .to_dtype(candle_core::DType::F64)?
                .flatten_all()?
                .to_vec1::<f64>()?,
            None => vec![0.0; n],
        };
        let base: Vec<f64> = var
            .as_tensor()
            .to_dtype(candle_core::DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?;
        let stride = (n / opts.max_per_tensor).max(1);
        let mut idx = 0;
        while idx < n {
            let mut plus = base.clone();
            plus[idx] += opts.eps;
            let mut minus = base.clone();
            minus[idx] -= opts.eps;
            let set = |vals: Vec<f64>| -> Result<()> {
                let t = Tensor::from_vec(vals, shape.as_slice(), var.device())?
                    .to_dtype(var.dtype())?;
                var.set(&t)?;
                Ok(())
            };
            set(plus)?;
            let lp = scalar(&loss_fn()?)?;
            set(minus)?;
            let lm = scalar(&loss_fn()?)?;
            set(base.clone())?;
            let fd = (lp - lm) / (2.0 * opts.eps);
            let g = analytic[idx];
            let abs_err = (g - fd).abs();
            let denom = g.abs().max(fd.abs());
            let rel_err = if denom > 0.0 { abs_err / denom } else { 0.0 };
            report.checked += 1;
            if abs_err > report.max_abs_err {
                report.max_abs_err = abs_err;
            }
            if abs_err > opts.atol && rel_err > report.max_rel_err {
                report.max_rel_err = rel_err;
                report.worst = format!("{name}[{idx}]: analytic {g}, fd {fd}");
            }
            idx += stride;
        }
    }
    Ok(report)
}

/// Asserting wrapper: errors unless every checked element satisfies
/// |g - fd| <= atol + rtol * max(|g|, |fd|).
pub fn assert_grads_match<F>(
    vars: &[(String, Var)],
    loss_fn: F,
    opts: &GradCheckOpts,
) -> Result<GradCheckReport>
where
    F: Fn() -> Result<Tensor>,
{
    let report = finite_diff_check(vars, loss_fn, opts)?;
    if report.max_rel_err > opts.rtol {
        return Err(Error::InvalidArgument(format!(
            "gradient check failed ({} elements): max rel err {:.3e} (abs {:.3e}) at {}",
            report.checked, report.max_rel_err, report.max_abs_err, report.worst
        )));
    }
    Ok(report)
}
