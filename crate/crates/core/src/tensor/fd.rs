//! Central finite differences, the independent oracle for every
//! gradient in this crate.

use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference estimate of the gradient of a deterministic
/// scalar function: `(f(x + h e_i) - f(x - h e_i)) / (2h)` per
/// coordinate. Works entirely through forward evaluation, so it is
/// independent of the reverse-mode path it is used to check.
pub fn finite_diff_grad(
    f: impl Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    h: f64,
) -> Result<Tensor> {
    if !(h > 0.0) {
        return Err(Error::BadStepSize(h));
    }
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += h;
        let mut minus = x.data().to_vec();
        minus[i] -= h;
        let fp = eval_scalar(&f, x.shape(), plus)?;
        let fm = eval_scalar(&f, x.shape(), minus)?;
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

fn eval_scalar(
    f: &impl Fn(&Tensor) -> Result<Tensor>,
    shape: &[usize],
    data: Vec<f64>,
) -> Result<f64> {
    let out = f(&Tensor::new(shape.to_vec(), data)?)?;
    if out.numel() != 1 {
        return Err(Error::NonScalarFunction(out.shape().to_vec()));
    }
    out.scalar_value()
}
