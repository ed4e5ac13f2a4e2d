use crate::error::{AfrError, Result};

use super::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[inline]
pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

/// Logistic function, evaluated on the side that cannot overflow.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax over a slice, in place.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

fn ensure_finite(m: &Matrix, op: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(AfrError::numeric(format!("{op}: non-finite input")))
    }
}

pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    ensure_finite(m, "softmax_rows")?;
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub fn activations(m: &Matrix, kind: Activation) -> Result<Matrix> {
    ensure_finite(m, "activations")?;
    Ok(match kind {
        Activation::Relu => m.map(relu),
        Activation::Sigmoid => m.map(sigmoid),
    })
}
