//! Fully-connected layer: `out = x · Wᵀ` for row-major batches.
//!
//! Inputs are `batch × L` (one sample per row), weights are `H × L`, outputs
//! are `batch × H`.

use super::{axpy, Matrix};
use crate::error::{Result, SyqError};

#[derive(Debug, Clone)]
pub struct FcCache {
    input: Matrix,
    weights: Matrix,
}

fn check(input: &Matrix, weights: &Matrix) -> Result<()> {
    if input.cols() != weights.cols() {
        return Err(SyqError::Shape {
            context: "fc_forward",
            expected: format!(
                "input width {} (weights {}x{})",
                weights.cols(),
                weights.rows(),
                weights.cols()
            ),
            actual: format!("input {}x{}", input.rows(), input.cols()),
        });
    }
    Ok(())
}

pub fn fc_forward(input: &Matrix, weights: &Matrix) -> Result<Matrix> {
    check(input, weights)?;
    Ok(forward_unchecked(input, weights))
}

pub fn fc_forward_cached(input: &Matrix, weights: &Matrix) -> Result<(Matrix, FcCache)> {
    check(input, weights)?;
    let out = forward_unchecked(input, weights);
    Ok((
        out,
        FcCache {
            input: input.clone(),
            weights: weights.clone(),
        },
    ))
}

// Each output accumulates over the input index in ascending order.
fn forward_unchecked(input: &Matrix, weights: &Matrix) -> Matrix {
    let wt = weights.transpose();
    let mut out = Matrix::zeros(input.rows(), weights.rows());
    for b in 0..input.rows() {
        let x = input.row(b);
        let acc = out.row_mut(b);
        for (l, &xv) in x.iter().enumerate() {
            if xv != 0.0 {
                axpy(acc, xv, wt.row(l));
            }
        }
    }
    out
}

/// Returns `(grad_input, grad_weights)`.
pub fn fc_backward(grad_out: &Matrix, cache: &FcCache) -> Result<(Matrix, Matrix)> {
    let (gi, gw) = backward_impl(grad_out, cache, true)?;
    Ok((gi.expect("input gradient requested"), gw))
}

pub(crate) fn fc_backward_weights(grad_out: &Matrix, cache: &FcCache) -> Result<Matrix> {
    Ok(backward_impl(grad_out, cache, false)?.1)
}

fn backward_impl(grad_out: &Matrix, cache: &FcCache, want_input: bool) -> Result<(Option<Matrix>, Matrix)> {
    let (batch, h) = (cache.input.rows(), cache.weights.rows());
    if grad_out.rows() != batch || grad_out.cols() != h {
        return Err(SyqError::Contract(format!(
            "fc_backward: gradient {}x{} does not match cached forward output {batch}x{h}",
            grad_out.rows(),
            grad_out.cols()
        )));
    }
    let l = cache.input.cols();
    let mut grad_w = Matrix::zeros(h, l);
    let mut grad_in = want_input.then(|| Matrix::zeros(batch, l));
    for b in 0..batch {
        let g = grad_out.row(b);
        let x = cache.input.row(b);
        for (j, &gv) in g.iter().enumerate() {
            if gv == 0.0 {
                continue;
            }
            axpy(grad_w.row_mut(j), gv, x);
            if let Some(gi) = grad_in.as_mut() {
                axpy(gi.row_mut(b), gv, cache.weights.row(j));
            }
        }
    }
    Ok((grad_in, grad_w))
}
