//! 2-D cross-correlation (no kernel flip) with explicit forward and backward passes.

use super::{axpy, dot, Tensor4};
use crate::error::{Result, SyqError};

/// Everything the backward pass needs from a forward call.
#[derive(Debug, Clone)]
pub struct Conv2dCache {
    input: Tensor4,
    weights: Tensor4,
    stride: usize,
    pad: usize,
    out_dims: [usize; 4],
}

impl Conv2dCache {
    pub fn out_dims(&self) -> [usize; 4] {
        self.out_dims
    }

    pub fn input(&self) -> &Tensor4 {
        &self.input
    }
}

/// Output spatial size `floor((size + 2·pad − k) / stride) + 1`.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(SyqError::InvalidArgument("stride must be positive".into()));
    }
    if k == 0 || size + 2 * pad < k {
        return Err(SyqError::InvalidArgument(format!(
            "kernel {k} does not fit input {size} with padding {pad}"
        )));
    }
    Ok((size + 2 * pad - k) / stride + 1)
}

fn check_shapes(input: &Tensor4, weights: &Tensor4, stride: usize, pad: usize) -> Result<[usize; 4]> {
    let [n, c, h, w] = input.dims();
    let [oc, ic, kh, kw] = weights.dims();
    if ic != c || kh != kw {
        return Err(SyqError::Shape {
            context: "conv2d_forward",
            expected: format!("weights (N, {c}, K, K) for input {:?}", input.dims()),
            actual: format!("weights {:?}", weights.dims()),
        });
    }
    let oh = conv_output_size(h, kh, stride, pad)?;
    let ow = conv_output_size(w, kw, stride, pad)?;
    Ok([n, oc, oh, ow])
}

/// Unfolds one sample into a `(C·K·K) × (OH·OW)` column matrix; rows ordered
/// by `(c, ky, kx)`, padded taps are 0.
pub(crate) fn im2col(
    sample: &[f64],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    [oh, ow]: [usize; 2],
    col: &mut [f64],
) {
    let positions = oh * ow;
    debug_assert_eq!(col.len(), c * k * k * positions);
    for ch in 0..c {
        let plane = &sample[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * positions;
                let dst = &mut col[row..row + positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input plane.
fn col2im(
    col: &[f64],
    [c, h, w]: [usize; 3],
    k: usize,
    stride: usize,
    pad: usize,
    [oh, ow]: [usize; 2],
    out: &mut [f64],
) {
    let positions = oh * ow;
    for ch in 0..c {
        let plane = &mut out[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * positions;
                let src = &col[row..row + positions];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            plane[iy as usize * w + ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation of `input (n, I, F, F)` with `weights (N, I, K, K)`.
///
/// Each output accumulates from 0 over `(i, ky, kx)` in ascending order.
pub fn conv2d_forward(input: &Tensor4, weights: &Tensor4, stride: usize, pad: usize) -> Result<Tensor4> {
    let out_dims = check_shapes(input, weights, stride, pad)?;
    Ok(forward_unchecked(input, weights, stride, pad, out_dims))
}

pub fn conv2d_forward_cached(
    input: &Tensor4,
    weights: &Tensor4,
    stride: usize,
    pad: usize,
) -> Result<(Tensor4, Conv2dCache)> {
    let out_dims = check_shapes(input, weights, stride, pad)?;
    let out = forward_unchecked(input, weights, stride, pad, out_dims);
    let cache = Conv2dCache {
        input: input.clone(),
        weights: weights.clone(),
        stride,
        pad,
        out_dims,
    };
    Ok((out, cache))
}

fn forward_unchecked(input: &Tensor4, weights: &Tensor4, stride: usize, pad: usize, out_dims: [usize; 4]) -> Tensor4 {
    let [n, c, h, w] = input.dims();
    let k = weights.dims()[2];
    let [_, oc, oh, ow] = out_dims;
    let positions = oh * ow;
    let taps = c * k * k;
    let mut out = Tensor4::zeros(out_dims);
    let mut col = vec![0.0; taps * positions];
    for s in 0..n {
        im2col(input.item(s), [c, h, w], k, stride, pad, [oh, ow], &mut col);
        let dst = &mut out.as_mut_slice()[s * oc * positions..(s + 1) * oc * positions];
        for o in 0..oc {
            let filter = &weights.as_slice()[o * taps..(o + 1) * taps];
            let acc = &mut dst[o * positions..(o + 1) * positions];
            for (t, &wv) in filter.iter().enumerate() {
                if wv != 0.0 {
                    axpy(acc, wv, &col[t * positions..(t + 1) * positions]);
                }
            }
        }
    }
    out
}

/// Gradients of a scalar loss with respect to the forward's input and weights.
pub fn conv2d_backward(grad_out: &Tensor4, cache: &Conv2dCache) -> Result<(Tensor4, Tensor4)> {
    let (gi, gw) = backward_impl(grad_out, cache, true)?;
    Ok((gi.expect("input gradient requested"), gw))
}

/// Weight gradient only; used for the first layer where the input gradient is unused.
pub(crate) fn conv2d_backward_weights(grad_out: &Tensor4, cache: &Conv2dCache) -> Result<Tensor4> {
    Ok(backward_impl(grad_out, cache, false)?.1)
}

fn backward_impl(grad_out: &Tensor4, cache: &Conv2dCache, want_input: bool) -> Result<(Option<Tensor4>, Tensor4)> {
    if grad_out.dims() != cache.out_dims {
        return Err(SyqError::Contract(format!(
            "conv2d_backward: gradient dims {:?} do not match cached forward output {:?}",
            grad_out.dims(),
            cache.out_dims
        )));
    }
    let input = &cache.input;
    let weights = &cache.weights;
    let [n, c, h, w] = input.dims();
    let k = weights.dims()[2];
    let [_, oc, oh, ow] = cache.out_dims;
    let positions = oh * ow;
    let taps = c * k * k;

    let mut grad_w = Tensor4::zeros(weights.dims());
    let mut grad_in = want_input.then(|| Tensor4::zeros(input.dims()));
    let mut col = vec![0.0; taps * positions];
    let mut grad_col = vec![0.0; taps * positions];

    for s in 0..n {
        im2col(input.item(s), [c, h, w], k, cache.stride, cache.pad, [oh, ow], &mut col);
        let g = grad_out.item(s);
        let gw = grad_w.as_mut_slice();
        for o in 0..oc {
            let go = &g[o * positions..(o + 1) * positions];
            for t in 0..taps {
                gw[o * taps + t] += dot(go, &col[t * positions..(t + 1) * positions]);
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            grad_col.fill(0.0);
            for o in 0..oc {
                let go = &g[o * positions..(o + 1) * positions];
                let filter = &weights.as_slice()[o * taps..(o + 1) * taps];
                for (t, &wv) in filter.iter().enumerate() {
                    if wv != 0.0 {
                        axpy(&mut grad_col[t * positions..(t + 1) * positions], wv, go);
                    }
                }
            }
            let len = c * h * w;
            col2im(
                &grad_col,
                [c, h, w],
                k,
                cache.stride,
                cache.pad,
                [oh, ow],
                &mut gi.as_mut_slice()[s * len..(s + 1) * len],
            );
        }
    }
    Ok((grad_in, grad_w))
}
