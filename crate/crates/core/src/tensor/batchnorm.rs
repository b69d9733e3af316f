//! Per-channel batch normalization over `(n, h, w)`.

use serde::{Deserialize, Serialize};

use super::Tensor4;
use crate::error::{Result, SyqError};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;

/// Learnable affine parameters plus running statistics for one BN layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNormParams {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Training-mode forward; folds the batch statistics into the running averages.
    pub fn forward_train(&mut self, x: &Tensor4) -> Result<(Tensor4, BatchNormCache)> {
        let (y, cache) = batchnorm_forward(x, &self.gamma, &self.beta, self.eps)?;
        self.update_running(&cache);
        Ok((y, cache))
    }

    pub fn update_running(&mut self, cache: &BatchNormCache) {
        let m = self.momentum;
        let count = cache.count as f64;
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * cache.mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * cache.var[c] * correction;
        }
    }

    pub fn forward_eval(&self, x: &Tensor4) -> Result<Tensor4> {
        batchnorm_inference(
            x,
            &self.gamma,
            &self.beta,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )
    }
}

#[derive(Debug, Clone)]
pub struct BatchNormCache {
    /// Normalized input before the affine transform.
    pub x_hat: Tensor4,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub gamma: Vec<f64>,
    count: usize,
}

fn check_params(x: &Tensor4, gamma: &[f64], beta: &[f64], eps: f64) -> Result<()> {
    let c = x.dims()[1];
    if gamma.len() != c || beta.len() != c {
        return Err(SyqError::shape("batchnorm", c, (gamma.len(), beta.len())));
    }
    if !(eps > 0.0) {
        return Err(SyqError::InvalidArgument("batchnorm epsilon must be positive".into()));
    }
    Ok(())
}

/// Training-mode normalization with batch statistics (biased variance).
pub fn batchnorm_forward(x: &Tensor4, gamma: &[f64], beta: &[f64], eps: f64) -> Result<(Tensor4, BatchNormCache)> {
    check_params(x, gamma, beta, eps)?;
    let [n, c, h, w] = x.dims();
    if n < 2 {
        return Err(SyqError::InvalidArgument(
            "batchnorm in training mode needs a batch of at least 2".into(),
        ));
    }
    let plane = h * w;
    let count = n * plane;
    let data = x.as_slice();
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut s = 0.0;
        for b in 0..n {
            let o = (b * c + ch) * plane;
            s += data[o..o + plane].iter().sum::<f64>();
        }
        let mu = s / count as f64;
        let mut ss = 0.0;
        for b in 0..n {
            let o = (b * c + ch) * plane;
            ss += data[o..o + plane].iter().map(|v| (v - mu) * (v - mu)).sum::<f64>();
        }
        mean[ch] = mu;
        var[ch] = ss / count as f64;
    }
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    let mut x_hat = Tensor4::zeros(x.dims());
    let mut y = Tensor4::zeros(x.dims());
    {
        let xh = x_hat.as_mut_slice();
        let yo = y.as_mut_slice();
        for b in 0..n {
            for ch in 0..c {
                let o = (b * c + ch) * plane;
                for j in o..o + plane {
                    let v = (data[j] - mean[ch]) * inv_std[ch];
                    xh[j] = v;
                    yo[j] = gamma[ch] * v + beta[ch];
                }
            }
        }
    }
    Ok((
        y,
        BatchNormCache {
            x_hat,
            mean,
            var,
            inv_std,
            gamma: gamma.to_vec(),
            count,
        },
    ))
}

/// Returns `(grad_x, grad_gamma, grad_beta)`.
pub fn batchnorm_backward(grad_out: &Tensor4, cache: &BatchNormCache) -> Result<(Tensor4, Vec<f64>, Vec<f64>)> {
    if grad_out.dims() != cache.x_hat.dims() {
        return Err(SyqError::Contract(format!(
            "batchnorm_backward: gradient dims {:?} do not match cached forward {:?}",
            grad_out.dims(),
            cache.x_hat.dims()
        )));
    }
    let [n, c, h, w] = grad_out.dims();
    let plane = h * w;
    let m = cache.count as f64;
    let g = grad_out.as_slice();
    let xh = cache.x_hat.as_slice();
    let mut grad_gamma = vec![0.0; c];
    let mut grad_beta = vec![0.0; c];
    for ch in 0..c {
        for b in 0..n {
            let o = (b * c + ch) * plane;
            for j in o..o + plane {
                grad_beta[ch] += g[j];
                grad_gamma[ch] += g[j] * xh[j];
            }
        }
    }
    let mut grad_x = Tensor4::zeros(grad_out.dims());
    let gx = grad_x.as_mut_slice();
    for ch in 0..c {
        // d x_hat = g·γ; sums over the channel are γ·grad_beta and γ·grad_gamma.
        let k = cache.gamma[ch] * cache.inv_std[ch] / m;
        for b in 0..n {
            let o = (b * c + ch) * plane;
            for j in o..o + plane {
                gx[j] = k * (m * g[j] - grad_beta[ch] - xh[j] * grad_gamma[ch]);
            }
        }
    }
    Ok((grad_x, grad_gamma, grad_beta))
}

/// Inference-mode normalization with fixed statistics.
pub fn batchnorm_inference(
    x: &Tensor4,
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Result<Tensor4> {
    check_params(x, gamma, beta, eps)?;
    let [n, c, h, w] = x.dims();
    if mean.len() != c || var.len() != c {
        return Err(SyqError::shape("batchnorm_inference", c, (mean.len(), var.len())));
    }
    let plane = h * w;
    let mut y = x.clone();
    let yo = y.as_mut_slice();
    for ch in 0..c {
        let scale = gamma[ch] / (var[ch] + eps).sqrt();
        let shift = beta[ch] - mean[ch] * scale;
        for b in 0..n {
            let o = (b * c + ch) * plane;
            for v in &mut yo[o..o + plane] {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let x = Tensor4::from_fn([3, 2, 2, 2], |[_, c, _, _]| if c == 0 { 4.0 } else { -1.5 });
        let (y, _) = batchnorm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-5).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn standardized_input_is_unchanged() {
        // Per channel: values ±1 balanced → mean 0, variance 1.
        let x = Tensor4::from_fn([2, 2, 1, 2], |[n, c, _, w]| {
            let s = if (n + w) % 2 == 0 { 1.0 } else { -1.0 };
            if c == 0 {
                s
            } else {
                -s
            }
        });
        let (y, _) = batchnorm_forward(&x, &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        for (a, b) in y.as_slice().iter().zip(x.as_slice()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn batch_of_one_rejected_in_training() {
        let x = Tensor4::zeros([1, 2, 3, 3]);
        assert!(batchnorm_forward(&x, &[1.0; 2], &[0.0; 2], 1e-5).is_err());
        assert!(batchnorm_forward(&Tensor4::zeros([2, 2, 1, 1]), &[1.0; 2], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn running_stats_move_toward_batch() {
        let mut bn = BatchNormParams::new(1);
        let x = Tensor4::new([2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        bn.forward_train(&x).unwrap();
        assert!((bn.running_mean[0] - 0.4).abs() < 1e-12);
        // unbiased variance of {1,3,5,7} is 20/3
        assert!((bn.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn eval_with_batch_stats_matches_train_output() {
        let x = Tensor4::from_fn([3, 2, 2, 2], |[n, c, h, w]| {
            ((n * 7 + c * 3 + h * 2 + w) % 5) as f64 * 0.3
        });
        let gamma = [1.3, 0.7];
        let beta = [0.1, -0.2];
        let (y, cache) = batchnorm_forward(&x, &gamma, &beta, 1e-5).unwrap();
        let y2 = batchnorm_inference(&x, &gamma, &beta, &cache.mean, &cache.var, 1e-5).unwrap();
        for (a, b) in y.as_slice().iter().zip(y2.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
