use rand_chacha::ChaCha8Rng;

use crate::scaling::ScaleState;
use crate::tensor::BatchNormParams;

/// Trainable parameters and optimizer buffers of one weight layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerState {
    /// Full-precision weights, `(N, I, K, K)` for convolutions, `H × L` for FC.
    pub weights: Vec<f64>,
    pub velocity: Vec<f64>,
    /// Present only on quantized layers.
    pub scales: Option<ScaleState>,
    pub scale_velocity: Vec<f64>,
    pub bn: Option<BatchNormParams>,
    /// Momentum for `[gamma..., beta...]`.
    pub bn_velocity: Vec<f64>,
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub layers: Vec<LayerState>,
    pub learning_rate: f64,
    pub step: u64,
    pub epoch: u64,
    /// Drives shuffling; its position is part of the checkpoint.
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| {
            l.weights.iter().all(|v| v.is_finite())
                && l.scales
                    .as_ref()
                    .is_none_or(|s| s.alpha.as_slice().iter().all(|v| v.is_finite() && *v > 0.0))
                && l.bn.as_ref().is_none_or(|b| {
                    b.gamma
                        .iter()
                        .chain(&b.beta)
                        .chain(&b.running_mean)
                        .chain(&b.running_var)
                        .all(|v| v.is_finite())
                })
        }) && self.learning_rate > 0.0
    }
}
