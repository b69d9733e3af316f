use serde::{Deserialize, Serialize};

use crate::act_quant::ActQuantConfig;
use crate::error::{Result, SyqError};
use crate::scaling::ScaleGradRule;
use crate::subgroups::{Granularity, LayerKind};
use crate::weight_quant::QuantMode;

fn one() -> usize {
    1
}

fn default_granularity() -> Granularity {
    Granularity::Layer
}

fn default_mode() -> QuantMode {
    QuantMode::Ternary
}

/// One weight layer, optionally followed by batch norm and an activation quantizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    /// Output feature maps (convolution) or hidden nodes (fully-connected).
    pub out: usize,
    #[serde(default)]
    pub kernel: usize,
    #[serde(default = "one")]
    pub stride: usize,
    #[serde(default)]
    pub pad: usize,
    #[serde(default)]
    pub quantized: bool,
    #[serde(default = "default_granularity")]
    pub granularity: Granularity,
    #[serde(default = "default_mode")]
    pub mode: QuantMode,
    #[serde(default)]
    pub batch_norm: bool,
    /// Quantizer applied to this layer's output; `None` leaves it linear.
    #[serde(default)]
    pub activation: Option<ActQuantConfig>,
}

impl LayerSpec {
    pub fn conv(out: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kind: LayerKind::Conv,
            out,
            kernel,
            stride,
            pad,
            quantized: false,
            granularity: Granularity::Layer,
            mode: QuantMode::Ternary,
            batch_norm: false,
            activation: None,
        }
    }

    pub fn fc(out: usize) -> Self {
        Self {
            kind: LayerKind::Fc,
            kernel: 0,
            stride: 1,
            pad: 0,
            ..Self::conv(out, 0, 1, 0)
        }
    }

    pub fn quantized(mut self, mode: QuantMode, granularity: Granularity) -> Self {
        self.quantized = true;
        self.mode = mode;
        self.granularity = granularity;
        self
    }

    pub fn with_batch_norm(mut self) -> Self {
        self.batch_norm = true;
        self
    }

    pub fn with_activation(mut self, act: ActQuantConfig) -> Self {
        self.activation = Some(act);
        self
    }
}

/// Network architecture and initialization seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Input `(channels, height, width)`; height and width must be equal.
    pub input: [usize; 3],
    pub classes: usize,
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub seed: u64,
}

impl ModelConfig {
    /// Reference desk-scale network:
    /// full-precision Conv3×3(16) → quantized Conv3×3(32, stride 2) →
    /// quantized Conv3×3(64, stride 2) → quantized FC(128) → full-precision FC(classes).
    /// Every hidden layer carries batch norm and the activation quantizer.
    pub fn reference(
        input: [usize; 3],
        classes: usize,
        mode: QuantMode,
        granularity: Granularity,
        act: ActQuantConfig,
        seed: u64,
    ) -> Self {
        let layers = vec![
            LayerSpec::conv(16, 3, 1, 1).with_batch_norm().with_activation(act),
            LayerSpec::conv(32, 3, 2, 1)
                .quantized(mode, granularity)
                .with_batch_norm()
                .with_activation(act),
            LayerSpec::conv(64, 3, 2, 1)
                .quantized(mode, granularity)
                .with_batch_norm()
                .with_activation(act),
            LayerSpec::fc(128)
                .quantized(mode, Granularity::Layer)
                .with_batch_norm()
                .with_activation(act),
            LayerSpec::fc(classes),
        ];
        Self {
            input,
            classes,
            layers,
            seed,
        }
    }

    /// Structural checks that do not depend on layer dimensions.
    pub fn validate(&self, allow_quantized_boundary: bool) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(SyqError::config("input", "dimensions must be positive"));
        }
        if h != w {
            return Err(SyqError::config("input", "only square inputs are supported"));
        }
        if self.classes < 2 {
            return Err(SyqError::config("classes", "need at least two classes"));
        }
        let Some(last) = self.layers.last() else {
            return Err(SyqError::config("layers", "network has no layers"));
        };
        if !allow_quantized_boundary && (self.layers[0].quantized || last.quantized) {
            return Err(SyqError::config(
                "layers",
                "first and last layers must be full precision (quantized = false)",
            ));
        }
        if last.kind != LayerKind::Fc || last.out != self.classes {
            return Err(SyqError::config(
                "layers",
                format!("last layer must be fully-connected with {} outputs", self.classes),
            ));
        }
        if last.activation.is_some() {
            return Err(SyqError::config(
                "layers",
                "last layer must not quantize its output (logits)",
            ));
        }
        for (idx, spec) in self.layers.iter().enumerate() {
            let field = format!("layers[{idx}]");
            if spec.out == 0 {
                return Err(SyqError::config(&field, "`out` must be positive"));
            }
            if let Some(act) = &spec.activation {
                act.validate().map_err(|e| SyqError::config(&field, e.to_string()))?;
            }
            match spec.kind {
                LayerKind::Conv => {
                    if spec.kernel == 0 || spec.stride == 0 {
                        return Err(SyqError::config(&field, "convolution needs positive kernel and stride"));
                    }
                    if spec.kernel > u8::MAX as usize || spec.stride > u8::MAX as usize || spec.pad > u8::MAX as usize {
                        return Err(SyqError::config(&field, "kernel, stride and pad must fit in a byte"));
                    }
                }
                LayerKind::Fc => {
                    if spec.quantized && spec.granularity != Granularity::Layer {
                        return Err(SyqError::config(
                            &field,
                            "quantized fully-connected layers only support layer-wise scaling",
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// The same network with every layer full precision.
    pub fn full_precision(&self) -> Self {
        let mut cfg = self.clone();
        for l in &mut cfg.layers {
            l.quantized = false;
        }
        cfg
    }

    pub fn quantized_layers(&self) -> impl Iterator<Item = (usize, &LayerSpec)> {
        self.layers.iter().enumerate().filter(|(_, s)| s.quantized)
    }
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplicative step decay applied every `lr_step` steps.
    pub lr_decay: f64,
    /// Steps between decays; 0 disables the schedule.
    pub lr_step: u64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Full-precision epochs `syq train` runs before quantized training; the
    /// quantized layers then start from the trained weights. [`fit`] itself
    /// ignores this.
    ///
    /// [`fit`]: super::fit
    pub warmup_epochs: usize,
    pub scale_grad_rule: ScaleGradRule,
    /// Steps per training-log line.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-6,
            lr_decay: 0.2,
            lr_step: 0,
            batch_size: 64,
            epochs: 5,
            warmup_epochs: 1,
            scale_grad_rule: ScaleGradRule::ChainRule,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(SyqError::config("learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(SyqError::config("momentum", "must be in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(SyqError::config("weight_decay", "must be non-negative"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(SyqError::config("lr_decay", "must be in (0, 1]"));
        }
        if self.batch_size < 2 {
            return Err(SyqError::config(
                "batch_size",
                "must be at least 2 (batch norm needs batch statistics)",
            ));
        }
        if self.log_every == 0 {
            return Err(SyqError::config("log_every", "must be positive"));
        }
        Ok(())
    }
}
