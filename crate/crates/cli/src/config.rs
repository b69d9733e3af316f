use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use syq_core::training::LayerSpec;
use syq_core::{ActQuantConfig, Granularity, ModelConfig, QuantMode, TrainConfig};

use crate::error::CliError;

pub const MNIST_CLASSES: usize = 10;

/// Where training and validation samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub synthetic: bool,
    /// Directory holding the four MNIST IDX files.
    pub dir: Option<PathBuf>,
    pub synthetic_classes: usize,
    pub synthetic_train: usize,
    pub synthetic_validation: usize,
    /// Seed of the synthetic training set; the validation set uses `seed + 1`.
    pub synthetic_seed: u64,
    /// Use only the first `n` training samples.
    pub train_limit: Option<usize>,
    /// Use only the first `n` validation samples.
    pub validation_limit: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            synthetic: false,
            dir: None,
            synthetic_classes: 4,
            synthetic_train: 4000,
            synthetic_validation: 1000,
            synthetic_seed: 1234,
            train_limit: None,
            validation_limit: None,
        }
    }
}

/// Everything `syq train` needs. Every field has a default; a JSON file can
/// set any subset and command-line flags override both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scaling granularity of the quantized convolution layers.
    pub granularity: Granularity,
    /// 1 = binary, 2 = ternary weights.
    pub wbits: u8,
    pub abits: u8,
    /// Fractional activation bits; defaults to `abits`.
    pub fbits: Option<u8>,
    /// Explicit architecture; when absent the reference network is built
    /// from `granularity`, `wbits`, `abits` and `fbits`.
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Stop after the first epoch whose validation top-1 reaches this value.
    pub target_top1: Option<f64>,
    /// Run directory; relative paths resolve against the output root.
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            granularity: Granularity::Pixel,
            wbits: 2,
            abits: 8,
            fbits: None,
            model: None,
            train: TrainConfig::default(),
            data: DataConfig::default(),
            target_top1: None,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn quant_mode(&self) -> Result<QuantMode, CliError> {
        QuantMode::from_bits(self.wbits)
            .ok_or_else(|| CliError::usage("--wbits", format!("must be 1 or 2, got {}", self.wbits)))
    }

    pub fn activation(&self) -> Result<ActQuantConfig, CliError> {
        if !(2..=8).contains(&self.abits) {
            return Err(CliError::usage(
                "--abits",
                format!("must be in 2..=8, got {}", self.abits),
            ));
        }
        ActQuantConfig::new(self.abits, self.fbits.unwrap_or(self.abits))
            .map_err(|e| CliError::usage("--fbits", e.to_string()))
    }

    pub fn classes(&self) -> usize {
        if self.data.synthetic {
            self.data.synthetic_classes
        } else {
            MNIST_CLASSES
        }
    }

    pub fn input_dims(&self) -> [usize; 3] {
        if self.data.synthetic {
            [
                1,
                syq_core::training::data::SYNTHETIC_SIDE,
                syq_core::training::data::SYNTHETIC_SIDE,
            ]
        } else {
            [1, 28, 28]
        }
    }

    /// The architecture to train, with its seed set to the run seed.
    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let mut model = match &self.model {
            Some(m) => m.clone(),
            None => ModelConfig::reference(
                self.input_dims(),
                self.classes(),
                self.quant_mode()?,
                self.granularity,
                self.activation()?,
                self.seed,
            ),
        };
        model.seed = self.seed;
        Ok(model)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.quant_mode()?;
        self.activation()?;
        if !self.data.synthetic && self.data.dir.is_none() {
            return Err(CliError::usage("--data-dir", "required unless --synthetic is given"));
        }
        if let Some(t) = self.target_top1 {
            if !(0.0..=1.0).contains(&t) {
                return Err(CliError::usage("target_top1", "must be in [0, 1]"));
            }
        }
        self.train.validate().map_err(CliError::from_config)?;
        Ok(())
    }
}

/// Granularity applied to the quantized convolution layers of a custom model.
pub fn set_conv_granularity(layers: &mut [LayerSpec], granularity: Granularity) {
    for l in layers
        .iter_mut()
        .filter(|l| l.quantized && l.kind == syq_core::LayerKind::Conv)
    {
        l.granularity = granularity;
    }
}
