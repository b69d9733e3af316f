//! Symmetric low-precision quantization for small convolutional networks.
//!
//! Binary or ternary weights are scaled by learned per-subgroup coefficients
//! (pixel-, row- or layer-wise) that always apply to both polarities, so each
//! subgroup's codebook stays symmetric around zero. Activations are quantized
//! to unsigned fixed point. Trained models export to a packed 2-bit container
//! and run through an inference engine that evaluates every dot product as a
//! sum of scaled sub-dot products.
//!
//! - [`tensor`]: dense kernels (convolution, fully-connected, batch norm, loss)
//! - [`weight_quant`]: thresholding, masking, symmetry check, weight STE
//! - [`subgroups`]: subgroup partitions, matrix reshapes, diagonal scaling
//! - [`scaling`]: scale initialization, gradients and updates
//! - [`act_quant`]: fixed-point activation quantizer and its STE
//! - [`training`]: network, optimizer, datasets, checkpoints, training loop
//! - [`inference`]: packed model format, decomposed inference, cost model

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod act_quant;
mod codec;
pub mod error;
pub mod inference;
pub mod scaling;
pub mod subgroups;
pub mod tensor;
pub mod training;
pub mod weight_quant;

pub use act_quant::{act_ste_backward, quantize_activation, ActQuantConfig};
pub use error::{Result, SyqError};
pub use inference::{
    complexity_report, sub_op_counts, subdot_infer, CostReport, QuantizedLayer, QuantizedModel, ScalingMethod,
    SubOpCounts,
};
pub use scaling::{init_scales, layerwise_scale, scale_gradient, update_scales, ScaleGradRule, ScaleState};
pub use subgroups::{
    apply_diagonal_scale, build_subgroups, matrix_to_weights, reshape_to_matrix, Granularity, LayerKind, ScaleVector,
    SubgroupIndex,
};
pub use tensor::{LayerShape, Matrix, Tensor4};
pub use training::{Dataset, ModelConfig, Network, TrainConfig, TrainState};
pub use weight_quant::{
    compute_threshold, is_symmetric, quantize_weights, ste_weight_grad, Codebook, MaskedQuant, QuantMode,
};
