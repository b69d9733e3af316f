//! Exported quantized models: packed container, sub-dot-product inference and
//! the analytic cost model.

pub mod cost;
pub mod engine;
pub mod format;

pub use cost::{complexity_report, format_cost_table, sub_op_counts, CostReport, ScalingMethod, SubOpCounts};
pub use engine::{
    subdot_infer, BatchNormLayer, LayerWeights, Metrics, ModelLayer, QuantizedLayer, QuantizedModel, EVAL_BATCH,
};
pub use format::{pack_codes, unpack_codes, MODEL_MAGIC, MODEL_VERSION};
