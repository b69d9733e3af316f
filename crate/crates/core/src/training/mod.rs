//! End-to-end quantized training: configuration, network, optimizer state,
//! datasets, checkpoints and the epoch loop.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod network;
pub mod state;
pub mod trainer;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{LayerSpec, ModelConfig, TrainConfig};
pub use data::{
    generate_synthetic, load_idx_dataset, load_mnist_dir, mnist_paths, parse_idx_images, parse_idx_labels, Dataset,
    Split,
};
pub use network::{ForwardCache, FrozenActivations, Gradients, LayerGrad, LayerPlan, Network, Phase, StepStats};
pub use state::{LayerState, TrainState};
pub use trainer::{evaluate, fit, EpochSummary, FitObserver, FitSummary, LogLine, LOG_HEADER};
