//! Hybrid Gated Flow: ternary-quantized transformer layers with a gated
//! low-rank floating-point correction path and differential attention.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod quant;
pub mod tensor;
pub mod training;

pub use analysis::{LossCurve, MemoryReport};
pub use autodiff::{Gradients, Graph, Var};
pub use checkpoint::Checkpoint;
pub use config::{ArchMode, ModelConfig, RunConfig, TrainConfig};
pub use error::{HgfError, Result};
pub use layers::{DualPathLinear, HgfModel, ParamGroup, ParamStore};
pub use quant::{PackingMode, QuantizedActivation, TernaryWeight};
pub use tensor::DenseTensor;
pub use training::{MetricsRecord, Trainer};
