//! Self-supervised fusion of spatially registered Earth-observation
//! modalities: very-high-resolution images and optical or radar time
//! series over the same tile grid.

pub mod autograd;
pub mod dataspec;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use dataspec::{DatasetManifest, ModalityData, ModalitySpec, MultimodalTile, SyntheticConfig};
pub use error::{Error, Result};
pub use tensor::Tensor;
pub use tokenizer::{TokenBatch, TokenIndex};
pub use training::{Checkpoint, EpochRecord, F1Report, Model, ModelConfig, Phase, TrainConfig, TrainState};
