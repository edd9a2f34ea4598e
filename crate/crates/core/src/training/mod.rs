//! Optimisation and experiment protocols: pretraining, fine-tuning,
//! linear probing, evaluation, checkpoints and gradient checking.

mod checkpoint;
mod config;
mod gradcheck;
mod loops;
mod metrics;
mod model;
mod optim;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{default_pools, ContrastiveTokens, ModelConfig, TrainConfig, ABLATIONS};
pub use gradcheck::{gradient_check, relative_error, GradCheckEntry, GradCheckReport, FD_STEP};
pub use loops::{derive_seed, evaluate, finetune, label_subset, linear_probe, pretrain, EpochHook, Phase, TrainState};
pub use metrics::{f1_scores, read_metrics, EpochRecord, F1Report, MetricsLog};
pub use model::{tile_layout, BatchLoss, Codec, GroupEncoding, Model, TileEncoding};
pub use optim::{adam_step, reduce_on_plateau, Adam, Plateau, ADAM_EPS, BETA1, BETA2};
