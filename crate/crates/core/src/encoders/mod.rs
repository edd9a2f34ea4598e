//! Per-modality patch encoders and decoders.

mod image;
mod temporal;

pub use image::{ImageCodec, ImageCodecConfig, PoolTrace, StageTrace};
pub use temporal::{
    day_encoding, select_reconstruction_dates, series_rows, AttentionTrace, TemporalCodec, TemporalCodecConfig,
};
