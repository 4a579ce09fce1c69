//! Text, image and cross-modal encoders with their ITC / ITM / MLM heads.

mod checkpoint;
mod config;
mod layers;
mod model;
mod params;

pub use checkpoint::{Checkpoint, VERSION as CHECKPOINT_VERSION};
pub use config::EncoderConfig;
pub use layers::{multi_head, scaled_dot_attention, AttentionParams, Linear};
pub use model::{
    AttentionTrace, CrossAttentionMaps, CrossHidden, ImageEmbedding, Model, TextEmbedding,
};
pub use params::{Graph, ParamId, ParamStore};
