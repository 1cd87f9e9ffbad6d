//! The encoder-decoder inversion network and its checkpoint format.

mod checkpoint;
mod config;
mod net;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, save_checkpoint_with,
    ArtifactMeta, LoadedCheckpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{BlockSpec, LayerKind, Layout, ModelConfig, Preset};
pub use net::{InversionNet, Network};
