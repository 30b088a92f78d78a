//! Miniature ViT-style encoder with a frozen backbone and additive updates on
//! the attention projections (or the MLP layers).

mod checkpoint;
mod config;
mod digest;
mod forward;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION, ENCODER_MAGIC};
pub use config::{EncoderConfig, ParameterCount, UpdateTarget};
pub use digest::{backbone_digest, encoder_digest};
pub use forward::{
    attention_qkv, forward, forward_backbone, forward_batch, patchify, patchify_embed, Binding,
    BoundEncoder,
};
pub use params::{
    AdditiveUpdates, BackboneParams, BiasSlot, BlockParams, EncoderModel, FreezeSchedule, ParamId,
    Phase, BACKBONE_INIT_STD,
};
