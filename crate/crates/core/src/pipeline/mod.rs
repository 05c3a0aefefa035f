//! End-to-end codec: model container, bitstream framing, and the per-frame
//! encode/decode procedures that tie the learned blocks together.

mod config;
mod container;
mod frames;
mod model;

pub use config::{CodecConfig, CONFIG_PARAM};
pub use container::{
    FrameBitstream, FrameStats, FrameType, SequenceBitstream, StreamId, SEQ_MAGIC, SEQ_VERSION,
};
pub use frames::{FrameLoss, InterDecode};
pub use model::{CodecModel, ResidualCodec};
