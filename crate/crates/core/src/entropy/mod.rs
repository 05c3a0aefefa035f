//! Everything that turns numbers into bytes: the exact range coder, the
//! learned factorized density model over latents, the octree coordinate
//! coder, and the two-payload occupancy refinement coder.

pub mod factorized;
pub mod occupancy;
pub mod octree;
pub mod range;

pub use factorized::{
    bits_eval, cdf_eval, pmf_eval, quantize_noise, quantize_round, ChannelCdf, FactorizedModel,
    PMF_FLOOR,
};
pub use occupancy::{OccupancyCoder, P_CLAMP};
pub use octree::{octree_decode, octree_encode};
pub use range::{
    decode_bit_with_p, encode_bit_with_p, BitModel, CdfTable, RangeDecoder, RangeEncoder,
    MAX_EXPLICIT_SYMBOLS, PROB_BITS, PROB_TOTAL,
};
