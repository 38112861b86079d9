//! Gated cross-attention fusion: media-token insertion, attention masks and
//! the gated block itself.

pub mod mask;
pub mod sequence;
pub mod xattn;

pub use mask::{
    build_cross_mask, build_cross_mask_image, build_cross_mask_video, build_self_mask,
    parse_mask_dump, CrossMask, MaskDump, MaskMode, DEFAULT_PAD_LEN,
};
pub use sequence::{
    insert_media_tokens, parse_markup, parse_seq_spec, Element, InterleavedSequence, Segment,
    Vocab, DEFAULT_MEDIA_LEN,
};
pub use xattn::{padded_keys, padded_keys_graph, FeedForward, GatedXattn, XattnDims, XattnOutput};
