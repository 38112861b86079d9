#![allow(dead_code)]

pub mod flops;
pub mod masks;

use gated_vlm::fusion::{insert_media_tokens, Segment};
use gated_vlm::model::{Model, ModelConfig, Sample};
use gated_vlm::numerics::init;
use rand::Rng;

/// Patch tensors for `n` images shaped for `cfg`.
pub fn images(cfg: &ModelConfig, n: usize, seed: u64) -> Vec<gated_vlm::numerics::Tensor> {
    (0..n)
        .map(|i| {
            init::normal(
                &[cfg.encoder.patch_count, cfg.encoder.d_img],
                1.0,
                init::derive_seed(seed, &format!("img{i}")),
            )
        })
        .collect()
}

pub fn sample(cfg: &ModelConfig, segs: &[Segment], seed: u64) -> Sample {
    let seq = insert_media_tokens(segs, cfg.media_len).unwrap();
    let n = seq.num_images();
    Sample::new(seq, images(cfg, n, seed)).unwrap()
}

/// Random interleaving of `num_images` images and 1..=`max_text` text
/// tokens per gap, always ending in text and never empty.
pub fn random_segments(
    rng: &mut impl Rng,
    num_images: usize,
    max_text: usize,
    vocab: usize,
) -> Vec<Segment> {
    let mut segs = Vec::new();
    if num_images == 0 || rng.random_bool(0.5) {
        for _ in 0..rng.random_range(1..=max_text) {
            segs.push(Segment::Text(rng.random_range(0..vocab)));
        }
    }
    for img in 0..num_images {
        segs.push(Segment::Image(img));
        for _ in 0..rng.random_range(1..=max_text) {
            segs.push(Segment::Text(rng.random_range(0..vocab)));
        }
    }
    segs
}

/// Sets every cross-attention gate of `model` to a nonzero value.
pub fn open_gates(model: &mut Model, attn: f64, ffn: f64) {
    for x in model.xattn_layers().to_vec() {
        model.store.get_mut(x.alpha_attn).data_mut()[0] = attn;
        model.store.get_mut(x.alpha_ffn).data_mut()[0] = ffn;
    }
}
