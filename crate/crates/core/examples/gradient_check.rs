//! Reverse-mode gradients of the full fused model against central finite
//! differences.
//!
//! cargo run --example gradient_check

use gated_vlm::fusion::{insert_media_tokens, Segment};
use gated_vlm::model::{loss_graph, Model, ModelConfig, Sample};
use gated_vlm::numerics::{grad_check_sampled, init, Graph, Var};
use gated_vlm::params::Bound;

fn main() -> gated_vlm::Result<()> {
    let cfg = ModelConfig::toy();
    let mut model = Model::new(&cfg, 0)?;
    // open the gates so every parameter influences the loss
    for x in model.xattn_layers().to_vec() {
        model.store.get_mut(x.alpha_attn).data_mut()[0] = 0.7;
        model.store.get_mut(x.alpha_ffn).data_mut()[0] = -0.4;
    }
    let seq = insert_media_tokens(
        &[
            Segment::Image(0),
            Segment::Text(4),
            Segment::Text(2),
            Segment::Image(1),
            Segment::Text(9),
        ],
        cfg.media_len,
    )?;
    let images = (0..2)
        .map(|i| init::normal(&[cfg.encoder.patch_count, cfg.encoder.d_img], 1.0, 40 + i))
        .collect();
    let sample = Sample::new(seq, images)?;

    let params = model.store.values();
    let f = |g: &mut Graph, vars: &[Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let out = model.forward_graph(g, &p, &sample, true)?;
        loss_graph(g, out.logits, &sample.seq)
    };
    let coords = 300;
    let worst = grad_check_sampled(f, &params, coords, 1)?;
    println!(
        "{} parameter tensors, {coords} sampled coordinates, worst relative error {worst:.2e}",
        params.len()
    );
    Ok(())
}
