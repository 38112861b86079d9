//! A gated cross-attention block is an exact identity while its gates are
//! closed and starts to mix in visual features once they open.
//!
//! cargo run --example gated_xattn

use gated_vlm::fusion::{
    build_cross_mask, padded_keys, parse_seq_spec, GatedXattn, MaskMode, XattnDims,
};
use gated_vlm::numerics::init;
use gated_vlm::params::ParamStore;

fn main() -> gated_vlm::Result<()> {
    let dims = XattnDims {
        h_llm: 16,
        d_img: 12,
        r_xc: 0.2,
        r_xf: 0.5,
    };
    println!(
        "attention width {}, ffn width {}",
        dims.attn_width(),
        dims.ffn_width()
    );
    let mut store = ParamStore::new(3);
    let block = GatedXattn::new(&mut store, "x", &dims)?;

    let seq = parse_seq_spec("T I T T", 4)?;
    let s_img = 5;
    let mask = build_cross_mask(&seq, s_img, 1, MaskMode::Image)?;
    let image = init::normal(&[s_img, dims.d_img], 1.0, 1);
    let keys = padded_keys(&[&image], 1, dims.d_img)?;
    let hidden = init::normal(&[seq.len(), dims.h_llm], 1.0, 2);

    let out = block.forward(&store, &hidden, &keys, &mask)?;
    println!(
        "closed gates: max |out - in| = {:e}",
        out.max_abs_diff(&hidden)
    );

    for alpha in [0.1, 0.5, 2.0] {
        store.get_mut(block.alpha_attn).data_mut()[0] = alpha;
        store.get_mut(block.alpha_ffn).data_mut()[0] = alpha;
        let out = block.forward(&store, &hidden, &keys, &mask)?;
        // row 0 is text ahead of the image: only the zero pad is visible
        let first: f64 = (0..dims.h_llm)
            .map(|j| (out.get(0, j) - hidden.get(0, j)).abs())
            .fold(0.0, f64::max);
        println!(
            "alpha {alpha}: max change {:.4}, change at leading text row {:.4}",
            out.max_abs_diff(&hidden),
            first
        );
    }
    Ok(())
}
