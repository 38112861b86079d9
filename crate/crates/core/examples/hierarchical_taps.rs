//! Which encoder depths feed which cross-attention layers.
//!
//! cargo run --example hierarchical_taps

use gated_vlm::numerics::init;
use gated_vlm::params::ParamStore;
use gated_vlm::vision::{
    assign_taps_to_xattn, block_group, tap_schedule, EncoderConfig, VisionEncoder,
};

fn main() -> gated_vlm::Result<()> {
    for (layers, window, taps) in [(24, 8, 4), (12, 8, 4), (4, 4, 2)] {
        println!(
            "L={layers:<3} W={window} F={taps} -> taps {:?}",
            tap_schedule(layers, window, taps)?
        );
    }
    println!(
        "32 decoder layers read taps {:?}",
        assign_taps_to_xattn(4, 32)?
    );

    let cfg = EncoderConfig::default();
    let groups: Vec<String> = (0..cfg.num_layers)
        .map(|i| block_group(i, cfg.num_layers).to_string())
        .collect();
    println!("block groups: {}", groups.join(" "));

    let mut store = ParamStore::new(7);
    let enc = VisionEncoder::new(&cfg, &mut store, "vit")?;
    let patches = init::normal(&[cfg.patch_count, cfg.d_img], 1.0, 11);
    let feats = enc.encode(&store, &patches)?;
    for (t, (f, layer)) in feats.taps.iter().zip(&feats.source_layers).enumerate() {
        let rms = (f.data().iter().map(|v| v * v).sum::<f64>() / f.len() as f64).sqrt();
        println!(
            "tap {t}: block {layer:>2}, shape {:?}, rms {rms:.3}",
            f.shape()
        );
    }
    Ok(())
}
