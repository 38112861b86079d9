//! Cross-attention masks for an interleaved stream in image and video mode.
//!
//! cargo run --example attention_masks -- "I T T I T"

use gated_vlm::fusion::{build_cross_mask, build_self_mask, parse_seq_spec, MaskMode};

fn main() -> gated_vlm::Result<()> {
    let spec = std::env::args()
        .nth(1)
        .unwrap_or_else(|| "I T T I T".to_string());
    let seq = parse_seq_spec(&spec, 2)?;
    let labels: Vec<String> = seq
        .elements()
        .iter()
        .map(|e| match e {
            gated_vlm::fusion::Element::Text(_) => "T".to_string(),
            gated_vlm::fusion::Element::MediaSlot { image, slot } => format!("m{image}.{slot}"),
        })
        .collect();

    for mode in [MaskMode::Image, MaskMode::Video] {
        let m = build_cross_mask(&seq, 3, 1, mode)?;
        println!(
            "{mode} mode ({} image blocks of 3, then {} pad)",
            m.allow.cols() / 3,
            m.pad_len
        );
        for (i, label) in labels.iter().enumerate() {
            let row: String = m
                .allow
                .row(i)
                .iter()
                .map(|&a| if a { '#' } else { '.' })
                .collect();
            println!("  {label:>6} {row}");
        }
    }

    let causal = build_self_mask(&seq);
    let allowed = causal.as_slice().iter().filter(|&&a| a).count();
    println!(
        "self mask: causal, {allowed} of {} entries allowed",
        causal.as_slice().len()
    );
    Ok(())
}
