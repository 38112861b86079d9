//! Training-cost comparison between concatenating visual tokens into the
//! decoder and reading them through cross-attention.
//!
//! cargo run --example cost_model

use gated_vlm::flops::{self, Preset};

fn main() -> gated_vlm::Result<()> {
    for p in [Preset::Pretrain, Preset::Continual] {
        let report = flops::ratio(&p.scenario())?;
        print!("{}", report.to_table(Some(p)));
        println!();
    }

    // the ratio shrinks as images get longer relative to the text
    let mut sc = Preset::Pretrain.scenario();
    println!("{:>8} {:>10}", "s_img", "S");
    for s_img in [64, 256, 1024, 4096, 16384] {
        sc.s_img = s_img;
        println!("{s_img:>8} {:>10.5}", flops::ratio(&sc)?.ratio);
    }
    Ok(())
}
