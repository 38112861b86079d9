//! Trains the toy model on the synthetic 4-class captioning task, then
//! classifies held-out images by the caption with the lowest loss.
//!
//! cargo run --example smoke_train_probe -- [steps] [lr] [seed]

use gated_vlm::model::{loss_probe, train_smoke, ModelConfig, SmokeTask, TrainOptions};
use gated_vlm::numerics::init;

fn main() -> gated_vlm::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut opts = TrainOptions::default();
    if let Some(s) = args.first() {
        opts.steps = s.parse().expect("steps");
    }
    if let Some(s) = args.get(1) {
        opts.lr = s.parse().expect("lr");
    }
    if let Some(s) = args.get(2) {
        opts.seed = s.parse().expect("seed");
    }
    let cfg = ModelConfig::toy();
    let start = std::time::Instant::now();
    let out = train_smoke(&cfg, &opts)?;
    for (i, l) in out.curve.iter().enumerate().step_by(20) {
        println!("step {i:4}  loss {l:.4}");
    }
    println!(
        "initial {:.4}  final {:.4}  ratio {:.3}  ({:.1?})",
        out.initial(),
        out.last(),
        out.last() / out.initial(),
        start.elapsed()
    );

    let candidates: Vec<Vec<usize>> = (0..out.task.classes).map(SmokeTask::caption).collect();
    let mut rng = init::rng(init::derive_seed(opts.seed, "smoke.heldout"));
    let trials = 40;
    let mut hits = 0;
    for t in 0..trials {
        let class = t % out.task.classes;
        let img = out.task.image(class, &mut rng);
        if loss_probe(&out.model, &img, &candidates)?.argmin == class {
            hits += 1;
        }
    }
    println!("probe accuracy {hits}/{trials}");
    Ok(())
}
