//! Upcycles a dense FFN into replicated, segmented experts plus a world
//! expert, checks the slicing identity and routes a few tokens.
//!
//! cargo run --example moe_upcycling

use gated_vlm::cli::upcycle_deviation;
use gated_vlm::ffn::FfnWeights;
use gated_vlm::moe::{aux_load_balance_loss, upcycle, MoeConfig};
use gated_vlm::numerics::init;
use gated_vlm::params::{ParamGroup, ParamStore};

fn main() -> gated_vlm::Result<()> {
    for (n, m) in [(1, 1), (2, 2), (4, 4)] {
        let cfg = MoeConfig {
            n_replicas: n,
            segments: m,
            top_k: m.min(4),
            ..MoeConfig::default()
        };
        println!(
            "N={n} M={m}: max deviation {:e}",
            upcycle_deviation(8, 16, &cfg, 0, 100)?
        );
    }

    let cfg = MoeConfig::default();
    let dense = FfnWeights::new(
        init::normal(&[8, 16], 0.5, 1),
        init::normal(&[16, 8], 0.5, 2),
    )?;
    let mut store = ParamStore::new(0);
    let bank = upcycle(&dense, &cfg, &mut store, "moe")?;
    println!(
        "{} experts of hidden width {}, {} parameters in the moe group",
        bank.experts().len(),
        bank.expert(0, 0).weights(&store).hidden(),
        store.count(Some(ParamGroup::Moe))
    );

    // a zero router ties every expert; ties go to the lowest indices
    let x = init::normal(&[6, 8], 1.0, 3);
    let routing = bank.route(&store, &x.slice_rows(0, 1)?)?;
    println!(
        "zero router picks experts {:?} with gates {:?}",
        routing.indices, routing.gates
    );

    let router = bank.router();
    *store.get_mut(router) = init::normal(store.get(router).shape(), 1.0, 4);
    let (_, stats) = bank.forward(&store, &x)?;
    println!(
        "trained-router load fractions {:?}",
        stats
            .fractions()
            .iter()
            .map(|f| format!("{f:.2}"))
            .collect::<Vec<_>>()
    );
    println!(
        "balance loss {:.4} (1 = uniform)",
        aux_load_balance_loss(&stats)
    );
    Ok(())
}
