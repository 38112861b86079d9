//! The cost model against an arbitrary-precision evaluation of the two
//! printed formulas, written out independently of the library.

mod common;

use common::flops::{oracle_cross, oracle_full, q, qf, random_scenario, rel_err};
use gated_vlm::flops::{
    self, flops_cross_attention, flops_full_attention, parse_record, FlopsScenario, Preset,
};
use gated_vlm::numerics::init;
use num::{Signed, ToPrimitive};
use rand::Rng;

#[test]
fn presets_match_oracle_and_frozen_values() {
    for p in [Preset::Pretrain, Preset::Continual] {
        let sc = p.scenario();
        assert!(rel_err(flops_full_attention(&sc), &oracle_full(&sc)) < 1e-12);
        assert!(rel_err(flops_cross_attention(&sc), &oracle_cross(&sc)) < 1e-12);
    }
    // long-hand values, evaluated once with exact integer arithmetic
    let p = Preset::Pretrain.scenario();
    assert_eq!((p.s_img, p.s_txt, p.h_llm, p.d_img), (256, 64, 5120, 1792));
    assert_eq!(flops_full_attention(&p), 203_423_744_000.0);
    assert_eq!(flops_cross_attention(&p), 58_297_679_872.0);
    let c = Preset::Continual.scenario();
    assert_eq!(flops_full_attention(&c), 708_753_489_920.0);
    assert_eq!(flops_cross_attention(&c), 64_186_482_688.0);
    let sp = flops::ratio(&p).unwrap().ratio;
    let scp = flops::ratio(&c).unwrap().ratio;
    assert!((sp - 58_297_679_872.0 / 203_423_744_000.0).abs() < 1e-15);
    assert!((scp - 64_186_482_688.0 / 708_753_489_920.0).abs() < 1e-15);
}

#[test]
fn thousand_random_scenarios_match_oracle() {
    let mut rng = init::rng(2024);
    for _ in 0..1000 {
        let sc = random_scenario(&mut rng);
        let ef = rel_err(flops_full_attention(&sc), &oracle_full(&sc));
        let ec = rel_err(flops_cross_attention(&sc), &oracle_cross(&sc));
        assert!(
            ef < 1e-12 && ec < 1e-12,
            "{sc:?}: full {ef:e}, cross {ec:e}"
        );
    }
}

#[test]
fn batch_linearity_is_exact() {
    let mut rng = init::rng(7);
    for _ in 0..200 {
        // quarter ratios keep every term integral and the totals stay below
        // 2^53, so the float results are the exact integers
        let mut sc = FlopsScenario {
            batch: 1,
            s_img: rng.random_range(1..=64),
            s_txt: rng.random_range(1..=64),
            h_llm: rng.random_range(1..=256),
            d_img: rng.random_range(1..=256),
            r_xc: rng.random_range(1..=4) as f64 / 4.0,
            r_xf: rng.random_range(1..=4) as f64 / 4.0,
            media_len: 16,
        };
        let (f1, c1) = (flops_full_attention(&sc), flops_cross_attention(&sc));
        let k = rng.random_range(2..=50);
        sc.batch = k;
        assert_eq!(flops_full_attention(&sc), k as f64 * f1);
        assert_eq!(flops_cross_attention(&sc), k as f64 * c1);
        let s1 = flops::ratio(&FlopsScenario {
            batch: 1,
            ..sc.clone()
        })
        .unwrap()
        .ratio;
        assert_eq!(flops::ratio(&sc).unwrap().ratio, s1);
    }
    for p in [Preset::Pretrain, Preset::Continual] {
        let base = p.scenario();
        for k in [2u64, 8, 64, 1024] {
            let sc = FlopsScenario {
                batch: k,
                ..base.clone()
            };
            assert_eq!(
                flops_full_attention(&sc),
                k as f64 * flops_full_attention(&base)
            );
            assert_eq!(
                flops_cross_attention(&sc),
                k as f64 * flops_cross_attention(&base)
            );
        }
    }
}

#[test]
fn long_images_drive_the_ratio_to_zero() {
    // S falls monotonically in s_img and s_img * S -> r_xc (d_img + 16 + s_txt)
    let base = Preset::Pretrain.scenario();
    let limit = qf(base.r_xc) * (q(base.d_img) + q(16) + q(base.s_txt));
    let mut prev = f64::INFINITY;
    let mut prev_gap = f64::INFINITY;
    for e in 6..=30 {
        let s_img = 1u64 << e;
        let sc = FlopsScenario {
            s_img,
            ..base.clone()
        };
        let s = flops::ratio(&sc).unwrap().ratio;
        assert!(s < prev, "not decreasing at s_img={s_img}");
        prev = s;
        let exact = oracle_cross(&sc) / oracle_full(&sc);
        let gap = ((exact * q(s_img) - &limit) / &limit)
            .abs()
            .to_f64()
            .unwrap();
        assert!(gap < prev_gap);
        prev_gap = gap;
    }
    assert!(
        prev_gap < 1e-3,
        "s_img * S still {prev_gap} away from its limit"
    );
}

#[test]
fn zero_batch_has_no_ratio() {
    let sc = FlopsScenario {
        batch: 0,
        ..Preset::Pretrain.scenario()
    };
    assert_eq!(flops_full_attention(&sc), 0.0);
    assert_eq!(flops_cross_attention(&sc), 0.0);
    assert!(flops::ratio(&sc).is_err());
}

#[test]
fn record_round_trips() {
    let r = flops::ratio(&Preset::Continual.scenario()).unwrap();
    let text = r.to_record(Some(Preset::Continual));
    let kv: std::collections::HashMap<String, String> =
        parse_record(&text).unwrap().into_iter().collect();
    assert_eq!(kv["s_img"], "1024");
    assert_eq!(kv["S"].parse::<f64>().unwrap(), r.ratio);
    assert_eq!(kv["S_reported"].parse::<f64>().unwrap(), 0.077);
    assert_eq!(kv["flops_full"].parse::<f64>().unwrap(), r.flops_full);
    let back = FlopsScenario::from_pairs(
        [
            "B",
            "s_img",
            "s_txt",
            "h_llm",
            "d_img",
            "r_xc",
            "r_xf",
            "media_len",
        ]
        .iter()
        .map(|k| format!("{k}={}", kv[*k]))
        .collect::<Vec<_>>()
        .iter()
        .map(String::as_str),
    )
    .unwrap();
    assert_eq!(back, r.scenario);
}
