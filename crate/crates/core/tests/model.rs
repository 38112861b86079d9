mod common;

use std::path::PathBuf;

use common::{open_gates, random_segments, sample};
use gated_vlm::fusion::{MaskMode, Segment};
use gated_vlm::model::{
    freeze_stage, loss, loss_graph, next_token_targets, read_checkpoint, sgd_step,
    write_checkpoint, Model, ModelConfig, Sample, TrainStage,
};
use gated_vlm::moe::MoeConfig;
use gated_vlm::numerics::{grad_check_sampled, init, Graph, Tensor, Var};
use gated_vlm::params::{Bound, ParamGroup};

fn golden_segments() -> Vec<Segment> {
    vec![
        Segment::Text(1),
        Segment::Image(0),
        Segment::Text(4),
        Segment::Text(7),
        Segment::Image(1),
        Segment::Text(10),
    ]
}

fn golden_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

fn format_logits(t: &Tensor) -> String {
    let mut s = format!("{} {}\n", t.rows(), t.cols());
    for r in 0..t.rows() {
        let row: Vec<String> = t.row(r).iter().map(|v| format!("{v:?}")).collect();
        s.push_str(&row.join(" "));
        s.push('\n');
    }
    s
}

fn parse_logits(text: &str) -> Vec<f64> {
    text.lines()
        .skip(1)
        .flat_map(|l| l.split_whitespace().map(|v| v.parse::<f64>().unwrap()))
        .collect()
}

/// Logits are recorded by `UPDATE_GOLDEN=1 cargo test --test model golden`
/// and compared on every later run.
fn check_golden(name: &str, logits: &Tensor) {
    let path = golden_path(name);
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, format_logits(logits)).unwrap();
    }
    let text = std::fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    let want = parse_logits(&text);
    assert_eq!(want.len(), logits.len());
    let worst = want
        .iter()
        .zip(logits.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(worst < 1e-12, "{name}: max deviation {worst:e}");
}

/// Straight-line evaluation of the dense toy model with plain loops over
/// nested vectors, reading weights by name.
mod reference {
    use gated_vlm::fusion::{Element, InterleavedSequence};
    use gated_vlm::params::ParamStore;

    pub type M = Vec<Vec<f64>>;

    fn w(s: &ParamStore, name: &str) -> M {
        let t = s.get(
            s.find(name)
                .unwrap_or_else(|| panic!("no parameter {name}")),
        );
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    fn v(s: &ParamStore, name: &str) -> Vec<f64> {
        s.get(s.find(name).unwrap()).data().to_vec()
    }

    fn mm(a: &M, b: &M) -> M {
        a.iter()
            .map(|row| {
                (0..b[0].len())
                    .map(|j| (0..row.len()).map(|k| row[k] * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    fn add_scaled(a: &M, b: &M, s: f64) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + s * q).collect())
            .collect()
    }

    fn ln(x: &M, s: &ParamStore, prefix: &str) -> M {
        let (g, b) = (
            v(s, &format!("{prefix}.gain")),
            v(s, &format!("{prefix}.shift")),
        );
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, x)| (x - mean) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: &M) -> M {
        let c = (2.0 / std::f64::consts::PI).sqrt();
        x.iter()
            .map(|r| {
                r.iter()
                    .map(|&x| 0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh()))
                    .collect()
            })
            .collect()
    }

    fn attend(q: &M, k: &M, val: &M, allow: impl Fn(usize, usize) -> bool) -> M {
        let scale = 1.0 / (q[0].len() as f64).sqrt();
        q.iter()
            .enumerate()
            .map(|(i, qi)| {
                let scores: Vec<Option<f64>> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        allow(i, j)
                            .then(|| qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale)
                    })
                    .collect();
                let m = scores
                    .iter()
                    .flatten()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores
                    .iter()
                    .map(|s| s.map_or(0.0, |s| (s - m).exp()))
                    .collect();
                let z: f64 = e.iter().sum();
                (0..val[0].len())
                    .map(|c| e.iter().zip(val).map(|(p, vr)| p / z * vr[c]).sum())
                    .collect()
            })
            .collect()
    }

    fn cols(x: &M, lo: usize, hi: usize) -> M {
        x.iter().map(|r| r[lo..hi].to_vec()).collect()
    }

    fn block(
        x: &M,
        s: &ParamStore,
        p: &str,
        heads: usize,
        allow: &dyn Fn(usize, usize) -> bool,
    ) -> M {
        let h = ln(x, s, &format!("{p}.attn_norm"));
        let q = mm(&h, &w(s, &format!("{p}.wq")));
        let k = mm(&h, &w(s, &format!("{p}.wk")));
        let val = mm(&h, &w(s, &format!("{p}.wv")));
        let hd = q[0].len() / heads;
        let mut ctx: M = vec![Vec::new(); x.len()];
        for head in 0..heads {
            let o = attend(
                &cols(&q, head * hd, (head + 1) * hd),
                &cols(&k, head * hd, (head + 1) * hd),
                &cols(&val, head * hd, (head + 1) * hd),
                allow,
            );
            for (c, r) in ctx.iter_mut().zip(o) {
                c.extend(r);
            }
        }
        let x = add_scaled(x, &mm(&ctx, &w(s, &format!("{p}.wo"))), 1.0);
        let h = ln(&x, s, &format!("{p}.mlp_norm"));
        let u = gelu(&mm(&h, &w(s, &format!("{p}.w_up"))));
        add_scaled(&x, &mm(&u, &w(s, &format!("{p}.w_down"))), 1.0)
    }

    /// Toy config only: 4 encoder blocks tapped at blocks 1 and 3, two
    /// decoder layers, one pad key, image-mode masks.
    pub fn forward(s: &ParamStore, seq: &InterleavedSequence, images: &[M]) -> M {
        let els = seq.elements();
        let n_img = images.len();
        // L - W + ceil((j + 1) W / F) - 1 with L = W = 4, F = 2
        let taps = [1usize, 3];
        let feats: Vec<Vec<M>> = images
            .iter()
            .map(|img| {
                let mut x = img.clone();
                let mut out = Vec::new();
                for b in 0..4 {
                    x = block(&x, s, &format!("vit.block{b}"), 1, &|_, _| true);
                    if taps.contains(&b) {
                        out.push(x.clone());
                    }
                }
                out
            })
            .collect();
        let s_img = 5;
        let d = 8;
        let keys: Vec<M> = (0..2)
            .map(|t| {
                let mut k: M = Vec::new();
                if n_img == 0 {
                    k.extend(vec![vec![0.0; d]; s_img]);
                }
                for f in &feats {
                    k.extend(f[t].iter().cloned());
                }
                k.push(vec![0.0; d]);
                k
            })
            .collect();
        let n_keys = n_img.max(1) * s_img + 1;
        let cross = |i: usize, j: usize| -> bool {
            let pad = j == n_keys - 1;
            match els[i] {
                Element::MediaSlot { image, .. } => !pad && j / s_img == image,
                Element::Text(_) => {
                    pad || els[..i].iter().rev().find_map(|e| match e {
                        Element::MediaSlot { image, .. } => Some(*image),
                        _ => None,
                    }) == Some(j / s_img)
                }
            }
        };

        let tok = w(s, "llm.tok_embed");
        let med = w(s, "media_tokens");
        let mut x: M = els
            .iter()
            .map(|e| match e {
                Element::Text(t) => tok[*t].clone(),
                Element::MediaSlot { slot, .. } => med[*slot].clone(),
            })
            .collect();
        for t in 0..2 {
            let p = format!("xattn{t}");
            let h = ln(&x, s, &format!("{p}.attn_norm"));
            let q = mm(&h, &w(s, &format!("{p}.wq")));
            let k = mm(&keys[t], &w(s, &format!("{p}.wk")));
            let val = mm(&keys[t], &w(s, &format!("{p}.wv")));
            let o = mm(&attend(&q, &k, &val, cross), &w(s, &format!("{p}.wo")));
            x = add_scaled(&x, &o, v(s, &format!("{p}.alpha_attn"))[0].tanh());
            let h = ln(&x, s, &format!("{p}.ffn_norm"));
            let f = mm(
                &gelu(&mm(&h, &w(s, &format!("{p}.ffn.w_in")))),
                &w(s, &format!("{p}.ffn.w_out")),
            );
            x = add_scaled(&x, &f, v(s, &format!("{p}.alpha_ffn"))[0].tanh());
            x = block(&x, s, &format!("llm.layer{t}"), 2, &|i, j| j <= i);
        }
        mm(&ln(&x, s, "llm.final_norm"), &w(s, "llm.head"))
    }
}

fn reference_logits(m: &Model, s: &Sample) -> Vec<f64> {
    let imgs: Vec<reference::M> = s
        .images
        .iter()
        .map(|t| (0..t.rows()).map(|r| t.row(r).to_vec()).collect())
        .collect();
    reference::forward(&m.store, &s.seq, &imgs).concat()
}

#[test]
fn model_matches_straight_line_reference() {
    let cfg = ModelConfig::toy();
    let mut rng = init::rng(31);
    for i in 0..6 {
        let mut m = Model::new(&cfg, i).unwrap();
        open_gates(&mut m, 0.9, -0.7);
        let s = sample(
            &cfg,
            &random_segments(&mut rng, (i % 3) as usize, 3, cfg.vocab),
            100 + i,
        );
        let got = m.forward(&s).unwrap();
        let want = reference_logits(&m, &s);
        let worst = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(worst < 1e-10, "case {i}: {worst:e}");
    }
}

#[test]
fn golden_logits_at_init() {
    let cfg = ModelConfig::toy();
    let m = Model::new(&cfg, 0).unwrap();
    let s = sample(&cfg, &golden_segments(), 0);
    check_golden("toy_seed0_init.txt", &m.forward(&s).unwrap());
}

#[test]
fn golden_logits_with_open_gates() {
    let cfg = ModelConfig::toy();
    let mut m = Model::new(&cfg, 0).unwrap();
    open_gates(&mut m, 0.5, -0.3);
    let s = sample(&cfg, &golden_segments(), 0);
    let logits = m.forward(&s).unwrap();
    let want = reference_logits(&m, &s);
    assert!(logits
        .data()
        .iter()
        .zip(&want)
        .all(|(a, b)| (a - b).abs() < 1e-10));
    check_golden("toy_seed0_open_gates.txt", &logits);
}

/// Masked mean NLL computed directly from the definition.
fn nll_oracle(logits: &Tensor, targets: &[usize], mask: &[bool]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for r in 0..logits.rows() {
        if !mask[r] {
            continue;
        }
        let row = logits.row(r);
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
        n += 1;
    }
    total / n as f64
}

#[test]
fn loss_matches_masked_nll_oracle() {
    let cfg = ModelConfig::toy();
    let mut m = Model::new(&cfg, 3).unwrap();
    open_gates(&mut m, 0.4, 0.4);
    let mut rng = init::rng(5);
    for i in 0..10 {
        let s = sample(&cfg, &random_segments(&mut rng, 2, 3, cfg.vocab), i);
        let logits = m.forward(&s).unwrap();
        let (t, mask) = next_token_targets(&s.seq);
        let got = loss(&logits, &t, &mask).unwrap();
        assert!((got - nll_oracle(&logits, &t, &mask)).abs() < 1e-10);
        assert_eq!(got, m.sample_loss(&s).unwrap());
    }
}

#[test]
fn media_positions_never_affect_loss() {
    let cfg = ModelConfig::toy();
    let m = Model::new(&cfg, 1).unwrap();
    let s = sample(
        &cfg,
        &[
            Segment::Text(2),
            Segment::Image(0),
            Segment::Text(3),
            Segment::Text(5),
        ],
        2,
    );
    let logits = m.forward(&s).unwrap();
    let (t, mask) = next_token_targets(&s.seq);
    let base = loss(&logits, &t, &mask).unwrap();
    let mut rng = init::rng(9);
    let mut perturbed = logits.clone();
    for r in 0..logits.rows() {
        if !mask[r] {
            for c in 0..logits.cols() {
                perturbed.set(r, c, rand::Rng::random_range(&mut rng, -50.0..50.0));
            }
        }
    }
    assert_ne!(perturbed, logits);
    assert_eq!(loss(&perturbed, &t, &mask).unwrap(), base);
}

#[test]
fn only_final_text_contributes_after_media() {
    let cfg = ModelConfig::toy();
    let s = sample(&cfg, &[Segment::Image(0), Segment::Text(6)], 0);
    let (t, mask) = next_token_targets(&s.seq);
    assert_eq!(mask.iter().filter(|&&m| m).count(), 1);
    assert!(mask[cfg.media_len - 1]);
    assert_eq!(t[cfg.media_len - 1], 6);
    // a lone media run has nothing to score
    let only_media = sample(&cfg, &[Segment::Image(0)], 0);
    let m = Model::new(&cfg, 0).unwrap();
    assert!(m.sample_loss(&only_media).is_err());
}

#[test]
fn pure_text_loss_is_plain_lm_loss() {
    let cfg = ModelConfig::toy();
    let m = Model::new(&cfg, 4).unwrap();
    let toks = [3usize, 1, 4, 1, 5, 9, 2, 6];
    let s = Sample::new(
        gated_vlm::fusion::InterleavedSequence::text_only(&toks),
        vec![],
    )
    .unwrap();
    let logits = m.forward(&s).unwrap();
    let shifted = logits.slice_rows(0, toks.len() - 1).unwrap();
    let want = nll_oracle(&shifted, &toks[1..], &vec![true; toks.len() - 1]);
    assert!((m.sample_loss(&s).unwrap() - want).abs() < 1e-12);
}

#[test]
fn image_and_video_modes_agree_with_one_image() {
    let mut cfg = ModelConfig::toy();
    let mut rng = init::rng(11);
    for i in 0..5 {
        let segs = random_segments(&mut rng, 1, 3, cfg.vocab);
        cfg.mask_mode = MaskMode::Image;
        let mut a = Model::new(&cfg, 6).unwrap();
        open_gates(&mut a, 0.8, 0.6);
        cfg.mask_mode = MaskMode::Video;
        let mut b = Model::new(&cfg, 6).unwrap();
        open_gates(&mut b, 0.8, 0.6);
        let s = sample(&cfg, &segs, i);
        assert_eq!(a.forward(&s).unwrap(), b.forward(&s).unwrap());
    }
}

#[test]
fn later_image_cannot_reach_earlier_positions() {
    let cfg = ModelConfig::toy();
    let mut m = Model::new(&cfg, 2).unwrap();
    open_gates(&mut m, 1.0, 1.0);
    let segs = [
        Segment::Text(1),
        Segment::Image(0),
        Segment::Text(2),
        Segment::Text(3),
        Segment::Image(1),
        Segment::Text(4),
    ];
    let s = sample(&cfg, &segs, 8);
    let base = m.forward(&s).unwrap();
    let mut t = s.clone();
    t.images[1] = init::normal(t.images[1].shape(), 3.0, 77);
    let moved = m.forward(&t).unwrap();
    let first_img1 = 1 + cfg.media_len + 2;
    for r in 0..first_img1 {
        assert_eq!(base.row(r), moved.row(r), "row {r} changed");
    }
    assert!((first_img1..base.rows()).any(|r| base.row(r) != moved.row(r)));
}

fn moe_toy() -> ModelConfig {
    let mut cfg = ModelConfig::toy();
    cfg.moe = Some(MoeConfig {
        n_replicas: 2,
        segments: 2,
        top_k: 2,
        ..MoeConfig::default()
    });
    cfg
}

#[test]
fn frozen_groups_stay_bit_identical() {
    let cfg = moe_toy();
    let batch: Vec<Sample> = (0..2)
        .map(|i| {
            sample(
                &cfg,
                &[
                    Segment::Image(0),
                    Segment::Text(4),
                    Segment::Text(i),
                    Segment::Image(1),
                    Segment::Text(5),
                ],
                i as u64,
            )
        })
        .collect();
    for stage in TrainStage::ALL {
        for gates_open in [false, true] {
            let mut m = Model::new(&cfg, 12).unwrap();
            if gates_open {
                open_gates(&mut m, 0.5, 0.5);
                // a nonzero router so every expert receives gradient
                for x in m.xattn_layers().to_vec() {
                    if let gated_vlm::fusion::FeedForward::Moe(bank) = &x.ffn {
                        let r = bank.router();
                        *m.store.get_mut(r) = init::normal(m.store.get(r).shape(), 1.0, 3);
                    }
                }
            }
            let before: Vec<(ParamGroup, Tensor)> = m
                .store
                .iter()
                .map(|(_, p)| (p.group, p.value.clone()))
                .collect();
            sgd_step(&mut m, &batch, stage, 0.05).unwrap();
            let trainable: Vec<ParamGroup> = freeze_stage(stage)
                .into_iter()
                .filter(|x| x.1)
                .map(|x| x.0)
                .collect();
            let mut changed = std::collections::HashSet::new();
            for ((group, old), (_, p)) in before.iter().zip(m.store.iter()) {
                if trainable.contains(group) {
                    if old != &p.value {
                        changed.insert(*group);
                    }
                } else {
                    assert_eq!(old, &p.value, "{stage}: frozen {} moved", p.name);
                }
            }
            if gates_open {
                for g in &trainable {
                    assert!(
                        changed.contains(g),
                        "{stage}: trainable group {g} did not move"
                    );
                }
            }
        }
    }
}

#[test]
fn stage_partition_covers_every_parameter() {
    let m = Model::new(&moe_toy(), 0).unwrap();
    let total = m.store.count(None);
    for stage in TrainStage::ALL {
        let plan = freeze_stage(stage);
        let t: usize = plan
            .iter()
            .filter(|x| x.1)
            .map(|x| m.store.count(Some(x.0)))
            .sum();
        let f: usize = plan
            .iter()
            .filter(|x| !x.1)
            .map(|x| m.store.count(Some(x.0)))
            .sum();
        assert_eq!(t + f, total);
    }
    let p1 = freeze_stage(TrainStage::PretrainPhase1);
    let llm_trainable: usize = p1
        .iter()
        .filter(|x| x.1 && x.0 == ParamGroup::Llm)
        .map(|x| m.store.count(Some(x.0)))
        .sum();
    assert_eq!(llm_trainable, 0);
}

fn model_grad_check(cfg: &ModelConfig, coords: usize) -> f64 {
    let mut m = Model::new(cfg, 21).unwrap();
    open_gates(&mut m, 0.7, -0.4);
    for x in m.xattn_layers().to_vec() {
        if let gated_vlm::fusion::FeedForward::Moe(bank) = &x.ffn {
            let r = bank.router();
            *m.store.get_mut(r) = init::normal(m.store.get(r).shape(), 0.5, 8);
        }
    }
    let s = sample(
        cfg,
        &[
            Segment::Text(3),
            Segment::Image(0),
            Segment::Text(4),
            Segment::Text(2),
            Segment::Image(1),
            Segment::Text(9),
        ],
        30,
    );
    let params = m.store.values();
    let f = |g: &mut Graph, vars: &[Var]| {
        let p = Bound::from_vars(vars.to_vec());
        let out = m.forward_graph(g, &p, &s, true)?;
        let l = loss_graph(g, out.logits, &s.seq)?;
        match out.aux_loss {
            Some(a) => g.add(l, a),
            None => Ok(l),
        }
    };
    grad_check_sampled(f, &params, coords, 2).unwrap()
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let worst = model_grad_check(&ModelConfig::toy(), 400);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn moe_model_gradients_match_finite_differences() {
    let mut cfg = moe_toy();
    cfg.moe.as_mut().unwrap().aux_loss_weight = 0.01;
    let worst = model_grad_check(&cfg, 300);
    assert!(worst < 1e-4, "worst relative error {worst:e}");
}

#[test]
fn checkpoint_reload_reproduces_logits() {
    let cfg = moe_toy();
    let mut m = Model::new(&cfg, 5).unwrap();
    open_gates(&mut m, 0.3, 0.2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    gated_vlm::model::save_checkpoint(&m, &Default::default(), &path).unwrap();
    let back = gated_vlm::model::load_checkpoint(&path).unwrap().model;
    let s = sample(&cfg, &golden_segments(), 1);
    assert_eq!(m.forward(&s).unwrap(), back.forward(&s).unwrap());
    assert_eq!(
        write_checkpoint(&back, &Default::default()),
        std::fs::read_to_string(&path).unwrap()
    );
    assert!(read_checkpoint("not a checkpoint").is_err());
}
