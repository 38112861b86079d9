//! Plain-text checkpoint manifest.
//!
//! ```text
//! gated-vlm-checkpoint version=1
//! seed=<root seed>
//! model.<field>=<value>        (one line per config field)
//! meta.<key>=<value>           (free-form, e.g. how the data was generated)
//! param <group> <name> <d0>x<d1>...
//! <space-separated values>
//! ```
//!
//! Values use Rust's shortest round-trip float formatting, so a save/load
//! cycle is bit-exact.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::moe::MoeConfig;
use crate::numerics::Tensor;
use crate::params::ParamGroup;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &str = "gated-vlm-checkpoint";

fn config_lines(cfg: &ModelConfig) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = vec![
        ("model.llm_layers".into(), cfg.llm_layers.to_string()),
        ("model.h_llm".into(), cfg.h_llm.to_string()),
        ("model.heads".into(), cfg.heads.to_string()),
        ("model.vocab".into(), cfg.vocab.to_string()),
        ("model.media_len".into(), cfg.media_len.to_string()),
        ("model.r_xc".into(), format!("{:?}", cfg.r_xc)),
        ("model.r_xf".into(), format!("{:?}", cfg.r_xf)),
        ("model.pad_len".into(), cfg.pad_len.to_string()),
        ("model.mask_mode".into(), cfg.mask_mode.to_string()),
        (
            "encoder.num_layers".into(),
            cfg.encoder.num_layers.to_string(),
        ),
        (
            "encoder.patch_count".into(),
            cfg.encoder.patch_count.to_string(),
        ),
        ("encoder.d_img".into(), cfg.encoder.d_img.to_string()),
        (
            "encoder.tap_window".into(),
            cfg.encoder.tap_window.to_string(),
        ),
        ("encoder.num_taps".into(), cfg.encoder.num_taps.to_string()),
    ];
    if let Some(m) = &cfg.moe {
        out.extend([
            ("moe.n_replicas".into(), m.n_replicas.to_string()),
            ("moe.segments".into(), m.segments.to_string()),
            ("moe.top_k".into(), m.top_k.to_string()),
            (
                "moe.use_world_expert".into(),
                m.use_world_expert.to_string(),
            ),
            (
                "moe.aux_loss_weight".into(),
                format!("{:?}", m.aux_loss_weight),
            ),
        ]);
    }
    out
}

fn parse_config(kv: &HashMap<String, String>) -> Result<ModelConfig> {
    fn get<T: std::str::FromStr>(kv: &HashMap<String, String>, k: &str) -> Result<T> {
        let v = kv
            .get(k)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{k}`")))?;
        v.parse()
            .map_err(|_| Error::Checkpoint(format!("bad value for `{k}`: {v}")))
    }
    let mut cfg = ModelConfig::toy();
    cfg.llm_layers = get(kv, "model.llm_layers")?;
    cfg.h_llm = get(kv, "model.h_llm")?;
    cfg.heads = get(kv, "model.heads")?;
    cfg.vocab = get(kv, "model.vocab")?;
    cfg.media_len = get(kv, "model.media_len")?;
    cfg.r_xc = get(kv, "model.r_xc")?;
    cfg.r_xf = get(kv, "model.r_xf")?;
    cfg.pad_len = get(kv, "model.pad_len")?;
    cfg.mask_mode = kv
        .get("model.mask_mode")
        .ok_or_else(|| Error::Checkpoint("missing `model.mask_mode`".into()))?
        .parse()?;
    cfg.encoder.num_layers = get(kv, "encoder.num_layers")?;
    cfg.encoder.patch_count = get(kv, "encoder.patch_count")?;
    cfg.encoder.d_img = get(kv, "encoder.d_img")?;
    cfg.encoder.tap_window = get(kv, "encoder.tap_window")?;
    cfg.encoder.num_taps = get(kv, "encoder.num_taps")?;
    cfg.moe = if kv.contains_key("moe.n_replicas") {
        Some(MoeConfig {
            n_replicas: get(kv, "moe.n_replicas")?,
            segments: get(kv, "moe.segments")?,
            top_k: get(kv, "moe.top_k")?,
            use_world_expert: get(kv, "moe.use_world_expert")?,
            aux_loss_weight: get(kv, "moe.aux_loss_weight")?,
        })
    } else {
        None
    };
    cfg.validate()?;
    Ok(cfg)
}

/// A model plus the free-form `meta.*` entries saved with it.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub meta: BTreeMap<String, String>,
}

pub fn write_checkpoint(model: &Model, meta: &BTreeMap<String, String>) -> String {
    let mut out = format!(
        "{MAGIC} version={CHECKPOINT_VERSION}\nseed={}\n",
        model.store.root_seed()
    );
    for (k, v) in config_lines(model.config()) {
        let _ = writeln!(out, "{k}={v}");
    }
    for (k, v) in meta {
        let _ = writeln!(out, "meta.{k}={v}");
    }
    for (_, p) in model.store.iter() {
        let shape: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        let _ = writeln!(out, "param {} {} {}", p.group, p.name, shape.join("x"));
        let vals: Vec<String> = p.value.data().iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&vals.join(" "));
        out.push('\n');
    }
    out
}

pub fn read_checkpoint(text: &str) -> Result<Checkpoint> {
    let bad = |m: String| Error::Checkpoint(m);
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
    let version = header
        .strip_prefix(MAGIC)
        .and_then(|r| r.trim().strip_prefix("version="))
        .ok_or_else(|| bad(format!("bad header `{header}`")))?;
    if version != CHECKPOINT_VERSION.to_string() {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut kv = HashMap::new();
    let mut params: Vec<(ParamGroup, String, Tensor)> = Vec::new();
    while let Some(line) = lines.next() {
        if let Some(rest) = line.strip_prefix("param ") {
            let f: Vec<&str> = rest.split_whitespace().collect();
            let [group, name, shape] = f.as_slice() else {
                return Err(bad(format!("bad param line `{line}`")));
            };
            let group: ParamGroup = group.parse()?;
            let shape = shape
                .split('x')
                .map(|d| {
                    d.parse::<usize>()
                        .map_err(|_| bad(format!("bad shape for {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let data = lines
                .next()
                .ok_or_else(|| bad(format!("missing data for {name}")))?
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| bad(format!("bad value in {name}")))
                })
                .collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| bad(format!("{name}: {e}")))?;
            params.push((group, name.to_string(), t));
        } else if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        } else if !line.trim().is_empty() {
            return Err(bad(format!("unexpected line `{line}`")));
        }
    }
    let seed: u64 = kv
        .get("seed")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad("missing or bad seed".into()))?;
    let cfg = parse_config(&kv)?;
    let mut model = Model::new(&cfg, seed)?;
    if params.len() != model.store.len() {
        return Err(bad(format!(
            "{} parameters stored, model has {}",
            params.len(),
            model.store.len()
        )));
    }
    for (group, name, t) in params {
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        let expected = model
            .store
            .iter()
            .find(|(i, _)| *i == id)
            .map(|(_, p)| p.group);
        if expected != Some(group) || model.store.get(id).shape() != t.shape() {
            return Err(bad(format!("{name}: group or shape mismatch")));
        }
        *model.store.get_mut(id) = t;
    }
    let meta = kv
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v)))
        .collect();
    Ok(Checkpoint { model, meta })
}

pub fn save_checkpoint(model: &Model, meta: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    std::fs::write(path, write_checkpoint(model, meta))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&std::fs::read_to_string(path)?)
}
