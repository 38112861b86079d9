//! Small pre-norm ViT-style encoder exposing hierarchical intermediate
//! features.
//!
//! The encoder has no final norm and no head: a tap is the raw residual stream
//! leaving a block. `tap_schedule` picks which blocks are tapped and
//! `assign_taps_to_xattn` decides which cross-attention layer reads which tap.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Tensor, Var};
use crate::params::{linear, Bound, LayerNormParams, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    /// Number of transformer blocks.
    pub num_layers: usize,
    /// Tokens per image, class token included.
    pub patch_count: usize,
    pub d_img: usize,
    /// How many of the deepest blocks are eligible for tapping.
    pub tap_window: usize,
    pub num_taps: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 12,
            patch_count: 17,
            d_img: 32,
            tap_window: 8,
            num_taps: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_count == 0 || self.d_img == 0 {
            return Err(Error::config("patch_count and d_img must be positive"));
        }
        validate_taps(self.num_layers, self.tap_window, self.num_taps)
    }
}

fn validate_taps(layers: usize, window: usize, taps: usize) -> Result<()> {
    if taps == 0 {
        return Err(Error::config("num_taps must be at least 1"));
    }
    if taps > window {
        return Err(Error::config(format!(
            "num_taps {taps} exceeds tap_window {window}"
        )));
    }
    if window > layers {
        return Err(Error::config(format!(
            "tap_window {window} exceeds num_layers {layers}"
        )));
    }
    Ok(())
}

/// Block indices (0-based) of the `taps` uniformly spaced taps inside the last
/// `window` of `layers` blocks. Stride is `window / taps` and the final block
/// is always included.
pub fn tap_schedule(layers: usize, window: usize, taps: usize) -> Result<Vec<usize>> {
    validate_taps(layers, window, taps)?;
    Ok((0..taps)
        .map(|j| layers - window + ((j + 1) * window).div_ceil(taps) - 1)
        .collect())
}

/// For each of `num_xattn` cross-attention layers, the tap it reads.
/// Contiguous blocks, shallowest tap first.
pub fn assign_taps_to_xattn(taps: usize, num_xattn: usize) -> Result<Vec<usize>> {
    if taps == 0 {
        return Err(Error::config("need at least one tap"));
    }
    if num_xattn < taps {
        return Err(Error::config(format!(
            "{num_xattn} cross-attention layers cannot consume {taps} taps"
        )));
    }
    Ok((0..num_xattn).map(|t| t * taps / num_xattn).collect())
}

/// Feature sequences tapped from one image.
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalFeatures {
    pub taps: Vec<Tensor>,
    pub source_layers: Vec<usize>,
}

/// Freezing group for block `index` of `layers`: the deepest ⌈L/4⌉ blocks form
/// the last quarter, the rest of the deepest ⌈L/2⌉ the back half.
pub fn block_group(index: usize, layers: usize) -> ParamGroup {
    let quarter = layers.div_ceil(4);
    let half = layers.div_ceil(2);
    if index >= layers - quarter {
        ParamGroup::VitLastQuarter
    } else if index >= layers - half {
        ParamGroup::VitBackHalf
    } else {
        ParamGroup::VitFront
    }
}

#[derive(Clone, Debug)]
struct EncoderBlock {
    attn_norm: LayerNormParams,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: LayerNormParams,
    w_up: ParamId,
    w_down: ParamId,
    width: usize,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, prefix: &str, group: ParamGroup, d: usize) -> Self {
        let std = 1.0 / (d as f64).sqrt();
        let hidden = 2 * d;
        Self {
            attn_norm: LayerNormParams::new(store, &format!("{prefix}.attn_norm"), group, d),
            wq: store.normal(&format!("{prefix}.wq"), group, &[d, d], std),
            wk: store.normal(&format!("{prefix}.wk"), group, &[d, d], std),
            wv: store.normal(&format!("{prefix}.wv"), group, &[d, d], std),
            wo: store.normal(&format!("{prefix}.wo"), group, &[d, d], std),
            mlp_norm: LayerNormParams::new(store, &format!("{prefix}.mlp_norm"), group, d),
            w_up: store.normal(&format!("{prefix}.w_up"), group, &[d, hidden], std),
            w_down: store.normal(
                &format!("{prefix}.w_down"),
                group,
                &[hidden, d],
                1.0 / (hidden as f64).sqrt(),
            ),
            width: d,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, full: &Rc<Mask>) -> Result<Var> {
        let h = self.attn_norm.forward(g, p, x)?;
        let q = linear(g, p, h, self.wq)?;
        let k = linear(g, p, h, self.wk)?;
        let v = linear(g, p, h, self.wv)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (self.width as f64).sqrt())?;
        let a = g.softmax_masked(s, full.clone())?;
        let ctx = g.matmul(a, v)?;
        let o = linear(g, p, ctx, self.wo)?;
        let x = g.add(x, o)?;

        let h = self.mlp_norm.forward(g, p, x)?;
        let u = linear(g, p, h, self.w_up)?;
        let u = g.gelu(u)?;
        let d = linear(g, p, u, self.w_down)?;
        g.add(x, d)
    }
}

#[derive(Clone, Debug)]
pub struct VisionEncoder {
    cfg: EncoderConfig,
    blocks: Vec<EncoderBlock>,
    schedule: Vec<usize>,
}

impl VisionEncoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, prefix: &str) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.num_layers)
            .map(|b| {
                let group = block_group(b, cfg.num_layers);
                EncoderBlock::new(store, &format!("{prefix}.block{b}"), group, cfg.d_img)
            })
            .collect();
        let schedule = tap_schedule(cfg.num_layers, cfg.tap_window, cfg.num_taps)?;
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            schedule,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn schedule(&self) -> &[usize] {
        &self.schedule
    }

    fn check_patches(&self, shape: &[usize]) -> Result<()> {
        if shape != [self.cfg.patch_count, self.cfg.d_img] {
            return Err(Error::dim(format!(
                "patches {shape:?}, encoder expects [{}, {}]",
                self.cfg.patch_count, self.cfg.d_img
            )));
        }
        Ok(())
    }

    /// Runs every block and returns the tapped block outputs in schedule order.
    pub fn encode_graph(&self, g: &mut Graph, p: &Bound, patches: Var) -> Result<Vec<Var>> {
        self.check_patches(g.value(patches).shape())?;
        let n = self.cfg.patch_count;
        let full = Rc::new(Mask::filled(n, n, true));
        let mut x = patches;
        let mut taps = Vec::with_capacity(self.schedule.len());
        let mut next = 0;
        for (b, block) in self.blocks.iter().enumerate() {
            x = block.forward(g, p, x, &full)?;
            if next < self.schedule.len() && self.schedule[next] == b {
                taps.push(x);
                next += 1;
            }
        }
        Ok(taps)
    }

    pub fn encode(&self, store: &ParamStore, patches: &Tensor) -> Result<HierarchicalFeatures> {
        self.check_patches(patches.shape())?;
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let x = g.constant(patches.clone())?;
        let taps = self.encode_graph(&mut g, &p, x)?;
        Ok(HierarchicalFeatures {
            taps: taps.into_iter().map(|v| g.value(v).clone()).collect(),
            source_layers: self.schedule.clone(),
        })
    }
}
