//! Tanh-gated cross-attention block.
//!
//! ```text
//! y = x + tanh(alpha_attn) * Wo softmax_mask(q k^T / sqrt(a)) v
//! z = y + tanh(alpha_ffn)  * FFN(norm(y))
//! ```
//!
//! Queries come from the LM hidden state, keys/values from one visual tap
//! with zero pad rows appended. Both gates start at 0, which makes the block
//! an exact identity at initialization.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::mask::CrossMask;
use crate::error::{Error, Result};
use crate::ffn::{DenseFfn, FfnWeights};
use crate::moe::{upcycle, ExpertBank, MoeConfig, RoutingStats};
use crate::numerics::{init, Graph, Tensor, Var};
use crate::params::{linear, Bound, LayerNormParams, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XattnDims {
    pub h_llm: usize,
    pub d_img: usize,
    /// Attention width as a fraction of `h_llm`.
    pub r_xc: f64,
    /// FFN hidden width as a fraction of `h_llm`.
    pub r_xf: f64,
}

impl XattnDims {
    pub fn attn_width(&self) -> usize {
        (self.r_xc * self.h_llm as f64).round() as usize
    }

    pub fn ffn_width(&self) -> usize {
        (self.r_xf * self.h_llm as f64).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        for (name, r) in [("r_xc", self.r_xc), ("r_xf", self.r_xf)] {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::config(format!("{name} = {r} outside (0, 1]")));
            }
        }
        if self.h_llm == 0 || self.d_img == 0 {
            return Err(Error::config("h_llm and d_img must be positive"));
        }
        if self.attn_width() == 0 || self.ffn_width() == 0 {
            return Err(Error::config(format!(
                "ratios give zero width at h_llm = {} (attn {}, ffn {})",
                self.h_llm,
                self.attn_width(),
                self.ffn_width()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum FeedForward {
    Dense(DenseFfn),
    Moe(ExpertBank),
}

#[derive(Clone, Debug)]
pub struct GatedXattn {
    dims: XattnDims,
    attn_norm: LayerNormParams,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    pub alpha_attn: ParamId,
    ffn_norm: LayerNormParams,
    pub ffn: FeedForward,
    pub alpha_ffn: ParamId,
}

/// Graph outputs of one block application.
pub struct XattnOutput {
    pub out: Var,
    pub routing: Option<RoutingStats>,
    pub aux_loss: Option<Var>,
}

impl GatedXattn {
    /// Registers a block with a dense FFN, all in the xattn group.
    pub fn new(store: &mut ParamStore, prefix: &str, dims: &XattnDims) -> Result<Self> {
        Self::build(store, prefix, dims, None)
    }

    /// Registers a block whose FFN is a mixture of experts upcycled from a
    /// freshly initialized dense FFN. The dense weights themselves are not
    /// kept.
    pub fn new_moe(
        store: &mut ParamStore,
        prefix: &str,
        dims: &XattnDims,
        moe: &MoeConfig,
    ) -> Result<Self> {
        Self::build(store, prefix, dims, Some(moe))
    }

    fn build(
        store: &mut ParamStore,
        prefix: &str,
        dims: &XattnDims,
        moe: Option<&MoeConfig>,
    ) -> Result<Self> {
        dims.validate()?;
        let g = ParamGroup::Xattn;
        let (h, d, a) = (dims.h_llm, dims.d_img, dims.attn_width());
        let ffn_prefix = format!("{prefix}.ffn");
        let hidden = dims.ffn_width();
        let make_ffn = |store: &mut ParamStore| -> Result<FeedForward> {
            Ok(match moe {
                None => FeedForward::Dense(DenseFfn::init(store, &ffn_prefix, g, h, hidden)),
                Some(cfg) => {
                    let seed = store.root_seed();
                    let w_in = init::normal(
                        &[h, hidden],
                        1.0 / (h as f64).sqrt(),
                        init::derive_seed(seed, &format!("{ffn_prefix}.w_in")),
                    );
                    let w_out = init::normal(
                        &[hidden, h],
                        1.0 / (hidden as f64).sqrt(),
                        init::derive_seed(seed, &format!("{ffn_prefix}.w_out")),
                    );
                    FeedForward::Moe(upcycle(
                        &FfnWeights::new(w_in, w_out)?,
                        cfg,
                        store,
                        &format!("{prefix}.moe"),
                    )?)
                }
            })
        };
        Ok(Self {
            dims: dims.clone(),
            attn_norm: LayerNormParams::new(store, &format!("{prefix}.attn_norm"), g, h),
            wq: store.normal(&format!("{prefix}.wq"), g, &[h, a], 1.0 / (h as f64).sqrt()),
            wk: store.normal(&format!("{prefix}.wk"), g, &[d, a], 1.0 / (d as f64).sqrt()),
            wv: store.normal(&format!("{prefix}.wv"), g, &[d, a], 1.0 / (d as f64).sqrt()),
            wo: store.normal(&format!("{prefix}.wo"), g, &[a, h], 1.0 / (a as f64).sqrt()),
            alpha_attn: store.zeros(&format!("{prefix}.alpha_attn"), g, &[1]),
            ffn_norm: LayerNormParams::new(store, &format!("{prefix}.ffn_norm"), g, h),
            ffn: make_ffn(store)?,
            alpha_ffn: store.zeros(&format!("{prefix}.alpha_ffn"), g, &[1]),
        })
    }

    pub fn dims(&self) -> &XattnDims {
        &self.dims
    }

    /// `hidden: [len x h]`, `keys: [cols x d_img]` (visual rows then pad rows).
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        hidden: Var,
        keys: Var,
        mask: &Rc<CrossMask>,
    ) -> Result<XattnOutput> {
        let (hs, ks) = (
            g.value(hidden).shape().to_vec(),
            g.value(keys).shape().to_vec(),
        );
        if hs.len() != 2 || hs[1] != self.dims.h_llm {
            return Err(Error::dim(format!(
                "hidden {hs:?}, expected width {}",
                self.dims.h_llm
            )));
        }
        if ks.len() != 2 || ks[1] != self.dims.d_img {
            return Err(Error::dim(format!(
                "features {ks:?}, expected width {}",
                self.dims.d_img
            )));
        }
        if mask.allow.cols() != ks[0] || mask.allow.rows() != hs[0] {
            return Err(Error::dim(format!(
                "mask {}x{} for {} queries and {} keys",
                mask.allow.rows(),
                mask.allow.cols(),
                hs[0],
                ks[0]
            )));
        }

        let n = self.attn_norm.forward(g, p, hidden)?;
        let q = linear(g, p, n, self.wq)?;
        let k = linear(g, p, keys, self.wk)?;
        let v = linear(g, p, keys, self.wv)?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let s = g.scale(s, 1.0 / (self.dims.attn_width() as f64).sqrt())?;
        let probs = g.softmax_masked(s, Rc::new(mask.allow.clone()))?;
        let ctx = g.matmul(probs, v)?;
        let attn = linear(g, p, ctx, self.wo)?;
        let gate = g.tanh(p.var(self.alpha_attn))?;
        let attn = g.scale_by(attn, gate)?;
        let y = g.add(hidden, attn)?;

        let n = self.ffn_norm.forward(g, p, y)?;
        let (f, routing, aux_loss) = match &self.ffn {
            FeedForward::Dense(ffn) => (ffn.forward(g, p, n)?, None, None),
            FeedForward::Moe(bank) => {
                let o = bank.forward_graph(g, p, n)?;
                (o.out, Some(o.stats), o.aux_loss)
            }
        };
        let gate = g.tanh(p.var(self.alpha_ffn))?;
        let f = g.scale_by(f, gate)?;
        let out = g.add(y, f)?;
        Ok(XattnOutput {
            out,
            routing,
            aux_loss,
        })
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        hidden: &Tensor,
        keys: &Tensor,
        mask: &CrossMask,
    ) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let h = g.constant(hidden.clone())?;
        let k = g.constant(keys.clone())?;
        let o = self.forward_graph(&mut g, &p, h, k, &Rc::new(mask.clone()))?;
        Ok(g.value(o.out).clone())
    }

    /// Projection weights, in `(wq, wk, wv, wo)` order.
    pub fn projections(&self) -> [ParamId; 4] {
        [self.wq, self.wk, self.wv, self.wo]
    }
}

/// Stacks one tap per image and appends `pad_len` zero rows.
pub fn padded_keys(per_image: &[&Tensor], pad_len: usize, d_img: usize) -> Result<Tensor> {
    let pad = Tensor::zeros(&[pad_len, d_img]);
    let mut parts: Vec<&Tensor> = per_image.to_vec();
    parts.push(&pad);
    Tensor::concat_rows(&parts)
}

/// Graph version of [`padded_keys`].
pub fn padded_keys_graph(
    g: &mut Graph,
    per_image: &[Var],
    pad_len: usize,
    d_img: usize,
) -> Result<Var> {
    let pad = g.constant(Tensor::zeros(&[pad_len, d_img]))?;
    let mut parts = per_image.to_vec();
    parts.push(pad);
    if parts.len() == 1 {
        return Ok(pad);
    }
    g.concat_rows(&parts)
}
