//! Decoder-only language model conditioned on images through a gated
//! cross-attention block in front of every decoder layer.

mod checkpoint;
mod train;

use std::rc::Rc;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use train::{
    batch_loss, freeze_stage, loss_probe, sgd_step, train_smoke, ProbeResult, SmokeTask,
    TrainOptions, TrainOutcome, TrainStage, CAPTION_PREFIX,
};

use crate::error::{Error, Result};
use crate::fusion::{
    build_cross_mask, build_self_mask, padded_keys_graph, CrossMask, Element, GatedXattn,
    InterleavedSequence, MaskMode, XattnDims, DEFAULT_MEDIA_LEN, DEFAULT_PAD_LEN,
};
use crate::moe::{MoeConfig, RoutingStats};
use crate::numerics::{Graph, Mask, Tensor, Var};
use crate::params::{linear, Bound, LayerNormParams, ParamGroup, ParamId, ParamStore};
use crate::vision::{assign_taps_to_xattn, EncoderConfig, VisionEncoder};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub llm_layers: usize,
    pub h_llm: usize,
    pub heads: usize,
    pub vocab: usize,
    pub media_len: usize,
    pub r_xc: f64,
    pub r_xf: f64,
    pub pad_len: usize,
    pub mask_mode: MaskMode,
    pub moe: Option<MoeConfig>,
    pub encoder: EncoderConfig,
}

impl ModelConfig {
    /// Two decoder layers, width 8, vocabulary 11, with a 4-block encoder
    /// tapped twice.
    pub fn toy() -> Self {
        Self {
            llm_layers: 2,
            h_llm: 8,
            heads: 2,
            vocab: 11,
            media_len: DEFAULT_MEDIA_LEN,
            r_xc: 0.2,
            r_xf: 0.5,
            pad_len: DEFAULT_PAD_LEN,
            mask_mode: MaskMode::Image,
            moe: None,
            encoder: EncoderConfig {
                num_layers: 4,
                patch_count: 5,
                d_img: 8,
                tap_window: 4,
                num_taps: 2,
            },
        }
    }

    pub fn xattn_dims(&self) -> XattnDims {
        XattnDims {
            h_llm: self.h_llm,
            d_img: self.encoder.d_img,
            r_xc: self.r_xc,
            r_xf: self.r_xf,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.xattn_dims().validate()?;
        if self.llm_layers < self.encoder.num_taps {
            return Err(Error::config(format!(
                "llm_layers {} is fewer than num_taps {}",
                self.llm_layers, self.encoder.num_taps
            )));
        }
        if self.heads == 0 || self.h_llm % self.heads != 0 {
            return Err(Error::config(format!(
                "heads {} must divide h_llm {}",
                self.heads, self.h_llm
            )));
        }
        if self.vocab == 0 || self.media_len == 0 || self.pad_len == 0 {
            return Err(Error::config(
                "vocab, media_len and pad_len must be positive",
            ));
        }
        if let Some(moe) = &self.moe {
            moe.validate(self.xattn_dims().ffn_width())?;
        }
        Ok(())
    }
}

/// One training or evaluation example: an interleaved stream and one patch
/// tensor per image in it.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seq: InterleavedSequence,
    pub images: Vec<Tensor>,
}

impl Sample {
    pub fn new(seq: InterleavedSequence, images: Vec<Tensor>) -> Result<Self> {
        if seq.num_images() != images.len() {
            return Err(Error::Sequence(format!(
                "sequence references {} images, {} supplied",
                seq.num_images(),
                images.len()
            )));
        }
        Ok(Self { seq, images })
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    attn_norm: LayerNormParams,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    mlp_norm: LayerNormParams,
    w_up: ParamId,
    w_down: ParamId,
    heads: usize,
}

impl DecoderLayer {
    fn new(store: &mut ParamStore, prefix: &str, h: usize, heads: usize) -> Self {
        let g = ParamGroup::Llm;
        let std = 1.0 / (h as f64).sqrt();
        let hidden = 4 * h;
        Self {
            attn_norm: LayerNormParams::new(store, &format!("{prefix}.attn_norm"), g, h),
            wq: store.normal(&format!("{prefix}.wq"), g, &[h, h], std),
            wk: store.normal(&format!("{prefix}.wk"), g, &[h, h], std),
            wv: store.normal(&format!("{prefix}.wv"), g, &[h, h], std),
            wo: store.normal(&format!("{prefix}.wo"), g, &[h, h], std),
            mlp_norm: LayerNormParams::new(store, &format!("{prefix}.mlp_norm"), g, h),
            w_up: store.normal(&format!("{prefix}.w_up"), g, &[h, hidden], std),
            w_down: store.normal(
                &format!("{prefix}.w_down"),
                g,
                &[hidden, h],
                1.0 / (hidden as f64).sqrt(),
            ),
            heads,
        }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var, causal: &Rc<Mask>) -> Result<Var> {
        let h = self.attn_norm.forward(g, p, x)?;
        let q = linear(g, p, h, self.wq)?;
        let k = linear(g, p, h, self.wk)?;
        let v = linear(g, p, h, self.wv)?;
        let width = g.value(x).cols();
        let hd = width / self.heads;
        let mut outs = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let (lo, hi) = (head * hd, (head + 1) * hd);
            let qh = g.slice_cols(q, lo, hi)?;
            let kh = g.slice_cols(k, lo, hi)?;
            let vh = g.slice_cols(v, lo, hi)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, 1.0 / (hd as f64).sqrt())?;
            let a = g.softmax_masked(s, causal.clone())?;
            outs.push(g.matmul(a, vh)?);
        }
        let ctx = if outs.len() == 1 {
            outs[0]
        } else {
            g.concat_cols(&outs)?
        };
        let o = linear(g, p, ctx, self.wo)?;
        let x = g.add(x, o)?;

        let h = self.mlp_norm.forward(g, p, x)?;
        let u = linear(g, p, h, self.w_up)?;
        let u = g.gelu(u)?;
        let d = linear(g, p, u, self.w_down)?;
        g.add(x, d)
    }
}

/// Graph outputs of a forward pass.
pub struct ForwardOutput {
    pub logits: Var,
    /// Sum of weighted MoE balancing losses over layers, if any are enabled.
    pub aux_loss: Option<Var>,
    pub routing: Option<RoutingStats>,
}

#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    pub store: ParamStore,
    encoder: VisionEncoder,
    tok_embed: ParamId,
    media_embed: ParamId,
    xattn: Vec<GatedXattn>,
    decoder: Vec<DecoderLayer>,
    final_norm: LayerNormParams,
    head: ParamId,
    tap_for_layer: Vec<usize>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed);
        let h = cfg.h_llm;
        let encoder = VisionEncoder::new(&cfg.encoder, &mut store, "vit")?;
        let tok_embed = store.normal("llm.tok_embed", ParamGroup::Llm, &[cfg.vocab, h], 1.0);
        // one shared table of learnable tokens, reused for every image
        let media_embed = store.normal(
            "media_tokens",
            ParamGroup::MediaTokens,
            &[cfg.media_len, h],
            1.0,
        );
        let dims = cfg.xattn_dims();
        let mut xattn = Vec::with_capacity(cfg.llm_layers);
        let mut decoder = Vec::with_capacity(cfg.llm_layers);
        for t in 0..cfg.llm_layers {
            let prefix = format!("xattn{t}");
            xattn.push(match &cfg.moe {
                Some(moe) => GatedXattn::new_moe(&mut store, &prefix, &dims, moe)?,
                None => GatedXattn::new(&mut store, &prefix, &dims)?,
            });
            decoder.push(DecoderLayer::new(
                &mut store,
                &format!("llm.layer{t}"),
                h,
                cfg.heads,
            ));
        }
        let final_norm = LayerNormParams::new(&mut store, "llm.final_norm", ParamGroup::Llm, h);
        let head = store.normal(
            "llm.head",
            ParamGroup::Llm,
            &[h, cfg.vocab],
            1.0 / (h as f64).sqrt(),
        );
        let tap_for_layer = assign_taps_to_xattn(cfg.encoder.num_taps, cfg.llm_layers)?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            encoder,
            tok_embed,
            media_embed,
            xattn,
            decoder,
            final_norm,
            head,
            tap_for_layer,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &VisionEncoder {
        &self.encoder
    }

    pub fn xattn_layers(&self) -> &[GatedXattn] {
        &self.xattn
    }

    /// Which encoder tap each cross-attention layer reads.
    pub fn tap_for_layer(&self) -> &[usize] {
        &self.tap_for_layer
    }

    fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.seq.media_len() != self.cfg.media_len && sample.seq.num_images() > 0 {
            return Err(Error::Sequence(format!(
                "sequence uses {} media slots per image, model has {}",
                sample.seq.media_len(),
                self.cfg.media_len
            )));
        }
        if sample.seq.is_empty() {
            return Err(Error::Sequence("empty sequence".into()));
        }
        for e in sample.seq.elements() {
            if let Element::Text(t) = e {
                if *t >= self.cfg.vocab {
                    return Err(Error::Sequence(format!(
                        "token {t} outside vocabulary {}",
                        self.cfg.vocab
                    )));
                }
            }
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, p: &Bound, seq: &InterleavedSequence) -> Result<Var> {
        let tok = g.gather_rows(p.var(self.tok_embed), Rc::new(seq.text_ids()))?;
        let med = g.gather_rows(p.var(self.media_embed), Rc::new(seq.slot_ids()))?;
        g.add(tok, med)
    }

    pub fn cross_mask(&self, seq: &InterleavedSequence) -> Result<CrossMask> {
        build_cross_mask(
            seq,
            self.cfg.encoder.patch_count,
            self.cfg.pad_len,
            self.cfg.mask_mode,
        )
    }

    /// Fused forward pass. With `fused = false` the cross-attention blocks and
    /// the encoder are skipped, leaving the text-only decoder on the same
    /// stream.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        sample: &Sample,
        fused: bool,
    ) -> Result<ForwardOutput> {
        self.check_sample(sample)?;
        let seq = &sample.seq;
        let mut x = self.embed(g, p, seq)?;
        let causal = Rc::new(build_self_mask(seq));

        let mut keys_per_tap = Vec::new();
        let mut mask = None;
        if fused {
            let enc = &self.cfg.encoder;
            let mut per_image: Vec<Vec<Var>> = Vec::with_capacity(sample.images.len());
            for img in &sample.images {
                let v = g.constant(img.clone())?;
                per_image.push(self.encoder.encode_graph(g, p, v)?);
            }
            for tap in 0..enc.num_taps {
                let mut blocks: Vec<Var> = per_image.iter().map(|taps| taps[tap]).collect();
                if blocks.is_empty() {
                    // text-only stream: keep the single (fully masked) image block
                    blocks.push(g.constant(Tensor::zeros(&[enc.patch_count, enc.d_img]))?);
                }
                keys_per_tap.push(padded_keys_graph(g, &blocks, self.cfg.pad_len, enc.d_img)?);
            }
            mask = Some(Rc::new(self.cross_mask(seq)?));
        }

        let mut aux: Option<Var> = None;
        let mut routing: Option<RoutingStats> = None;
        for t in 0..self.cfg.llm_layers {
            if let Some(mask) = &mask {
                let keys = keys_per_tap[self.tap_for_layer[t]];
                let o = self.xattn[t].forward_graph(g, p, x, keys, mask)?;
                x = o.out;
                if let Some(a) = o.aux_loss {
                    aux = Some(match aux {
                        Some(prev) => g.add(prev, a)?,
                        None => a,
                    });
                }
                if let Some(s) = o.routing {
                    routing.get_or_insert_with(RoutingStats::default).merge(&s);
                }
            }
            x = self.decoder[t].forward(g, p, x, &causal)?;
        }
        let x = self.final_norm.forward(g, p, x)?;
        let logits = linear(g, p, x, self.head)?;
        Ok(ForwardOutput {
            logits,
            aux_loss: aux,
            routing,
        })
    }

    fn eval(&self, sample: &Sample, fused: bool) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.store.bind(&mut g)?;
        let out = self.forward_graph(&mut g, &p, sample, fused)?;
        Ok(g.value(out.logits).clone())
    }

    /// Logits `[len x vocab]`.
    pub fn forward(&self, sample: &Sample) -> Result<Tensor> {
        self.eval(sample, true)
    }

    /// Logits of the decoder alone, cross-attention removed.
    pub fn forward_text_only(&self, sample: &Sample) -> Result<Tensor> {
        self.eval(sample, false)
    }

    /// Loss of a single sample under the current parameters.
    pub fn sample_loss(&self, sample: &Sample) -> Result<f64> {
        let logits = self.forward(sample)?;
        let (targets, mask) = next_token_targets(&sample.seq);
        loss(&logits, &targets, &mask)
    }
}

/// Next-token targets over the stream; the mask is set exactly where the
/// predicted (next) element is text.
pub fn next_token_targets(seq: &InterleavedSequence) -> (Vec<usize>, Vec<bool>) {
    let els = seq.elements();
    let mut targets = vec![0; els.len()];
    let mut mask = vec![false; els.len()];
    for j in 0..els.len().saturating_sub(1) {
        if let Element::Text(t) = els[j + 1] {
            targets[j] = t;
            mask[j] = true;
        }
    }
    (targets, mask)
}

/// Cross-entropy over the text predictions only.
pub fn loss(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<f64> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("no text position to score".into()));
    }
    crate::numerics::cross_entropy(logits, targets, mask)
}

pub fn loss_graph(g: &mut Graph, logits: Var, seq: &InterleavedSequence) -> Result<Var> {
    let (targets, mask) = next_token_targets(seq);
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("no text position to score".into()));
    }
    g.cross_entropy(logits, &targets, &mask)
}
