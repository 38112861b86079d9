//! Fine-grained mixture of experts upcycled from a dense feed-forward block.
//!
//! The dense block is replicated `n_replicas` times and each replica is cut
//! along its hidden dimension into `segments` slice-experts, so summing the
//! slices of one replica reproduces the dense block exactly. A router picks
//! `top_k` slice-experts per token; an always-on world expert (a full copy
//! of the dense block) is added on top.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ffn::{DenseFfn, FfnWeights};
use crate::numerics::{Graph, Mask, Tensor, Var};
use crate::params::{Bound, ParamGroup, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoeConfig {
    pub n_replicas: usize,
    pub segments: usize,
    pub top_k: usize,
    pub use_world_expert: bool,
    pub aux_loss_weight: f64,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            n_replicas: 4,
            segments: 4,
            top_k: 4,
            use_world_expert: true,
            aux_loss_weight: 0.0,
        }
    }
}

impl MoeConfig {
    pub fn num_experts(&self) -> usize {
        self.n_replicas * self.segments
    }

    /// Checks the config against a dense block of hidden width `hidden`.
    pub fn validate(&self, hidden: usize) -> Result<()> {
        if self.n_replicas == 0 || self.segments == 0 {
            return Err(Error::config("n_replicas and segments must be positive"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts() {
            return Err(Error::config(format!(
                "top_k {} outside 1..={}",
                self.top_k,
                self.num_experts()
            )));
        }
        if hidden % self.segments != 0 {
            return Err(Error::config(format!(
                "segments {} does not divide hidden width {hidden}",
                self.segments
            )));
        }
        if !(self.aux_loss_weight >= 0.0 && self.aux_loss_weight.is_finite()) {
            return Err(Error::config(
                "aux_loss_weight must be finite and non-negative",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ExpertBank {
    cfg: MoeConfig,
    width: usize,
    /// Indexed `replica * segments + segment`.
    experts: Vec<DenseFfn>,
    world: DenseFfn,
    /// `[h x NM]`
    router: ParamId,
}

/// Builds an expert bank whose experts are hidden-unit slices of `n_replicas`
/// copies of `dense`, registering everything in `store` under the moe group.
pub fn upcycle(
    dense: &FfnWeights,
    cfg: &MoeConfig,
    store: &mut ParamStore,
    prefix: &str,
) -> Result<ExpertBank> {
    let hidden = dense.hidden();
    cfg.validate(hidden)?;
    let seg = hidden / cfg.segments;
    let mut experts = Vec::with_capacity(cfg.num_experts());
    for r in 0..cfg.n_replicas {
        for m in 0..cfg.segments {
            let w = dense.slice(m * seg, (m + 1) * seg)?;
            experts.push(DenseFfn::register(
                store,
                &format!("{prefix}.expert{r}_{m}"),
                ParamGroup::Moe,
                w,
            ));
        }
    }
    let world = DenseFfn::register(
        store,
        &format!("{prefix}.world"),
        ParamGroup::Moe,
        dense.clone(),
    );
    let router = store.zeros(
        &format!("{prefix}.router"),
        ParamGroup::Moe,
        &[dense.width(), cfg.num_experts()],
    );
    Ok(ExpertBank {
        cfg: cfg.clone(),
        width: dense.width(),
        experts,
        world,
        router,
    })
}

/// Selected experts and renormalized gates for one token.
#[derive(Clone, Debug, PartialEq)]
pub struct Routing {
    pub indices: Vec<usize>,
    pub gates: Vec<f64>,
}

/// Indices of the `k` largest logits, ties broken toward the lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Token-level routing counters. Merging is a commutative sum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoutingStats {
    pub tokens: usize,
    pub top_k: usize,
    /// How many times each expert was selected.
    pub counts: Vec<usize>,
    /// Per-expert sum of full-softmax router probability over tokens.
    pub prob_sums: Vec<f64>,
}

impl RoutingStats {
    pub fn new(num_experts: usize, top_k: usize) -> Self {
        Self {
            tokens: 0,
            top_k,
            counts: vec![0; num_experts],
            prob_sums: vec![0.0; num_experts],
        }
    }

    pub fn merge(&mut self, other: &RoutingStats) {
        if self.counts.is_empty() {
            *self = other.clone();
            return;
        }
        self.tokens += other.tokens;
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.prob_sums.iter_mut().zip(&other.prob_sums) {
            *a += b;
        }
    }

    /// Share of all routing assignments that went to each expert.
    pub fn fractions(&self) -> Vec<f64> {
        let total = (self.tokens * self.top_k).max(1) as f64;
        self.counts.iter().map(|&c| c as f64 / total).collect()
    }

    pub fn mean_probs(&self) -> Vec<f64> {
        let t = self.tokens.max(1) as f64;
        self.prob_sums.iter().map(|p| p / t).collect()
    }
}

/// Load-balancing loss `NM * sum_i f_i * P_i`, before weighting. Equals 1 for
/// perfectly uniform routing.
pub fn aux_load_balance_loss(stats: &RoutingStats) -> f64 {
    let nm = stats.counts.len() as f64;
    let f = stats.fractions();
    let p = stats.mean_probs();
    nm * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Graph outputs of one MoE application.
pub struct MoeOutput {
    pub out: Var,
    pub stats: RoutingStats,
    /// Weighted auxiliary loss; `None` when `aux_loss_weight == 0`.
    pub aux_loss: Option<Var>,
}

impl ExpertBank {
    pub fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    pub fn experts(&self) -> &[DenseFfn] {
        &self.experts
    }

    pub fn expert(&self, replica: usize, segment: usize) -> &DenseFfn {
        &self.experts[replica * self.cfg.segments + segment]
    }

    pub fn world(&self) -> &DenseFfn {
        &self.world
    }

    pub fn router(&self) -> ParamId {
        self.router
    }

    /// Routing decision for one token `x: [h]` or `[1 x h]`.
    pub fn route(&self, store: &ParamStore, x: &Tensor) -> Result<Routing> {
        if x.len() != self.width {
            return Err(Error::dim(format!(
                "token of width {}, router expects {}",
                x.len(),
                self.width
            )));
        }
        let row = x.reshape(&[1, self.width])?;
        let logits = row.matmul(store.get(self.router))?;
        let indices = top_k(logits.data(), self.cfg.top_k);
        let selected: Vec<f64> = indices.iter().map(|&i| logits.data()[i]).collect();
        Ok(Routing {
            indices,
            gates: softmax(&selected),
        })
    }

    /// `world(x) + sum_e gates[:, e] * expert_e(x)` for a given gate matrix
    /// `[len x NM]`. Experts whose gate column is all zero are skipped.
    pub fn forward_with_gates(&self, g: &mut Graph, p: &Bound, x: Var, gates: Var) -> Result<Var> {
        let len = g.value(x).rows();
        if g.value(x).cols() != self.width {
            return Err(Error::dim(format!(
                "moe input {:?}, expected width {}",
                g.value(x).shape(),
                self.width
            )));
        }
        let gs = g.value(gates);
        if gs.shape() != [len, self.experts.len()] {
            return Err(Error::dim(format!(
                "gates {:?} for {len} tokens",
                gs.shape()
            )));
        }
        let active: Vec<bool> = (0..self.experts.len())
            .map(|e| (0..len).any(|t| gs.get(t, e) != 0.0))
            .collect();
        let mut acc = if self.cfg.use_world_expert {
            Some(self.world.forward(g, p, x)?)
        } else {
            None
        };
        for (e, expert) in self.experts.iter().enumerate() {
            if !active[e] {
                continue;
            }
            let y = expert.forward(g, p, x)?;
            let y = g.col_scale(y, gates, e)?;
            acc = Some(match acc {
                Some(a) => g.add(a, y)?,
                None => y,
            });
        }
        match acc {
            Some(a) => Ok(a),
            None => g.constant(Tensor::zeros(&[len, self.width])),
        }
    }

    /// Full routed forward on `x: [len x h]`.
    pub fn forward_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Result<MoeOutput> {
        let nm = self.experts.len();
        let logits = g.matmul(x, p.var(self.router))?;
        let lv = g.value(logits).clone();
        let len = lv.rows();
        let mut mask = Mask::filled(len, nm, false);
        let mut stats = RoutingStats::new(nm, self.cfg.top_k);
        stats.tokens = len;
        for t in 0..len {
            let row = lv.row(t);
            for i in top_k(row, self.cfg.top_k) {
                mask.set(t, i, true);
                stats.counts[i] += 1;
            }
            for (s, q) in stats.prob_sums.iter_mut().zip(softmax(row)) {
                *s += q;
            }
        }
        let gates = g.softmax_masked(logits, Rc::new(mask))?;
        let out = self.forward_with_gates(g, p, x, gates)?;

        let aux_loss = if self.cfg.aux_loss_weight > 0.0 {
            // d/dP of NM * sum_i f_i * mean_t P[t, i] with f held fixed
            let probs = g.softmax_masked(logits, Rc::new(Mask::filled(len, nm, true)))?;
            let f = stats.fractions();
            let coef: Vec<f64> = (0..len * nm)
                .map(|k| nm as f64 * f[k % nm] / len as f64 * self.cfg.aux_loss_weight)
                .collect();
            let c = g.constant(Tensor::new(vec![len, nm], coef)?)?;
            let weighted = g.mul(probs, c)?;
            Some(g.sum(weighted)?)
        } else {
            None
        };
        Ok(MoeOutput {
            out,
            stats,
            aux_loss,
        })
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor) -> Result<(Tensor, RoutingStats)> {
        let mut g = Graph::new();
        let p = store.bind(&mut g)?;
        let xv = g.constant(x.clone())?;
        let o = self.forward_graph(&mut g, &p, xv)?;
        Ok((g.value(o.out).clone(), o.stats))
    }
}
