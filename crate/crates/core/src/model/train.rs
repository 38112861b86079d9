//! Stage-wise freezing, plain SGD and the synthetic captioning task used for
//! smoke training and the loss-argmin probe.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{loss_graph, Model, ModelConfig, Sample};
use crate::error::{Error, Result};
use crate::fusion::{insert_media_tokens, Segment};
use crate::numerics::{init, Graph, Tensor};
use crate::params::ParamGroup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TrainStage {
    PretrainPhase1,
    PretrainPhase2,
    Continual,
    Sft,
    /// Everything trainable. Used by the smoke task, which starts from
    /// scratch rather than from a pretrained decoder.
    Full,
}

impl TrainStage {
    pub const ALL: [TrainStage; 5] = [
        TrainStage::PretrainPhase1,
        TrainStage::PretrainPhase2,
        TrainStage::Continual,
        TrainStage::Sft,
        TrainStage::Full,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TrainStage::PretrainPhase1 => "pretrain_phase1",
            TrainStage::PretrainPhase2 => "pretrain_phase2",
            TrainStage::Continual => "continual",
            TrainStage::Sft => "sft",
            TrainStage::Full => "full",
        }
    }
}

impl fmt::Display for TrainStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TrainStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TrainStage::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::config(format!("unknown training stage `{s}`")))
    }
}

/// Trainability of every parameter group in `stage`, in [`ParamGroup::ALL`]
/// order.
pub fn freeze_stage(stage: TrainStage) -> Vec<(ParamGroup, bool)> {
    use ParamGroup::*;
    let trainable: &[ParamGroup] = match stage {
        TrainStage::PretrainPhase1 => &[Xattn, MediaTokens],
        // the latter half of the encoder includes its last quarter
        TrainStage::PretrainPhase2 | TrainStage::Continual => {
            &[Xattn, MediaTokens, VitBackHalf, VitLastQuarter]
        }
        TrainStage::Sft => &[Xattn, MediaTokens, Moe, VitLastQuarter],
        TrainStage::Full => &ParamGroup::ALL,
    };
    ParamGroup::ALL
        .into_iter()
        .map(|g| (g, trainable.contains(&g)))
        .collect()
}

fn is_trainable(stage: TrainStage, group: ParamGroup) -> bool {
    freeze_stage(stage)
        .into_iter()
        .any(|(g, t)| g == group && t)
}

/// Mean loss over `batch`, including any MoE balancing terms.
pub fn batch_loss(
    model: &Model,
    g: &mut Graph,
    p: &crate::params::Bound,
    batch: &[Sample],
) -> Result<crate::numerics::Var> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = None;
    for s in batch {
        let out = model.forward_graph(g, p, s, true)?;
        let mut l = loss_graph(g, out.logits, &s.seq)?;
        if let Some(a) = out.aux_loss {
            l = g.add(l, a)?;
        }
        total = Some(match total {
            Some(t) => g.add(t, l)?,
            None => l,
        });
    }
    g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f64)
}

/// One full-batch SGD step on the parameters trainable in `stage`. Returns
/// the loss before the update. Frozen parameters are not touched.
pub fn sgd_step(model: &mut Model, batch: &[Sample], stage: TrainStage, lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = model.store.bind(&mut g)?;
    let l = batch_loss(model, &mut g, &p, batch)?;
    let value = g.value(l).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("training loss".into()));
    }
    let mut grads = g.backward(l)?;
    let vars = p.vars().to_vec();
    for (param, var) in model.store.iter_mut().zip(vars) {
        if !is_trainable(stage, param.group) {
            continue;
        }
        if let Some(grad) = grads.take(var) {
            for (w, d) in param.value.data_mut().iter_mut().zip(grad.data()) {
                *w -= lr * d;
            }
            if !param.value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "parameter {} after update",
                    param.name
                )));
            }
        }
    }
    Ok(value)
}

/// Synthetic captioning task: each class owns a random patch prototype;
/// an image is its prototype plus Gaussian noise and its caption is the fixed
/// prefix followed by the class token.
#[derive(Clone, Debug)]
pub struct SmokeTask {
    pub classes: usize,
    pub noise: f64,
    prototypes: Vec<Tensor>,
    media_len: usize,
}

/// Tokens `4 5 6` precede the class token; class tokens are `0..classes`.
pub const CAPTION_PREFIX: [usize; 3] = [4, 5, 6];

impl SmokeTask {
    pub fn new(cfg: &ModelConfig, classes: usize, noise: f64, seed: u64) -> Result<Self> {
        let enc = &cfg.encoder;
        if classes == 0 || classes > CAPTION_PREFIX[0] || cfg.vocab <= CAPTION_PREFIX[2] {
            return Err(Error::config(format!(
                "smoke task needs 1..={} classes and vocab > {}",
                CAPTION_PREFIX[0], CAPTION_PREFIX[2]
            )));
        }
        let prototypes = (0..classes)
            .map(|c| {
                init::normal(
                    &[enc.patch_count, enc.d_img],
                    1.0,
                    init::derive_seed(seed, &format!("smoke.class{c}")),
                )
            })
            .collect();
        Ok(Self {
            classes,
            noise,
            prototypes,
            media_len: cfg.media_len,
        })
    }

    pub fn caption(class: usize) -> Vec<usize> {
        let mut c = CAPTION_PREFIX.to_vec();
        c.push(class);
        c
    }

    pub fn image(&self, class: usize, rng: &mut impl Rng) -> Tensor {
        let proto = &self.prototypes[class];
        let data = proto
            .data()
            .iter()
            .map(|v| {
                let z: f64 = StandardNormal.sample(rng);
                v + self.noise * z
            })
            .collect();
        Tensor::new(proto.shape().to_vec(), data).expect("same shape as prototype")
    }

    /// `Image` followed by `caption` as text.
    pub fn sample(&self, image: Tensor, caption: &[usize]) -> Result<Sample> {
        let mut segs = vec![Segment::Image(0)];
        segs.extend(caption.iter().map(|&t| Segment::Text(t)));
        Sample::new(insert_media_tokens(&segs, self.media_len)?, vec![image])
    }

    /// `per_class` labelled samples per class, classes interleaved.
    pub fn dataset(&self, per_class: usize, seed: u64) -> Result<Vec<(usize, Sample)>> {
        let mut rng = init::rng(seed);
        let mut out = Vec::with_capacity(per_class * self.classes);
        for _ in 0..per_class {
            for c in 0..self.classes {
                let img = self.image(c, &mut rng);
                out.push((c, self.sample(img, &Self::caption(c))?));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub stage: TrainStage,
    pub classes: usize,
    pub samples_per_class: usize,
    pub noise: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.1,
            stage: TrainStage::Full,
            classes: 4,
            samples_per_class: 4,
            noise: 0.3,
            seed: 0,
        }
    }
}

pub struct TrainOutcome {
    pub model: Model,
    pub task: SmokeTask,
    /// Loss before each step, then the loss after the last one; length
    /// `steps + 1`.
    pub curve: Vec<f64>,
}

impl TrainOutcome {
    pub fn initial(&self) -> f64 {
        self.curve[0]
    }

    pub fn last(&self) -> f64 {
        *self.curve.last().expect("curve is never empty")
    }
}

pub fn train_smoke(cfg: &ModelConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    let mut model = Model::new(cfg, init::derive_seed(opts.seed, "model"))?;
    let task = SmokeTask::new(cfg, opts.classes, opts.noise, opts.seed)?;
    let data = task.dataset(
        opts.samples_per_class,
        init::derive_seed(opts.seed, "smoke.train"),
    )?;
    let batch: Vec<Sample> = data.into_iter().map(|(_, s)| s).collect();
    let mut curve = Vec::with_capacity(opts.steps + 1);
    for _ in 0..opts.steps {
        curve.push(sgd_step(&mut model, &batch, opts.stage, opts.lr)?);
    }
    let mut g = Graph::new();
    let p = model.store.bind(&mut g)?;
    let l = batch_loss(&model, &mut g, &p, &batch)?;
    curve.push(g.value(l).item());
    Ok(TrainOutcome { model, task, curve })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeResult {
    pub losses: Vec<f64>,
    pub argmin: usize,
}

/// Scores every candidate caption against `image` and picks the one with the
/// lowest loss; ties go to the lowest index.
pub fn loss_probe(model: &Model, image: &Tensor, candidates: &[Vec<usize>]) -> Result<ProbeResult> {
    if candidates.is_empty() {
        return Err(Error::Contract("no candidates to probe".into()));
    }
    let mut segs_base = vec![Segment::Image(0)];
    let mut losses = Vec::with_capacity(candidates.len());
    for c in candidates {
        segs_base.truncate(1);
        segs_base.extend(c.iter().map(|&t| Segment::Text(t)));
        let seq = insert_media_tokens(&segs_base, model.config().media_len)?;
        losses.push(model.sample_loss(&Sample::new(seq, vec![image.clone()])?)?);
    }
    let mut argmin = 0;
    for (i, &l) in losses.iter().enumerate() {
        if l < losses[argmin] {
            argmin = i;
        }
    }
    Ok(ProbeResult { losses, argmin })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for s in TrainStage::ALL {
            assert_eq!(s.name().parse::<TrainStage>().unwrap(), s);
        }
        assert!("phase3".parse::<TrainStage>().is_err());
    }

    #[test]
    fn phase1_trains_only_fusion() {
        let t: Vec<ParamGroup> = freeze_stage(TrainStage::PretrainPhase1)
            .into_iter()
            .filter(|x| x.1)
            .map(|x| x.0)
            .collect();
        assert_eq!(t, vec![ParamGroup::Xattn, ParamGroup::MediaTokens]);
        assert!(!is_trainable(TrainStage::Sft, ParamGroup::Llm));
        assert!(is_trainable(TrainStage::Sft, ParamGroup::Moe));
        assert!(!is_trainable(TrainStage::Sft, ParamGroup::VitBackHalf));
    }

    #[test]
    fn zero_steps_gives_initial_loss_only() {
        let out = train_smoke(
            &ModelConfig::toy(),
            &TrainOptions {
                steps: 0,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert_eq!(out.curve.len(), 1);
    }

    #[test]
    fn zero_lr_is_flat() {
        let out = train_smoke(
            &ModelConfig::toy(),
            &TrainOptions {
                steps: 3,
                lr: 0.0,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        assert!(out.curve.iter().all(|&l| l == out.curve[0]));
    }

    #[test]
    fn probe_rejects_empty_and_handles_single() {
        let cfg = ModelConfig::toy();
        let m = Model::new(&cfg, 0).unwrap();
        let img = Tensor::zeros(&[cfg.encoder.patch_count, cfg.encoder.d_img]);
        assert!(loss_probe(&m, &img, &[]).is_err());
        assert_eq!(loss_probe(&m, &img, &[vec![1]]).unwrap().argmin, 0);
    }

    #[test]
    fn probe_ties_go_low() {
        let cfg = ModelConfig::toy();
        let m = Model::new(&cfg, 0).unwrap();
        let img = Tensor::zeros(&[cfg.encoder.patch_count, cfg.encoder.d_img]);
        let r = loss_probe(&m, &img, &[vec![2, 3], vec![2, 3]]).unwrap();
        assert_eq!(r.losses[0], r.losses[1]);
        assert_eq!(r.argmin, 0);
    }
}
