//! Learning-rate schedule, AdamW, the loss, and the two training stages.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::change::DualTimeFeatures;
use crate::data::SynthSample;
use crate::lm::{CausalLm, LmConfig, LmError};
use crate::model::{sequence_loss, Example, Model, ModelError, JOINT_FREEZE};
use crate::packing::{pack, supervision_mask, PackError};
use crate::param::{Module, Parameter};
use crate::tensor::{Tensor, TensorError};
use crate::vision::{VisualEncoder, VisualFeatures, VisualKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training configuration: {0}")]
    Config(String),
    #[error("training contract: {0}")]
    Contract(String),
    #[error("loss became {loss} at step {step}; last good step {last_good:?}")]
    Diverged { step: usize, loss: f64, last_good: Option<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Pack(#[from] PackError),
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_lr: f64,
    pub min_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze: Vec<String>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit, off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_lr: 1e-4,
            min_lr: 0.0,
            warmup_ratio: 0.03,
            total_steps: 3858,
            batch_size: 128,
            seed: 0,
            freeze: JOINT_FREEZE.iter().map(|s| s.to_string()).collect(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(TrainError::Config(format!("warmup_ratio {} must lie in [0, 1)", self.warmup_ratio)));
        }
        if self.min_lr.partial_cmp(&self.max_lr).is_none_or(|o| o.is_gt()) || self.min_lr < 0.0 {
            return Err(TrainError::Config(format!("need 0 <= min_lr {} <= max_lr {}", self.min_lr, self.max_lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(TrainError::Config("betas must lie in [0, 1) and eps be positive".into()));
        }
        if self.grad_clip.is_some_and(|c| c <= 0.0) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }
}

/// Linear warmup from zero, then cosine decay to `min_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(TrainError::Contract(format!("step {step} beyond total_steps {}", cfg.total_steps)));
    }
    let w = cfg.warmup_steps();
    if step < w {
        return Ok(cfg.max_lr * step as f64 / w as f64);
    }
    if cfg.total_steps == w {
        return Ok(cfg.min_lr);
    }
    if step == w {
        return Ok(cfg.max_lr);
    }
    let t = (step - w) as f64 / (cfg.total_steps - w) as f64;
    Ok(cfg.min_lr + 0.5 * (cfg.max_lr - cfg.min_lr) * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Mean of `-log softmax(logits[i-1])[targets[i]]` over rows `i` where
/// `mask[i]` holds.
pub fn cross_entropy_next_token(logits: &Tensor, targets: &[usize], mask: &[bool]) -> Result<Tensor> {
    let n = logits.shape().first().copied().unwrap_or(0);
    if logits.rank() != 2 || targets.len() != n || mask.len() != n {
        return Err(TrainError::Contract(format!(
            "logits {:?}, {} targets, {} mask bits",
            logits.shape(),
            targets.len(),
            mask.len()
        )));
    }
    if mask.first() == Some(&true) {
        return Err(TrainError::Contract("row 0 cannot be supervised under the shift".into()));
    }
    let rows: Vec<usize> = (1..n).filter(|&i| mask[i]).map(|i| i - 1).collect();
    if rows.is_empty() {
        return Err(TrainError::Contract("loss mask selects no positions".into()));
    }
    let t: Vec<usize> = rows.iter().map(|&r| targets[r + 1]).collect();
    let w = vec![1.0 / rows.len() as f64; rows.len()];
    Ok(logits.gather_rows(&rows)?.weighted_nll(&t, &w)?)
}

/// AdamW with decoupled weight decay. Moments are keyed by parameter name.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    t: HashMap<String, u64>,
    m: HashMap<String, Vec<f64>>,
    v: HashMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(cfg: &TrainConfig) -> Self {
        AdamW {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            grad_clip: cfg.grad_clip,
            t: HashMap::new(),
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    /// Update every unfrozen parameter that holds a gradient. Returns the
    /// global gradient norm before clipping.
    pub fn step(&mut self, params: Vec<&mut Parameter>, lr: f64) -> Result<f64> {
        let live: Vec<(&mut Parameter, Vec<f64>)> = params
            .into_iter()
            .filter(|p| !p.is_frozen())
            .filter_map(|p| p.grad().map(|g| (p, g)))
            .collect();
        let norm = live.iter().flat_map(|(_, g)| g.iter()).map(|x| x * x).sum::<f64>().sqrt();
        let scale = match self.grad_clip {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        for (p, g) in live {
            let name = p.name().to_string();
            let n = g.len();
            let t = self.t.entry(name.clone()).or_insert(0);
            *t += 1;
            let t = *t as i32;
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name).or_insert_with(|| vec![0.0; n]);
            if lr == 0.0 {
                for i in 0..n {
                    let gi = g[i] * scale;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                }
                continue;
            }
            let bc1 = 1.0 - self.beta1.powi(t);
            let bc2 = 1.0 - self.beta2.powi(t);
            let mut data = p.data().to_vec();
            for i in 0..n {
                let gi = g[i] * scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] -= lr * (update + self.weight_decay * data[i]);
            }
            p.set_data(data)?;
        }
        Ok(norm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

/// Samples for step `s`: a contiguous window of the order, wrapping around.
fn batch_indices(step: usize, batch: usize, n: usize) -> Vec<usize> {
    (0..batch.min(n)).map(|j| (step * batch + j) % n).collect()
}

fn mean_loss(losses: Vec<Tensor>) -> Result<Tensor> {
    let n = losses.len() as f64;
    let mut it = losses.into_iter();
    let first = it.next().ok_or_else(|| TrainError::Contract("empty batch".into()))?;
    let mut acc = first;
    for l in it {
        acc = acc.add(&l)?;
    }
    Ok(acc.scale(1.0 / n))
}

fn run_steps<M: Module>(
    model: &mut M,
    cfg: &TrainConfig,
    n: usize,
    loss_fn: impl Fn(&M, &[usize]) -> Result<Tensor>,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    let mut opt = AdamW::new(cfg);
    let mut log = Vec::with_capacity(cfg.total_steps);
    let mut last_good = None;
    for step in 0..cfg.total_steps {
        let lr = lr_at(step, cfg)?;
        let idx = batch_indices(step, cfg.batch_size, n);
        model.zero_grad();
        let loss = loss_fn(model, &idx)?;
        let value = loss.item()?;
        if !value.is_finite() {
            return Err(TrainError::Diverged { step, loss: value, last_good });
        }
        loss.backward()?;
        opt.step(model.parameters_mut(), lr)?;
        let rec = LogRecord { step, lr, loss: value };
        on_step(&rec);
        log.push(rec);
        last_good = Some(step);
    }
    Ok(log)
}

/// Pair sample encoded by the frozen encoder.
struct PairFeatures {
    features: DualTimeFeatures,
    tokens: crate::packing::TokenizedPrompt,
    answer: std::ops::Range<usize>,
}

/// Stage 1: train the change extractor and projector through a throwaway
/// one-layer caption head while the encoder stays frozen. The model's
/// change and projector parameters are updated in place.
pub fn pretrain_change_module(
    model: &mut Model,
    pairs: &[SynthSample],
    cfg: &TrainConfig,
    on_step: impl FnMut(&LogRecord),
) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::Contract("change pretraining needs at least one pair".into()));
    }
    if let Some(p) = pairs.iter().find(|p| p.input.kind() != VisualKind::Pair) {
        return Err(TrainError::Contract(format!("record {} is not a pair", p.record.id)));
    }
    model.encoder.freeze_all();
    model.change.parameters_mut().into_iter().for_each(|p| p.set_frozen(false));
    model.projector.parameters_mut().into_iter().for_each(|p| p.set_frozen(false));
    let marker = crate::packing::Marker::ChangeFeature.token();
    let prepared = pairs
        .iter()
        .map(|s| {
            let feats: VisualFeatures = model.encoder.encode(&s.input).map_err(ModelError::from)?;
            let (tokens, answer) = model.vocab.encode_example(&marker, &s.record.target)?;
            Ok(PairFeatures { features: DualTimeFeatures::from_features(&feats)?, tokens, answer })
        })
        .collect::<Result<Vec<_>>>()?;
    let head_cfg = LmConfig {
        d_p: model.config.d_p,
        layers: 1,
        heads: model.config.heads,
        max_seq: model.config.max_seq,
        vocab_size: model.vocab.len(),
        seed: cfg.seed ^ 0xcafe,
    };
    let mut stage = Stage1 { model, head: CausalLm::with_prefix("caption_head", head_cfg)? };
    let l_d = stage.model.l_d();
    run_steps(
        &mut stage,
        cfg,
        prepared.len(),
        |st, idx| {
            let losses = idx
                .iter()
                .map(|&i| {
                    let p = &prepared[i];
                    let map = st.model.change.forward(&p.features)?;
                    let units = st.model.projector.embed_change(&map).map_err(ModelError::from)?.split().map_err(ModelError::from)?;
                    let text = st.head.embed_prompt_text(&p.tokens)?;
                    let packed = pack(&p.tokens, &text, &units, l_d)?;
                    let packed = packed.with_mask(supervision_mask(&p.tokens, p.answer.clone(), l_d)?)?;
                    Ok(sequence_loss(&st.head, &packed)?)
                })
                .collect::<Result<Vec<_>>>()?;
            mean_loss(losses)
        },
        on_step,
    )
}

struct Stage1<'a> {
    model: &'a mut Model,
    head: CausalLm,
}

impl Module for Stage1<'_> {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.model.change.parameters();
        v.extend(self.model.projector.parameters());
        v.extend(self.head.parameters());
        v
    }
    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.model.change.parameters_mut();
        v.extend(self.model.projector.parameters_mut());
        v.extend(self.head.parameters_mut());
        v
    }
}

/// Stage 2: instruction tuning over prepared examples in their given
/// order, with `cfg.freeze` applied first.
pub fn train_joint(model: &mut Model, examples: &[Example], cfg: &TrainConfig, on_step: impl FnMut(&LogRecord)) -> Result<Vec<LogRecord>> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(TrainError::Contract("joint tuning needs at least one example".into()));
    }
    model.freeze_prefixes(&cfg.freeze, true);
    run_steps(
        model,
        cfg,
        examples.len(),
        |m, idx| {
            let losses = idx.iter().map(|&i| Ok(m.example_loss(&examples[i])?)).collect::<Result<Vec<_>>>()?;
            mean_loss(losses)
        },
        on_step,
    )
}

/// Write a log as JSONL.
pub fn log_jsonl(log: &[LogRecord]) -> String {
    log.iter().map(|r| serde_json::to_string(r).expect("log serializes") + "\n").collect()
}
