//! Parameter-efficient recovery by layerwise output matching.
//!
//! A student (partial-RoPE or MLA) is trained with plain gradient descent to
//! reproduce the attention-layer outputs of the frozen original model. Only
//! the parameter classes named by a [`TrainMask`] receive updates.

mod backward;
pub mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    forward_mha_gqa, AttentionWeights, MlaLayerWeights, ModelConfig, PartialRopeModel, TokenSequence,
};
use crate::numerics::Matrix;

pub use backward::loss_and_grads;

/// Trainable tensor families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamClass {
    WQ,
    WK,
    WV,
    WO,
    KRopeRows,
    WDown,
    WUp,
}

impl ParamClass {
    pub const ALL: [ParamClass; 7] = [
        ParamClass::WQ,
        ParamClass::WK,
        ParamClass::WV,
        ParamClass::WO,
        ParamClass::KRopeRows,
        ParamClass::WDown,
        ParamClass::WUp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamClass::WQ => "w_q",
            ParamClass::WK => "w_k",
            ParamClass::WV => "w_v",
            ParamClass::WO => "w_o",
            ParamClass::KRopeRows => "k_rope_rows",
            ParamClass::WDown => "w_down",
            ParamClass::WUp => "w_up",
        }
    }
}

impl fmt::Display for ParamClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ParamClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ParamClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Stage1,
    Stage2,
}

/// Parameter classes that receive gradients; everything else is frozen.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainMask {
    pub stage: Stage,
    pub tunable: Vec<ParamClass>,
}

impl TrainMask {
    /// Query and key projections of the partial-RoPE model.
    pub fn stage1() -> Self {
        Self {
            stage: Stage::Stage1,
            tunable: vec![ParamClass::WQ, ParamClass::WK],
        }
    }

    /// Every parameter of the MLA attention except the output projection.
    pub fn stage2() -> Self {
        Self {
            stage: Stage::Stage2,
            tunable: vec![ParamClass::WQ, ParamClass::KRopeRows, ParamClass::WDown, ParamClass::WUp],
        }
    }

    pub fn from_names(stage: Stage, names: &[&str]) -> Result<Self> {
        let mut tunable = names.iter().map(|n| n.parse()).collect::<Result<Vec<ParamClass>>>()?;
        tunable.sort();
        tunable.dedup();
        Ok(Self { stage, tunable })
    }

    pub fn allows(&self, c: ParamClass) -> bool {
        self.tunable.contains(&c)
    }
}

/// Model being trained.
#[derive(Clone, Debug, PartialEq)]
pub enum Student {
    PartialRope(PartialRopeModel),
    Mla { cfg: ModelConfig, layers: Vec<MlaLayerWeights> },
}

impl Student {
    pub fn cfg(&self) -> &ModelConfig {
        match self {
            Student::PartialRope(m) => &m.cfg,
            Student::Mla { cfg, .. } => cfg,
        }
    }

    pub fn classes(&self) -> &'static [ParamClass] {
        match self {
            Student::PartialRope(_) => &[ParamClass::WQ, ParamClass::WK, ParamClass::WV, ParamClass::WO],
            Student::Mla { .. } => &[
                ParamClass::WQ,
                ParamClass::WO,
                ParamClass::KRopeRows,
                ParamClass::WDown,
                ParamClass::WUp,
            ],
        }
    }

    pub fn check_mask(&self, mask: &TrainMask) -> Result<()> {
        for c in &mask.tunable {
            if !self.classes().contains(c) {
                return Err(Error::InvalidArgument(format!(
                    "parameter {c} does not exist in this architecture"
                )));
            }
        }
        Ok(())
    }

    /// Tensors of one class in a layer. Factor classes list the visual
    /// groups first, then the text groups.
    pub fn params(&self, layer: usize, class: ParamClass) -> Vec<&Matrix> {
        match self {
            Student::PartialRope(m) => {
                let w = &m.layers[layer];
                match class {
                    ParamClass::WQ => vec![&w.w_q],
                    ParamClass::WK => vec![&w.w_k],
                    ParamClass::WV => vec![&w.w_v],
                    ParamClass::WO => vec![&w.w_o],
                    _ => vec![],
                }
            }
            Student::Mla { layers, .. } => {
                let w = &layers[layer];
                match class {
                    ParamClass::WQ => vec![&w.w_q],
                    ParamClass::WO => vec![&w.w_o],
                    ParamClass::KRopeRows => vec![&w.k_rope_rows],
                    ParamClass::WDown => w.w_down.visual.iter().chain(&w.w_down.text).collect(),
                    ParamClass::WUp => w.w_up.visual.iter().chain(&w.w_up.text).collect(),
                    _ => vec![],
                }
            }
        }
    }

    pub fn params_mut(&mut self, layer: usize, class: ParamClass) -> Vec<&mut Matrix> {
        match self {
            Student::PartialRope(m) => {
                let w = &mut m.layers[layer];
                match class {
                    ParamClass::WQ => vec![&mut w.w_q],
                    ParamClass::WK => vec![&mut w.w_k],
                    ParamClass::WV => vec![&mut w.w_v],
                    ParamClass::WO => vec![&mut w.w_o],
                    _ => vec![],
                }
            }
            Student::Mla { layers, .. } => {
                let w = &mut layers[layer];
                match class {
                    ParamClass::WQ => vec![&mut w.w_q],
                    ParamClass::WO => vec![&mut w.w_o],
                    ParamClass::KRopeRows => vec![&mut w.k_rope_rows],
                    ParamClass::WDown => w.w_down.visual.iter_mut().chain(w.w_down.text.iter_mut()).collect(),
                    ParamClass::WUp => w.w_up.visual.iter_mut().chain(w.w_up.text.iter_mut()).collect(),
                    _ => vec![],
                }
            }
        }
    }

    /// Attention output of every layer on `seq`.
    pub fn layer_outputs(&self, seq: &TokenSequence) -> Result<Vec<Matrix>> {
        match self {
            Student::PartialRope(m) => Ok(m.forward(seq)?.layer_outputs),
            Student::Mla { cfg, layers } => {
                Ok(crate::model::forward_mla(cfg, layers, seq, crate::model::KvCache::new(cfg))?.layer_outputs)
            }
        }
    }
}

/// Frozen original model whose layer outputs are the training targets.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub cfg: ModelConfig,
    pub layers: Vec<AttentionWeights>,
}

impl Teacher {
    /// `[sequence][layer]` attention outputs.
    pub fn targets(&self, data: &[TokenSequence]) -> Result<Vec<Vec<Matrix>>> {
        data.par_iter()
            .map(|s| forward_mha_gqa(&self.cfg, &self.layers, s).map(|p| p.layer_outputs))
            .collect()
    }
}

/// Per-layer gradients of the tunable classes, same order as [`Student::params`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub layers: Vec<BTreeMap<ParamClass, Vec<Matrix>>>,
}

impl Gradients {
    pub fn get(&self, layer: usize, class: ParamClass) -> Option<&[Matrix]> {
        self.layers[layer].get(&class).map(Vec::as_slice)
    }
}

/// Sum over layers of the mean squared error between student and target
/// layer outputs, each mean taken over all elements of the batch.
pub fn loss(student: &Student, targets: &[Vec<Matrix>], batch: &[TokenSequence]) -> Result<f64> {
    let outs: Vec<Vec<Matrix>> = batch.par_iter().map(|s| student.layer_outputs(s)).collect::<Result<_>>()?;
    let n_layers = student.cfg().n_layers;
    let elems: usize = batch.iter().map(|s| s.len() * s.d_model()).sum();
    let mut total = 0.0;
    for l in 0..n_layers {
        let mut sq = 0.0;
        for (o, t) in outs.iter().zip(targets) {
            sq += o[l].sub(&t[l]).frobenius_norm_sq();
        }
        total += sq / elems as f64;
    }
    Ok(total)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub steps: usize,
    pub warmup_ratio: f64,
    pub decay_ratio: f64,
    pub seed: u64,
    /// Sequences per step; 0 means the whole data set.
    pub batch_size: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = |r: f64| (0.0..=1.0).contains(&r);
        if !ok(self.warmup_ratio) || !ok(self.decay_ratio) || self.warmup_ratio + self.decay_ratio > 1.0 {
            return Err(Error::InvalidArgument(format!(
                "warmup {} and decay {} must lie in [0, 1] and sum to at most 1",
                self.warmup_ratio, self.decay_ratio
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Linear warmup, constant, then linear decay to zero.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = (self.warmup_ratio * self.steps as f64).round() as usize;
        let decay = (self.decay_ratio * self.steps as f64).round() as usize;
        let lr = self.learning_rate;
        if step < warm {
            lr * (step + 1) as f64 / warm as f64
        } else if decay > 0 && step >= self.steps - decay {
            lr * (self.steps - step) as f64 / decay as f64
        } else {
            lr
        }
    }
}

/// Per-step batch loss (before that step's update) and learning rate.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossTrace {
    pub steps: Vec<(usize, f64, f64)>,
}

impl LossTrace {
    pub fn first(&self) -> Option<f64> {
        self.steps.first().map(|s| s.1)
    }

    pub fn last(&self) -> Option<f64> {
        self.steps.last().map(|s| s.1)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "lr"])?;
        for (step, loss, lr) in &self.steps {
            w.write_record([step.to_string(), format!("{loss:.12e}"), format!("{lr:.6e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Gradient descent on the tunable classes of `student`.
///
/// Batches are drawn from `data` in a seeded shuffled order, one epoch after
/// another. A non-finite loss stops training with the step index.
pub fn train_stage(
    student: &mut Student,
    teacher: &Teacher,
    mask: &TrainMask,
    cfg: &TrainConfig,
    data: &[TokenSequence],
) -> Result<LossTrace> {
    cfg.validate()?;
    student.check_mask(mask)?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training data is empty".into()));
    }
    let targets = teacher.targets(data)?;
    let batch_size = if cfg.batch_size == 0 { data.len() } else { cfg.batch_size.min(data.len()) };
    let mut rng = crate::synth::rng(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = data.len();
    let mut trace = LossTrace::default();
    for step in 0..cfg.steps {
        if batch_size < data.len() {
            if cursor + batch_size > data.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
        } else {
            cursor = 0;
        }
        let idx = &order[cursor..cursor + batch_size];
        cursor += batch_size;
        let batch: Vec<TokenSequence> = idx.iter().map(|&i| data[i].clone()).collect();
        let batch_targets: Vec<Vec<Matrix>> = idx.iter().map(|&i| targets[i].clone()).collect();
        let (loss, grads) = match loss_and_grads(student, &batch_targets, &batch, mask) {
            Err(e) if e.is_non_finite() => return Err(Error::NonFiniteLoss { step }),
            r => r?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let lr = cfg.lr_at(step);
        trace.steps.push((step, loss, lr));
        if lr == 0.0 {
            continue;
        }
        for (l, per_layer) in grads.layers.iter().enumerate() {
            for (&class, gs) in per_layer {
                for (p, g) in student.params_mut(l, class).into_iter().zip(gs) {
                    p.axpy(-lr, g);
                }
            }
        }
    }
    Ok(trace)
}
