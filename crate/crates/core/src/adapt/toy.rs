//! Standard toy distillation task and the two-stage versus single-stage
//! comparison run on it.

use super::{loss, train_stage, Student, Teacher, TrainConfig, TrainMask};
use crate::convert::convert_partial;
use crate::error::Result;
use crate::model::{ModelConfig, PartialRopeModel, TokenSequence};
use crate::rope::RopeKind;
use crate::selection::{score_two_norm, select_top_r};
use crate::synth::{calibration, random_model, CalibSpec};

/// Teacher, data and conversion targets of one seeded toy run.
#[derive(Clone, Debug)]
pub struct ToyTask {
    pub teacher: Teacher,
    /// Student targets: `d_rope = d_head/4`, `d_latent` narrower than the
    /// stacked nope/value rows.
    pub student_cfg: ModelConfig,
    pub data: Vec<TokenSequence>,
    pub ridge: f64,
}

pub fn toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_model: 16,
        d_head: 8,
        rope_kind: RopeKind::Vanilla1d,
        rope_base: 10000.0,
        d_rope: 8,
        d_latent: 8,
    }
}

impl ToyTask {
    pub fn standard(seed: u64) -> Result<Self> {
        let cfg = toy_config();
        let teacher = Teacher {
            cfg,
            layers: random_model(&cfg, seed),
        };
        let spec = CalibSpec {
            d_model: cfg.d_model,
            rope_kind: cfg.rope_kind,
            sequences: 8,
            text: 8,
            images: 1,
            image_rows: 2,
            image_cols: 4,
            visual_scale: 1.0,
        };
        let data = calibration(&spec, seed.wrapping_add(1))?;
        Ok(Self {
            teacher,
            student_cfg: cfg.with_targets(cfg.d_head / 4, 6),
            data,
            ridge: 1e-6,
        })
    }

    /// Partial-RoPE student with subspaces picked by the 2-norm score.
    pub fn partial_student(&self) -> Result<PartialRopeModel> {
        let map = score_two_norm(&self.student_cfg, &self.teacher.layers, &self.data)?;
        let sel = select_top_r(&map, &self.student_cfg)?;
        PartialRopeModel::from_original(&self.student_cfg, &self.teacher.layers, sel)
    }

    pub fn to_mla(&self, partial: &PartialRopeModel) -> Result<Student> {
        let (layers, _) = convert_partial(partial, &self.data, self.ridge)?;
        Ok(Student::Mla {
            cfg: self.student_cfg,
            layers,
        })
    }

    pub fn loss(&self, student: &Student) -> Result<f64> {
        let targets = self.teacher.targets(&self.data)?;
        loss(student, &targets, &self.data)
    }
}

/// Train configuration used for the toy runs.
pub fn toy_train_config(steps: usize, learning_rate: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        learning_rate,
        steps,
        warmup_ratio: 0.1,
        decay_ratio: 0.1,
        seed,
        batch_size: 0,
    }
}

/// Final losses of the two recipes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StageComparison {
    pub two_stage: f64,
    pub single_stage: f64,
}

/// Two-stage: tune q/k of the partial-RoPE model for `n1` steps, convert,
/// then tune the MLA parameters for `n2` steps. Single-stage: convert the
/// untuned partial-RoPE model and tune the MLA parameters for `n1 + n2`.
pub fn compare_two_stage(task: &ToyTask, n1: usize, n2: usize, lr1: f64, lr2: f64, seed: u64) -> Result<StageComparison> {
    let partial = task.partial_student()?;

    let mut stage1 = Student::PartialRope(partial.clone());
    train_stage(
        &mut stage1,
        &task.teacher,
        &TrainMask::stage1(),
        &toy_train_config(n1, lr1, seed),
        &task.data,
    )?;
    let Student::PartialRope(tuned) = stage1 else {
        unreachable!("stage 1 keeps the architecture")
    };
    let mut two = task.to_mla(&tuned)?;
    train_stage(
        &mut two,
        &task.teacher,
        &TrainMask::stage2(),
        &toy_train_config(n2, lr2, seed),
        &task.data,
    )?;

    let mut single = task.to_mla(&partial)?;
    train_stage(
        &mut single,
        &task.teacher,
        &TrainMask::stage2(),
        &toy_train_config(n1 + n2, lr2, seed),
        &task.data,
    )?;
    Ok(StageComparison {
        two_stage: task.loss(&two)?,
        single_stage: task.loss(&single)?,
    })
}
