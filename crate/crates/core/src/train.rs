//! The three-stage training engine plus the two baselines.
//!
//! Stage 1 trains a target teacher (supervised) and one adversarially
//! aligned teacher per source domain (task loss on source, optionally on
//! target when `r = 1`, plus a domain-discriminator loss behind a gradient
//! reversal layer). Stage 2 freezes all teachers and trains fusion blocks
//! and a fresh head on the target domain. Stage 3 distills the joint
//! teacher into a student with a curriculum-weighted objective.
//!
//! All optimizers are plain SGD with the configured rates (momentum is
//! available behind config, off by default), matching the displayed update
//! rules; the discriminator's effective rate is scaled by the adversarial
//! schedule each step.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::{ParamId, ParamStore, Shape, Tape, V};
use crate::checkpoint::{self, CheckpointMeta};
use crate::error::{Error, Result};
use crate::fusion::{fingerprint, FusionConfig, JointForward, JointTeacher};
use crate::losses::{
    self, assign_cells, LossWeights, SetLossConfig, TapProjection,
};
use crate::metrics::{
    self, accuracy, map_range, threshold_mask, Detection, GroundTruth, MetricsReport, ModelTag,
};
use crate::nets::{
    decode_boxes, pooled_bottleneck, query_logits, top_k_cells, Discriminator, ModelConfig,
    Prediction, TapDepth, TaskModel,
};
use crate::schedules::{beta_ramp, curriculum, lambda_adv, temp_decay, ScheduleConfig};
use crate::synthdata::{
    batch_images, epoch_batches, mix_seed, pair_batches, DatasetSplit, DomainSpec, Sample, Task,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub lr_target: f64,
    pub lr_source: f64,
    pub lr_joint: f64,
    pub lr_student: f64,
    pub batch: usize,
    /// Source-side size of paired batches.
    pub b1: usize,
    /// Target-side size of paired batches.
    pub b2: usize,
    pub lr_reduce_factor: f64,
    pub lr_patience: usize,
    pub max_epochs: usize,
    /// Global-norm gradient clip; detection runs default to 5.0.
    pub grad_clip: Option<f64>,
    /// SGD momentum, off by default.
    pub momentum: f64,
    /// Per-stage epoch caps; `max_epochs` when unset. Students, baselines
    /// and the multi-head baseline share `epochs_student` so comparisons
    /// stay budget-matched.
    pub epochs_teacher: Option<usize>,
    pub epochs_joint: Option<usize>,
    pub epochs_student: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr_target: 1e-4,
            lr_source: 1e-4,
            lr_joint: 1e-4,
            lr_student: 1e-4,
            batch: 8,
            b1: 8,
            b2: 8,
            lr_reduce_factor: 0.1,
            lr_patience: 5,
            max_epochs: 300,
            grad_clip: None,
            momentum: 0.0,
            epochs_teacher: None,
            epochs_joint: None,
            epochs_student: None,
        }
    }
}

impl OptimizerConfig {
    fn teacher_epochs(&self) -> usize {
        self.epochs_teacher.unwrap_or(self.max_epochs)
    }
    fn joint_epochs(&self) -> usize {
        self.epochs_joint.unwrap_or(self.max_epochs)
    }
    fn student_epochs(&self) -> usize {
        self.epochs_student.unwrap_or(self.max_epochs)
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_target", self.lr_target),
            ("lr_source", self.lr_source),
            ("lr_joint", self.lr_joint),
            ("lr_student", self.lr_student),
        ] {
            if v <= 0.0 {
                return Err(Error::validation(name, "learning rates must be > 0"));
            }
        }
        if self.batch == 0 || self.b1 == 0 || self.b2 == 0 {
            return Err(Error::validation("batch", "batch sizes must be >= 1"));
        }
        if self.lr_patience == 0 {
            return Err(Error::validation("lr_patience", "must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::validation("max_epochs", "must be >= 1"));
        }
        Ok(())
    }
}

/// How the curriculum factor is produced: the warmup/ramp schedule
/// (segmentation default) or a constant (classification/detection).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum CurriculumMode {
    Ramp,
    Constant(f64),
}

impl CurriculumMode {
    pub fn factor(&self, epoch: usize, sched: &ScheduleConfig) -> f64 {
        match self {
            CurriculumMode::Ramp => curriculum(epoch, sched),
            CurriculumMode::Constant(v) => *v,
        }
    }
}

/// Which teacher fusion-attention blocks align with the student's last k
/// blocks during classification distillation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsDistillMode {
    EarlyK,
    LateK,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClsDistillConfig {
    pub mode: ClsDistillMode,
    pub k: usize,
}

impl Default for ClsDistillConfig {
    fn default() -> Self {
        ClsDistillConfig {
            mode: ClsDistillMode::LateK,
            k: 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetLossKind {
    /// Cell-assignment loss: objectness BCE + class CE + smooth-L1.
    Frcnn,
    /// Hungarian set loss: CE + L1 + (G)IoU.
    Detr,
}

/// Everything one pipeline run needs: domains, architecture, losses,
/// schedules and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub task: Task,
    pub target: DomainSpec,
    pub sources: Vec<DomainSpec>,
    pub samples_per_domain: usize,
    pub split_ratios: (f64, f64, f64),
    /// Supervised target adaptation during source-teacher training.
    pub r_flag: u8,
    pub weights: LossWeights,
    pub schedule: ScheduleConfig,
    pub curriculum: CurriculumMode,
    pub fusion: FusionConfig,
    pub optim: OptimizerConfig,
    pub teacher_model: ModelConfig,
    pub student_model: ModelConfig,
    pub tap_depth: TapDepth,
    pub cls_distill: ClsDistillConfig,
    pub det_loss: DetLossKind,
    pub set_loss: SetLossConfig,
    /// Temperature for logit-level distillation.
    pub temperature: f64,
    pub seed: u64,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        for s in &self.sources {
            s.validate()?;
            if s.task != self.task {
                return Err(Error::validation("sources", "source task must match run task"));
            }
        }
        if self.target.task != self.task {
            return Err(Error::validation("target", "target task must match run task"));
        }
        if self.r_flag > 1 {
            return Err(Error::validation("r_flag", "must be 0 or 1"));
        }
        self.weights.validate()?;
        self.schedule.validate()?;
        self.optim.validate()?;
        self.teacher_model.validate()?;
        self.student_model.validate()?;
        self.fusion.validate(&self.teacher_model, self.task)?;
        if self.cls_distill.k == 0 || self.cls_distill.k > self.fusion.fa_blocks {
            return Err(Error::validation("cls_distill.k", "need 1 <= k <= fa_blocks"));
        }
        if self.task == Task::Classification && self.cls_distill.k > self.student_model.embed_blocks
        {
            return Err(Error::validation(
                "cls_distill.k",
                "k exceeds the student's embedding blocks",
            ));
        }
        if self.temperature <= 0.0 {
            return Err(Error::validation("temperature", "must be > 0"));
        }
        if self.samples_per_domain == 0 {
            return Err(Error::validation("samples_per_domain", "must be >= 1"));
        }
        Ok(())
    }

    /// Default configuration for a task at desk scale.
    pub fn defaults_for(task: Task, target: DomainSpec, sources: Vec<DomainSpec>) -> Self {
        let weights = match task {
            Task::Segmentation => LossWeights::segmentation(),
            Task::Classification => LossWeights::classification_primary(),
            Task::Detection => LossWeights::detection(),
        };
        let curriculum = match task {
            Task::Segmentation => CurriculumMode::Ramp,
            Task::Classification => CurriculumMode::Constant(1.0),
            Task::Detection => CurriculumMode::Constant(1.0),
        };
        let optim = OptimizerConfig {
            grad_clip: matches!(task, Task::Detection).then_some(5.0),
            ..OptimizerConfig::default()
        };
        RunConfig {
            task,
            target,
            sources,
            samples_per_domain: 200,
            split_ratios: (0.8, 0.1, 0.1),
            r_flag: 1,
            weights,
            schedule: ScheduleConfig::default(),
            curriculum,
            fusion: FusionConfig::default(),
            optim,
            teacher_model: ModelConfig::default(),
            student_model: ModelConfig::default(),
            tap_depth: TapDepth::Both,
            cls_distill: ClsDistillConfig::default(),
            det_loss: DetLossKind::Frcnn,
            set_loss: SetLossConfig::default(),
            temperature: 2.0,
            seed: 1,
        }
    }
}

/// A generated domain with its split.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
    pub split: DatasetSplit,
}

impl DomainData {
    pub fn generate(spec: &DomainSpec, n: usize, ratios: (f64, f64, f64)) -> Result<Self> {
        let samples = crate::synthdata::generate_domain(spec, n)?;
        // the split shuffle is keyed by the domain seed so the whole dataset
        // is a pure function of its spec
        let split = crate::synthdata::split(n, ratios, mix_seed(spec.seed, 0x5911))?;
        Ok(DomainData {
            spec: spec.clone(),
            samples,
            split,
        })
    }

    pub fn gather(&self, idx: &[usize]) -> Vec<&Sample> {
        idx.iter().map(|&i| &self.samples[i]).collect()
    }
}

/// One row of the per-epoch metrics log.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total_loss: f64,
    pub task_loss: f64,
    pub val_loss: f64,
    pub schedule: BTreeMap<String, f64>,
    pub components: BTreeMap<String, f64>,
}

/// Result of one training stage.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<EpochLog>,
    pub checkpoint: PathBuf,
}

/// Validation-plateau bookkeeping: reduce the learning rate after
/// `patience` epochs without improvement and stop after `2 * patience`.
struct Plateau {
    best: f64,
    best_epoch: usize,
    since_best: usize,
    patience: usize,
    factor: f64,
    lr_scale: f64,
}

impl Plateau {
    fn new(patience: usize, factor: f64) -> Self {
        Plateau {
            best: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
            patience,
            factor,
            lr_scale: 1.0,
        }
    }

    /// Returns `(improved, stop)`.
    fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.since_best = 0;
            return (true, false);
        }
        self.since_best += 1;
        if self.since_best == self.patience {
            self.lr_scale *= self.factor;
        }
        (false, self.since_best >= 2 * self.patience)
    }
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Divergence {
            epoch,
            detail: format!("non-finite loss {loss}"),
        });
    }
    Ok(())
}

fn snapshot(store: &ParamStore, ids: &[ParamId]) -> Vec<Vec<f64>> {
    ids.iter().map(|&id| store.value(id).to_vec()).collect()
}

fn restore(store: &mut ParamStore, ids: &[ParamId], snap: &[Vec<f64>]) {
    for (&id, vals) in ids.iter().zip(snap) {
        store.value_mut(id).copy_from_slice(vals);
    }
}

fn tensor_images(t: &mut Tape, samples: &[&Sample]) -> V {
    let (data, dims) = batch_images(samples);
    t.constant(data, Shape(dims))
}

fn mask_tensor(t: &mut Tape, samples: &[&Sample]) -> V {
    let size = samples[0].size;
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        let m = s.mask().expect("segmentation sample");
        data.extend(m.iter().map(|&v| v as f64));
    }
    t.constant(data, Shape(vec![samples.len(), 1, size, size]))
}

fn labels_of(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label().expect("classification sample")).collect()
}

/// Which supervised loss a role uses. Teachers and the joint teacher train
/// with the plain task loss; students and baselines use the student-side
/// variant (Dice+BCE, weighted CE).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossRole {
    Teacher,
    Student,
}

/// Supervised task loss for a forward pass over one batch.
fn supervised_loss(
    t: &mut Tape,
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    pred: &Prediction,
    samples: &[&Sample],
    role: LossRole,
) -> Result<V> {
    let eps = cfg.weights.eps;
    match pred {
        Prediction::Mask(p) => {
            let gt = mask_tensor(t, samples);
            match role {
                LossRole::Teacher => losses::dice_loss_batched(t, *p, gt, eps),
                LossRole::Student => losses::dice_bce(t, *p, gt, eps),
            }
        }
        Prediction::Logits { logits, .. } => {
            let labels = labels_of(samples);
            match role {
                LossRole::Teacher => losses::cross_entropy(t, *logits, &labels),
                LossRole::Student => losses::weighted_ce(t, *logits, &labels, eps),
            }
        }
        Prediction::Detections(out) => {
            let grid = out.grid;
            let mut acc: Option<V> = None;
            for (i, s) in samples.iter().enumerate() {
                let boxes = s.boxes().expect("detection sample");
                let per_image = match cfg.det_loss {
                    DetLossKind::Frcnn => {
                        let assignment = assign_cells(boxes, grid, model_cfg.image_size);
                        losses::frcnn_task_loss(
                            t,
                            out.objectness[i],
                            out.class_logits[i],
                            out.offsets[i],
                            &assignment,
                            eps,
                        )?
                    }
                    DetLossKind::Detr => {
                        let coords = decode_boxes(t, out.offsets[i], grid, model_cfg.image_size);
                        let logits = query_logits(t, out.class_logits[i], out.objectness[i]);
                        losses::detr_task_loss(
                            t,
                            coords,
                            logits,
                            boxes,
                            model_cfg.image_size,
                            &cfg.set_loss,
                        )?
                    }
                };
                acc = Some(match acc {
                    Some(a) => t.add(a, per_image),
                    None => per_image,
                });
            }
            let total = acc.expect("nonempty batch");
            Ok(t.scale(total, 1.0 / samples.len() as f64))
        }
    }
}

/// Mean supervised loss over a split, without gradients.
fn eval_loss(
    cfg: &RunConfig,
    model: &TaskModel,
    store: &ParamStore,
    data: &DomainData,
    idx: &[usize],
    role: LossRole,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(cfg.optim.batch) {
        let samples = data.gather(chunk);
        let mut t = Tape::new();
        let images = tensor_images(&mut t, &samples);
        let (pred, _) = model.forward_with_taps(&mut t, store, images)?;
        let loss = supervised_loss(&mut t, cfg, model.cfg(), &pred, &samples, role)?;
        total += t.scalar_value(loss) * samples.len() as f64;
        count += samples.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Supervised training of a single model on one domain; shared by the
/// target teacher, the dataset-specific baseline and unit tests.
#[allow(clippy::too_many_arguments)]
pub fn train_supervised(
    cfg: &RunConfig,
    model: &TaskModel,
    store: &mut ParamStore,
    data: &DomainData,
    lr0: f64,
    role: LossRole,
    stage_tag: &str,
    ckpt_path: &Path,
) -> Result<TrainSummary> {
    let max_epochs = match role {
        LossRole::Teacher => cfg.optim.teacher_epochs(),
        LossRole::Student => cfg.optim.student_epochs(),
    };
    let trainables = model.all_param_ids();
    let mut plateau = Plateau::new(cfg.optim.lr_patience, cfg.optim.lr_reduce_factor);
    let mut best_snapshot = snapshot(store, &trainables);
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..max_epochs {
        epochs_run = epoch + 1;
        let lr = lr0 * plateau.lr_scale;
        let batches = epoch_batches(&data.split.train, cfg.optim.batch, mix_seed(cfg.seed, a_seed(stage_tag)), epoch);
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let samples = data.gather(batch);
            let mut t = Tape::new();
            let images = tensor_images(&mut t, &samples);
            let (pred, _) = model.forward_with_taps(&mut t, store, images)?;
            let loss = supervised_loss(&mut t, cfg, model.cfg(), &pred, &samples, role)?;
            let loss_v = t.scalar_value(loss);
            check_finite(loss_v, epoch)?;
            epoch_loss += loss_v;
            store.zero_grads();
            t.backward(loss, store);
            if let Some(clip) = cfg.optim.grad_clip {
                store.clip_grad_norm(&trainables, clip);
            }
            store.sgd_step(&trainables, lr, cfg.optim.momentum);
        }
        let val = eval_loss(cfg, model, store, data, &data.split.val, role)?;
        check_finite(val, epoch)?;
        let (improved, stop) = plateau.observe(epoch, val);
        if improved {
            best_snapshot = snapshot(store, &trainables);
        }
        log.push(EpochLog {
            epoch,
            lr,
            total_loss: epoch_loss / batches.len().max(1) as f64,
            task_loss: epoch_loss / batches.len().max(1) as f64,
            val_loss: val,
            schedule: BTreeMap::new(),
            components: BTreeMap::new(),
        });
        if stop {
            break;
        }
    }

    restore(store, &trainables, &best_snapshot);
    checkpoint::round_params_to_f32(store, &trainables);
    let final_val = eval_loss(cfg, model, store, data, &data.split.val, role)?;
    let meta = CheckpointMeta {
        config_hash: model.cfg().config_hash(model.task()),
        task: model.task(),
        stage: stage_tag.to_string(),
        epoch: plateau.best_epoch,
        seed: cfg.seed,
        val_loss: final_val,
        teacher_hashes: vec![],
    };
    checkpoint::save(ckpt_path, &meta, store, &trainables)?;
    Ok(TrainSummary {
        epochs_run,
        best_epoch: plateau.best_epoch,
        best_val: final_val,
        log,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

/// Small per-stage salt so batch orders differ across stages.
fn a_seed(tag: &str) -> u64 {
    tag.bytes().fold(0u64, |acc, b| acc.wrapping_mul(131).wrapping_add(b as u64))
}

// ---------------------------------------------------------------------------
// Stage 1
// ---------------------------------------------------------------------------

/// Stage 1a: the target teacher, trained on the target domain only.
pub fn stage1_target(cfg: &RunConfig, target: &DomainData, ckpt_path: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = TaskModel::new(cfg.task, &cfg.teacher_model, &mut store, mix_seed(cfg.seed, 0x7a))?;
    train_supervised(
        cfg,
        &model,
        &mut store,
        target,
        cfg.optim.lr_target,
        LossRole::Teacher,
        "teacher-target",
        ckpt_path,
    )
}

/// Stage 1b: one source teacher with domain-adversarial alignment.
///
/// Per step the combined objective is `L_y + L_d(D(grl(pool(f))))`; the
/// decoder and encoder step with the stage learning rate while the
/// discriminator's rate is additionally scaled by the adversarial schedule,
/// matching the displayed update rules.
pub fn stage1_source(
    cfg: &RunConfig,
    source_index: usize,
    source: &DomainData,
    target: &DomainData,
    ckpt_path: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let seed = mix_seed(cfg.seed, 0x50 + source_index as u64);
    let model = TaskModel::new(cfg.task, &cfg.teacher_model, &mut store, seed)?;
    let disc = Discriminator::new(
        cfg.teacher_model.encoder.bottleneck_channels,
        &mut store,
        mix_seed(seed, 0xd15c),
    );

    let enc_ids = model.encoder_param_ids();
    let head_ids = model.head_param_ids();
    let disc_ids = disc.param_ids();
    let all_model_ids = model.all_param_ids();

    let max_epochs = cfg.optim.teacher_epochs();
    let batches_per_epoch = source.split.train.len().div_ceil(cfg.optim.b1);
    let total_steps = (max_epochs * batches_per_epoch).max(1);
    let mut step = 0usize;

    let mut plateau = Plateau::new(cfg.optim.lr_patience, cfg.optim.lr_reduce_factor);
    let mut best_snapshot = snapshot(&store, &all_model_ids);
    let mut log = Vec::new();
    let mut epochs_run = 0;
    let r = cfg.r_flag as f64;

    for epoch in 0..max_epochs {
        epochs_run = epoch + 1;
        let lr = cfg.optim.lr_source * plateau.lr_scale;
        let paired = pair_batches(
            &source.samples,
            &source.split.train,
            &target.samples,
            &target.split.train,
            cfg.optim.b1,
            cfg.optim.b2,
            mix_seed(cfg.seed, 0xa0 + epoch as u64),
        )?;
        let mut epoch_task = 0.0;
        let mut epoch_disc = 0.0;
        let mut disc_correct = 0usize;
        let mut disc_total = 0usize;
        let mut last_lambda = 0.0;

        for pb in &paired {
            let rho = step as f64 / total_steps as f64;
            let lambda = lambda_adv(rho);
            last_lambda = lambda;
            let b1 = pb.source.len();
            let b2 = pb.target.len();
            let all: Vec<&Sample> = pb.source.iter().chain(pb.target.iter()).collect();

            let mut t = Tape::new();
            let images = tensor_images(&mut t, &all);
            let (pred, taps) = model.forward_with_taps(&mut t, &store, images)?;

            // task loss on the source part, plus the target part when r = 1
            let src_pred = slice_prediction(&mut t, &pred, 0, b1);
            let src_samples = &all[..b1];
            let mut task = supervised_loss(&mut t, cfg, model.cfg(), &src_pred, src_samples, LossRole::Teacher)?;
            if cfg.r_flag == 1 {
                let tgt_pred = slice_prediction(&mut t, &pred, b1, b2);
                let tgt_samples = &all[b1..];
                let tgt_task =
                    supervised_loss(&mut t, cfg, model.cfg(), &tgt_pred, tgt_samples, LossRole::Teacher)?;
                let scaled = t.scale(tgt_task, r);
                task = t.add(task, scaled);
            }

            // domain loss through the gradient reversal layer
            let pooled = pooled_bottleneck(&mut t, &taps);
            let reversed = t.grad_reverse(pooled, lambda);
            let logit = disc.forward(&mut t, &store, reversed);
            let prob = t.sigmoid(logit);
            let domain_gt: Vec<f64> = pb.domain_labels.iter().map(|&d| d as f64).collect();
            let gt = t.constant(domain_gt.clone(), Shape(vec![b1 + b2, 1]));
            let disc_loss = losses::bce_loss(&mut t, prob, gt, cfg.weights.eps)?;

            let total = t.add(task, disc_loss);
            let total_v = t.scalar_value(total);
            check_finite(total_v, epoch)?;
            epoch_task += t.scalar_value(task);
            epoch_disc += t.scalar_value(disc_loss);
            for (p, d) in t.value(prob).iter().zip(&domain_gt) {
                if (*p >= 0.5) == (*d >= 0.5) {
                    disc_correct += 1;
                }
                disc_total += 1;
            }

            store.zero_grads();
            t.backward(total, &mut store);
            if let Some(clip) = cfg.optim.grad_clip {
                let mut group = all_model_ids.clone();
                group.extend(&disc_ids);
                store.clip_grad_norm(&group, clip);
            }
            store.sgd_step(&head_ids, lr, cfg.optim.momentum);
            store.sgd_step(&enc_ids, lr, cfg.optim.momentum);
            store.sgd_step(&disc_ids, lr * lambda, cfg.optim.momentum);
            step += 1;
        }

        // validation: task loss on the source val split plus (when r = 1)
        // the target val split
        let mut val = eval_loss(cfg, &model, &store, source, &source.split.val, LossRole::Teacher)?;
        if cfg.r_flag == 1 {
            val += eval_loss(cfg, &model, &store, target, &target.split.val, LossRole::Teacher)?;
        }
        check_finite(val, epoch)?;
        let (improved, stop) = plateau.observe(epoch, val);
        if improved {
            best_snapshot = snapshot(&store, &all_model_ids);
        }
        let nb = paired.len().max(1) as f64;
        let mut schedule = BTreeMap::new();
        schedule.insert("lambda".into(), last_lambda);
        schedule.insert("rho".into(), (step as f64 / total_steps as f64).min(1.0));
        let mut components = BTreeMap::new();
        components.insert("disc_loss".into(), epoch_disc / nb);
        components.insert(
            "disc_accuracy".into(),
            disc_correct as f64 / disc_total.max(1) as f64,
        );
        log.push(EpochLog {
            epoch,
            lr,
            total_loss: (epoch_task + epoch_disc) / nb,
            task_loss: epoch_task / nb,
            val_loss: val,
            schedule,
            components,
        });
        if stop {
            break;
        }
    }

    restore(&mut store, &all_model_ids, &best_snapshot);
    checkpoint::round_params_to_f32(&mut store, &all_model_ids);
    let mut final_val = eval_loss(cfg, &model, &store, source, &source.split.val, LossRole::Teacher)?;
    if cfg.r_flag == 1 {
        final_val += eval_loss(cfg, &model, &store, target, &target.split.val, LossRole::Teacher)?;
    }
    let meta = CheckpointMeta {
        config_hash: model.cfg().config_hash(model.task()),
        task: model.task(),
        stage: format!("teacher-source-{source_index}"),
        epoch: plateau.best_epoch,
        seed: cfg.seed,
        val_loss: final_val,
        teacher_hashes: vec![],
    };
    checkpoint::save(ckpt_path, &meta, &store, &all_model_ids)?;
    Ok(TrainSummary {
        epochs_run,
        best_epoch: plateau.best_epoch,
        best_val: final_val,
        log,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

/// Slice a batched prediction to rows `[start, start + len)`.
fn slice_prediction(t: &mut Tape, pred: &Prediction, start: usize, len: usize) -> Prediction {
    match pred {
        Prediction::Mask(p) => {
            let dims = t.shape(*p).dims().to_vec();
            let rest: usize = dims[1..].iter().product();
            let flat = t.reshape(*p, Shape(vec![dims[0], rest]));
            let rows: Vec<usize> = (start..start + len).collect();
            let sel = t.gather_rows(flat, &rows);
            let mut out_dims = dims.clone();
            out_dims[0] = len;
            Prediction::Mask(t.reshape(sel, Shape(out_dims)))
        }
        Prediction::Logits { logits, embed_taps } => {
            let rows: Vec<usize> = (start..start + len).collect();
            let sel = t.gather_rows(*logits, &rows);
            let taps = embed_taps
                .iter()
                .map(|&tap| t.gather_rows(tap, &rows))
                .collect();
            Prediction::Logits {
                logits: sel,
                embed_taps: taps,
            }
        }
        Prediction::Detections(out) => Prediction::Detections(crate::nets::DetHeadOut {
            objectness: out.objectness[start..start + len].to_vec(),
            class_logits: out.class_logits[start..start + len].to_vec(),
            offsets: out.offsets[start..start + len].to_vec(),
            regions: out.regions[start..start + len].to_vec(),
            grid: out.grid,
        }),
    }
}

// ---------------------------------------------------------------------------
// Stage 2
// ---------------------------------------------------------------------------

/// Reconstruct and load the frozen teachers, returning the joint teacher
/// and the shared store. Teacher 0 is the target teacher.
pub fn load_joint_teacher(
    cfg: &RunConfig,
    teacher_ckpts: &[PathBuf],
    store: &mut ParamStore,
) -> Result<(JointTeacher, Vec<String>)> {
    if teacher_ckpts.is_empty() {
        return Err(Error::MissingPrerequisite("teacher checkpoints".into()));
    }
    let mut teachers = Vec::with_capacity(teacher_ckpts.len());
    let mut hashes = Vec::with_capacity(teacher_ckpts.len());
    let expected = cfg.teacher_model.config_hash(cfg.task);
    for (k, path) in teacher_ckpts.iter().enumerate() {
        if !path.exists() {
            return Err(Error::MissingPrerequisite(format!(
                "teacher checkpoint {}",
                path.display()
            )));
        }
        let model = TaskModel::new(cfg.task, &cfg.teacher_model, store, 0)?;
        let ids = model.all_param_ids();
        checkpoint::load(path, &expected, store, &ids)?;
        hashes.push(checkpoint::content_hash(path)?);
        log::debug!("loaded teacher {k} from {}", path.display());
        teachers.push(model);
    }
    let joint = JointTeacher::build(
        teachers,
        hashes.clone(),
        &cfg.fusion,
        store,
        mix_seed(cfg.seed, 0x20),
    )?;
    Ok((joint, hashes))
}

/// Stage 2: train the fusion blocks and the fresh head of the joint
/// teacher on the target train split; all teachers stay frozen.
pub fn stage2_joint(
    cfg: &RunConfig,
    target: &DomainData,
    teacher_ckpts: &[PathBuf],
    ckpt_path: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let (joint, hashes) = load_joint_teacher(cfg, teacher_ckpts, &mut store)?;
    let trainables = joint.trainable_param_ids();
    let frozen = joint.frozen_param_ids();
    let frozen_before = fingerprint(&store, &frozen);

    let max_epochs = cfg.optim.joint_epochs();
    let mut plateau = Plateau::new(cfg.optim.lr_patience, cfg.optim.lr_reduce_factor);
    let mut best_snapshot = snapshot(&store, &trainables);
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..max_epochs {
        epochs_run = epoch + 1;
        let lr = cfg.optim.lr_joint * plateau.lr_scale;
        let batches = epoch_batches(
            &target.split.train,
            cfg.optim.batch,
            mix_seed(cfg.seed, 0x2000),
            epoch,
        );
        let mut epoch_loss = 0.0;
        for batch in &batches {
            let samples = target.gather(batch);
            let mut t = Tape::new();
            let images = tensor_images(&mut t, &samples);
            let fwd = joint.forward(&mut t, &store, images)?;
            let loss =
                supervised_loss(&mut t, cfg, &joint.model_cfg, &fwd.prediction, &samples, LossRole::Teacher)?;
            let loss_v = t.scalar_value(loss);
            check_finite(loss_v, epoch)?;
            epoch_loss += loss_v;
            store.zero_grads();
            t.backward(loss, &mut store);
            if let Some(clip) = cfg.optim.grad_clip {
                store.clip_grad_norm(&trainables, clip);
            }
            store.sgd_step(&trainables, lr, cfg.optim.momentum);
        }
        let val = eval_joint_loss(cfg, &joint, &store, target, &target.split.val)?;
        check_finite(val, epoch)?;
        let (improved, stop) = plateau.observe(epoch, val);
        if improved {
            best_snapshot = snapshot(&store, &trainables);
        }
        log.push(EpochLog {
            epoch,
            lr,
            total_loss: epoch_loss / batches.len().max(1) as f64,
            task_loss: epoch_loss / batches.len().max(1) as f64,
            val_loss: val,
            schedule: BTreeMap::new(),
            components: BTreeMap::new(),
        });
        if stop {
            break;
        }
    }

    debug_assert_eq!(frozen_before, fingerprint(&store, &frozen), "teachers moved");
    restore(&mut store, &trainables, &best_snapshot);
    checkpoint::round_params_to_f32(&mut store, &trainables);
    let final_val = eval_joint_loss(cfg, &joint, &store, target, &target.split.val)?;
    let meta = CheckpointMeta {
        config_hash: joint.model_cfg.config_hash(cfg.task),
        task: cfg.task,
        stage: "joint".to_string(),
        epoch: plateau.best_epoch,
        seed: cfg.seed,
        val_loss: final_val,
        teacher_hashes: hashes,
    };
    checkpoint::save(ckpt_path, &meta, &store, &trainables)?;
    Ok(TrainSummary {
        epochs_run,
        best_epoch: plateau.best_epoch,
        best_val: final_val,
        log,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

fn eval_joint_loss(
    cfg: &RunConfig,
    joint: &JointTeacher,
    store: &ParamStore,
    data: &DomainData,
    idx: &[usize],
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(cfg.optim.batch) {
        let samples = data.gather(chunk);
        let mut t = Tape::new();
        let images = tensor_images(&mut t, &samples);
        let fwd = joint.forward(&mut t, store, images)?;
        let loss =
            supervised_loss(&mut t, cfg, &joint.model_cfg, &fwd.prediction, &samples, LossRole::Teacher)?;
        total += t.scalar_value(loss) * samples.len() as f64;
        count += samples.len();
    }
    Ok(total / count.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Stage 3
// ---------------------------------------------------------------------------

type Captured = (Vec<f64>, Vec<usize>);

fn capture(t: &Tape, v: V) -> Captured {
    (t.value(v).to_vec(), t.shape(v).dims().to_vec())
}

fn inject(t: &mut Tape, c: &Captured) -> V {
    t.constant(c.0.clone(), Shape(c.1.clone()))
}

/// Joint-teacher outputs for one batch, severed from the teacher graph.
struct TeacherCapture {
    taps: Vec<Captured>,
    logits: Option<Captured>,
    fa_taps: Vec<Captured>,
    /// per image: (class logits `[cells, C]`, region embeds `[cells, R]`)
    det: Option<Vec<(Captured, Captured)>>,
}

fn capture_teacher(
    cfg: &RunConfig,
    joint: &JointTeacher,
    store: &ParamStore,
    samples: &[&Sample],
) -> Result<TeacherCapture> {
    let mut t = Tape::new();
    let images = tensor_images(&mut t, samples);
    let fwd: JointForward = joint.forward(&mut t, store, images)?;
    let taps = fwd
        .taps
        .select(cfg.tap_depth)
        .iter()
        .map(|&v| capture(&t, v))
        .collect();
    let mut out = TeacherCapture {
        taps,
        logits: None,
        fa_taps: fwd.fa_taps.iter().map(|&v| capture(&t, v)).collect(),
        det: None,
    };
    match fwd.prediction {
        Prediction::Logits { logits, .. } => out.logits = Some(capture(&t, logits)),
        Prediction::Detections(d) => {
            let mut per_image = Vec::with_capacity(d.class_logits.len());
            for i in 0..d.class_logits.len() {
                per_image.push((capture(&t, d.class_logits[i]), capture(&t, d.regions[i])));
            }
            out.det = Some(per_image);
        }
        Prediction::Mask(_) => {}
    }
    Ok(out)
}

/// Per-epoch schedule values applied to the distillation terms.
#[derive(Clone, Copy, Debug)]
pub struct DistillSchedule {
    pub cf: f64,
    pub beta: f64,
    pub con_temp: f64,
    pub kd_temp: f64,
}

impl DistillSchedule {
    pub fn at_epoch(cfg: &RunConfig, epoch: usize) -> Self {
        let cf = cfg.curriculum.factor(epoch, &cfg.schedule);
        // the contrastive weight ramp and temperature decay follow the
        // segmentation recipe; classification/detection pin beta and use the
        // fixed distillation temperature for their contrastive terms
        let (beta, con_temp) = match cfg.task {
            Task::Segmentation => (
                beta_ramp(curriculum(epoch, &cfg.schedule), &cfg.schedule),
                temp_decay(epoch, &cfg.schedule),
            ),
            _ => (cfg.weights.beta, cfg.temperature),
        };
        DistillSchedule {
            cf,
            beta,
            con_temp,
            kd_temp: cfg.temperature,
        }
    }
}

/// Curriculum-weighted total loss for one student batch. Returns the total
/// plus the recorded task-loss value and per-term values for logging.
#[allow(clippy::too_many_arguments)]
fn stage3_batch_loss(
    t: &mut Tape,
    store: &ParamStore,
    cfg: &RunConfig,
    student: &TaskModel,
    projections: &[Option<TapProjection>],
    samples: &[&Sample],
    teacher: &TeacherCapture,
    ds: &DistillSchedule,
) -> Result<(V, f64, BTreeMap<String, f64>)> {
    let eps = cfg.weights.eps;
    let images = tensor_images(t, samples);
    let (pred, taps) = student.forward_with_taps(t, store, images)?;
    let task = supervised_loss(t, cfg, student.cfg(), &pred, samples, LossRole::Student)?;
    let task_v = t.scalar_value(task);
    let mut components = BTreeMap::new();
    components.insert("task".into(), task_v);
    let mut total = t.scale(task, cfg.weights.alpha);

    if ds.cf == 0.0 {
        // curriculum gate: the distillation terms contribute exactly nothing
        return Ok((total, task_v, components));
    }

    let mut distill: Option<V> = None;
    let add_term = |t: &mut Tape, acc: &mut Option<V>, name: &str, weight: f64, term: V,
                        components: &mut BTreeMap<String, f64>| {
        components.insert(name.to_string(), t.scalar_value(term));
        if weight == 0.0 {
            return;
        }
        let w = t.scale(term, weight);
        *acc = Some(match *acc {
            Some(a) => t.add(a, w),
            None => w,
        });
    };

    match (&pred, cfg.task) {
        (Prediction::Mask(_), Task::Segmentation) | (Prediction::Detections(_), Task::Detection) => {
            let student_taps = taps.select(cfg.tap_depth);
            let teacher_taps: Vec<V> = teacher.taps.iter().map(|c| inject(t, c)).collect();
            let aligned = align_all(t, store, &student_taps, &teacher_taps, projections)?;

            // feature alignment and cosine on the aligned teacher maps
            let falgn = losses::feature_align_mse(
                t,
                store,
                &student_taps,
                &aligned,
                &vec![None; aligned.len()],
            )?;
            add_term(t, &mut distill, "falgn", cfg.weights.gamma, falgn, &mut components);
            let cos = losses::cosine_sim_loss(t, &student_taps, &aligned, eps)?;
            add_term(t, &mut distill, "cossim", cfg.weights.delta, cos, &mut components);

            // batch-contrastive on pooled per-level embeddings
            let mut con_acc: Option<V> = None;
            for (&s, &tt) in student_taps.iter().zip(&teacher_taps) {
                let se = t.global_avg_pool(s);
                let te = t.global_avg_pool(tt);
                let c = losses::contrastive_batch(t, se, te, ds.con_temp, eps)?;
                con_acc = Some(match con_acc {
                    Some(a) => t.add(a, c),
                    None => c,
                });
            }
            let con_sum = con_acc.expect("at least one tap");
            let con = t.scale(con_sum, 1.0 / student_taps.len() as f64);
            add_term(t, &mut distill, "contrastive", ds.beta, con, &mut components);

            if let (Prediction::Detections(out), Some(det_cap)) = (&pred, &teacher.det) {
                // attention transfer on raw maps (energy is channel-agnostic)
                let resized: Vec<V> = student_taps
                    .iter()
                    .zip(&teacher_taps)
                    .map(|(&s, &tt)| {
                        let sd = t.shape(s).dims().to_vec();
                        t.resize_bilinear(tt, sd[2], sd[3])
                    })
                    .collect();
                let att = losses::attention_transfer(t, &student_taps, &resized, eps)?;
                add_term(t, &mut distill, "attention", cfg.weights.eta_att, att, &mut components);

                // head-level distillation over the student's top-k cells
                let k = cfg.student_model.top_k;
                let mut s_logits = Vec::new();
                let mut t_logits = Vec::new();
                let mut s_regions = Vec::new();
                let mut t_regions = Vec::new();
                for (i, _) in samples.iter().enumerate() {
                    let obj_values = t.value(out.objectness[i]).to_vec();
                    let cells = top_k_cells(&obj_values, k.min(obj_values.len()));
                    s_logits.push(t.gather_rows(out.class_logits[i], &cells));
                    s_regions.push(t.gather_rows(out.regions[i], &cells));
                    let (t_cls, t_reg) = &det_cap[i];
                    let t_cls_v = inject(t, t_cls);
                    let t_reg_v = inject(t, t_reg);
                    t_logits.push(t.gather_rows(t_cls_v, &cells));
                    t_regions.push(t.gather_rows(t_reg_v, &cells));
                }
                let s_logits_all = t.concat_rows(&s_logits);
                let t_logits_all = t.concat_rows(&t_logits);
                let ck = losses::cls_kd(t, t_logits_all, s_logits_all, ds.kd_temp)?;
                add_term(t, &mut distill, "cls_kd", cfg.weights.zeta, ck, &mut components);
                let s_regions_all = t.concat_rows(&s_regions);
                let t_regions_all = t.concat_rows(&t_regions);
                let rk = losses::roi_kd(t, t_regions_all, s_regions_all)?;
                add_term(t, &mut distill, "roi_kd", cfg.weights.rho_roi, rk, &mut components);
            }
        }
        (Prediction::Logits { embed_taps, logits }, Task::Classification) => {
            // pair the selected teacher fusion-attention blocks with the
            // student's last k embedding blocks
            let k = cfg.cls_distill.k;
            let fa = &teacher.fa_taps;
            let teacher_sel: Vec<&Captured> = match cfg.cls_distill.mode {
                ClsDistillMode::EarlyK => fa.iter().take(k).collect(),
                ClsDistillMode::LateK => fa.iter().skip(fa.len() - k).collect(),
            };
            let student_sel: Vec<V> = embed_taps[embed_taps.len() - k..].to_vec();

            // treat [n, d] vectors as [n, d, 1, 1] maps so the shared
            // projection machinery applies
            let as_map = |t: &mut Tape, v: V| -> V {
                let d = t.shape(v).dims().to_vec();
                t.reshape(v, Shape(vec![d[0], d[1], 1, 1]))
            };
            let student_maps: Vec<V> = student_sel.iter().map(|&v| as_map(t, v)).collect();
            let teacher_maps: Vec<V> = teacher_sel
                .iter()
                .map(|c| {
                    let v = inject(t, c);
                    as_map(t, v)
                })
                .collect();
            let aligned = align_all(t, store, &student_maps, &teacher_maps, projections)?;
            let falgn = losses::feature_align_mse(
                t,
                store,
                &student_maps,
                &aligned,
                &vec![None; aligned.len()],
            )?;
            add_term(t, &mut distill, "falgn", cfg.weights.gamma, falgn, &mut components);
            let cos = losses::cosine_sim_loss(t, &student_maps, &aligned, eps)?;
            add_term(t, &mut distill, "cossim", cfg.weights.delta, cos, &mut components);

            let t_logits = inject(t, teacher.logits.as_ref().expect("cls teacher logits"));
            let kd = losses::kld_distill(t, t_logits, *logits, ds.kd_temp)?;
            add_term(t, &mut distill, "kld", cfg.weights.kappa, kd, &mut components);
        }
        _ => unreachable!("prediction kind matches task"),
    }

    if let Some(d) = distill {
        let gated = t.scale(d, ds.cf);
        total = t.add(total, gated);
    }
    Ok((total, task_v, components))
}

/// Align every teacher tap to its student tap (bilinear resize + optional
/// per-level projection).
fn align_all(
    t: &mut Tape,
    store: &ParamStore,
    student_taps: &[V],
    teacher_taps: &[V],
    projections: &[Option<TapProjection>],
) -> Result<Vec<V>> {
    let mut out = Vec::with_capacity(teacher_taps.len());
    for (li, (&s, &tt)) in student_taps.iter().zip(teacher_taps).enumerate() {
        let s_shape = t.shape(s).dims().to_vec();
        let proj = projections.get(li).and_then(|p| p.as_ref());
        out.push(losses::align_teacher_tap(t, store, tt, &s_shape, proj)?);
    }
    Ok(out)
}

/// Build the per-level teacher-to-student projections needed by the
/// configured tap pairing; `None` at levels whose channel counts match.
fn build_projections(
    cfg: &RunConfig,
    store: &mut ParamStore,
    rng_seed: u64,
) -> Vec<Option<TapProjection>> {
    use rand::SeedableRng as _;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(rng_seed);
    let pairs: Vec<(usize, usize)> = match cfg.task {
        Task::Segmentation | Task::Detection => {
            let t_ch = tap_channels(&cfg.teacher_model, cfg.tap_depth);
            let s_ch = tap_channels(&cfg.student_model, cfg.tap_depth);
            t_ch.into_iter().zip(s_ch).collect()
        }
        Task::Classification => (0..cfg.cls_distill.k)
            .map(|_| (cfg.fusion.joint_ch, cfg.student_model.emb_dim))
            .collect(),
    };
    pairs
        .iter()
        .enumerate()
        .map(|(l, &(t_ch, s_ch))| {
            (t_ch != s_ch).then(|| TapProjection::new(store, &format!("proj.l{l}"), t_ch, s_ch, &mut rng))
        })
        .collect()
}

fn tap_channels(cfg: &ModelConfig, depth: TapDepth) -> Vec<usize> {
    match depth {
        TapDepth::Encoder => cfg.encoder.channels.clone(),
        TapDepth::Bottleneck => vec![cfg.encoder.bottleneck_channels],
        TapDepth::Both => {
            let mut v = cfg.encoder.channels.clone();
            v.push(cfg.encoder.bottleneck_channels);
            v
        }
    }
}

/// Stage 3: distill the frozen joint teacher into a fresh student.
pub fn stage3_distill(
    cfg: &RunConfig,
    target: &DomainData,
    teacher_ckpts: &[PathBuf],
    joint_ckpt: &Path,
    ckpt_path: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if !joint_ckpt.exists() {
        return Err(Error::MissingPrerequisite(format!(
            "joint checkpoint {}",
            joint_ckpt.display()
        )));
    }
    let mut store = ParamStore::new();
    let (joint, teacher_hashes) = load_joint_teacher(cfg, teacher_ckpts, &mut store)?;
    let joint_trainables = joint.trainable_param_ids();
    let meta = checkpoint::load(
        joint_ckpt,
        &joint.model_cfg.config_hash(cfg.task),
        &mut store,
        &joint_trainables,
    )?;
    if meta.teacher_hashes != teacher_hashes {
        return Err(Error::Checkpoint {
            path: joint_ckpt.to_path_buf(),
            reason: "teacher checkpoint hashes do not match the joint checkpoint".into(),
        });
    }
    // the whole joint teacher is frozen during distillation
    for id in &joint_trainables {
        store.set_frozen(*id, true);
    }
    let frozen_ids: Vec<ParamId> = {
        let mut v = joint.frozen_param_ids();
        v.extend(joint_trainables.iter().copied());
        v
    };
    let frozen_before = fingerprint(&store, &frozen_ids);

    let student = TaskModel::new(
        cfg.task,
        &cfg.student_model,
        &mut store,
        mix_seed(cfg.seed, 0x57),
    )?;
    let projections = build_projections(cfg, &mut store, mix_seed(cfg.seed, 0x58));
    let mut trainables = student.all_param_ids();
    for p in projections.iter().flatten() {
        trainables.extend(p.param_ids());
    }

    let max_epochs = cfg.optim.student_epochs();
    let mut plateau = Plateau::new(cfg.optim.lr_patience, cfg.optim.lr_reduce_factor);
    let mut best_snapshot = snapshot(&store, &trainables);
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..max_epochs {
        epochs_run = epoch + 1;
        let lr = cfg.optim.lr_student * plateau.lr_scale;
        let ds = DistillSchedule::at_epoch(cfg, epoch);
        let batches = epoch_batches(
            &target.split.train,
            cfg.optim.batch,
            mix_seed(cfg.seed, 0x3000),
            epoch,
        );
        let mut epoch_total = 0.0;
        let mut epoch_task = 0.0;
        let mut epoch_components: BTreeMap<String, f64> = BTreeMap::new();
        for batch in &batches {
            let samples = target.gather(batch);
            let teacher_cap = capture_teacher(cfg, &joint, &store, &samples)?;
            let mut t = Tape::new();
            let (total, task_v, components) = stage3_batch_loss(
                &mut t,
                &store,
                cfg,
                &student,
                &projections,
                &samples,
                &teacher_cap,
                &ds,
            )?;
            let total_v = t.scalar_value(total);
            check_finite(total_v, epoch)?;
            epoch_total += total_v;
            epoch_task += task_v;
            for (k, v) in components {
                *epoch_components.entry(k).or_insert(0.0) += v;
            }
            store.zero_grads();
            t.backward(total, &mut store);
            if let Some(clip) = cfg.optim.grad_clip {
                store.clip_grad_norm(&trainables, clip);
            }
            store.sgd_step(&trainables, lr, cfg.optim.momentum);
        }
        let nb = batches.len().max(1) as f64;
        epoch_components.values_mut().for_each(|v| *v /= nb);

        let val = eval_loss(cfg, &student, &store, target, &target.split.val, LossRole::Student)?;
        check_finite(val, epoch)?;
        let (improved, stop) = plateau.observe(epoch, val);
        if improved {
            best_snapshot = snapshot(&store, &trainables);
        }
        let mut schedule = BTreeMap::new();
        schedule.insert("cf".into(), ds.cf);
        schedule.insert("beta".into(), ds.beta);
        schedule.insert("con_temp".into(), ds.con_temp);
        log.push(EpochLog {
            epoch,
            lr,
            total_loss: epoch_total / nb,
            task_loss: epoch_task / nb,
            val_loss: val,
            schedule,
            components: epoch_components,
        });
        if stop {
            break;
        }
    }

    debug_assert_eq!(frozen_before, fingerprint(&store, &frozen_ids), "teacher moved");
    restore(&mut store, &trainables, &best_snapshot);
    checkpoint::round_params_to_f32(&mut store, &trainables);
    let final_val = eval_loss(cfg, &student, &store, target, &target.split.val, LossRole::Student)?;
    let save_ids = student.all_param_ids();
    let meta = CheckpointMeta {
        config_hash: cfg.student_model.config_hash(cfg.task),
        task: cfg.task,
        stage: "student".to_string(),
        epoch: plateau.best_epoch,
        seed: cfg.seed,
        val_loss: final_val,
        teacher_hashes,
    };
    checkpoint::save(ckpt_path, &meta, &store, &save_ids)?;
    Ok(TrainSummary {
        epochs_run,
        best_epoch: plateau.best_epoch,
        best_val: final_val,
        log,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

/// The dataset-specific baseline: the student architecture trained from
/// scratch on the target domain alone.
pub fn train_baseline(cfg: &RunConfig, target: &DomainData, ckpt_path: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let model = TaskModel::new(
        cfg.task,
        &cfg.student_model,
        &mut store,
        mix_seed(cfg.seed, 0x57),
    )?;
    train_supervised(
        cfg,
        &model,
        &mut store,
        target,
        cfg.optim.lr_student,
        LossRole::Student,
        "baseline",
        ckpt_path,
    )
}

// ---------------------------------------------------------------------------
// Multi-head baseline
// ---------------------------------------------------------------------------

enum MhHead {
    Seg(crate::nets::SegDecoder),
    Cls(crate::nets::ClsHead),
    Det(crate::nets::DetHead),
}

/// Shared backbone with one task head per dataset, trained round-robin
/// with accumulated losses.
pub struct MultiHeadModel {
    encoder: crate::nets::Encoder,
    heads: Vec<MhHead>,
    pub cfg: ModelConfig,
    task: Task,
}

impl MultiHeadModel {
    pub fn new(
        task: Task,
        cfg: &ModelConfig,
        n_datasets: usize,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        use rand::SeedableRng as _;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let encoder = crate::nets::Encoder::new("mh", &cfg.encoder, store, &mut rng);
        let heads = (0..n_datasets)
            .map(|d| match task {
                Task::Segmentation => MhHead::Seg(crate::nets::SegDecoder::new(
                    &format!("mh.d{d}"),
                    &cfg.encoder,
                    store,
                    &mut rng,
                )),
                Task::Classification => MhHead::Cls(crate::nets::ClsHead::new(
                    &format!("mh.d{d}"),
                    cfg.encoder.bottleneck_channels,
                    cfg.emb_dim,
                    cfg.embed_blocks,
                    cfg.num_classes,
                    store,
                    &mut rng,
                )),
                Task::Detection => MhHead::Det(crate::nets::DetHead::new(
                    &format!("mh.d{d}"),
                    cfg.encoder.bottleneck_channels,
                    cfg.num_classes,
                    cfg.region_dim,
                    store,
                    &mut rng,
                )),
            })
            .collect();
        Ok(MultiHeadModel {
            encoder,
            heads,
            cfg: cfg.clone(),
            task,
        })
    }

    pub fn forward_head(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        images: V,
        dataset: usize,
    ) -> Prediction {
        let taps = self.encoder.forward(t, store, images);
        match &self.heads[dataset] {
            MhHead::Seg(dec) => Prediction::Mask(dec.forward(t, store, &taps)),
            MhHead::Cls(head) => {
                let pooled = t.global_avg_pool(taps.bottleneck);
                let (logits, embed_taps) = head.forward(t, store, pooled);
                Prediction::Logits { logits, embed_taps }
            }
            MhHead::Det(head) => Prediction::Detections(head.forward(t, store, taps.bottleneck)),
        }
    }

    pub fn backbone_param_ids(&self) -> Vec<ParamId> {
        self.encoder.param_ids()
    }

    pub fn head_param_ids(&self, dataset: usize) -> Vec<ParamId> {
        match &self.heads[dataset] {
            MhHead::Seg(d) => d.param_ids(),
            MhHead::Cls(h) => h.param_ids(),
            MhHead::Det(h) => h.param_ids(),
        }
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.backbone_param_ids();
        for d in 0..self.heads.len() {
            ids.extend(self.head_param_ids(d));
        }
        ids
    }

    pub fn task(&self) -> Task {
        self.task
    }
}

/// Multi-head baseline over a dataset group; `domains[0]` is the target.
/// Per meta-step every dataset contributes exactly one batch, the losses
/// are accumulated, and one update is applied.
pub fn train_multihead(
    cfg: &RunConfig,
    domains: &[DomainData],
    ckpt_path: &Path,
) -> Result<TrainSummary> {
    cfg.validate()?;
    if domains.is_empty() {
        return Err(Error::validation("domains", "multi-head training needs >= 1 dataset"));
    }
    if domains.len() == 1 {
        log::warn!("multi-head training with a single dataset reduces to the plain baseline");
    }
    let mut store = ParamStore::new();
    let model = MultiHeadModel::new(
        cfg.task,
        &cfg.student_model,
        domains.len(),
        &mut store,
        mix_seed(cfg.seed, 0x39),
    )?;
    let trainables = model.all_param_ids();

    let max_epochs = cfg.optim.student_epochs();
    let mut plateau = Plateau::new(cfg.optim.lr_patience, cfg.optim.lr_reduce_factor);
    let mut best_snapshot = snapshot(&store, &trainables);
    let mut log = Vec::new();
    let mut epochs_run = 0;

    for epoch in 0..max_epochs {
        epochs_run = epoch + 1;
        let lr = cfg.optim.lr_student * plateau.lr_scale;
        let per_dataset: Vec<Vec<Vec<usize>>> = domains
            .iter()
            .enumerate()
            .map(|(d, dom)| {
                epoch_batches(
                    &dom.split.train,
                    cfg.optim.batch,
                    mix_seed(cfg.seed, 0x4000 + d as u64),
                    epoch,
                )
            })
            .collect();
        let meta_steps = per_dataset.iter().map(|b| b.len()).max().unwrap_or(0);
        let mut epoch_loss = 0.0;
        for ms in 0..meta_steps {
            let mut t = Tape::new();
            let mut acc: Option<V> = None;
            for (d, dom) in domains.iter().enumerate() {
                let batches = &per_dataset[d];
                let batch = &batches[ms % batches.len()];
                let samples = dom.gather(batch);
                let images = tensor_images(&mut t, &samples);
                let pred = model.forward_head(&mut t, &store, images, d);
                let loss = supervised_loss(&mut t, cfg, &model.cfg, &pred, &samples, LossRole::Student)?;
                acc = Some(match acc {
                    Some(a) => t.add(a, loss),
                    None => loss,
                });
            }
            let total = acc.expect("at least one dataset");
            let total_v = t.scalar_value(total);
            check_finite(total_v, epoch)?;
            epoch_loss += total_v;
            store.zero_grads();
            t.backward(total, &mut store);
            if let Some(clip) = cfg.optim.grad_clip {
                store.clip_grad_norm(&trainables, clip);
            }
            store.sgd_step(&trainables, lr, cfg.optim.momentum);
        }

        // validation on the target dataset through the target head
        let val = eval_multihead_loss(cfg, &model, &store, &domains[0], &domains[0].split.val, 0)?;
        check_finite(val, epoch)?;
        let (improved, stop) = plateau.observe(epoch, val);
        if improved {
            best_snapshot = snapshot(&store, &trainables);
        }
        log.push(EpochLog {
            epoch,
            lr,
            total_loss: epoch_loss / meta_steps.max(1) as f64,
            task_loss: epoch_loss / meta_steps.max(1) as f64,
            val_loss: val,
            schedule: BTreeMap::new(),
            components: BTreeMap::new(),
        });
        if stop {
            break;
        }
    }

    restore(&mut store, &trainables, &best_snapshot);
    checkpoint::round_params_to_f32(&mut store, &trainables);
    let final_val = eval_multihead_loss(cfg, &model, &store, &domains[0], &domains[0].split.val, 0)?;
    let meta = CheckpointMeta {
        config_hash: cfg.student_model.config_hash(cfg.task),
        task: cfg.task,
        stage: format!("multihead-{}", domains.len()),
        epoch: plateau.best_epoch,
        seed: cfg.seed,
        val_loss: final_val,
        teacher_hashes: vec![],
    };
    checkpoint::save(ckpt_path, &meta, &store, &trainables)?;
    Ok(TrainSummary {
        epochs_run,
        best_epoch: plateau.best_epoch,
        best_val: final_val,
        log,
        checkpoint: ckpt_path.to_path_buf(),
    })
}

fn eval_multihead_loss(
    cfg: &RunConfig,
    model: &MultiHeadModel,
    store: &ParamStore,
    data: &DomainData,
    idx: &[usize],
    dataset: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in idx.chunks(cfg.optim.batch) {
        let samples = data.gather(chunk);
        let mut t = Tape::new();
        let images = tensor_images(&mut t, &samples);
        let pred = model.forward_head(&mut t, store, images, dataset);
        let loss = supervised_loss(&mut t, cfg, &model.cfg, &pred, &samples, LossRole::Student)?;
        total += t.scalar_value(loss) * samples.len() as f64;
        count += samples.len();
    }
    Ok(total / count.max(1) as f64)
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluate any forward function over a split, producing metric rows in
/// reporting units (ratio metrics x100, HD95 in pixels).
pub fn evaluate_forward<F>(
    batch: usize,
    data: &DomainData,
    idx: &[usize],
    image_size: usize,
    num_classes: usize,
    mut forward: F,
) -> Result<Vec<(String, f64)>>
where
    F: FnMut(&mut Tape, V) -> Result<Prediction>,
{
    let task = data.spec.task;
    match task {
        Task::Segmentation => {
            let mut iou = 0.0;
            let mut dsc = 0.0;
            let mut precision = 0.0;
            let mut recall = 0.0;
            let mut hd_sum = 0.0;
            let mut hd_count = 0usize;
            let mut n = 0usize;
            for chunk in idx.chunks(batch) {
                let samples = data.gather(chunk);
                let mut t = Tape::new();
                let images = tensor_images(&mut t, &samples);
                let pred = forward(&mut t, images)?;
                let probs = match pred {
                    Prediction::Mask(p) => t.value(p).to_vec(),
                    _ => return Err(Error::Other("expected mask prediction".into())),
                };
                let px = image_size * image_size;
                for (i, s) in samples.iter().enumerate() {
                    let mask = threshold_mask(&probs[i * px..(i + 1) * px]);
                    let gt = s.mask().expect("segmentation sample");
                    let m = metrics::seg_overlap(&mask, &gt)?;
                    iou += m.iou;
                    dsc += m.dsc;
                    precision += m.precision;
                    recall += m.recall;
                    if let Some(h) = metrics::hd95(&mask, &gt, image_size) {
                        hd_sum += h;
                        hd_count += 1;
                    }
                    n += 1;
                }
            }
            let n = n.max(1) as f64;
            let mut out = vec![
                ("iou".to_string(), 100.0 * iou / n),
                ("dsc".to_string(), 100.0 * dsc / n),
                ("precision".to_string(), 100.0 * precision / n),
                ("recall".to_string(), 100.0 * recall / n),
            ];
            if hd_count > 0 {
                out.push(("hd95".to_string(), hd_sum / hd_count as f64));
            }
            out.push(("hd95_defined".to_string(), hd_count as f64));
            Ok(out)
        }
        Task::Classification => {
            let mut pred_labels = Vec::with_capacity(idx.len());
            let mut gt_labels = Vec::with_capacity(idx.len());
            for chunk in idx.chunks(batch) {
                let samples = data.gather(chunk);
                let mut t = Tape::new();
                let images = tensor_images(&mut t, &samples);
                let pred = forward(&mut t, images)?;
                let logits = match pred {
                    Prediction::Logits { logits, .. } => t.value(logits).to_vec(),
                    _ => return Err(Error::Other("expected logits".into())),
                };
                let c = num_classes;
                for (i, s) in samples.iter().enumerate() {
                    let row = &logits[i * c..(i + 1) * c];
                    let best = row
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                        .map(|(k, _)| k)
                        .unwrap_or(0);
                    pred_labels.push(best);
                    gt_labels.push(s.label().expect("classification sample"));
                }
            }
            let acc = accuracy(&pred_labels, &gt_labels)?;
            Ok(vec![("accuracy".to_string(), 100.0 * acc)])
        }
        Task::Detection => {
            let mut dets: Vec<Detection> = Vec::new();
            let mut gts: Vec<GroundTruth> = Vec::new();
            let mut image_id = 0usize;
            for chunk in idx.chunks(batch) {
                let samples = data.gather(chunk);
                let mut t = Tape::new();
                let images = tensor_images(&mut t, &samples);
                let pred = forward(&mut t, images)?;
                let out = match pred {
                    Prediction::Detections(o) => o,
                    _ => return Err(Error::Other("expected detections".into())),
                };
                for (i, s) in samples.iter().enumerate() {
                    for b in s.boxes().expect("detection sample") {
                        gts.push(GroundTruth {
                            image: image_id,
                            bbox: [b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64],
                            label: b.label,
                        });
                    }
                    let image_dets =
                        decode_detections(&mut t, &out, i, image_id, image_size, num_classes);
                    dets.extend(image_dets);
                    image_id += 1;
                }
            }
            let (map50, map5095) = map_range(&dets, &gts, num_classes);
            Ok(vec![
                ("map50".to_string(), 100.0 * map50),
                ("map5095".to_string(), 100.0 * map5095),
            ])
        }
    }
}

/// Decode one image's head outputs into scored, NMS-filtered detections.
/// Cell score is `sigmoid(objectness) * max softmax class probability`;
/// detections below 0.01 are dropped and at most 10 survive per image.
fn decode_detections(
    t: &mut Tape,
    out: &crate::nets::DetHeadOut,
    i: usize,
    image_id: usize,
    image_size: usize,
    num_classes: usize,
) -> Vec<Detection> {
    let grid = out.grid;
    let cells = grid * grid;
    let (x1, y1, x2, y2) = decode_boxes(t, out.offsets[i], grid, image_size);
    let obj = t.value(out.objectness[i]).to_vec();
    let cls = t.value(out.class_logits[i]).to_vec();
    let (x1, y1, x2, y2) = (
        t.value(x1).to_vec(),
        t.value(y1).to_vec(),
        t.value(x2).to_vec(),
        t.value(y2).to_vec(),
    );
    let mut dets = Vec::with_capacity(cells);
    for c in 0..cells {
        let obj_p = 1.0 / (1.0 + (-obj[c]).exp());
        let row = &cls[c * num_classes..(c + 1) * num_classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        let (label, p_cls) = exps
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
            .map(|(k, &e)| (k, e / z))
            .unwrap_or((0, 0.0));
        let score = obj_p * p_cls;
        if score < 0.01 {
            continue;
        }
        let bx1 = x1[c].clamp(0.0, image_size as f64);
        let by1 = y1[c].clamp(0.0, image_size as f64);
        let bx2 = x2[c].clamp(0.0, image_size as f64);
        let by2 = y2[c].clamp(0.0, image_size as f64);
        if bx2 <= bx1 || by2 <= by1 {
            continue;
        }
        dets.push(Detection {
            image: image_id,
            bbox: [bx1, by1, bx2, by2],
            score,
            label,
        });
    }
    let kept = metrics::nms(&dets, 0.5);
    kept.into_iter().take(10).map(|k| dets[k]).collect()
}

/// Evaluate a checkpointed task model on a split and append report rows.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_checkpoint(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    ckpt: &Path,
    data: &DomainData,
    idx: &[usize],
    tag: ModelTag,
    report: &mut MetricsReport,
) -> Result<()> {
    let mut store = ParamStore::new();
    let model = TaskModel::new(cfg.task, model_cfg, &mut store, 0)?;
    let ids = model.all_param_ids();
    checkpoint::load(ckpt, &model_cfg.config_hash(cfg.task), &mut store, &ids)?;
    let rows = evaluate_forward(
        cfg.optim.batch,
        data,
        idx,
        model_cfg.image_size,
        model_cfg.num_classes,
        |t, images| model.forward_with_taps(t, &store, images).map(|(p, _)| p),
    )?;
    for (metric, value) in rows {
        report.push(tag, &data.spec.name, &metric, value, cfg.seed);
    }
    Ok(())
}

/// Evaluate the joint teacher (teachers + fusion + head from checkpoints).
pub fn evaluate_joint(
    cfg: &RunConfig,
    teacher_ckpts: &[PathBuf],
    joint_ckpt: &Path,
    data: &DomainData,
    idx: &[usize],
    report: &mut MetricsReport,
) -> Result<()> {
    let mut store = ParamStore::new();
    let (joint, hashes) = load_joint_teacher(cfg, teacher_ckpts, &mut store)?;
    let trainables = joint.trainable_param_ids();
    let meta = checkpoint::load(
        joint_ckpt,
        &joint.model_cfg.config_hash(cfg.task),
        &mut store,
        &trainables,
    )?;
    if meta.teacher_hashes != hashes {
        return Err(Error::Checkpoint {
            path: joint_ckpt.to_path_buf(),
            reason: "teacher checkpoint hashes do not match the joint checkpoint".into(),
        });
    }
    let rows = evaluate_forward(
        cfg.optim.batch,
        data,
        idx,
        joint.model_cfg.image_size,
        joint.model_cfg.num_classes,
        |t, images| joint.forward(t, &store, images).map(|f| f.prediction),
    )?;
    for (metric, value) in rows {
        report.push(ModelTag::JointTeacher, &data.spec.name, &metric, value, cfg.seed);
    }
    Ok(())
}

/// Evaluate the multi-head baseline's target head.
pub fn evaluate_multihead(
    cfg: &RunConfig,
    ckpt: &Path,
    n_datasets: usize,
    data: &DomainData,
    idx: &[usize],
    report: &mut MetricsReport,
) -> Result<()> {
    let mut store = ParamStore::new();
    let model = MultiHeadModel::new(cfg.task, &cfg.student_model, n_datasets, &mut store, 0)?;
    let ids = model.all_param_ids();
    checkpoint::load(ckpt, &cfg.student_model.config_hash(cfg.task), &mut store, &ids)?;
    let rows = evaluate_forward(
        cfg.optim.batch,
        data,
        idx,
        cfg.student_model.image_size,
        cfg.student_model.num_classes,
        |t, images| Ok(model.forward_head(t, &store, images, 0)),
    )?;
    for (metric, value) in rows {
        report.push(ModelTag::MultiHead, &data.spec.name, &metric, value, cfg.seed);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Embedding export
// ---------------------------------------------------------------------------

/// Export per-item/region/pixel embeddings with labels as CSV
/// (`e0,...,e{d-1},label`), for offline projection analysis.
///
/// - classification: one row per sample (last embedding block), label =
///   class index;
/// - segmentation: up to 8 foreground and 8 background bottleneck cells per
///   image in row-major order, labeled by the downsampled ground-truth mask;
/// - detection: the top-k region embeddings per image, labeled `fg` when
///   the decoded box overlaps a ground-truth box at IoU >= 0.5.
pub fn export_embeddings(
    cfg: &RunConfig,
    model_cfg: &ModelConfig,
    ckpt: &Path,
    data: &DomainData,
    idx: &[usize],
    tap_depth: TapDepth,
    out_path: &Path,
) -> Result<usize> {
    let mut store = ParamStore::new();
    let model = TaskModel::new(cfg.task, model_cfg, &mut store, 0)?;
    let ids = model.all_param_ids();
    checkpoint::load(ckpt, &model_cfg.config_hash(cfg.task), &mut store, &ids)?;

    let mut rows: Vec<(Vec<f64>, String)> = Vec::new();
    for chunk in idx.chunks(cfg.optim.batch) {
        let samples = data.gather(chunk);
        let mut t = Tape::new();
        let images = tensor_images(&mut t, &samples);
        let (pred, taps) = model.forward_with_taps(&mut t, &store, images)?;
        match &pred {
            Prediction::Logits { embed_taps, .. } => {
                let last = *embed_taps.last().expect("embed blocks");
                let vals = t.value(last).to_vec();
                let d = t.shape(last).dims()[1];
                for (i, s) in samples.iter().enumerate() {
                    rows.push((
                        vals[i * d..(i + 1) * d].to_vec(),
                        s.label().expect("classification sample").to_string(),
                    ));
                }
            }
            Prediction::Mask(_) => {
                // pixel embeddings from the selected tap (bottleneck by
                // default), labeled via the downsampled ground-truth mask
                let tap = match tap_depth {
                    TapDepth::Encoder => taps.per_level[0],
                    _ => taps.bottleneck,
                };
                let dims = t.shape(tap).dims().to_vec();
                let (c, g) = (dims[1], dims[2]);
                let vals = t.value(tap).to_vec();
                let factor = model_cfg.image_size / g;
                for (i, s) in samples.iter().enumerate() {
                    let gt = s.mask().expect("segmentation sample");
                    let mut fg_left = 8usize;
                    let mut bg_left = 8usize;
                    for cy in 0..g {
                        for cx in 0..g {
                            // majority label of the cell's pixel block
                            let mut fg_px = 0usize;
                            for py in cy * factor..(cy + 1) * factor {
                                for px in cx * factor..(cx + 1) * factor {
                                    fg_px += gt[py * model_cfg.image_size + px] as usize;
                                }
                            }
                            let is_fg = 2 * fg_px >= factor * factor;
                            let budget = if is_fg { &mut fg_left } else { &mut bg_left };
                            if *budget == 0 {
                                continue;
                            }
                            *budget -= 1;
                            let mut e = Vec::with_capacity(c);
                            for ch in 0..c {
                                e.push(vals[((i * c + ch) * g + cy) * g + cx]);
                            }
                            rows.push((e, if is_fg { "fg".into() } else { "bg".into() }));
                        }
                    }
                }
            }
            Prediction::Detections(out) => {
                for (i, s) in samples.iter().enumerate() {
                    let obj = t.value(out.objectness[i]).to_vec();
                    let cells = top_k_cells(&obj, model_cfg.top_k.min(obj.len()));
                    let regions = t.gather_rows(out.regions[i], &cells);
                    let (x1, y1, x2, y2) =
                        decode_boxes(&mut t, out.offsets[i], out.grid, model_cfg.image_size);
                    let d = model_cfg.region_dim;
                    let reg_vals = t.value(regions).to_vec();
                    let gt_boxes: Vec<[f64; 4]> = s
                        .boxes()
                        .expect("detection sample")
                        .iter()
                        .map(|b| [b.x_min as f64, b.y_min as f64, b.x_max as f64, b.y_max as f64])
                        .collect();
                    for (r, &cell) in cells.iter().enumerate() {
                        let bb = [
                            t.value(x1)[cell],
                            t.value(y1)[cell],
                            t.value(x2)[cell],
                            t.value(y2)[cell],
                        ];
                        let matched = gt_boxes.iter().any(|g| crate::losses::box_iou(&bb, g) >= 0.5);
                        rows.push((
                            reg_vals[r * d..(r + 1) * d].to_vec(),
                            if matched { "fg".into() } else { "bg".into() },
                        ));
                    }
                }
            }
        }
    }

    let mut text = String::new();
    for (e, label) in &rows {
        for v in e {
            text.push_str(&metrics::format_value(*v));
            text.push(',');
        }
        text.push_str(label);
        text.push('\n');
    }
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(out_path, text).map_err(|e| Error::io(out_path, e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::EncoderConfig;
    use crate::synthdata::ShapeFamily;

    fn tiny_spec(name: &str, task: Task, seed: u64, fg: f64) -> DomainSpec {
        DomainSpec {
            name: name.into(),
            task,
            image_size: 16,
            shape_family: ShapeFamily::Ellipse,
            fg_mean: fg,
            fg_std: 0.05,
            bg_noise_std: 0.05,
            blur_sigma: 0.4,
            num_classes: 2,
            max_objects: 1,
            seed,
        }
    }

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                levels: 2,
                channels: vec![4, 8],
                bottleneck_channels: 8,
            },
            image_size: 16,
            num_classes: 2,
            emb_dim: 8,
            embed_blocks: 3,
            region_dim: 8,
            top_k: 3,
        }
    }

    fn tiny_cfg(task: Task) -> RunConfig {
        let target = tiny_spec("target", task, 10, 0.8);
        let sources = vec![tiny_spec("source-a", task, 20, 0.6)];
        let mut cfg = RunConfig::defaults_for(task, target, sources);
        cfg.samples_per_domain = 24;
        cfg.teacher_model = tiny_model();
        cfg.student_model = tiny_model();
        cfg.optim.max_epochs = 2;
        cfg.optim.batch = 8;
        cfg.optim.b1 = 8;
        cfg.optim.b2 = 8;
        cfg.optim.lr_target = 0.05;
        cfg.optim.lr_source = 0.05;
        cfg.optim.lr_joint = 0.05;
        cfg.optim.lr_student = 0.05;
        cfg.fusion.joint_ch = 8;
        cfg
    }

    fn tiny_data(cfg: &RunConfig) -> (DomainData, Vec<DomainData>) {
        let target = DomainData::generate(&cfg.target, cfg.samples_per_domain, cfg.split_ratios).unwrap();
        let sources = cfg
            .sources
            .iter()
            .map(|s| DomainData::generate(s, cfg.samples_per_domain, cfg.split_ratios).unwrap())
            .collect();
        (target, sources)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let mut cfg = tiny_cfg(Task::Segmentation);
        cfg.optim.lr_target = 1e-300; // effectively zero while passing validation
        cfg.optim.max_epochs = 1;
        let (target, _) = tiny_data(&cfg);
        let mut store = ParamStore::new();
        let model = TaskModel::new(cfg.task, &cfg.teacher_model, &mut store, 1).unwrap();
        let before = snapshot(&store, &model.all_param_ids());
        let dir = tempfile::tempdir().unwrap();
        // train with an explicit zero rate through the internal path
        let trainables = model.all_param_ids();
        let batches = epoch_batches(&target.split.train, cfg.optim.batch, 1, 0);
        for batch in &batches {
            let samples = target.gather(batch);
            let mut t = Tape::new();
            let images = tensor_images(&mut t, &samples);
            let (pred, _) = model.forward_with_taps(&mut t, &store, images).unwrap();
            let loss =
                supervised_loss(&mut t, &cfg, model.cfg(), &pred, &samples, LossRole::Teacher)
                    .unwrap();
            store.zero_grads();
            t.backward(loss, &mut store);
            store.sgd_step(&trainables, 0.0, 0.0);
        }
        for (id, snap) in trainables.iter().zip(&before) {
            assert_eq!(store.value(*id), &snap[..]);
        }
        drop(dir);
    }

    #[test]
    fn supervised_training_improves_and_checkpoint_reproduces_val() {
        // loss decreases over the first 5 epochs, median over 3 seeds
        let mut drops = Vec::new();
        let dir = tempfile::tempdir().unwrap();
        for seed in [1u64, 2, 3] {
            let mut cfg = tiny_cfg(Task::Segmentation);
            cfg.seed = seed;
            cfg.optim.max_epochs = 5;
            cfg.optim.lr_target = 0.5;
            let (target, _) = tiny_data(&cfg);
            let ckpt = dir.path().join(format!("teacher-{seed}.ckpt"));
            let summary = stage1_target(&cfg, &target, &ckpt).unwrap();
            let first = summary.log.first().unwrap().total_loss;
            let last = summary.log.last().unwrap().total_loss;
            drops.push(first - last);
        }
        assert!(
            metrics::median(&drops) > 0.0,
            "median loss drop over 3 seeds should be positive: {drops:?}"
        );

        // reload reproduces the recorded validation loss exactly
        let mut cfg = tiny_cfg(Task::Segmentation);
        cfg.seed = 3;
        cfg.optim.max_epochs = 5;
        cfg.optim.lr_target = 0.5;
        let (target, _) = tiny_data(&cfg);
        let ckpt = dir.path().join("teacher-3.ckpt");
        let mut store = ParamStore::new();
        let model = TaskModel::new(cfg.task, &cfg.teacher_model, &mut store, 0).unwrap();
        let ids = model.all_param_ids();
        let meta = checkpoint::load(
            &ckpt,
            &cfg.teacher_model.config_hash(cfg.task),
            &mut store,
            &ids,
        )
        .unwrap();
        let val =
            eval_loss(&cfg, &model, &store, &target, &target.split.val, LossRole::Teacher).unwrap();
        assert_eq!(val.to_bits(), meta.val_loss.to_bits(), "val loss must reproduce exactly");
    }

    /// With the adversarial weight pinned to zero and r = 0, one combined
    /// step equals a plain source-only step for encoder and head.
    #[test]
    fn lambda_zero_r_zero_matches_plain_training_gradients() {
        let mut cfg = tiny_cfg(Task::Segmentation);
        cfg.r_flag = 0;
        let (target, sources) = tiny_data(&cfg);
        let source = &sources[0];

        let build = || {
            let mut store = ParamStore::new();
            let model = TaskModel::new(cfg.task, &cfg.teacher_model, &mut store, 3).unwrap();
            let disc = Discriminator::new(
                cfg.teacher_model.encoder.bottleneck_channels,
                &mut store,
                4,
            );
            (store, model, disc)
        };
        let paired = pair_batches(
            &source.samples,
            &source.split.train,
            &target.samples,
            &target.split.train,
            cfg.optim.b1,
            cfg.optim.b2,
            9,
        )
        .unwrap();
        let pb = &paired[0];

        // combined graph with lambda = 0
        let (mut store_a, model_a, disc_a) = build();
        {
            let all: Vec<&Sample> = pb.source.iter().chain(pb.target.iter()).collect();
            let mut t = Tape::new();
            let images = tensor_images(&mut t, &all);
            let (pred, taps) = model_a.forward_with_taps(&mut t, &store_a, images).unwrap();
            let src_pred = slice_prediction(&mut t, &pred, 0, pb.source.len());
            let src_samples = &all[..pb.source.len()];
            let task = supervised_loss(&mut t, &cfg, model_a.cfg(), &src_pred, src_samples, LossRole::Teacher)
                .unwrap();
            let pooled = pooled_bottleneck(&mut t, &taps);
            let reversed = t.grad_reverse(pooled, 0.0);
            let logit = disc_a.forward(&mut t, &store_a, reversed);
            let prob = t.sigmoid(logit);
            let gt = t.constant(
                pb.domain_labels.iter().map(|&d| d as f64).collect(),
                Shape(vec![pb.domain_labels.len(), 1]),
            );
            let disc_loss = losses::bce_loss(&mut t, prob, gt, 1e-6).unwrap();
            let total = t.add(task, disc_loss);
            store_a.zero_grads();
            t.backward(total, &mut store_a);
        }

        // plain source-only graph
        let (mut store_b, model_b, _disc_b) = build();
        {
            let src_samples: Vec<&Sample> = pb.source.iter().collect();
            let mut t = Tape::new();
            let images = tensor_images(&mut t, &src_samples);
            let (pred, _) = model_b.forward_with_taps(&mut t, &store_b, images).unwrap();
            let task = supervised_loss(&mut t, &cfg, model_b.cfg(), &pred, &src_samples, LossRole::Teacher)
                .unwrap();
            store_b.zero_grads();
            t.backward(task, &mut store_b);
        }

        for (a, b) in model_a.all_param_ids().iter().zip(model_b.all_param_ids().iter()) {
            for (ga, gb) in store_a.grad(*a).iter().zip(store_b.grad(*b)) {
                assert!(
                    (ga - gb).abs() < 1e-12,
                    "encoder/head gradients must match: {ga} vs {gb}"
                );
            }
        }
    }

    /// With r = 1 the target-supervised term strictly increases the task
    /// loss on a batch where the source-trained head errs on target.
    #[test]
    fn r_flag_adds_target_supervision_term() {
        let cfg = tiny_cfg(Task::Segmentation);
        let (target, sources) = tiny_data(&cfg);
        let source = &sources[0];
        let mut store = ParamStore::new();
        let model = TaskModel::new(cfg.task, &cfg.teacher_model, &mut store, 3).unwrap();
        let paired = pair_batches(
            &source.samples,
            &source.split.train,
            &target.samples,
            &target.split.train,
            8,
            8,
            9,
        )
        .unwrap();
        let pb = &paired[0];
        let all: Vec<&Sample> = pb.source.iter().chain(pb.target.iter()).collect();
        let mut t = Tape::new();
        let images = tensor_images(&mut t, &all);
        let (pred, _) = model.forward_with_taps(&mut t, &store, images).unwrap();
        let src_pred = slice_prediction(&mut t, &pred, 0, 8);
        let task_r0 = supervised_loss(&mut t, &cfg, model.cfg(), &src_pred, &all[..8], LossRole::Teacher)
            .unwrap();
        let tgt_pred = slice_prediction(&mut t, &pred, 8, 8);
        let task_tgt = supervised_loss(&mut t, &cfg, model.cfg(), &tgt_pred, &all[8..], LossRole::Teacher)
            .unwrap();
        let r0 = t.scalar_value(task_r0);
        let extra = t.scalar_value(task_tgt);
        assert!(extra > 0.0, "untrained head must err on target");
        assert!(r0 + extra > r0);
    }

    #[test]
    fn early_stopping_halts_within_two_patience() {
        let mut plateau = Plateau::new(3, 0.1);
        // rigged: epoch 0 improves, then never again
        let (_, stop) = plateau.observe(0, 1.0);
        assert!(!stop);
        let mut stopped_at = None;
        for e in 1..20 {
            let (_, stop) = plateau.observe(e, 2.0);
            if stop {
                stopped_at = Some(e);
                break;
            }
        }
        assert_eq!(stopped_at, Some(6), "stop exactly 2 * patience after the best");
        assert!((plateau.lr_scale - 0.1).abs() < 1e-12, "one reduction at patience");
    }

    #[test]
    fn multihead_backbone_gradient_is_sum_of_per_dataset_gradients() {
        let cfg = tiny_cfg(Task::Segmentation);
        let (target, sources) = tiny_data(&cfg);
        let domains = [target, sources.into_iter().next().unwrap()];

        let build = || {
            let mut store = ParamStore::new();
            let model =
                MultiHeadModel::new(cfg.task, &cfg.student_model, 2, &mut store, 5).unwrap();
            (store, model)
        };

        let batch0: Vec<&Sample> = domains[0].gather(&domains[0].split.train[..4]);
        let batch1: Vec<&Sample> = domains[1].gather(&domains[1].split.train[..4]);

        // combined meta-step
        let (mut store_a, model_a) = build();
        {
            let mut t = Tape::new();
            let im0 = tensor_images(&mut t, &batch0);
            let p0 = model_a.forward_head(&mut t, &store_a, im0, 0);
            let l0 = supervised_loss(&mut t, &cfg, &model_a.cfg, &p0, &batch0, LossRole::Student)
                .unwrap();
            let im1 = tensor_images(&mut t, &batch1);
            let p1 = model_a.forward_head(&mut t, &store_a, im1, 1);
            let l1 = supervised_loss(&mut t, &cfg, &model_a.cfg, &p1, &batch1, LossRole::Student)
                .unwrap();
            let total = t.add(l0, l1);
            store_a.zero_grads();
            t.backward(total, &mut store_a);
        }

        // separate per-dataset gradients, summed manually
        let (mut store_b, model_b) = build();
        let mut summed: Vec<Vec<f64>> = model_b
            .backbone_param_ids()
            .iter()
            .map(|&id| vec![0.0; store_b.value(id).len()])
            .collect();
        for (d, batch) in [(0usize, &batch0), (1usize, &batch1)] {
            let mut t = Tape::new();
            let im = tensor_images(&mut t, batch);
            let p = model_b.forward_head(&mut t, &store_b, im, d);
            let l = supervised_loss(&mut t, &cfg, &model_b.cfg, &p, batch, LossRole::Student)
                .unwrap();
            store_b.zero_grads();
            t.backward(l, &mut store_b);
            for (k, &id) in model_b.backbone_param_ids().iter().enumerate() {
                for (s, g) in summed[k].iter_mut().zip(store_b.grad(id)) {
                    *s += g;
                }
            }
        }
        for (k, &id) in model_a.backbone_param_ids().iter().enumerate() {
            for (ga, gs) in store_a.grad(id).iter().zip(&summed[k]) {
                assert!((ga - gs).abs() < 1e-9, "{ga} vs {gs}");
            }
        }
    }

    #[test]
    fn multihead_single_dataset_is_architecturally_the_baseline() {
        let cfg = tiny_cfg(Task::Segmentation);
        let mut store_mh = ParamStore::new();
        let mh = MultiHeadModel::new(cfg.task, &cfg.student_model, 1, &mut store_mh, 5).unwrap();
        let mut store_tm = ParamStore::new();
        let tm = TaskModel::new(cfg.task, &cfg.student_model, &mut store_tm, 5).unwrap();
        assert_eq!(
            store_mh.group_numel(&mh.all_param_ids()),
            store_tm.group_numel(&tm.all_param_ids())
        );
    }

    /// Distillation terms vanish when the teacher capture equals the
    /// student's own outputs.
    #[test]
    fn identical_taps_zero_all_distillation_terms() {
        for task in [Task::Segmentation, Task::Classification, Task::Detection] {
            let mut cfg = tiny_cfg(task);
            cfg.schedule.warmup_epochs = 0;
            cfg.curriculum = CurriculumMode::Constant(1.0);
            let (target, _) = tiny_data(&cfg);
            let mut store = ParamStore::new();
            let student = TaskModel::new(task, &cfg.student_model, &mut store, 3).unwrap();
            let samples = target.gather(&target.split.train[..4]);

            // capture the student itself as the "teacher"
            let capture = {
                let mut t = Tape::new();
                let images = tensor_images(&mut t, &samples);
                let (pred, taps) = student.forward_with_taps(&mut t, &store, images).unwrap();
                let selected = taps.select(cfg.tap_depth);
                let mut cap = TeacherCapture {
                    taps: selected.iter().map(|&v| capture(&t, v)).collect(),
                    logits: None,
                    fa_taps: vec![],
                    det: None,
                };
                match &pred {
                    Prediction::Logits { logits, embed_taps } => {
                        cap.logits = Some(capture(&t, *logits));
                        let k = cfg.cls_distill.k;
                        cap.fa_taps = embed_taps[embed_taps.len() - k..]
                            .iter()
                            .map(|&v| capture(&t, v))
                            .collect();
                    }
                    Prediction::Detections(out) => {
                        let mut per_image = Vec::new();
                        for i in 0..samples.len() {
                            per_image.push((
                                capture(&t, out.class_logits[i]),
                                capture(&t, out.regions[i]),
                            ));
                        }
                        cap.det = Some(per_image);
                    }
                    Prediction::Mask(_) => {}
                }
                cap
            };

            // classification pairing expects k teacher blocks; the student
            // self-capture above already selected the last k
            let mut cls_cfg = cfg.clone();
            if task == Task::Classification {
                cls_cfg.cls_distill.mode = ClsDistillMode::LateK;
                cls_cfg.fusion.fa_blocks = cls_cfg.cls_distill.k;
            }
            let projections = vec![None; 8];
            let ds = DistillSchedule {
                cf: 1.0,
                beta: 0.5,
                con_temp: 1.0,
                kd_temp: 2.0,
            };
            let mut t = Tape::new();
            let (_total, _task, components) = stage3_batch_loss(
                &mut t,
                &store,
                &cls_cfg,
                &student,
                &projections,
                &samples,
                &capture,
                &ds,
            )
            .unwrap();
            for (name, value) in &components {
                if name == "task" {
                    continue;
                }
                // eps-guarded norms leave a residue of order 2*eps/|v|,
                // noticeable when embeddings are small at random init
                assert!(
                    value.abs() < 2e-3,
                    "{task:?}: distillation term {name} should vanish, got {value}"
                );
            }
        }
    }

    /// Curriculum gate: with cf = 0 the recorded total equals
    /// `alpha * task` exactly.
    #[test]
    fn curriculum_gate_is_exact() {
        let mut cfg = tiny_cfg(Task::Segmentation);
        cfg.curriculum = CurriculumMode::Ramp; // warmup 5 covers epoch 0..5
        let (target, _) = tiny_data(&cfg);
        let mut store = ParamStore::new();
        let student = TaskModel::new(cfg.task, &cfg.student_model, &mut store, 3).unwrap();
        let samples = target.gather(&target.split.train[..4]);
        let capture = {
            let mut t = Tape::new();
            let images = tensor_images(&mut t, &samples);
            let (_, taps) = student.forward_with_taps(&mut t, &store, images).unwrap();
            TeacherCapture {
                taps: taps.select(cfg.tap_depth).iter().map(|&v| capture(&t, v)).collect(),
                logits: None,
                fa_taps: vec![],
                det: None,
            }
        };
        let ds = DistillSchedule::at_epoch(&cfg, 2); // inside warmup -> cf = 0
        assert_eq!(ds.cf, 0.0);
        let mut t = Tape::new();
        let (total, task_v, _) = stage3_batch_loss(
            &mut t,
            &store,
            &cfg,
            &student,
            &[None, None, None],
            &samples,
            &capture,
            &ds,
        )
        .unwrap();
        let total_v = t.scalar_value(total);
        assert!(
            (total_v - cfg.weights.alpha * task_v).abs() < 1e-7,
            "{total_v} vs {}",
            cfg.weights.alpha * task_v
        );
    }

    /// A short full pipeline for each task: teachers, joint, student,
    /// baseline; checks the freeze invariant end to end.
    #[test]
    fn full_pipeline_smoke_all_tasks() {
        for task in [Task::Segmentation, Task::Classification, Task::Detection] {
            let mut cfg = tiny_cfg(task);
            cfg.optim.max_epochs = 2;
            let (target, sources) = tiny_data(&cfg);
            let dir = tempfile::tempdir().unwrap();

            let t_ckpt = dir.path().join("teacher.ckpt");
            stage1_target(&cfg, &target, &t_ckpt).unwrap();
            let s_ckpt = dir.path().join("source0.ckpt");
            stage1_source(&cfg, 0, &sources[0], &target, &s_ckpt).unwrap();

            let teacher_ckpts = vec![t_ckpt.clone(), s_ckpt.clone()];
            let teacher_bytes_before: Vec<Vec<u8>> = teacher_ckpts
                .iter()
                .map(|p| std::fs::read(p).unwrap())
                .collect();

            let j_ckpt = dir.path().join("joint.ckpt");
            stage2_joint(&cfg, &target, &teacher_ckpts, &j_ckpt).unwrap();
            let st_ckpt = dir.path().join("student.ckpt");
            stage3_distill(&cfg, &target, &teacher_ckpts, &j_ckpt, &st_ckpt).unwrap();
            let b_ckpt = dir.path().join("baseline.ckpt");
            train_baseline(&cfg, &target, &b_ckpt).unwrap();

            // serialized teacher weights byte-identical after stages 2+3
            for (p, before) in teacher_ckpts.iter().zip(&teacher_bytes_before) {
                assert_eq!(&std::fs::read(p).unwrap(), before, "{task:?}: teacher changed");
            }

            // evaluation produces the expected metric set
            let mut report = MetricsReport::default();
            evaluate_checkpoint(
                &cfg,
                &cfg.student_model,
                &st_ckpt,
                &target,
                &target.split.test,
                ModelTag::Student,
                &mut report,
            )
            .unwrap();
            let expected_metric = match task {
                Task::Segmentation => "iou",
                Task::Classification => "accuracy",
                Task::Detection => "map50",
            };
            assert!(
                report
                    .rows
                    .iter()
                    .any(|r| r.metric == expected_metric),
                "{task:?}: missing {expected_metric}"
            );

            // embedding export writes one row per expected unit
            let out = dir.path().join("emb.csv");
            let n = export_embeddings(
                &cfg,
                &cfg.student_model,
                &st_ckpt,
                &target,
                &target.split.test,
                TapDepth::Bottleneck,
                &out,
            )
            .unwrap();
            assert!(n > 0);
            if task == Task::Classification {
                assert_eq!(n, target.split.test.len());
            }
        }
    }

    #[test]
    fn stage3_requires_joint_checkpoint() {
        let cfg = tiny_cfg(Task::Segmentation);
        let (target, _) = tiny_data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("missing.ckpt");
        let st = dir.path().join("student.ckpt");
        let err = stage3_distill(&cfg, &target, &[missing.clone()], &missing, &st).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
