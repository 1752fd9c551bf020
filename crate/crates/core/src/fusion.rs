//! Joint-teacher construction: frozen per-dataset teachers fused level by
//! level, topped by a freshly trained task head.
//!
//! Teacher 0 is always the target-domain teacher. Frozen teacher parameters
//! are marked in the [`ParamStore`] and never appear in the trainable set.
//!
//! Fusion variants per task:
//! - segmentation: per-level cross-attention (target tokens as queries, all
//!   teachers' tokens as keys/values), channel concat with the target map,
//!   then a zero-initialized residual 1x1 projection;
//! - classification: per-teacher linear adapters into a shared width,
//!   a fusion-attention stack whose block outputs are the distillation
//!   taps, and a new linear classifier;
//! - detection: per-scale channel concat over teachers, 1x1 projection,
//!   instance norm and ReLU, feeding a fresh per-cell detection head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, ParamId, ParamStore, Shape, Tape, V};
use crate::error::{Error, Result};
use crate::nets::{DetHead, FeatureTaps, ModelConfig, Prediction, SegDecoder, TaskModel};
use crate::synthdata::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    SegCrossAttention,
    ClsAdapterStack,
    DetConcatProject,
}

impl FusionMode {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::Segmentation => FusionMode::SegCrossAttention,
            Task::Classification => FusionMode::ClsAdapterStack,
            Task::Detection => FusionMode::DetConcatProject,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Attention heads in cross-attention / fusion-attention blocks.
    pub heads: usize,
    /// Shared embedding width for classification fusion.
    pub joint_ch: usize,
    /// Number of fusion-attention blocks (classification).
    pub fa_blocks: usize,
    /// Shared-weight attention over teachers, permutation-invariant in the
    /// source order. Off switches classification block 1 to a concat+reduce.
    pub symmetric: bool,
    /// Queries for segmentation fusion come from the target teacher.
    pub target_queries: bool,
    /// Zero-initialize output projections so the fused features start as
    /// the target teacher's features.
    pub identity_init: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            heads: 2,
            joint_ch: 32,
            fa_blocks: 3,
            symmetric: true,
            target_queries: true,
            identity_init: true,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self, model_cfg: &ModelConfig, task: Task) -> Result<()> {
        if self.fa_blocks == 0 {
            return Err(Error::validation("fa_blocks", "must be >= 1"));
        }
        if self.heads == 0 {
            return Err(Error::validation("heads", "must be >= 1"));
        }
        match task {
            Task::Segmentation => {
                for (l, &c) in model_cfg.encoder.channels.iter().enumerate() {
                    if c % self.heads != 0 {
                        return Err(Error::validation(
                            "heads",
                            format!("must divide channels[{l}] = {c}"),
                        ));
                    }
                }
                if model_cfg.encoder.bottleneck_channels % self.heads != 0 {
                    return Err(Error::validation("heads", "must divide bottleneck_channels"));
                }
            }
            Task::Classification => {
                if self.joint_ch % self.heads != 0 {
                    return Err(Error::validation("heads", "must divide joint_ch"));
                }
            }
            Task::Detection => {}
        }
        Ok(())
    }
}

struct LinearParams {
    w: ParamId,
    b: ParamId,
}

fn linear(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    zero: bool,
    rng: &mut ChaCha8Rng,
) -> LinearParams {
    let init = if zero {
        Init::Zero
    } else {
        Init::FanInUniform { fan_in: c_in }
    };
    let w = store.add(format!("{name}.w"), Shape(vec![c_out, c_in]), init, rng);
    let b = store.add(format!("{name}.b"), Shape(vec![c_out]), Init::Zero, rng);
    LinearParams { w, b }
}

fn conv1x1(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    zero: bool,
    rng: &mut ChaCha8Rng,
) -> LinearParams {
    let init = if zero {
        Init::Zero
    } else {
        Init::FanInUniform { fan_in: c_in }
    };
    let w = store.add(format!("{name}.w"), Shape(vec![c_out, c_in, 1, 1]), init, rng);
    let b = store.add(format!("{name}.b"), Shape(vec![c_out]), Init::Zero, rng);
    LinearParams { w, b }
}

/// Multi-head attention over row-token matrices, shared across teachers.
struct Attention {
    wq: LinearParams,
    wk: LinearParams,
    wv: LinearParams,
    wo: LinearParams,
    heads: usize,
    dim: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Attention {
            wq: linear(store, &format!("{name}.wq"), dim, dim, false, rng),
            wk: linear(store, &format!("{name}.wk"), dim, dim, false, rng),
            wv: linear(store, &format!("{name}.wv"), dim, dim, false, rng),
            wo: linear(store, &format!("{name}.wo"), dim, dim, false, rng),
            heads,
            dim,
        }
    }

    /// `queries  [q, dim]`, `keys_values [k, dim]` -> `[q, dim]`.
    fn forward(&self, t: &mut Tape, store: &ParamStore, queries: V, keys_values: V) -> V {
        let dh = self.dim / self.heads;
        let q_all = {
            let w = t.param(store, self.wq.w);
            let b = t.param(store, self.wq.b);
            t.linear(queries, w, b)
        };
        let k_all = {
            let w = t.param(store, self.wk.w);
            let b = t.param(store, self.wk.b);
            t.linear(keys_values, w, b)
        };
        let v_all = {
            let w = t.param(store, self.wv.w);
            let b = t.param(store, self.wv.b);
            t.linear(keys_values, w, b)
        };
        let slice_cols = |t: &mut Tape, x: V, h: usize| -> V {
            let xt = t.transpose2d(x);
            let rows: Vec<usize> = (h * dh..(h + 1) * dh).collect();
            let sel = t.gather_rows(xt, &rows);
            t.transpose2d(sel)
        };
        let mut head_outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = slice_cols(t, q_all, h);
            let kh = slice_cols(t, k_all, h);
            let vh = slice_cols(t, v_all, h);
            let scores = t.matmul_nt(qh, kh);
            let scaled = t.scale(scores, 1.0 / (dh as f64).sqrt());
            let weights = t.softmax_rows(scaled);
            head_outs.push(t.matmul(weights, vh));
        }
        let cat = t.concat_axis1(&head_outs);
        let w = t.param(store, self.wo.w);
        let b = t.param(store, self.wo.b);
        t.linear(cat, w, b)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.wq.w, self.wq.b, self.wk.w, self.wk.b, self.wv.w, self.wv.b, self.wo.w,
            self.wo.b,
        ]
    }
}

/// One level of segmentation fusion: cross-attention over teacher tokens,
/// channel concat with the target map, residual 1x1 projection.
struct SegLevelFusion {
    attn: Attention,
    proj: LinearParams,
    channels: usize,
}

impl SegLevelFusion {
    fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cfg: &FusionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        SegLevelFusion {
            attn: Attention::new(store, &format!("{name}.attn"), channels, cfg.heads, rng),
            proj: conv1x1(store, &format!("{name}.proj"), 2 * channels, channels, cfg.identity_init, rng),
            channels,
        }
    }

    /// `maps[0]` is the target teacher's map; all maps share `[n, c, h, w]`.
    fn forward(&self, t: &mut Tape, store: &ParamStore, maps: &[V]) -> V {
        let dims = t.shape(maps[0]).dims().to_vec();
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        debug_assert_eq!(c, self.channels);
        let hw = h * w;

        let mut fused_samples = Vec::with_capacity(n);
        for i in 0..n {
            let tokens = |t: &mut Tape, map: V| -> V {
                let flat = t.reshape(map, Shape(vec![n, c * hw]));
                let row = t.gather_rows(flat, &[i]);
                let chw = t.reshape(row, Shape(vec![c, hw]));
                t.transpose2d(chw)
            };
            let q_tokens = tokens(t, maps[0]);
            let kv: Vec<V> = maps.iter().map(|&m| tokens(t, m)).collect();
            let kv_all = t.concat_rows(&kv);
            let attended = self.attn.forward(t, store, q_tokens, kv_all);
            let att_map = {
                let tr = t.transpose2d(attended);
                t.reshape(tr, Shape(vec![1, c, h, w]))
            };
            let target_map = {
                let flat = t.reshape(maps[0], Shape(vec![n, c * hw]));
                let row = t.gather_rows(flat, &[i]);
                t.reshape(row, Shape(vec![1, c, h, w]))
            };
            let cat = t.concat_axis1(&[att_map, target_map]);
            let pw = t.param(store, self.proj.w);
            let pb = t.param(store, self.proj.b);
            let projected = t.conv2d(cat, pw, pb, 0);
            fused_samples.push(t.add(projected, target_map));
        }
        t.concat_rows(&fused_samples)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.attn.param_ids();
        ids.push(self.proj.w);
        ids.push(self.proj.b);
        ids
    }
}

/// Classification fusion: adapters into the shared width, a first block
/// that reduces over teachers (attention + mean when symmetric, concat +
/// linear otherwise), then width-preserving residual blocks.
struct ClsFusion {
    adapters: Vec<LinearParams>,
    attn: Option<Attention>,
    reduce: LinearParams,
    blocks: Vec<LinearParams>,
    classifier: LinearParams,
    joint_ch: usize,
    symmetric: bool,
}

impl ClsFusion {
    fn new(
        store: &mut ParamStore,
        teacher_dims: &[usize],
        num_classes: usize,
        cfg: &FusionConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let adapters = teacher_dims
            .iter()
            .enumerate()
            .map(|(k, &d)| linear(store, &format!("fuse.adapter{k}"), d, cfg.joint_ch, false, rng))
            .collect();
        let attn = cfg
            .symmetric
            .then(|| Attention::new(store, "fuse.fa0.attn", cfg.joint_ch, cfg.heads, rng));
        let reduce_in = if cfg.symmetric {
            cfg.joint_ch
        } else {
            cfg.joint_ch * teacher_dims.len()
        };
        let reduce = linear(store, "fuse.fa0.reduce", reduce_in, cfg.joint_ch, false, rng);
        let blocks = (1..cfg.fa_blocks)
            .map(|k| linear(store, &format!("fuse.fa{k}"), cfg.joint_ch, cfg.joint_ch, false, rng))
            .collect();
        let classifier = linear(store, "fuse.head", cfg.joint_ch, num_classes, false, rng);
        ClsFusion {
            adapters,
            attn,
            reduce,
            blocks,
            classifier,
            joint_ch: cfg.joint_ch,
            symmetric: cfg.symmetric,
        }
    }

    /// `embeddings[k]` is teacher k's `[n, emb_k]` pre-head embedding.
    /// Returns `(logits, fusion-attention block outputs)`.
    fn forward(&self, t: &mut Tape, store: &ParamStore, embeddings: &[V]) -> (V, Vec<V>) {
        let n = t.shape(embeddings[0]).dims()[0];
        let adapted: Vec<V> = embeddings
            .iter()
            .zip(&self.adapters)
            .map(|(&e, a)| {
                let w = t.param(store, a.w);
                let b = t.param(store, a.b);
                t.linear(e, w, b)
            })
            .collect();

        // first fusion-attention block reduces over teachers to joint_ch
        let mut x = if self.symmetric {
            let attn = self.attn.as_ref().unwrap();
            let mut per_sample = Vec::with_capacity(n);
            for i in 0..n {
                let token_rows: Vec<V> = adapted.iter().map(|&a| t.gather_rows(a, &[i])).collect();
                let tokens = t.concat_rows(&token_rows);
                let refined = attn.forward(t, store, tokens, tokens);
                // mean over teacher tokens
                let m = token_rows.len();
                let ones = t.constant(vec![1.0 / m as f64; m], Shape(vec![1, m]));
                per_sample.push(t.matmul(ones, refined));
            }
            let pooled = t.concat_rows(&per_sample);
            let w = t.param(store, self.reduce.w);
            let b = t.param(store, self.reduce.b);
            let y = t.linear(pooled, w, b);
            let act = t.relu(y);
            t.add(act, pooled)
        } else {
            let cat = t.concat_axis1(&adapted);
            let w = t.param(store, self.reduce.w);
            let b = t.param(store, self.reduce.b);
            let y = t.linear(cat, w, b);
            t.relu(y)
        };
        let mut fa_taps = vec![x];

        for blk in &self.blocks {
            let w = t.param(store, blk.w);
            let b = t.param(store, blk.b);
            let y = t.linear(x, w, b);
            let act = t.relu(y);
            x = t.add(act, x);
            fa_taps.push(x);
        }
        debug_assert_eq!(t.shape(x).dims(), &[n, self.joint_ch]);

        let w = t.param(store, self.classifier.w);
        let b = t.param(store, self.classifier.b);
        let logits = t.linear(x, w, b);
        (logits, fa_taps)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for a in &self.adapters {
            ids.push(a.w);
            ids.push(a.b);
        }
        if let Some(attn) = &self.attn {
            ids.extend(attn.param_ids());
        }
        ids.push(self.reduce.w);
        ids.push(self.reduce.b);
        for b in &self.blocks {
            ids.push(b.w);
            ids.push(b.b);
        }
        ids.push(self.classifier.w);
        ids.push(self.classifier.b);
        ids
    }
}

/// Detection fusion for one scale: channel concat over teachers, 1x1
/// projection back to the scale's channel count, instance norm, ReLU.
struct DetScaleFusion {
    proj: LinearParams,
}

impl DetScaleFusion {
    fn new(
        store: &mut ParamStore,
        name: &str,
        teachers: usize,
        channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DetScaleFusion {
            proj: conv1x1(store, name, teachers * channels, channels, false, rng),
        }
    }

    fn forward(&self, t: &mut Tape, store: &ParamStore, maps: &[V]) -> V {
        let cat = t.concat_axis1(maps);
        let w = t.param(store, self.proj.w);
        let b = t.param(store, self.proj.b);
        let projected = t.conv2d(cat, w, b, 0);
        let normed = t.instance_norm(projected, 1e-5);
        t.relu(normed)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.proj.w, self.proj.b]
    }
}

enum JointKind {
    Seg {
        level_fusion: Vec<SegLevelFusion>,
        bottleneck_fusion: SegLevelFusion,
        head: SegDecoder,
    },
    Cls {
        fusion: ClsFusion,
    },
    Det {
        scale_fusion: Vec<DetScaleFusion>,
        head: DetHead,
    },
}

/// The fused multi-teacher model: frozen teachers plus trainable fusion
/// blocks and a fresh task head.
pub struct JointTeacher {
    pub task: Task,
    pub teachers: Vec<TaskModel>,
    /// Content hashes of the teacher checkpoints that were frozen.
    pub teacher_hashes: Vec<String>,
    pub fusion_cfg: FusionConfig,
    pub model_cfg: ModelConfig,
    kind: JointKind,
}

/// Output of a joint-teacher forward pass.
pub struct JointForward {
    pub prediction: Prediction,
    /// Fused per-level + bottleneck taps (segmentation/detection); the
    /// target teacher's taps for classification.
    pub taps: FeatureTaps,
    /// Fusion-attention block outputs (classification only).
    pub fa_taps: Vec<V>,
}

impl JointTeacher {
    /// Assemble the joint teacher. Teacher 0 must be the target teacher;
    /// all teacher parameters are marked frozen in `store`.
    pub fn build(
        teachers: Vec<TaskModel>,
        teacher_hashes: Vec<String>,
        fusion_cfg: &FusionConfig,
        store: &mut ParamStore,
        seed: u64,
    ) -> Result<Self> {
        if teachers.is_empty() {
            return Err(Error::validation("teachers", "need at least one trained teacher"));
        }
        let task = teachers[0].task();
        if teachers.iter().any(|m| m.task() != task) {
            return Err(Error::validation("teachers", "task mismatch among teachers"));
        }
        let model_cfg = teachers[0].cfg().clone();
        for m in &teachers {
            if m.cfg().image_size != model_cfg.image_size {
                return Err(Error::validation("teachers", "image size mismatch among teachers"));
            }
            if !matches!(task, Task::Classification) && m.cfg().encoder != model_cfg.encoder {
                // heterogeneous backbones are supported for classification
                // (adapters absorb the width); seg/det fusion needs equal maps
                return Err(Error::validation(
                    "teachers",
                    "encoder config mismatch among teachers",
                ));
            }
        }
        fusion_cfg.validate(&model_cfg, task)?;

        for m in &teachers {
            for id in m.all_param_ids() {
                store.set_frozen(id, true);
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kind = match task {
            Task::Segmentation => {
                let level_fusion = model_cfg
                    .encoder
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| SegLevelFusion::new(store, &format!("fuse.l{l}"), c, fusion_cfg, &mut rng))
                    .collect();
                let bottleneck_fusion = SegLevelFusion::new(
                    store,
                    "fuse.bottleneck",
                    model_cfg.encoder.bottleneck_channels,
                    fusion_cfg,
                    &mut rng,
                );
                let head = SegDecoder::new("joint", &model_cfg.encoder, store, &mut rng);
                JointKind::Seg {
                    level_fusion,
                    bottleneck_fusion,
                    head,
                }
            }
            Task::Classification => {
                let dims: Vec<usize> = teachers.iter().map(|m| m.cfg().emb_dim).collect();
                let fusion = ClsFusion::new(store, &dims, model_cfg.num_classes, fusion_cfg, &mut rng);
                JointKind::Cls { fusion }
            }
            Task::Detection => {
                let mut scale_fusion: Vec<DetScaleFusion> = model_cfg
                    .encoder
                    .channels
                    .iter()
                    .enumerate()
                    .map(|(l, &c)| {
                        DetScaleFusion::new(store, &format!("fuse.s{l}"), teachers.len(), c, &mut rng)
                    })
                    .collect();
                scale_fusion.push(DetScaleFusion::new(
                    store,
                    "fuse.sb",
                    teachers.len(),
                    model_cfg.encoder.bottleneck_channels,
                    &mut rng,
                ));
                let head = DetHead::new(
                    "joint",
                    model_cfg.encoder.bottleneck_channels,
                    model_cfg.num_classes,
                    model_cfg.region_dim,
                    store,
                    &mut rng,
                );
                JointKind::Det { scale_fusion, head }
            }
        };
        Ok(JointTeacher {
            task,
            teachers,
            teacher_hashes,
            fusion_cfg: fusion_cfg.clone(),
            model_cfg,
            kind,
        })
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, images: V) -> Result<JointForward> {
        let teacher_taps: Vec<FeatureTaps> = self
            .teachers
            .iter()
            .map(|m| m.encoder().forward(t, store, images))
            .collect();
        match &self.kind {
            JointKind::Seg {
                level_fusion,
                bottleneck_fusion,
                head,
            } => {
                let levels = self.model_cfg.encoder.levels;
                let mut fused_levels = Vec::with_capacity(levels);
                for (l, fuser) in level_fusion.iter().enumerate() {
                    let maps: Vec<V> = teacher_taps.iter().map(|tp| tp.per_level[l]).collect();
                    fused_levels.push(fuser.forward(t, store, &maps));
                }
                let b_maps: Vec<V> = teacher_taps.iter().map(|tp| tp.bottleneck).collect();
                let fused_b = bottleneck_fusion.forward(t, store, &b_maps);
                let taps = FeatureTaps {
                    per_level: fused_levels,
                    bottleneck: fused_b,
                };
                let pred = head.forward(t, store, &taps);
                Ok(JointForward {
                    prediction: Prediction::Mask(pred),
                    taps,
                    fa_taps: vec![],
                })
            }
            JointKind::Cls { fusion } => {
                let mut embeddings = Vec::with_capacity(self.teachers.len());
                for m in &self.teachers {
                    match m {
                        TaskModel::Cls(cls) => {
                            let (_, _, embed_taps) = cls.forward(t, store, images);
                            embeddings.push(*embed_taps.last().expect("embed blocks nonempty"));
                        }
                        _ => unreachable!("validated classification task"),
                    }
                }
                let (logits, fa_taps) = fusion.forward(t, store, &embeddings);
                let taps = teacher_taps.into_iter().next().unwrap();
                Ok(JointForward {
                    prediction: Prediction::Logits {
                        logits,
                        embed_taps: fa_taps.clone(),
                    },
                    taps,
                    fa_taps,
                })
            }
            JointKind::Det { scale_fusion, head } => {
                let levels = self.model_cfg.encoder.levels;
                let mut fused_levels = Vec::with_capacity(levels);
                for l in 0..levels {
                    let maps: Vec<V> = teacher_taps.iter().map(|tp| tp.per_level[l]).collect();
                    fused_levels.push(scale_fusion[l].forward(t, store, &maps));
                }
                let b_maps: Vec<V> = teacher_taps.iter().map(|tp| tp.bottleneck).collect();
                let fused_b = scale_fusion[levels].forward(t, store, &b_maps);
                let out = head.forward(t, store, fused_b);
                let taps = FeatureTaps {
                    per_level: fused_levels,
                    bottleneck: fused_b,
                };
                Ok(JointForward {
                    prediction: Prediction::Detections(out),
                    taps,
                    fa_taps: vec![],
                })
            }
        }
    }

    /// Trainable parameters: fusion blocks plus the new head, exactly.
    pub fn trainable_param_ids(&self) -> Vec<ParamId> {
        match &self.kind {
            JointKind::Seg {
                level_fusion,
                bottleneck_fusion,
                head,
            } => {
                let mut ids = Vec::new();
                for f in level_fusion {
                    ids.extend(f.param_ids());
                }
                ids.extend(bottleneck_fusion.param_ids());
                ids.extend(head.param_ids());
                ids
            }
            JointKind::Cls { fusion } => fusion.param_ids(),
            JointKind::Det { scale_fusion, head } => {
                let mut ids = Vec::new();
                for f in scale_fusion {
                    ids.extend(f.param_ids());
                }
                ids.extend(head.param_ids());
                ids
            }
        }
    }

    pub fn frozen_param_ids(&self) -> Vec<ParamId> {
        self.teachers.iter().flat_map(|m| m.all_param_ids()).collect()
    }
}

/// f32-quantized fingerprint of a parameter group, for freeze checks.
pub fn fingerprint(store: &ParamStore, ids: &[ParamId]) -> Vec<u32> {
    let mut out = Vec::new();
    for &id in ids {
        out.extend(store.value(id).iter().map(|&v| (v as f32).to_bits()));
    }
    out
}
