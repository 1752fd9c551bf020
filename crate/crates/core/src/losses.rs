//! The complete loss catalogue: task losses for segmentation,
//! classification and detection plus every distillation term.
//!
//! Losses that participate in training are built on the [`Tape`] so their
//! gradients come from the same reverse pass as the rest of the model.
//! Teacher-side quantities are always materialized as constants before they
//! enter a student loss, so no gradient ever reaches a teacher.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Init, ParamId, ParamStore, Shape, Tape, V};
use crate::error::{Error, Result};
use crate::synthdata::BoundingBox;

/// Scalar coefficients of the distillation objectives.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    /// Task-loss weight.
    pub alpha: f64,
    /// Batch-contrastive weight (ramped for segmentation).
    pub beta: f64,
    /// Feature-alignment weight.
    pub gamma: f64,
    /// Cosine-similarity weight.
    pub delta: f64,
    /// Classification logit-distillation weight.
    pub kappa: f64,
    /// Attention-transfer weight (detection).
    pub eta_att: f64,
    /// Head logit-distillation weight (detection).
    pub zeta: f64,
    /// Region-embedding distillation weight (detection).
    pub rho_roi: f64,
    /// Numerical guard for denominators and log clamps.
    pub eps: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::segmentation()
    }
}

impl LossWeights {
    pub fn segmentation() -> Self {
        LossWeights {
            alpha: 0.5,
            beta: 0.1, // ramped 0.1 -> 0.5 by the beta schedule
            gamma: 0.3,
            delta: 0.1,
            kappa: 0.0,
            eta_att: 0.0,
            zeta: 0.0,
            rho_roi: 0.0,
            eps: 1e-6,
        }
    }

    /// Pulmonary-style classification configuration.
    pub fn classification_primary() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 0.3,
            delta: 0.1,
            kappa: 0.4,
            eta_att: 0.0,
            zeta: 0.0,
            rho_roi: 0.0,
            eps: 1e-6,
        }
    }

    /// Cerebral-style classification configuration (pairs with cf = 0.5).
    pub fn classification_alternate() -> Self {
        LossWeights {
            gamma: 0.2,
            delta: 0.2,
            kappa: 0.3,
            ..LossWeights::classification_primary()
        }
    }

    pub fn detection() -> Self {
        LossWeights {
            alpha: 1.0,
            beta: 0.005,
            gamma: 0.03,
            delta: 0.03,
            kappa: 0.0,
            eta_att: 0.01,
            zeta: 1.0,
            rho_roi: 0.10,
            eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("delta", self.delta),
            ("kappa", self.kappa),
            ("eta_att", self.eta_att),
            ("zeta", self.zeta),
            ("rho_roi", self.rho_roi),
        ] {
            if v < 0.0 {
                return Err(Error::validation(name, "loss weights must be >= 0"));
            }
        }
        if self.eps <= 0.0 {
            return Err(Error::validation("eps", "must be > 0"));
        }
        Ok(())
    }
}

fn check_same_shape(t: &Tape, a: V, b: V, context: &str) -> Result<()> {
    if t.shape(a) != t.shape(b) {
        return Err(Error::shape(
            context,
            t.shape(a).to_string(),
            t.shape(b).to_string(),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Segmentation task losses
// ---------------------------------------------------------------------------

/// Soft Dice loss over an entire tensor:
/// `1 - 2 sum(p g) / (sum(p) + sum(g) + eps)`.
pub fn dice_loss(t: &mut Tape, pred: V, gt: V, eps: f64) -> Result<V> {
    check_same_shape(t, pred, gt, "dice_loss")?;
    let inter = t.mul(pred, gt);
    let inter_sum = t.sum(inter);
    let p_sum = t.sum(pred);
    let g_sum = t.sum(gt);
    let denom_raw = t.add(p_sum, g_sum);
    let denom = t.offset(denom_raw, eps);
    let num = t.scale(inter_sum, 2.0);
    let ratio = t.div(num, denom);
    Ok(t.rsub_const(ratio, 1.0))
}

/// Per-sample Dice averaged over the batch; `pred`/`gt` are `[n, ...]`.
pub fn dice_loss_batched(t: &mut Tape, pred: V, gt: V, eps: f64) -> Result<V> {
    check_same_shape(t, pred, gt, "dice_loss_batched")?;
    let dims = t.shape(pred).dims().to_vec();
    let n = dims[0];
    let rest: usize = dims[1..].iter().product();
    let p = t.reshape(pred, Shape(vec![n, rest]));
    let g = t.reshape(gt, Shape(vec![n, rest]));
    let ones = t.constant(vec![1.0; n * rest], Shape(vec![n, rest]));
    let inter = t.row_dot(p, g);
    let p_sum = t.row_dot(p, ones);
    let g_sum = t.row_dot(g, ones);
    let denom_raw = t.add(p_sum, g_sum);
    let denom = t.offset(denom_raw, eps);
    let num = t.scale(inter, 2.0);
    let ratio = t.div(num, denom);
    let dice = t.rsub_const(ratio, 1.0);
    Ok(t.mean(dice))
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
pub fn bce_loss(t: &mut Tape, pred: V, gt: V, eps: f64) -> Result<V> {
    check_same_shape(t, pred, gt, "bce_loss")?;
    let p = t.clamp(pred, eps, 1.0 - eps);
    let ln_p = t.ln(p);
    let pos = t.mul(gt, ln_p);
    let one_minus_p = t.rsub_const(p, 1.0);
    let ln_q = t.ln(one_minus_p);
    let one_minus_g = t.rsub_const(gt, 1.0);
    let neg = t.mul(one_minus_g, ln_q);
    let both = t.add(pos, neg);
    let m = t.mean(both);
    Ok(t.scale(m, -1.0))
}

/// Dice + BCE composite segmentation loss.
pub fn dice_bce(t: &mut Tape, pred: V, gt: V, eps: f64) -> Result<V> {
    let d = dice_loss_batched(t, pred, gt, eps)?;
    let b = bce_loss(t, pred, gt, eps)?;
    Ok(t.add(d, b))
}

// ---------------------------------------------------------------------------
// Classification losses
// ---------------------------------------------------------------------------

/// Plain cross-entropy over class logits.
pub fn cross_entropy(t: &mut Tape, logits: V, labels: &[usize]) -> Result<V> {
    ce_impl(t, logits, labels, None)
}

/// Class-weighted cross-entropy with dynamic weights `w_c = 1/(f_c + eps)`
/// computed from the class frequencies of the current batch. Weights are
/// defined only over classes present in the batch.
pub fn weighted_ce(t: &mut Tape, logits: V, labels: &[usize], eps: f64) -> Result<V> {
    let c = *t.shape(logits).dims().last().unwrap();
    let n = labels.len();
    if n == 0 {
        return Err(Error::validation("labels", "batch must be nonempty"));
    }
    let mut counts = vec![0usize; c];
    for &l in labels {
        if l >= c {
            return Err(Error::validation(
                "labels",
                format!("label {l} out of range {c}"),
            ));
        }
        counts[l] += 1;
    }
    let weights: Vec<f64> = counts
        .iter()
        .map(|&cnt| {
            if cnt == 0 {
                0.0
            } else {
                1.0 / (cnt as f64 / n as f64 + eps)
            }
        })
        .collect();
    ce_impl(t, logits, labels, Some(&weights))
}

fn ce_impl(t: &mut Tape, logits: V, labels: &[usize], weights: Option<&[f64]>) -> Result<V> {
    let dims = t.shape(logits).dims().to_vec();
    if dims.len() != 2 || dims[0] != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("[{},C]", labels.len()),
            Shape(dims).to_string(),
        ));
    }
    let (n, c) = (dims[0], dims[1]);
    let logp = t.log_softmax_rows(logits);
    let mut sel = vec![0.0; n * c];
    for (i, &l) in labels.iter().enumerate() {
        let w = weights.map(|ws| ws[l]).unwrap_or(1.0);
        sel[i * c + l] = -w / n as f64;
    }
    let mask = t.constant(sel, Shape(vec![n, c]));
    let prod = t.mul(logp, mask);
    Ok(t.sum(prod))
}

/// Temperature-scaled logit distillation:
/// `mean_i KL(softmax(z_T/t) || softmax(z_S/t)) * t^2`.
/// The teacher side is treated as a constant.
pub fn kld_distill(t: &mut Tape, teacher_logits: V, student_logits: V, temp: f64) -> Result<V> {
    check_same_shape(t, teacher_logits, student_logits, "kld_distill")?;
    if temp <= 0.0 {
        return Err(Error::validation("t", "temperature must be > 0"));
    }
    let dims = t.shape(student_logits).dims().to_vec();
    let (n, c) = (dims[0], dims[1]);
    kl_vs_constant_rows(t, teacher_logits, student_logits, temp, n, c, temp * temp / n as f64)
}

/// Shared KL(teacher || student) over rows with the teacher constant.
/// `scale` multiplies the summed KL.
fn kl_vs_constant_rows(
    t: &mut Tape,
    teacher_logits: V,
    student_logits: V,
    temp: f64,
    rows: usize,
    cols: usize,
    scale: f64,
) -> Result<V> {
    let tv = t.value(teacher_logits).to_vec();
    let mut p_teacher = vec![0.0; rows * cols];
    let mut const_part = 0.0;
    for r in 0..rows {
        let row = &tv[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max) / temp;
        let exps: Vec<f64> = row.iter().map(|z| (z / temp - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (j, e) in exps.iter().enumerate() {
            let p = e / z;
            p_teacher[r * cols + j] = p;
            if p > 0.0 {
                const_part += scale * p * p.ln();
            }
        }
    }
    let scaled = t.scale(student_logits, 1.0 / temp);
    let logp_s = t.log_softmax_rows(scaled);
    let neg_p = t.constant(
        p_teacher.iter().map(|p| -scale * p).collect(),
        Shape(vec![rows, cols]),
    );
    let cross = t.mul(logp_s, neg_p);
    let s = t.sum(cross);
    Ok(t.offset(s, const_part))
}

// ---------------------------------------------------------------------------
// Feature distillation losses
// ---------------------------------------------------------------------------

/// Batch-contrastive distillation: L2-normalize embeddings, form pairwise
/// similarity matrices `S_ij = v_i . v_j / t` for student and teacher
/// separately, and return the mean over rows of
/// `KL(softmax(T_row) || softmax(S_row))`. The teacher side is constant.
pub fn contrastive_batch(t: &mut Tape, student: V, teacher: V, temp: f64, eps: f64) -> Result<V> {
    if temp <= 0.0 {
        return Err(Error::validation("t", "temperature must be > 0"));
    }
    let sd = t.shape(student).dims().to_vec();
    let td = t.shape(teacher).dims().to_vec();
    if sd.len() != 2 || td.len() != 2 || sd[0] != td[0] {
        return Err(Error::shape(
            "contrastive_batch",
            format!("[{}, *]", sd.first().copied().unwrap_or(0)),
            Shape(td).to_string(),
        ));
    }
    let n = sd[0];

    // student path on the tape
    let s_norm = t.l2_normalize_rows(student, eps);
    let sim_s = t.matmul_nt(s_norm, s_norm);
    let sim_s = t.scale(sim_s, 1.0 / temp);
    let logp_s = t.log_softmax_rows(sim_s);

    // teacher path as constants
    let tv = t.value(teacher).to_vec();
    let dt = td[1];
    let mut t_norm = vec![0.0; n * dt];
    for r in 0..n {
        let row = &tv[r * dt..(r + 1) * dt];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
        for (o, v) in t_norm[r * dt..(r + 1) * dt].iter_mut().zip(row) {
            *o = v / norm;
        }
    }
    let mut p_teacher = vec![0.0; n * n];
    let mut const_part = 0.0;
    for i in 0..n {
        let mut row = vec![0.0; n];
        for (j, rj) in row.iter_mut().enumerate() {
            let mut dot = 0.0;
            for k in 0..dt {
                dot += t_norm[i * dt + k] * t_norm[j * dt + k];
            }
            *rj = dot / temp;
        }
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        for j in 0..n {
            let p = exps[j] / z;
            p_teacher[i * n + j] = p;
            if p > 0.0 {
                const_part += p * p.ln() / n as f64;
            }
        }
    }
    let neg_p = t.constant(
        p_teacher.iter().map(|p| -p / n as f64).collect(),
        Shape(vec![n, n]),
    );
    let cross = t.mul(logp_s, neg_p);
    let s = t.sum(cross);
    Ok(t.offset(s, const_part))
}

/// Per-level 1x1 projection mapping teacher channels onto student channels
/// when the counts differ. Student-side trainable.
#[derive(Clone, Copy, Debug)]
pub struct TapProjection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl TapProjection {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        teacher_ch: usize,
        student_ch: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let weight = store.add(
            format!("{name}.w"),
            Shape(vec![student_ch, teacher_ch, 1, 1]),
            Init::FanInUniform { fan_in: teacher_ch },
            rng,
        );
        let bias = store.add(format!("{name}.b"), Shape(vec![student_ch]), Init::Zero, rng);
        TapProjection { weight, bias }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.weight, self.bias]
    }
}

/// Resize a teacher tap to the student tap's spatial grid (bilinear) and
/// project its channels onto the student's when a projection is supplied.
pub fn align_teacher_tap(
    t: &mut Tape,
    store: &ParamStore,
    teacher_tap: V,
    student_shape: &[usize],
    projection: Option<&TapProjection>,
) -> Result<V> {
    let td = t.shape(teacher_tap).dims().to_vec();
    if td.len() != 4 || student_shape.len() != 4 || td[0] != student_shape[0] {
        return Err(Error::shape(
            "align_teacher_tap",
            format!("[{}, c, h, w]", student_shape.first().copied().unwrap_or(0)),
            Shape(td).to_string(),
        ));
    }
    let resized = t.resize_bilinear(teacher_tap, student_shape[2], student_shape[3]);
    match projection {
        Some(p) => {
            let w = t.param(store, p.weight);
            let b = t.param(store, p.bias);
            Ok(t.conv2d(resized, w, b, 0))
        }
        None => {
            if td[1] != student_shape[1] {
                return Err(Error::shape(
                    "align_teacher_tap",
                    format!("{} channels", student_shape[1]),
                    format!("{} channels (projection required)", td[1]),
                ));
            }
            Ok(resized)
        }
    }
}

/// Mean over levels of the mean squared difference between student taps and
/// (aligned) teacher taps.
pub fn feature_align_mse(
    t: &mut Tape,
    store: &ParamStore,
    student_taps: &[V],
    teacher_taps: &[V],
    projections: &[Option<TapProjection>],
) -> Result<V> {
    if student_taps.len() != teacher_taps.len() || student_taps.is_empty() {
        return Err(Error::shape(
            "feature_align_mse",
            format!("{} levels", student_taps.len()),
            format!("{} levels", teacher_taps.len()),
        ));
    }
    let mut acc: Option<V> = None;
    for (li, (&s, &tt)) in student_taps.iter().zip(teacher_taps).enumerate() {
        let proj = projections.get(li).and_then(|p| p.as_ref());
        let s_shape = t.shape(s).dims().to_vec();
        let aligned = align_teacher_tap(t, store, tt, &s_shape, proj)?;
        let diff = t.sub(s, aligned);
        let sq = t.mul(diff, diff);
        let level = t.mean(sq);
        acc = Some(match acc {
            Some(a) => t.add(a, level),
            None => level,
        });
    }
    let total = acc.unwrap();
    Ok(t.scale(total, 1.0 / student_taps.len() as f64))
}

/// Mean over levels of `1 - cos(student, teacher)` on flattened per-sample
/// vectors. Requires equal shapes per level (align the teacher first).
pub fn cosine_sim_loss(t: &mut Tape, student_taps: &[V], teacher_taps: &[V], eps: f64) -> Result<V> {
    if student_taps.len() != teacher_taps.len() || student_taps.is_empty() {
        return Err(Error::shape(
            "cosine_sim_loss",
            format!("{} levels", student_taps.len()),
            format!("{} levels", teacher_taps.len()),
        ));
    }
    let mut acc: Option<V> = None;
    for (&s, &tt) in student_taps.iter().zip(teacher_taps) {
        check_same_shape(t, s, tt, "cosine_sim_loss")?;
        let dims = t.shape(s).dims().to_vec();
        let n = dims[0];
        let rest: usize = dims[1..].iter().product();
        let s2 = t.reshape(s, Shape(vec![n, rest]));
        let t2 = t.reshape(tt, Shape(vec![n, rest]));
        let sn = t.l2_normalize_rows(s2, eps);
        let tn = t.l2_normalize_rows(t2, eps);
        let cos = t.row_dot(sn, tn);
        let one_minus = t.rsub_const(cos, 1.0);
        let level = t.mean(one_minus);
        acc = Some(match acc {
            Some(a) => t.add(a, level),
            None => level,
        });
    }
    let total = acc.unwrap();
    Ok(t.scale(total, 1.0 / student_taps.len() as f64))
}

/// Attention transfer for one level: channel energy maps, L2-normalized
/// over all entries, squared distance averaged over the batch.
pub fn attention_transfer_level(t: &mut Tape, student_map: V, teacher_map: V, eps: f64) -> Result<V> {
    let sd = t.shape(student_map).dims().to_vec();
    let td = t.shape(teacher_map).dims().to_vec();
    if sd.len() != 4 || td.len() != 4 || sd[0] != td[0] || sd[2..] != td[2..] {
        return Err(Error::shape(
            "attention_transfer",
            Shape(sd).to_string(),
            Shape(td).to_string(),
        ));
    }
    let es = t.channel_energy(student_map);
    let et = t.channel_energy(teacher_map);
    let ns = t.l2_normalize_rows(es, eps);
    let nt = t.l2_normalize_rows(et, eps);
    let diff = t.sub(ns, nt);
    let sq = t.row_dot(diff, diff);
    Ok(t.mean(sq))
}

/// Mean over levels of [`attention_transfer_level`].
pub fn attention_transfer(t: &mut Tape, student_maps: &[V], teacher_maps: &[V], eps: f64) -> Result<V> {
    if student_maps.len() != teacher_maps.len() || student_maps.is_empty() {
        return Err(Error::shape(
            "attention_transfer",
            format!("{} levels", student_maps.len()),
            format!("{} levels", teacher_maps.len()),
        ));
    }
    let mut acc: Option<V> = None;
    for (&s, &tt) in student_maps.iter().zip(teacher_maps) {
        let level = attention_transfer_level(t, s, tt, eps)?;
        acc = Some(match acc {
            Some(a) => t.add(a, level),
            None => level,
        });
    }
    let total = acc.unwrap();
    Ok(t.scale(total, 1.0 / student_maps.len() as f64))
}

/// Temperature-scaled KL over paired region/query logits, averaged over the
/// total region count `sum_i M_i`. Zero regions yields zero loss.
pub fn cls_kd(t: &mut Tape, teacher_region_logits: V, student_region_logits: V, temp: f64) -> Result<V> {
    check_same_shape(t, teacher_region_logits, student_region_logits, "cls_kd")?;
    if temp <= 0.0 {
        return Err(Error::validation("t", "temperature must be > 0"));
    }
    let dims = t.shape(student_region_logits).dims().to_vec();
    let (m, c) = (dims[0], dims[1]);
    if m == 0 {
        return Ok(t.scalar(0.0));
    }
    kl_vs_constant_rows(
        t,
        teacher_region_logits,
        student_region_logits,
        temp,
        m,
        c,
        temp * temp / m as f64,
    )
}

/// Mean squared L2 distance between paired region embeddings, averaged over
/// the total region count. Empty region sets yield zero.
pub fn roi_kd(t: &mut Tape, teacher_embeds: V, student_embeds: V) -> Result<V> {
    check_same_shape(t, teacher_embeds, student_embeds, "roi_kd")?;
    let dims = t.shape(student_embeds).dims().to_vec();
    let m = dims[0];
    if m == 0 {
        return Ok(t.scalar(0.0));
    }
    let diff = t.sub(student_embeds, teacher_embeds);
    let sq = t.row_dot(diff, diff);
    Ok(t.mean(sq))
}

// ---------------------------------------------------------------------------
// Detection task losses
// ---------------------------------------------------------------------------

/// Smooth-L1 over box offsets: per element `0.5 x^2` for `|x| < 1` else
/// `|x| - 0.5`, summed per box and averaged over boxes.
pub fn smooth_l1(t: &mut Tape, pred_offsets: V, gt_offsets: V) -> Result<V> {
    check_same_shape(t, pred_offsets, gt_offsets, "smooth_l1")?;
    let dims = t.shape(pred_offsets).dims().to_vec();
    let boxes = dims[0].max(1);
    let diff = t.sub(pred_offsets, gt_offsets);
    let h = t.huber(diff);
    let s = t.sum(h);
    Ok(t.scale(s, 1.0 / boxes as f64))
}

/// Generalized IoU between predicted boxes (four `[m]` coordinate vectors on
/// the tape) and constant ground-truth boxes. With `use_giou = false` this
/// falls back to plain IoU. Returns an `[m]` vector of (G)IoU values.
pub fn giou_terms(t: &mut Tape, pred: (V, V, V, V), gt: &[[f64; 4]], use_giou: bool) -> Result<V> {
    let m = gt.len();
    let (px1, py1, px2, py2) = pred;
    for v in [px1, py1, px2, py2] {
        if t.value(v).len() != m {
            return Err(Error::shape("giou", format!("[{m}]"), t.shape(v).to_string()));
        }
    }
    for b in gt {
        if b[2] <= b[0] || b[3] <= b[1] {
            return Err(Error::validation("box", "degenerate (zero-area) ground-truth box"));
        }
    }
    let gx1 = t.constant(gt.iter().map(|b| b[0]).collect(), Shape(vec![m]));
    let gy1 = t.constant(gt.iter().map(|b| b[1]).collect(), Shape(vec![m]));
    let gx2 = t.constant(gt.iter().map(|b| b[2]).collect(), Shape(vec![m]));
    let gy2 = t.constant(gt.iter().map(|b| b[3]).collect(), Shape(vec![m]));

    let ix1 = t.max_elem(px1, gx1);
    let iy1 = t.max_elem(py1, gy1);
    let ix2 = t.min_elem(px2, gx2);
    let iy2 = t.min_elem(py2, gy2);
    let iw_raw = t.sub(ix2, ix1);
    let iw = t.relu(iw_raw);
    let ih_raw = t.sub(iy2, iy1);
    let ih = t.relu(ih_raw);
    let inter = t.mul(iw, ih);

    let pw = t.sub(px2, px1);
    let ph = t.sub(py2, py1);
    let pa = t.mul(pw, ph);
    let ga = t.constant(
        gt.iter().map(|b| (b[2] - b[0]) * (b[3] - b[1])).collect(),
        Shape(vec![m]),
    );
    let pa_ga = t.add(pa, ga);
    let union = t.sub(pa_ga, inter);
    let iou = t.div(inter, union);
    if !use_giou {
        return Ok(iou);
    }

    let ex1 = t.min_elem(px1, gx1);
    let ey1 = t.min_elem(py1, gy1);
    let ex2 = t.max_elem(px2, gx2);
    let ey2 = t.max_elem(py2, gy2);
    let ew = t.sub(ex2, ex1);
    let eh = t.sub(ey2, ey1);
    let ec = t.mul(ew, eh);
    let dead = t.sub(ec, union);
    let penalty = t.div(dead, ec);
    Ok(t.sub(iou, penalty))
}

/// Plain-value GIoU for evaluation paths; errors on degenerate boxes.
pub fn giou_value(a: &[f64; 4], b: &[f64; 4]) -> Result<f64> {
    if a[2] <= a[0] || a[3] <= a[1] || b[2] <= b[0] || b[3] <= b[1] {
        return Err(Error::validation("box", "degenerate (zero-area) box"));
    }
    let iou = box_iou(a, b);
    let union =
        (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - intersection_area(a, b);
    let ex = (a[2].max(b[2]) - a[0].min(b[0])) * (a[3].max(b[3]) - a[1].min(b[1]));
    Ok(iou - (ex - union) / ex)
}

pub fn intersection_area(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih
}

/// Plain IoU between two boxes in `[x1, y1, x2, y2]` form.
pub fn box_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let inter = intersection_area(a, b);
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Minimum-total-cost one-to-one assignment. Rows are predictions, columns
/// ground truths; returns `min(rows, cols)` pairs `(row, col)` sorted by row.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let rows = cost.len();
    let cols = cost.first().map(|r| r.len()).unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let transposed = rows > cols;
    let (n, m) = if transposed { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| -> f64 {
        if transposed {
            cost[j][i]
        } else {
            cost[i][j]
        }
    };

    // potentials-based shortest augmenting path; 1-indexed buffers
    const INF: f64 = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1]; // col -> row
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if !used[j] {
                    let cur = at(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    for j in 1..=m {
        if p[j] != 0 {
            let (r, c) = if transposed { (j - 1, p[j] - 1) } else { (p[j] - 1, j - 1) };
            pairs.push((r, c));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Configuration of the set-prediction detection loss.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SetLossConfig {
    /// Weight of the L1 box term (normalized coordinates).
    pub lambda_l1: f64,
    /// Weight of the (G)IoU box term.
    pub lambda_iou: f64,
    /// Use GIoU (default) or fall back to plain IoU in the box term.
    pub use_giou: bool,
}

impl Default for SetLossConfig {
    fn default() -> Self {
        SetLossConfig {
            lambda_l1: 5.0,
            lambda_iou: 2.0,
            use_giou: true,
        }
    }
}

/// Set-prediction detection loss with Hungarian matching.
///
/// `pred_boxes` are four `[q]` coordinate vectors (x1, y1, x2, y2) in
/// pixels; `pred_logits` is `[q, num_classes + 1]` with the background class
/// last. The match cost per (prediction, gt) pair is
/// `-p(class_j) + lambda_l1 * L1(normalized boxes) + lambda_iou * (1 - giou)`.
/// Matched pairs pay class CE plus both box terms; unmatched predictions pay
/// background CE.
pub fn detr_task_loss(
    t: &mut Tape,
    pred_boxes: (V, V, V, V),
    pred_logits: V,
    gt: &[BoundingBox],
    image_size: usize,
    cfg: &SetLossConfig,
) -> Result<V> {
    let dims = t.shape(pred_logits).dims().to_vec();
    let (q, c_bg) = (dims[0], dims[1]);
    let background = c_bg - 1;
    let scale = 1.0 / image_size as f64;

    // probabilities and box values for the (non-differentiated) match cost
    let logits_v = t.value(pred_logits).to_vec();
    let probs: Vec<Vec<f64>> = (0..q)
        .map(|i| {
            let row = &logits_v[i * c_bg..(i + 1) * c_bg];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|e| e / z).collect()
        })
        .collect();
    let (bx1, by1, bx2, by2) = pred_boxes;
    let pb: Vec<[f64; 4]> = (0..q)
        .map(|i| {
            [
                t.value(bx1)[i],
                t.value(by1)[i],
                t.value(bx2)[i],
                t.value(by2)[i],
            ]
        })
        .collect();

    let mut matched: Vec<(usize, usize)> = Vec::new();
    if !gt.is_empty() {
        let cost: Vec<Vec<f64>> = (0..q)
            .map(|i| {
                gt.iter()
                    .map(|g| {
                        let gb =
                            [g.x_min as f64, g.y_min as f64, g.x_max as f64, g.y_max as f64];
                        let l1: f64 = pb[i]
                            .iter()
                            .zip(&gb)
                            .map(|(p, gv)| (p - gv).abs() * scale)
                            .sum();
                        let gi = sanitized_giou(&pb[i], &gb);
                        -probs[i][g.label.min(background)] + cfg.lambda_l1 * l1
                            + cfg.lambda_iou * (1.0 - gi)
                    })
                    .collect()
            })
            .collect();
        matched = hungarian_match(&cost);
    }

    // classification: every prediction pays CE, matched to its gt class,
    // unmatched to background
    let mut labels = vec![background; q];
    for &(pi, gj) in &matched {
        labels[pi] = gt[gj].label.min(background);
    }
    let ce = cross_entropy(t, pred_logits, &labels)?;
    let mut total = ce;

    if !matched.is_empty() {
        let rows: Vec<usize> = matched.iter().map(|&(pi, _)| pi).collect();
        let gt_boxes: Vec<[f64; 4]> = matched
            .iter()
            .map(|&(_, gj)| {
                [
                    gt[gj].x_min as f64,
                    gt[gj].y_min as f64,
                    gt[gj].x_max as f64,
                    gt[gj].y_max as f64,
                ]
            })
            .collect();
        let m = matched.len();
        let gather_coord = |t: &mut Tape, v: V| -> V {
            let col = t.reshape(v, Shape(vec![q, 1]));
            let sel = t.gather_rows(col, &rows);
            t.reshape(sel, Shape(vec![m]))
        };
        let mx1 = gather_coord(t, bx1);
        let my1 = gather_coord(t, by1);
        let mx2 = gather_coord(t, bx2);
        let my2 = gather_coord(t, by2);

        // L1 on normalized coordinates
        let mut l1_acc: Option<V> = None;
        for (k, coord) in [mx1, my1, mx2, my2].into_iter().enumerate() {
            let gtc = t.constant(gt_boxes.iter().map(|b| b[k]).collect(), Shape(vec![m]));
            let d = t.sub(coord, gtc);
            let a = t.abs(d);
            l1_acc = Some(match l1_acc {
                Some(acc) => t.add(acc, a),
                None => a,
            });
        }
        let l1_vec = l1_acc.unwrap();
        let l1_sum = t.sum(l1_vec);
        let l1_term = t.scale(l1_sum, cfg.lambda_l1 * scale / m as f64);
        total = t.add(total, l1_term);

        let gi = giou_terms(t, (mx1, my1, mx2, my2), &gt_boxes, cfg.use_giou)?;
        let one_minus = t.rsub_const(gi, 1.0);
        let gi_sum = t.sum(one_minus);
        let gi_term = t.scale(gi_sum, cfg.lambda_iou / m as f64);
        total = t.add(total, gi_term);
    }
    Ok(total)
}

fn sanitized_giou(p: &[f64; 4], g: &[f64; 4]) -> f64 {
    let fixed = [p[0], p[1], p[2].max(p[0] + 1e-6), p[3].max(p[1] + 1e-6)];
    giou_value(&fixed, g).unwrap_or(-1.0)
}

/// Cell-grid assignment for the single-stage detection head: the cell
/// containing a ground-truth box center is positive; on collisions the
/// earlier box wins.
#[derive(Clone, Debug, Default)]
pub struct CellAssignment {
    /// (cell index, class label, target offsets `[tx, ty, tw, th]`)
    pub positives: Vec<(usize, usize, [f64; 4])>,
    pub grid: usize,
}

pub fn assign_cells(gt: &[BoundingBox], grid: usize, image_size: usize) -> CellAssignment {
    let stride = image_size as f64 / grid as f64;
    let mut taken = vec![false; grid * grid];
    let mut positives = Vec::new();
    for b in gt {
        let cx = (b.x_min + b.x_max) as f64 * 0.5;
        let cy = (b.y_min + b.y_max) as f64 * 0.5;
        let gx = ((cx / stride) as usize).min(grid - 1);
        let gy = ((cy / stride) as usize).min(grid - 1);
        let cell = gy * grid + gx;
        if taken[cell] {
            continue;
        }
        taken[cell] = true;
        let w = (b.x_max - b.x_min) as f64;
        let h = (b.y_max - b.y_min) as f64;
        positives.push((
            cell,
            b.label,
            [
                cx / stride - gx as f64,
                cy / stride - gy as f64,
                (w / stride).ln(),
                (h / stride).ln(),
            ],
        ));
    }
    CellAssignment { positives, grid }
}

/// Single-stage detection task loss: objectness BCE over all cells, class
/// CE over positive cells, smooth-L1 over positive-cell offsets.
pub fn frcnn_task_loss(
    t: &mut Tape,
    objectness: V,
    class_logits: V,
    box_offsets: V,
    assignment: &CellAssignment,
    eps: f64,
) -> Result<V> {
    let cells = t.value(objectness).len();
    let mut obj_target = vec![0.0; cells];
    for &(cell, _, _) in &assignment.positives {
        obj_target[cell] = 1.0;
    }
    let shape = t.shape(objectness).clone();
    let target = t.constant(obj_target, shape);
    let obj_prob = t.sigmoid(objectness);
    let mut total = bce_loss(t, obj_prob, target, eps)?;

    if !assignment.positives.is_empty() {
        let idx: Vec<usize> = assignment.positives.iter().map(|p| p.0).collect();
        let labels: Vec<usize> = assignment.positives.iter().map(|p| p.1).collect();
        let pos_logits = t.gather_rows(class_logits, &idx);
        let ce = cross_entropy(t, pos_logits, &labels)?;
        total = t.add(total, ce);

        let pos_offsets = t.gather_rows(box_offsets, &idx);
        let m = assignment.positives.len();
        let mut targets = Vec::with_capacity(m * 4);
        for p in &assignment.positives {
            targets.extend_from_slice(&p.2);
        }
        let gt_offsets = t.constant(targets, Shape(vec![m, 4]));
        let sl1 = smooth_l1(t, pos_offsets, gt_offsets)?;
        total = t.add(total, sl1);
    }
    Ok(total)
}
