//! Acceptance suite: one test per criterion, each printing a PASS line
//! with the measured numbers (run with `-- --nocapture` to see them).
//!
//! Criteria 1-5 are exact property checks; 6-8 are trend reproductions on
//! synthetic multi-domain groups (medians over three seeds, margins
//! reported); 9 reruns the segmentation group and compares reports byte
//! for byte.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crossdistill::autodiff::{Init, ParamStore, Shape, Tape};
use crossdistill::checkpoint;
use crossdistill::cli::{cmd_run, Pipeline};
use crossdistill::config::{AblationMatrix, ExperimentConfig};
use crossdistill::losses;
use crossdistill::metrics::{self, median, Detection, GroundTruth, MetricsReport, ModelTag};
use crossdistill::nets::{
    grl_apply, pooled_bottleneck, ClsModel, Discriminator, EncoderConfig, ModelConfig, TapDepth,
};
use crossdistill::schedules::{beta_ramp, curriculum, lambda_adv, temp_decay, ScheduleConfig};
use crossdistill::synthdata::{DomainSpec, ShapeFamily, Task};
use crossdistill::train::{
    self, stage2_joint, stage3_distill, ClsDistillConfig, ClsDistillMode, CurriculumMode,
    DetLossKind, DomainData, RunConfig,
};

fn pass(criterion: &str, detail: &str) {
    println!("criterion {criterion}: PASS - {detail}");
}

// ---------------------------------------------------------------------------
// Criterion 1: gradient reversal correctness
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_grl_correctness() {
    let started = Instant::now();
    let cfg = ModelConfig {
        encoder: EncoderConfig {
            levels: 2,
            channels: vec![4, 8],
            bottleneck_channels: 8,
        },
        image_size: 16,
        num_classes: 2,
        ..ModelConfig::default()
    };
    let images: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        (0..2 * 16 * 16).map(|_| rng.gen_range(0.0..1.0)).collect()
    };

    // discriminator loss through (optionally) the gradient reversal layer
    let disc_loss_grads = |lambda: Option<f64>| -> (ParamStore, Vec<crossdistill::autodiff::ParamId>, f64) {
        let mut store = ParamStore::new();
        let model = ClsModel::new(&cfg, &mut store, 11).unwrap();
        let disc = Discriminator::new(cfg.encoder.bottleneck_channels, &mut store, 12);
        let mut t = Tape::new();
        let x = t.constant(images.clone(), Shape(vec![2, 1, 16, 16]));
        let (_, taps, _) = model.forward(&mut t, &store, x);
        let pooled = pooled_bottleneck(&mut t, &taps);
        let fed = match lambda {
            Some(l) => grl_apply(&mut t, pooled, l),
            None => pooled,
        };
        let logit = disc.forward(&mut t, &store, fed);
        let prob = t.sigmoid(logit);
        let gt = t.constant(vec![1.0, 0.0], Shape(vec![2, 1]));
        let loss = losses::bce_loss(&mut t, prob, gt, 1e-6).unwrap();
        let loss_v = t.scalar_value(loss);
        t.backward(loss, &mut store);
        let ids = model.encoder.param_ids();
        (store, ids, loss_v)
    };

    // analytic: encoder gradient under GRL equals -lambda x the no-GRL one
    let (plain_store, plain_ids, _) = disc_loss_grads(None);
    for lambda in [0.0, 0.3, 1.0] {
        let (grl_store, grl_ids, _) = disc_loss_grads(Some(lambda));
        let mut max_rel: f64 = 0.0;
        for (a, b) in grl_ids.iter().zip(&plain_ids) {
            for (ga, gb) in grl_store.grad(*a).iter().zip(plain_store.grad(*b)) {
                let expected = -lambda * gb;
                let denom = expected.abs().max(ga.abs()).max(1e-300);
                if lambda == 0.0 {
                    assert_eq!(*ga, 0.0, "lambda 0 must kill the encoder gradient");
                } else {
                    max_rel = max_rel.max(((ga - expected) / denom).abs());
                }
            }
        }
        assert!(max_rel < 1e-6, "lambda {lambda}: max relative error {max_rel}");
    }

    // finite-difference cross-check on the first <= 50 encoder parameters
    let lambda = 0.3;
    let (mut store, ids, _) = disc_loss_grads(Some(lambda));
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).to_vec()).collect();
    let loss_with = |store: &ParamStore| -> f64 {
        let mut t = Tape::new();
        // rebuild the same graph with the perturbed store; models are
        // reconstructed with identical seeds so parameter ids line up
        let mut fresh = ParamStore::new();
        let model = ClsModel::new(&cfg, &mut fresh, 11).unwrap();
        let disc = Discriminator::new(cfg.encoder.bottleneck_channels, &mut fresh, 12);
        // copy values from the perturbed store
        for i in 0..fresh.len() {
            let id = crossdistill::autodiff::ParamId(i);
            fresh.value_mut(id).copy_from_slice(store.value(id));
        }
        let x = t.constant(images.clone(), Shape(vec![2, 1, 16, 16]));
        let (_, taps, _) = model.forward(&mut t, &fresh, x);
        let pooled = pooled_bottleneck(&mut t, &taps);
        let fed = grl_apply(&mut t, pooled, lambda);
        let logit = disc.forward(&mut t, &fresh, fed);
        let prob = t.sigmoid(logit);
        let gt = t.constant(vec![1.0, 0.0], Shape(vec![2, 1]));
        let loss = losses::bce_loss(&mut t, prob, gt, 1e-6).unwrap();
        t.scalar_value(loss)
    };
    // the GRL multiplies the encoder gradient by -lambda, so finite
    // differences of the loss see the *unreversed* slope: compare against
    // analytic / (-lambda)
    let mut checked = 0usize;
    let step = 1e-5;
    'outer: for (pi, &id) in ids.iter().enumerate() {
        for k in 0..store.value(id).len() {
            if checked >= 50 {
                break 'outer;
            }
            let orig = store.value(id)[k];
            store.value_mut(id)[k] = orig + step;
            let lp = loss_with(&store);
            store.value_mut(id)[k] = orig - step;
            let lm = loss_with(&store);
            store.value_mut(id)[k] = orig;
            let fd = (lp - lm) / (2.0 * step);
            let an = analytic[pi][k] / (-lambda);
            let denom = an.abs().max(fd.abs()).max(1e-9);
            assert!(
                ((an - fd) / denom).abs() < 1e-3,
                "fd mismatch at param {pi}[{k}]: {an} vs {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked >= 50, "expected to check 50 parameters, got {checked}");

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "criterion 1 exceeded 10 s: {elapsed:?}");
    pass(
        "1 (GRL correctness)",
        &format!("analytic rel err < 1e-6 for lambda in {{0, 0.3, 1}}, {checked} params FD-checked, {elapsed:.2?}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 2: schedule exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_schedule_exactness() {
    assert_eq!(lambda_adv(0.0), 0.0);
    assert!((lambda_adv(0.5) - 0.986614).abs() < 1e-6);
    assert!((lambda_adv(1.0) - 0.999909).abs() < 1e-6);

    let cfg = ScheduleConfig::default();
    assert_eq!(cfg.warmup_epochs, 5);
    assert_eq!(cfg.ramp_epochs, 10);
    assert_eq!(curriculum(5, &cfg), 0.0);
    assert!((curriculum(10, &cfg) - 0.5).abs() < 1e-12);
    for e in 15..40 {
        assert_eq!(curriculum(e, &cfg), 1.0);
    }
    assert_eq!(temp_decay(0, &cfg), 2.0);
    assert!((temp_decay(5, &cfg) - 1.8).abs() < 1e-12);
    assert_eq!(temp_decay(500, &cfg), 0.5);
    assert!((beta_ramp(0.0, &cfg) - 0.1).abs() < 1e-12);
    assert!((beta_ramp(1.0, &cfg) - 0.5).abs() < 1e-12);
    pass(
        "2 (schedule exactness)",
        "lambda(0)=0, lambda(0.5)=0.986614, lambda(1)=0.999909; cf(5)=0, cf(10)=0.5, cf(>=15)=1; t(0)=2, t(5)=1.8, floor 0.5; beta 0.1 -> 0.5",
    );
}

// ---------------------------------------------------------------------------
// Criterion 3: oracle equivalence
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_oracle_equivalence() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut worst: BTreeMap<&'static str, f64> = BTreeMap::new();
    let mut track = |name: &'static str, delta: f64| {
        let e = worst.entry(name).or_insert(0.0);
        if delta > *e {
            *e = delta;
        }
        assert!(delta < 1e-9, "{name}: |delta| = {delta}");
    };

    // dice vs scalar oracle on <= 64 elements
    for _ in 0..50 {
        let n = rng.gen_range(1..=64);
        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g: Vec<f64> = (0..n).map(|_| f64::from(rng.gen_bool(0.4))).collect();
        let mut t = Tape::new();
        let pv = t.constant(p.clone(), Shape(vec![n]));
        let gv = t.constant(g.clone(), Shape(vec![n]));
        let d = losses::dice_loss(&mut t, pv, gv, 1e-6).unwrap();
        let mut inter = 0.0;
        let mut ps = 0.0;
        let mut gs = 0.0;
        for i in 0..n {
            inter += p[i] * g[i];
            ps += p[i];
            gs += g[i];
        }
        let oracle = 1.0 - 2.0 * inter / (ps + gs + 1e-6);
        track("dice", (t.scalar_value(d) - oracle).abs());
    }

    // batch-contrastive vs scalar oracle
    for _ in 0..30 {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(2..=8);
        let temp = rng.gen_range(0.5..2.0);
        let s: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tt: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let sv = t.constant(s.clone(), Shape(vec![n, d]));
        let tv = t.constant(tt.clone(), Shape(vec![n, d]));
        let l = losses::contrastive_batch(&mut t, sv, tv, temp, 1e-6).unwrap();
        let oracle = oracle_contrastive(&s, &tt, n, d, temp);
        track("contrastive", (t.scalar_value(l) - oracle).abs());
    }

    // attention transfer vs scalar oracle
    for _ in 0..30 {
        let (c, h, w) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let nb = rng.gen_range(1..3);
        let s: Vec<f64> = (0..nb * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tt: Vec<f64> = (0..nb * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut t = Tape::new();
        let sv = t.constant(s.clone(), Shape(vec![nb, c, h, w]));
        let tv = t.constant(tt.clone(), Shape(vec![nb, c, h, w]));
        let l = losses::attention_transfer(&mut t, &[sv], &[tv], 1e-6).unwrap();
        let oracle = oracle_attention(&s, &tt, nb, c, h * w);
        track("attention", (t.scalar_value(l) - oracle).abs());
    }

    // hungarian vs brute force, n <= 6
    for _ in 0..200 {
        let rows = rng.gen_range(1..=6);
        let cols = rng.gen_range(1..=6);
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| rng.gen_range(0.0..9.0)).collect())
            .collect();
        let pairs = losses::hungarian_match(&cost);
        let total: f64 = pairs.iter().map(|&(r, c)| cost[r][c]).sum();
        let oracle = oracle_assignment(&cost);
        track("hungarian", (total - oracle).abs());
    }

    // hd95 vs exhaustive all-pairs oracle on <= 16x16 masks
    for _ in 0..40 {
        let size = rng.gen_range(4..=16);
        let mut a = vec![0u8; size * size];
        let mut b = vec![0u8; size * size];
        for _ in 0..rng.gen_range(1..=2 * size) {
            a[rng.gen_range(0..size * size)] = 1;
        }
        for _ in 0..rng.gen_range(1..=2 * size) {
            b[rng.gen_range(0..size * size)] = 1;
        }
        let ours = metrics::hd95(&a, &b, size);
        let oracle = oracle_hd95(&a, &b, size);
        match (ours, oracle) {
            (Some(x), Some(y)) => track("hd95", (x - y).abs()),
            (None, None) => {}
            other => panic!("hd95 empty-mask disagreement: {other:?}"),
        }
    }

    // average precision vs a hand-built PR curve oracle
    for _ in 0..40 {
        let n_gt = rng.gen_range(1..=5);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|k| GroundTruth {
                image: 0,
                bbox: [20.0 * k as f64, 0.0, 20.0 * k as f64 + 8.0, 8.0],
                label: 0,
            })
            .collect();
        // detections either hit one gt exactly or are far-off false alarms
        let n_det = rng.gen_range(0..=7);
        let dets: Vec<Detection> = (0..n_det)
            .map(|_| {
                let score = rng.gen_range(0.1..1.0);
                if rng.gen_bool(0.6) {
                    let k = rng.gen_range(0..n_gt);
                    Detection {
                        image: 0,
                        bbox: [20.0 * k as f64, 0.0, 20.0 * k as f64 + 8.0, 8.0],
                        score,
                        label: 0,
                    }
                } else {
                    Detection {
                        image: 0,
                        bbox: [500.0, 500.0, 508.0, 508.0],
                        score,
                        label: 0,
                    }
                }
            })
            .collect();
        let ours = metrics::average_precision(&dets, &gts, 0.5);
        let oracle = oracle_ap(&dets, &gts, 0.5);
        track("ap", (ours - oracle).abs());
    }

    let elapsed = started.elapsed();
    assert!(elapsed.as_secs_f64() < 60.0, "criterion 3 exceeded 60 s: {elapsed:?}");
    let detail: Vec<String> = worst
        .iter()
        .map(|(k, v)| format!("{k} |delta|<= {v:.2e}"))
        .collect();
    pass("3 (oracle equivalence)", &format!("{}; {elapsed:.2?}", detail.join(", ")));
}

fn oracle_contrastive(s: &[f64], t: &[f64], n: usize, d: usize, temp: f64) -> f64 {
    let norm_rows = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let mut sq = 0.0;
            for k in 0..d {
                sq += x[i * d + k] * x[i * d + k];
            }
            let m = sq.sqrt() + 1e-6;
            for k in 0..d {
                out[i * d + k] = x[i * d + k] / m;
            }
        }
        out
    };
    let sn = norm_rows(s);
    let tn = norm_rows(t);
    let row_probs = |v: &[f64], i: usize| -> Vec<f64> {
        let mut sims = vec![0.0; n];
        for (j, sim) in sims.iter_mut().enumerate() {
            let mut dot = 0.0;
            for k in 0..d {
                dot += v[i * d + k] * v[j * d + k];
            }
            *sim = dot / temp;
        }
        let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for s in sims.iter_mut() {
            *s = (*s - mx).exp();
            z += *s;
        }
        sims.iter().map(|e| e / z).collect()
    };
    let mut total = 0.0;
    for i in 0..n {
        let ps = row_probs(&sn, i);
        let pt = row_probs(&tn, i);
        for j in 0..n {
            total += pt[j] * (pt[j].ln() - ps[j].ln());
        }
    }
    total / n as f64
}

fn oracle_attention(s: &[f64], t: &[f64], n: usize, c: usize, hw: usize) -> f64 {
    let mut total = 0.0;
    for i in 0..n {
        let energy = |x: &[f64]| -> Vec<f64> {
            let mut e = vec![0.0; hw];
            for ch in 0..c {
                for p in 0..hw {
                    let v = x[(i * c + ch) * hw + p];
                    e[p] += v * v;
                }
            }
            e
        };
        let norm = |e: &[f64]| -> Vec<f64> {
            let mut sq = 0.0;
            for v in e {
                sq += v * v;
            }
            let m = sq.sqrt() + 1e-6;
            e.iter().map(|v| v / m).collect()
        };
        let es = norm(&energy(s));
        let et = norm(&energy(t));
        for p in 0..hw {
            total += (es[p] - et[p]) * (es[p] - et[p]);
        }
    }
    total / n as f64
}

fn oracle_assignment(cost: &[Vec<f64>]) -> f64 {
    let rows = cost.len();
    let cols = cost[0].len();
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols)
            .map(|c| (0..rows).map(|r| cost[r][c]).collect())
            .collect();
        return oracle_assignment(&t);
    }
    let mut cols_order: Vec<usize> = (0..cols).collect();
    let mut best = f64::INFINITY;
    permute_all(&mut cols_order, 0, &mut |perm| {
        let total: f64 = (0..rows).map(|r| cost[r][perm[r]]).sum();
        if total < best {
            best = total;
        }
    });
    best
}

fn permute_all(v: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        f(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute_all(v, k + 1, f);
        v.swap(k, i);
    }
}

fn oracle_hd95(a: &[u8], b: &[u8], size: usize) -> Option<f64> {
    let boundary = |m: &[u8]| -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        for y in 0..size {
            for x in 0..size {
                if m[y * size + x] == 0 {
                    continue;
                }
                let outside = |xx: isize, yy: isize| -> bool {
                    xx < 0
                        || yy < 0
                        || xx >= size as isize
                        || yy >= size as isize
                        || m[yy as usize * size + xx as usize] == 0
                };
                let (xi, yi) = (x as isize, y as isize);
                if outside(xi - 1, yi) || outside(xi + 1, yi) || outside(xi, yi - 1) || outside(xi, yi + 1) {
                    out.push((x as f64, y as f64));
                }
            }
        }
        out
    };
    let ba = boundary(a);
    let bb = boundary(b);
    if ba.is_empty() || bb.is_empty() {
        return None;
    }
    // full distance matrix, directed minima both ways
    let mut pooled = Vec::new();
    for &(x, y) in &ba {
        let mut best = f64::INFINITY;
        for &(u, v) in &bb {
            best = best.min(((x - u).powi(2) + (y - v).powi(2)).sqrt());
        }
        pooled.push(best);
    }
    for &(u, v) in &bb {
        let mut best = f64::INFINITY;
        for &(x, y) in &ba {
            best = best.min(((x - u).powi(2) + (y - v).powi(2)).sqrt());
        }
        pooled.push(best);
    }
    pooled.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let n = pooled.len();
    if n == 1 {
        return Some(pooled[0]);
    }
    let pos = 0.95 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    Some(pooled[lo] + (pos - lo as f64) * (pooled[hi] - pooled[lo]))
}

fn oracle_ap(dets: &[Detection], gts: &[GroundTruth], thresh: f64) -> f64 {
    if gts.is_empty() {
        return if dets.is_empty() { 1.0 } else { 0.0 };
    }
    if dets.is_empty() {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap()
            .then(dets[a].image.cmp(&dets[b].image))
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    let mut tp_flags = Vec::new();
    for &di in &order {
        let mut best = None;
        let mut best_iou = 0.0;
        for (gi, g) in gts.iter().enumerate() {
            if used[gi] || g.image != dets[di].image {
                continue;
            }
            let iou = losses::box_iou(&dets[di].bbox, &g.bbox);
            if iou >= thresh && iou > best_iou {
                best_iou = iou;
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            used[gi] = true;
            tp_flags.push(1.0);
        } else {
            tp_flags.push(0.0);
        }
    }
    // hand PR curve with 101-point interpolation
    let mut cum = 0.0;
    let mut pr: Vec<(f64, f64)> = Vec::new();
    for (k, f) in tp_flags.iter().enumerate() {
        cum += f;
        pr.push((cum / gts.len() as f64, cum / (k + 1) as f64));
    }
    let mut ap = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let p = pr
            .iter()
            .filter(|(rec, _)| *rec >= r - 1e-12)
            .map(|(_, p)| *p)
            .fold(0.0, f64::max);
        ap += p / 101.0;
    }
    ap
}

// ---------------------------------------------------------------------------
// Shared small-pipeline helpers
// ---------------------------------------------------------------------------

fn seg_domain(name: &str, family: ShapeFamily, fg: f64, noise: f64, blur: f64, seed: u64) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        task: Task::Segmentation,
        image_size: 32,
        shape_family: family,
        fg_mean: fg,
        fg_std: 0.06,
        bg_noise_std: noise,
        blur_sigma: blur,
        num_classes: 1,
        max_objects: 2,
        seed,
    }
}

fn desk_model(task: Task) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            levels: 3,
            channels: vec![6, 12, 16],
            bottleneck_channels: 24,
        },
        image_size: 32,
        num_classes: match task {
            Task::Segmentation => 1,
            Task::Classification => 3,
            Task::Detection => 2,
        },
        emb_dim: 16,
        embed_blocks: 3,
        region_dim: 16,
        top_k: 4,
    }
}

/// Criterion-6 segmentation group: three domains with distinct shape
/// families, contrasts and noise levels.
fn seg_run_config() -> RunConfig {
    let target = seg_domain("seg-target", ShapeFamily::Blob, 0.62, 0.10, 0.8, 9101);
    let sources = vec![
        seg_domain("seg-src-a", ShapeFamily::Ellipse, 0.80, 0.04, 0.3, 9202),
        seg_domain("seg-src-b", ShapeFamily::Rectangle, 0.55, 0.08, 0.5, 9303),
    ];
    let mut cfg = RunConfig::defaults_for(Task::Segmentation, target, sources);
    cfg.samples_per_domain = 200;
    cfg.teacher_model = desk_model(Task::Segmentation);
    cfg.student_model = desk_model(Task::Segmentation);
    cfg.fusion.joint_ch = 16;
    cfg.optim.lr_target = 0.25;
    cfg.optim.lr_source = 0.25;
    cfg.optim.lr_joint = 0.25;
    cfg.optim.lr_student = 0.25;
    cfg.optim.max_epochs = 16;
    cfg.optim.epochs_teacher = Some(12);
    cfg.optim.epochs_joint = Some(10);
    cfg.optim.epochs_student = Some(16);
    cfg
}

fn seg_experiment(out_dir: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        name: "accept-seg".into(),
        out_dir: out_dir.to_path_buf(),
        seeds: vec![101, 202, 303],
        run: seg_run_config(),
        ablation: AblationMatrix::default(),
    }
}

struct SegFixture {
    _dir: tempfile::TempDir,
    run_dir: PathBuf,
    report: MetricsReport,
    cfg: ExperimentConfig,
    wall: std::time::Duration,
}

static SEG: OnceLock<SegFixture> = OnceLock::new();

fn seg_fixture() -> &'static SegFixture {
    SEG.get_or_init(|| {
        let dir = tempfile::tempdir().expect("tempdir");
        let cfg = seg_experiment(dir.path());
        let started = Instant::now();
        let run_dir = cmd_run(&cfg, Pipeline::Full, None, None, false).expect("seg pipeline");
        let wall = started.elapsed();
        let csv = std::fs::read_to_string(run_dir.join("report.csv")).expect("report");
        let report = MetricsReport::from_csv(&csv).expect("parse report");
        SegFixture {
            _dir: dir,
            run_dir,
            report,
            cfg,
            wall,
        }
    })
}

fn median_metric(report: &MetricsReport, model: ModelTag, dataset: &str, metric: &str) -> f64 {
    let values = report.values(model, dataset, metric);
    assert!(!values.is_empty(), "no rows for {model}/{dataset}/{metric}");
    median(&values)
}

// ---------------------------------------------------------------------------
// Criterion 4: curriculum gate on a rigged run
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_curriculum_gate() {
    // a rigged 3-epoch distillation run with warmup 5: cf = 0 throughout,
    // so every logged total equals alpha * task to 1e-7
    let mut cfg = seg_run_config();
    cfg.samples_per_domain = 32;
    cfg.sources.truncate(1);
    cfg.optim.epochs_teacher = Some(2);
    cfg.optim.epochs_joint = Some(2);
    cfg.optim.epochs_student = Some(3);
    cfg.seed = 7;
    let target = DomainData::generate(&cfg.target, cfg.samples_per_domain, cfg.split_ratios).unwrap();
    let source = DomainData::generate(&cfg.sources[0], cfg.samples_per_domain, cfg.split_ratios).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t_ckpt = dir.path().join("t.ckpt");
    let s_ckpt = dir.path().join("s.ckpt");
    let j_ckpt = dir.path().join("j.ckpt");
    let st_ckpt = dir.path().join("st.ckpt");
    train::stage1_target(&cfg, &target, &t_ckpt).unwrap();
    train::stage1_source(&cfg, 0, &source, &target, &s_ckpt).unwrap();
    let teachers = vec![t_ckpt, s_ckpt];
    stage2_joint(&cfg, &target, &teachers, &j_ckpt).unwrap();
    let summary = stage3_distill(&cfg, &target, &teachers, &j_ckpt, &st_ckpt).unwrap();

    assert_eq!(summary.log.len(), 3);
    let mut max_gap: f64 = 0.0;
    for row in &summary.log {
        assert_eq!(row.schedule["cf"], 0.0, "warmup must gate the curriculum");
        let gap = (row.total_loss - cfg.weights.alpha * row.task_loss).abs();
        max_gap = max_gap.max(gap);
        assert!(
            gap <= 1e-7,
            "epoch {}: total {} vs alpha*task {}",
            row.epoch,
            row.total_loss,
            cfg.weights.alpha * row.task_loss
        );
    }
    pass(
        "4 (curriculum gate)",
        &format!("3 warmup epochs, max |total - alpha*task| = {max_gap:.2e}"),
    );
}

// ---------------------------------------------------------------------------
// Criterion 5: freeze invariant over 20 explicit steps
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_freeze_invariant() {
    let mut cfg = seg_run_config();
    cfg.samples_per_domain = 40;
    cfg.sources.truncate(1);
    cfg.optim.epochs_teacher = Some(2);
    cfg.seed = 13;
    let target = DomainData::generate(&cfg.target, cfg.samples_per_domain, cfg.split_ratios).unwrap();
    let source = DomainData::generate(&cfg.sources[0], cfg.samples_per_domain, cfg.split_ratios).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let t_ckpt = dir.path().join("t.ckpt");
    let s_ckpt = dir.path().join("s.ckpt");
    train::stage1_target(&cfg, &target, &t_ckpt).unwrap();
    train::stage1_source(&cfg, 0, &source, &target, &s_ckpt).unwrap();
    let teachers = vec![t_ckpt.clone(), s_ckpt.clone()];

    // 40 samples -> 32 train / batch 8 = 4 batches; 5 epochs = 20 steps
    cfg.optim.epochs_joint = Some(5);
    cfg.optim.epochs_student = Some(5);

    // serialize the live teacher parameters before and after each stage
    let serialize_teachers = |store: &ParamStore,
                              ids: &[crossdistill::autodiff::ParamId],
                              path: &std::path::Path| {
        let meta = checkpoint::CheckpointMeta {
            config_hash: "probe".into(),
            task: Task::Segmentation,
            stage: "probe".into(),
            epoch: 0,
            seed: 0,
            val_loss: 0.0,
            teacher_hashes: vec![],
        };
        checkpoint::save(path, &meta, store, ids).unwrap();
        std::fs::read(path).unwrap()
    };

    // run stage 2 and stage 3 through the public API, then verify the
    // teacher checkpoints on disk stayed byte-identical and reload them to
    // confirm the serialized weights match a fresh serialization
    let before_t = std::fs::read(&t_ckpt).unwrap();
    let before_s = std::fs::read(&s_ckpt).unwrap();
    let j_ckpt = dir.path().join("j.ckpt");
    stage2_joint(&cfg, &target, &teachers, &j_ckpt).unwrap();
    assert_eq!(std::fs::read(&t_ckpt).unwrap(), before_t);
    assert_eq!(std::fs::read(&s_ckpt).unwrap(), before_s);
    let st_ckpt = dir.path().join("st.ckpt");
    stage3_distill(&cfg, &target, &teachers, &j_ckpt, &st_ckpt).unwrap();
    assert_eq!(std::fs::read(&t_ckpt).unwrap(), before_t);
    assert_eq!(std::fs::read(&s_ckpt).unwrap(), before_s);

    // in-memory check: 20 manual optimizer steps on the joint trainables
    // (and then a student) leave the frozen teacher bytes untouched
    let mut store = ParamStore::new();
    let (joint, _) = train::load_joint_teacher(&cfg, &teachers, &mut store).unwrap();
    let teacher_ids: Vec<_> = joint.frozen_param_ids();
    let probe = dir.path().join("probe.bin");
    let bytes_before = serialize_teachers(&store, &teacher_ids, &probe);
    let trainables = joint.trainable_param_ids();
    let mut steps = 0;
    'outer: for epoch in 0..5 {
        let batches =
            crossdistill::synthdata::epoch_batches(&target.split.train, cfg.optim.batch, 1, epoch);
        for batch in batches {
            if steps >= 20 {
                break 'outer;
            }
            let samples: Vec<&crossdistill::synthdata::Sample> =
                batch.iter().map(|&i| &target.samples[i]).collect();
            let mut t = Tape::new();
            let (data, dims) = crossdistill::synthdata::batch_images(&samples);
            let images = t.constant(data, Shape(dims));
            let fwd = joint.forward(&mut t, &store, images).unwrap();
            let pred = match fwd.prediction {
                crossdistill::nets::Prediction::Mask(p) => p,
                _ => unreachable!(),
            };
            let mut gt_data = Vec::new();
            for s in &samples {
                gt_data.extend(s.mask().unwrap().iter().map(|&v| v as f64));
            }
            let gt = t.constant(gt_data, Shape(vec![samples.len(), 1, 32, 32]));
            let loss = losses::dice_loss_batched(&mut t, pred, gt, 1e-6).unwrap();
            store.zero_grads();
            t.backward(loss, &mut store);
            store.sgd_step(&trainables, 0.25, 0.0);
            steps += 1;
        }
    }
    assert_eq!(steps, 20);
    let bytes_after = serialize_teachers(&store, &teacher_ids, &probe);
    assert_eq!(bytes_before, bytes_after, "teacher weights moved during 20 joint steps");

    pass(
        "5 (freeze invariant)",
        "teacher checkpoints byte-identical after stage 2 and stage 3; 20 manual joint steps leave serialized teacher weights unchanged",
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: segmentation trend
// ---------------------------------------------------------------------------

#[test]
fn criterion_6_segmentation_trend() {
    let fx = seg_fixture();
    assert!(
        fx.wall.as_secs() < 1800,
        "segmentation group exceeded 30 min: {:?}",
        fx.wall
    );
    let dataset = &fx.cfg.run.target.name;
    let student = median_metric(&fx.report, ModelTag::Student, dataset, "iou");
    let baseline = median_metric(&fx.report, ModelTag::DatasetSpecific, dataset, "iou");
    let multihead = median_metric(&fx.report, ModelTag::MultiHead, dataset, "iou");
    let margin_sb = student - baseline;
    let margin_bm = baseline - multihead;
    assert!(
        margin_sb >= 0.0,
        "student IoU {student:.2} must be >= baseline IoU {baseline:.2}"
    );
    assert!(
        margin_bm >= 0.0,
        "baseline IoU {baseline:.2} must be >= multi-head IoU {multihead:.2}"
    );
    pass(
        "6 (segmentation trend)",
        &format!(
            "median IoU student {student:.2} >= baseline {baseline:.2} >= multi-head {multihead:.2} (margins +{margin_sb:.2}, +{margin_bm:.2}); wall {:.0?}",
            fx.wall
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: ablation shape (source count, tap depth)
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_ablation_shape() {
    let fx = seg_fixture();
    let dataset = fx.cfg.run.target.name.clone();
    let two_source_student = median_metric(&fx.report, ModelTag::Student, &dataset, "iou");

    // single-source and encoder-only variants reuse the fixture's teacher
    // checkpoints per seed
    let mut single_vals = Vec::new();
    let mut encoder_only_vals = Vec::new();
    for &seed in &fx.cfg.seeds {
        let mut run = fx.cfg.run.clone();
        run.seed = seed;
        let target = DomainData::generate(&run.target, run.samples_per_domain, run.split_ratios).unwrap();

        let t_ckpt = fx.run_dir.join("checkpoints").join(format!("teacher-target-seed{seed}.ckpt"));
        let s0_ckpt = fx.run_dir.join("checkpoints").join(format!("teacher-source0-seed{seed}.ckpt"));
        let s1_ckpt = fx.run_dir.join("checkpoints").join(format!("teacher-source1-seed{seed}.ckpt"));

        // single source: target teacher + source 1 only
        let dir = tempfile::tempdir().unwrap();
        let mut run1 = run.clone();
        run1.sources.truncate(1);
        let teachers1 = vec![t_ckpt.clone(), s0_ckpt.clone()];
        let j1 = dir.path().join("joint-1src.ckpt");
        stage2_joint(&run1, &target, &teachers1, &j1).unwrap();
        let st1 = dir.path().join("student-1src.ckpt");
        stage3_distill(&run1, &target, &teachers1, &j1, &st1).unwrap();
        let mut rep = MetricsReport::default();
        train::evaluate_checkpoint(
            &run1,
            &run1.student_model,
            &st1,
            &target,
            &target.split.test,
            ModelTag::Student,
            &mut rep,
        )
        .unwrap();
        single_vals.push(rep.get(ModelTag::Student, &dataset, "iou", seed).unwrap());

        // encoder-only tap depth reuses the fixture's two-source joint
        let j2 = fx.run_dir.join("checkpoints").join(format!("joint-seed{seed}.ckpt"));
        let teachers2 = vec![t_ckpt, s0_ckpt, s1_ckpt];
        let mut run_enc = run.clone();
        run_enc.tap_depth = TapDepth::Encoder;
        let st_enc = dir.path().join("student-enc.ckpt");
        stage3_distill(&run_enc, &target, &teachers2, &j2, &st_enc).unwrap();
        let mut rep = MetricsReport::default();
        train::evaluate_checkpoint(
            &run_enc,
            &run_enc.student_model,
            &st_enc,
            &target,
            &target.split.test,
            ModelTag::Student,
            &mut rep,
        )
        .unwrap();
        encoder_only_vals.push(rep.get(ModelTag::Student, &dataset, "iou", seed).unwrap());
    }

    let single_source_student = median(&single_vals);
    let encoder_only_student = median(&encoder_only_vals);
    let margin_sources = two_source_student - single_source_student;
    let margin_taps = two_source_student - encoder_only_student;
    assert!(
        margin_sources >= 0.0,
        "two-source student {two_source_student:.2} must be >= single-source {single_source_student:.2}"
    );
    assert!(
        margin_taps >= 0.0,
        "encoder+bottleneck student {two_source_student:.2} must be >= encoder-only {encoder_only_student:.2}"
    );
    pass(
        "7 (ablation shape)",
        &format!(
            "median IoU two-source {two_source_student:.2} >= single-source {single_source_student:.2} (+{margin_sources:.2}); encoder+bottleneck {two_source_student:.2} >= encoder-only {encoder_only_student:.2} (+{margin_taps:.2})"
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 8: classification and detection smoke
// ---------------------------------------------------------------------------

fn cls_domain(name: &str, fg: f64, noise: f64, blur: f64, seed: u64) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        task: Task::Classification,
        image_size: 32,
        shape_family: ShapeFamily::Ellipse,
        fg_mean: fg,
        fg_std: 0.06,
        bg_noise_std: noise,
        blur_sigma: blur,
        num_classes: 3,
        max_objects: 1,
        seed,
    }
}

fn det_domain(name: &str, fg: f64, noise: f64, blur: f64, seed: u64) -> DomainSpec {
    DomainSpec {
        name: name.into(),
        task: Task::Detection,
        image_size: 32,
        shape_family: ShapeFamily::Ellipse,
        fg_mean: fg,
        fg_std: 0.05,
        bg_noise_std: noise,
        blur_sigma: blur,
        num_classes: 2,
        max_objects: 2,
        seed,
    }
}

/// Train teachers + joint + student + baseline over three seeds, returning
/// per-seed (student, baseline) metric values on the target test split.
fn trend_run(cfg_base: &RunConfig, seeds: &[u64], metric: &str) -> (Vec<f64>, Vec<f64>) {
    let mut student_vals = Vec::new();
    let mut baseline_vals = Vec::new();
    for &seed in seeds {
        let mut run = cfg_base.clone();
        run.seed = seed;
        let target = DomainData::generate(&run.target, run.samples_per_domain, run.split_ratios).unwrap();
        let sources: Vec<DomainData> = run
            .sources
            .iter()
            .map(|s| DomainData::generate(s, run.samples_per_domain, run.split_ratios).unwrap())
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let t_ckpt = dir.path().join("t.ckpt");
        train::stage1_target(&run, &target, &t_ckpt).unwrap();
        let mut teachers = vec![t_ckpt];
        for (k, source) in sources.iter().enumerate() {
            let ckpt = dir.path().join(format!("s{k}.ckpt"));
            train::stage1_source(&run, k, source, &target, &ckpt).unwrap();
            teachers.push(ckpt);
        }
        let j_ckpt = dir.path().join("j.ckpt");
        stage2_joint(&run, &target, &teachers, &j_ckpt).unwrap();
        let st_ckpt = dir.path().join("st.ckpt");
        stage3_distill(&run, &target, &teachers, &j_ckpt, &st_ckpt).unwrap();
        let b_ckpt = dir.path().join("b.ckpt");
        train::train_baseline(&run, &target, &b_ckpt).unwrap();

        let mut rep = MetricsReport::default();
        train::evaluate_checkpoint(
            &run,
            &run.student_model,
            &st_ckpt,
            &target,
            &target.split.test,
            ModelTag::Student,
            &mut rep,
        )
        .unwrap();
        train::evaluate_checkpoint(
            &run,
            &run.student_model,
            &b_ckpt,
            &target,
            &target.split.test,
            ModelTag::DatasetSpecific,
            &mut rep,
        )
        .unwrap();
        student_vals.push(rep.get(ModelTag::Student, &run.target.name, metric, seed).unwrap());
        baseline_vals.push(
            rep.get(ModelTag::DatasetSpecific, &run.target.name, metric, seed)
                .unwrap(),
        );
    }
    (student_vals, baseline_vals)
}

#[test]
fn criterion_8_classification_and_detection_smoke() {
    // classification: 3-domain group
    let started = Instant::now();
    let target = cls_domain("cls-target", 0.60, 0.16, 1.0, 4101);
    let sources = vec![
        cls_domain("cls-src-a", 0.80, 0.05, 0.3, 4202),
        cls_domain("cls-src-b", 0.55, 0.10, 0.6, 4303),
    ];
    let mut cls = RunConfig::defaults_for(Task::Classification, target, sources);
    cls.samples_per_domain = 200;
    cls.teacher_model = desk_model(Task::Classification);
    cls.student_model = desk_model(Task::Classification);
    cls.fusion.joint_ch = 16;
    cls.optim.lr_target = 0.25;
    cls.optim.lr_source = 0.25;
    cls.optim.lr_joint = 0.25;
    cls.optim.lr_student = 0.25;
    cls.optim.max_epochs = 16;
    cls.optim.epochs_teacher = Some(12);
    cls.optim.epochs_joint = Some(10);
    cls.optim.epochs_student = Some(16);
    let seeds = [101u64, 202, 303];
    let (cls_student, cls_baseline) = trend_run(&cls, &seeds, "accuracy");
    let cls_wall = started.elapsed();
    assert!(cls_wall.as_secs() < 1800, "classification group exceeded 30 min");

    let cls_s = median(&cls_student);
    let cls_b = median(&cls_baseline);
    assert!(
        cls_s >= cls_b,
        "student accuracy {cls_s:.2} must be >= baseline {cls_b:.2}"
    );

    // detection: 2-domain group
    let started = Instant::now();
    let target = det_domain("det-target", 0.70, 0.08, 0.5, 5101);
    let sources = vec![det_domain("det-src-a", 0.85, 0.03, 0.3, 5202)];
    let mut det = RunConfig::defaults_for(Task::Detection, target, sources);
    det.samples_per_domain = 200;
    det.teacher_model = desk_model(Task::Detection);
    det.student_model = desk_model(Task::Detection);
    det.fusion.joint_ch = 16;
    det.optim.lr_target = 0.1;
    det.optim.lr_source = 0.1;
    det.optim.lr_joint = 0.1;
    det.optim.lr_student = 0.1;
    det.optim.max_epochs = 20;
    det.optim.epochs_teacher = Some(16);
    det.optim.epochs_joint = Some(12);
    det.optim.epochs_student = Some(20);
    let (det_student, det_baseline) = trend_run(&det, &seeds, "map50");
    let det_wall = started.elapsed();
    assert!(det_wall.as_secs() < 1800, "detection group exceeded 30 min");

    let det_s = median(&det_student);
    let det_b = median(&det_baseline);
    assert!(
        det_s >= det_b,
        "student mAP@0.50 {det_s:.2} must be >= baseline {det_b:.2}"
    );
    pass(
        "8 (classification + detection smoke)",
        &format!(
            "median accuracy student {cls_s:.2} >= baseline {cls_b:.2} (+{:.2}, {cls_wall:.0?}); median mAP50 student {det_s:.2} >= baseline {det_b:.2} (+{:.2}, {det_wall:.0?})",
            cls_s - cls_b,
            det_s - det_b
        ),
    );
}

// ---------------------------------------------------------------------------
// Criterion 9: determinism
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism() {
    let fx = seg_fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fx.cfg.clone();
    cfg.out_dir = dir.path().to_path_buf();
    let rerun_dir = cmd_run(&cfg, Pipeline::Full, None, None, false).expect("rerun");
    let a = std::fs::read(fx.run_dir.join("report.csv")).unwrap();
    let b = std::fs::read(rerun_dir.join("report.csv")).unwrap();
    assert_eq!(a, b, "reports must be byte-identical across reruns");
    pass(
        "9 (determinism)",
        &format!("rerun report byte-identical ({} bytes)", a.len()),
    );
}
