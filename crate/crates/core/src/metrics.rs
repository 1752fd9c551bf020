//! Evaluation metrics: segmentation overlap scores and HD95, classification
//! accuracy, detection AP/mAP, and the tabular report rows shared by all
//! runs.
//!
//! Ratio metrics (IoU, DSC, precision, recall, accuracy, AP) are computed in
//! [0, 1] and reported x100 in [`MetricsReport`] rows; HD95 is in pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::box_iou;

const EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegOverlap {
    pub iou: f64,
    pub dsc: f64,
    pub precision: f64,
    pub recall: f64,
}

/// Threshold a probability map into a binary mask at 0.5.
pub fn threshold_mask(probs: &[f64]) -> Vec<u8> {
    probs.iter().map(|&p| u8::from(p >= 0.5)).collect()
}

/// Overlap metrics between binary masks.
///
/// Empty-mask conventions: both empty -> all 1; prediction empty with a
/// nonempty ground truth (or vice versa) -> all 0 via the eps guards.
pub fn seg_overlap(pred: &[u8], gt: &[u8]) -> Result<SegOverlap> {
    if pred.len() != gt.len() {
        return Err(Error::shape("seg_overlap", gt.len().to_string(), pred.len().to_string()));
    }
    let mut inter = 0usize;
    let mut p_count = 0usize;
    let mut g_count = 0usize;
    for (&p, &g) in pred.iter().zip(gt) {
        let p = usize::from(p != 0);
        let g = usize::from(g != 0);
        inter += p & g;
        p_count += p;
        g_count += g;
    }
    if p_count == 0 && g_count == 0 {
        return Ok(SegOverlap {
            iou: 1.0,
            dsc: 1.0,
            precision: 1.0,
            recall: 1.0,
        });
    }
    let union = p_count + g_count - inter;
    Ok(SegOverlap {
        iou: inter as f64 / (union as f64 + EPS),
        dsc: 2.0 * inter as f64 / (p_count as f64 + g_count as f64 + EPS),
        precision: inter as f64 / (p_count as f64 + EPS),
        recall: inter as f64 / (g_count as f64 + EPS),
    })
}

/// 4-connectivity boundary pixels: mask pixels with at least one
/// 4-neighbour outside the mask (image borders count as outside).
pub fn boundary_pixels(mask: &[u8], size: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let at = |x: isize, y: isize| -> u8 {
        if x < 0 || y < 0 || x >= size as isize || y >= size as isize {
            0
        } else {
            mask[y as usize * size + x as usize]
        }
    };
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] != 0 {
                let (xi, yi) = (x as isize, y as isize);
                if at(xi - 1, yi) == 0 || at(xi + 1, yi) == 0 || at(xi, yi - 1) == 0 || at(xi, yi + 1) == 0
                {
                    out.push((x, y));
                }
            }
        }
    }
    out
}

/// 95th percentile (linear interpolation) of the pooled bidirectional
/// boundary-to-boundary nearest distances. `None` when either mask is
/// empty; callers record those as missing and exclude them from averages.
pub fn hd95(pred: &[u8], gt: &[u8], size: usize) -> Option<f64> {
    let pb = boundary_pixels(pred, size);
    let gb = boundary_pixels(gt, size);
    if pb.is_empty() || gb.is_empty() {
        return None;
    }
    let mut pooled = Vec::with_capacity(pb.len() + gb.len());
    directed_nearest(&pb, &gb, &mut pooled);
    directed_nearest(&gb, &pb, &mut pooled);
    Some(percentile_interpolated(&mut pooled, 0.95))
}

fn directed_nearest(from: &[(usize, usize)], to: &[(usize, usize)], out: &mut Vec<f64>) {
    for &(x, y) in from {
        let mut best = f64::INFINITY;
        for &(u, v) in to {
            let dx = x as f64 - u as f64;
            let dy = y as f64 - v as f64;
            let d2 = dx * dx + dy * dy;
            if d2 < best {
                best = d2;
            }
        }
        out.push(best.sqrt());
    }
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile_interpolated(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n == 1 {
        return values[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    values[lo] + frac * (values[hi] - values[lo])
}

pub fn accuracy(pred_labels: &[usize], gt_labels: &[usize]) -> Result<f64> {
    if pred_labels.len() != gt_labels.len() {
        return Err(Error::shape(
            "accuracy",
            gt_labels.len().to_string(),
            pred_labels.len().to_string(),
        ));
    }
    if pred_labels.is_empty() {
        return Err(Error::validation("labels", "empty evaluation set"));
    }
    let correct = pred_labels.iter().zip(gt_labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred_labels.len() as f64)
}

/// One scored detection, in pixel-edge box coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Detection {
    pub image: usize,
    pub bbox: [f64; 4],
    pub score: f64,
    pub label: usize,
}

/// One ground-truth box.
#[derive(Clone, Copy, Debug)]
pub struct GroundTruth {
    pub image: usize,
    pub bbox: [f64; 4],
    pub label: usize,
}

/// Greedy IoU-threshold non-maximum suppression over one image's
/// detections; returns kept indices, score-descending.
pub fn nms(dets: &[Detection], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept.iter().any(|&k| {
            dets[k].label == dets[i].label && box_iou(&dets[k].bbox, &dets[i].bbox) >= iou_thresh
        });
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Average precision for a single class at one IoU threshold, using greedy
/// score-descending matching and 101-point interpolation.
///
/// Conventions: no ground truths and no detections -> 1 (logged by callers);
/// no ground truths with detections -> 0; ground truths without detections
/// -> 0.
pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> f64 {
    let n_gt = gts.len();
    if n_gt == 0 {
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
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(dets[a].image.cmp(&dets[b].image))
            .then(a.cmp(&b))
    });

    let mut gt_matched = vec![false; n_gt];
    let mut tp = Vec::with_capacity(dets.len());
    for &di in &order {
        let d = &dets[di];
        let mut best_iou = 0.0;
        let mut best_gt: Option<usize> = None;
        for (gi, g) in gts.iter().enumerate() {
            if g.image != d.image || gt_matched[gi] {
                continue;
            }
            let iou = box_iou(&d.bbox, &g.bbox);
            if iou >= iou_thresh && iou > best_iou {
                best_iou = iou;
                best_gt = Some(gi);
            }
        }
        match best_gt {
            Some(gi) => {
                gt_matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // precision/recall points along the ranked list
    let mut cum_tp = 0usize;
    let mut precisions = Vec::with_capacity(tp.len());
    let mut recalls = Vec::with_capacity(tp.len());
    for (k, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            cum_tp += 1;
        }
        precisions.push(cum_tp as f64 / (k + 1) as f64);
        recalls.push(cum_tp as f64 / n_gt as f64);
    }

    // 101-point interpolation: mean over r in {0, 0.01, ..., 1} of the max
    // precision at recall >= r
    let mut ap = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let p = precisions
            .iter()
            .zip(&recalls)
            .filter(|(_, &rec)| rec >= r - 1e-12)
            .map(|(&p, _)| p)
            .fold(0.0, f64::max);
        ap += p / 101.0;
    }
    ap
}

/// mAP at 0.50 and averaged over thresholds 0.50:0.05:0.95, both averaged
/// over classes `0..num_classes`.
pub fn map_range(dets: &[Detection], gts: &[GroundTruth], num_classes: usize) -> (f64, f64) {
    let thresholds: Vec<f64> = (0..10).map(|i| 0.5 + 0.05 * i as f64).collect();
    debug_assert_eq!(thresholds.len(), 10);
    let mut map50 = 0.0;
    let mut map5095 = 0.0;
    for class in 0..num_classes {
        let class_dets: Vec<Detection> =
            dets.iter().filter(|d| d.label == class).copied().collect();
        let class_gts: Vec<GroundTruth> =
            gts.iter().filter(|g| g.label == class).copied().collect();
        if class_gts.is_empty() && class_dets.is_empty() {
            log::debug!("map_range: class {class} has no boxes, AP defaults to 1");
        }
        map50 += average_precision(&class_dets, &class_gts, 0.5) / num_classes as f64;
        let mut over_t = 0.0;
        for &t in &thresholds {
            over_t += average_precision(&class_dets, &class_gts, t) / thresholds.len() as f64;
        }
        map5095 += over_t / num_classes as f64;
    }
    (map50, map5095)
}

// ---------------------------------------------------------------------------
// Report rows
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    MultiHead,
    DatasetSpecific,
    JointTeacher,
    Student,
    Teacher,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelTag::MultiHead => "multi-head",
            ModelTag::DatasetSpecific => "dataset-specific",
            ModelTag::JointTeacher => "joint-teacher",
            ModelTag::Student => "student",
            ModelTag::Teacher => "teacher",
        };
        write!(f, "{s}")
    }
}

impl std::str::FromStr for ModelTag {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "multi-head" => ModelTag::MultiHead,
            "dataset-specific" => ModelTag::DatasetSpecific,
            "joint-teacher" => ModelTag::JointTeacher,
            "student" => ModelTag::Student,
            "teacher" => ModelTag::Teacher,
            other => return Err(Error::Other(format!("unknown model tag {other}"))),
        })
    }
}

/// One (model, dataset, metric, value, seed) evaluation row. Ratio metrics
/// are stored x100.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: ModelTag,
    pub dataset: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn push(&mut self, model: ModelTag, dataset: &str, metric: &str, value: f64, seed: u64) {
        self.rows.push(ReportRow {
            model,
            dataset: dataset.to_string(),
            metric: metric.to_string(),
            value,
            seed,
        });
    }

    pub fn extend(&mut self, other: &MetricsReport) {
        self.rows.extend(other.rows.iter().cloned());
    }

    pub fn get(&self, model: ModelTag, dataset: &str, metric: &str, seed: u64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && r.dataset == dataset && r.metric == metric && r.seed == seed)
            .map(|r| r.value)
    }

    /// Values of one metric across seeds.
    pub fn values(&self, model: ModelTag, dataset: &str, metric: &str) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.model == model && r.dataset == dataset && r.metric == metric)
            .map(|r| r.value)
            .collect()
    }

    /// CSV with the fixed column order `model,dataset,metric,value,seed`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("model,dataset,metric,value,seed\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.model, r.dataset, r.metric, format_value(r.value), r.seed
            ));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if ln == 0 || line.trim().is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::Other(format!("bad report row at line {}", ln + 1)));
            }
            rows.push(ReportRow {
                model: parts[0].parse()?,
                dataset: parts[1].to_string(),
                metric: parts[2].to_string(),
                value: parts[3]
                    .parse()
                    .map_err(|e| Error::Other(format!("bad value at line {}: {e}", ln + 1)))?,
                seed: parts[4]
                    .parse()
                    .map_err(|e| Error::Other(format!("bad seed at line {}: {e}", ln + 1)))?,
            });
        }
        Ok(MetricsReport { rows })
    }
}

/// Shortest round-trippable decimal form.
pub fn format_value(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    s
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
