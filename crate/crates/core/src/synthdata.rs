//! Deterministic synthetic multi-domain datasets for segmentation,
//! classification and detection.
//!
//! Each domain is described by a [`DomainSpec`]; samples are rendered
//! procedurally (ellipses, rectangles, or lobed blobs over a noisy
//! background) with per-sample RNG streams derived from `(seed, index)`,
//! so generation is order-independent and two equal specs produce
//! bit-identical datasets.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Background base intensity; domain shift moves everything else.
pub const BG_MEAN: f64 = 0.2;

/// Names of the available shape families, in label order.
pub const FAMILY_NAMES: [&str; 3] = ["ellipse", "rectangle", "blob"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Classification,
    Detection,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Segmentation => write!(f, "segmentation"),
            Task::Classification => write!(f, "classification"),
            Task::Detection => write!(f, "detection"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeFamily {
    Ellipse,
    Rectangle,
    Blob,
}

impl ShapeFamily {
    pub fn index(self) -> usize {
        match self {
            ShapeFamily::Ellipse => 0,
            ShapeFamily::Rectangle => 1,
            ShapeFamily::Blob => 2,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => ShapeFamily::Ellipse,
            1 => ShapeFamily::Rectangle,
            _ => ShapeFamily::Blob,
        }
    }
}

/// One synthetic domain: rendering statistics plus a seed.
///
/// For segmentation every object uses `shape_family`. For classification
/// and detection the object family doubles as the class label and is drawn
/// per sample (classification) or per object (detection) from the first
/// `num_classes` families, so all domains in a group share a label space;
/// `shape_family` is ignored there.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub task: Task,
    pub image_size: usize,
    pub shape_family: ShapeFamily,
    pub fg_mean: f64,
    pub fg_std: f64,
    pub bg_noise_std: f64,
    pub blur_sigma: f64,
    pub num_classes: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::validation("image_size", "must be >= 16"));
        }
        if !(0.0..=1.0).contains(&self.fg_mean) {
            return Err(Error::validation("fg_mean", "must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.fg_std) {
            return Err(Error::validation("fg_std", "must be in [0,1]"));
        }
        if self.fg_mean - BG_MEAN < 0.1 {
            return Err(Error::validation(
                "fg_mean",
                format!("must exceed background mean {BG_MEAN} by at least 0.1"),
            ));
        }
        if self.bg_noise_std < 0.0 {
            return Err(Error::validation("bg_noise_std", "must be >= 0"));
        }
        if self.blur_sigma < 0.0 {
            return Err(Error::validation("blur_sigma", "must be >= 0"));
        }
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes", "must be >= 1"));
        }
        if matches!(self.task, Task::Classification | Task::Detection)
            && self.num_classes > FAMILY_NAMES.len()
        {
            return Err(Error::validation(
                "num_classes",
                format!("at most {} shape families are available", FAMILY_NAMES.len()),
            ));
        }
        if self.max_objects == 0 {
            return Err(Error::validation("max_objects", "must be >= 1"));
        }
        Ok(())
    }
}

/// Axis-aligned box in pixel-edge coordinates: `x_min` is the left edge of
/// the leftmost foreground pixel, `x_max` the right edge of the rightmost,
/// so a single pixel at column `c` spans `[c, c+1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
    pub label: usize,
}

impl BoundingBox {
    pub fn is_valid(&self, image_size: usize) -> bool {
        self.x_min < self.x_max
            && self.y_min < self.y_max
            && self.x_min >= 0.0
            && self.y_min >= 0.0
            && self.x_max <= image_size as f32
            && self.y_max <= image_size as f32
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Annotation {
    /// Binary foreground mask as run-length counts of alternating runs
    /// starting with zeros, row-major.
    Mask { rle: Vec<usize> },
    Label { label: usize },
    Boxes { boxes: Vec<BoundingBox> },
}

/// One labeled example. The image is stored at f32 precision so in-memory
/// data and the on-disk format agree bit for bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub size: usize,
    pub annotation: Annotation,
}

impl Sample {
    pub fn mask(&self) -> Option<Vec<u8>> {
        match &self.annotation {
            Annotation::Mask { rle } => Some(rle_decode(rle, self.size * self.size)),
            _ => None,
        }
    }
    pub fn label(&self) -> Option<usize> {
        match &self.annotation {
            Annotation::Label { label } => Some(*label),
            _ => None,
        }
    }
    pub fn boxes(&self) -> Option<&[BoundingBox]> {
        match &self.annotation {
            Annotation::Boxes { boxes } => Some(boxes),
            _ => None,
        }
    }
}

/// RLE over a binary grid: counts of alternating runs starting with zeros.
pub fn rle_encode(mask: &[u8]) -> Vec<usize> {
    let mut counts = Vec::new();
    let mut current = 0u8;
    let mut run = 0usize;
    for &m in mask {
        if m == current {
            run += 1;
        } else {
            counts.push(run);
            current = 1 - current;
            run = 1;
        }
    }
    counts.push(run);
    counts
}

pub fn rle_decode(counts: &[usize], len: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    let mut value = 0u8;
    for &c in counts {
        out.extend(std::iter::repeat(value).take(c));
        value = 1 - value;
    }
    debug_assert_eq!(out.len(), len);
    out
}

/// Train/val/test index partition.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: (f64, f64, f64),
}

impl DatasetSplit {
    pub fn check_partition(&self, n: usize) -> bool {
        let mut all: Vec<usize> = self
            .train
            .iter()
            .chain(&self.val)
            .chain(&self.test)
            .copied()
            .collect();
        all.sort_unstable();
        all.len() == n && all.iter().enumerate().all(|(i, &v)| i == v)
    }
}

/// Paired source/target mini-batch for adversarial teacher training.
/// `domain_labels` holds 1 for each source sample followed by 0 for each
/// target sample.
#[derive(Clone, Debug)]
pub struct PairedBatch {
    pub source: Vec<Sample>,
    pub target: Vec<Sample>,
    pub domain_labels: Vec<u8>,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Independent RNG stream for sample `index` of a domain.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed ^ splitmix64(index)))
}

/// Mix a named sub-stream out of a base seed.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    splitmix64(seed ^ splitmix64(salt))
}

struct ObjectGeom {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    /// blob lobes: (amplitude, frequency, phase)
    lobes: Vec<(f64, f64, f64)>,
    intensity: f64,
}

impl ObjectGeom {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        match self.family {
            ShapeFamily::Rectangle => dx.abs() <= self.rx && dy.abs() <= self.ry,
            ShapeFamily::Ellipse => (dx / self.rx).powi(2) + (dy / self.ry).powi(2) <= 1.0,
            ShapeFamily::Blob => {
                let r = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let mut radius = self.rx;
                for &(amp, freq, phase) in &self.lobes {
                    radius *= 1.0 + amp * (freq * theta + phase).sin();
                }
                r <= radius.max(1.0)
            }
        }
    }
}

fn draw_object(
    rng: &mut ChaCha8Rng,
    family: ShapeFamily,
    size: usize,
    intensity_dist: &Normal<f64>,
) -> ObjectGeom {
    let s = size as f64;
    let r_lo = 0.10 * s;
    let r_hi = 0.22 * s;
    let rx = rng.gen_range(r_lo..r_hi).max(1.5);
    let ry = rng.gen_range(r_lo..r_hi).max(1.5);
    let margin = rx.max(ry) * 1.4 + 1.0;
    let cx = rng.gen_range(margin..s - margin);
    let cy = rng.gen_range(margin..s - margin);
    let lobes = if matches!(family, ShapeFamily::Blob) {
        (2..=4)
            .map(|k| {
                (
                    rng.gen_range(0.04..0.16) / (k as f64 - 1.0),
                    k as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    let intensity = intensity_dist.sample(rng).clamp(0.0, 1.0);
    ObjectGeom {
        family,
        cx,
        cy,
        rx,
        ry,
        lobes,
        intensity,
    }
}

fn silhouette(obj: &ObjectGeom, size: usize) -> Vec<u8> {
    let mut mask = vec![0u8; size * size];
    for y in 0..size {
        for x in 0..size {
            if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                mask[y * size + x] = 1;
            }
        }
    }
    mask
}

fn tight_hull(mask: &[u8], size: usize, label: usize) -> Option<BoundingBox> {
    let mut x_min = size;
    let mut x_max = 0usize;
    let mut y_min = size;
    let mut y_max = 0usize;
    let mut any = false;
    for y in 0..size {
        for x in 0..size {
            if mask[y * size + x] != 0 {
                any = true;
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    any.then(|| BoundingBox {
        x_min: x_min as f32,
        y_min: y_min as f32,
        x_max: (x_max + 1) as f32,
        y_max: (y_max + 1) as f32,
        label,
    })
}

fn gaussian_blur(image: &mut [f64], size: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let mut norm = 0.0;
    for i in -radius..=radius {
        let v = (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        norm += v;
    }
    kernel.iter_mut().for_each(|v| *v /= norm);

    let clamp = |i: isize| i.clamp(0, size as isize - 1) as usize;
    let mut tmp = vec![0.0; size * size];
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sx = clamp(x as isize + ki as isize - radius);
                acc += k * image[y * size + sx];
            }
            tmp[y * size + x] = acc;
        }
    }
    for y in 0..size {
        for x in 0..size {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let sy = clamp(y as isize + ki as isize - radius);
                acc += k * tmp[sy * size + x];
            }
            image[y * size + x] = acc;
        }
    }
}

fn render_sample(spec: &DomainSpec, index: u64) -> Sample {
    let mut rng = sample_rng(spec.seed, index);
    let size = spec.image_size;
    let intensity_dist = Normal::new(spec.fg_mean, spec.fg_std.max(1e-12)).unwrap();

    let n_objects = rng.gen_range(1..=spec.max_objects);
    // Family rolls always consume exactly one raw draw so that specs
    // differing only in `task` render identical geometry.
    let sample_roll = rng.next_u64() as usize;
    let sample_family = match spec.task {
        Task::Classification if spec.num_classes > 1 => {
            ShapeFamily::from_index(sample_roll % spec.num_classes)
        }
        _ => spec.shape_family,
    };

    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let object_roll = rng.next_u64() as usize;
        let family = match spec.task {
            Task::Detection if spec.num_classes > 1 => {
                ShapeFamily::from_index(object_roll % spec.num_classes)
            }
            _ => sample_family,
        };
        objects.push(draw_object(&mut rng, family, size, &intensity_dist));
    }

    let mut image = vec![BG_MEAN; size * size];
    let mut union_mask = vec![0u8; size * size];
    let mut boxes = Vec::new();
    let mut areas = Vec::new();
    for obj in &objects {
        let sil = silhouette(obj, size);
        let area = sil.iter().map(|&m| m as usize).sum::<usize>();
        areas.push(area);
        for (p, &m) in sil.iter().enumerate() {
            if m != 0 {
                image[p] = obj.intensity;
                union_mask[p] = 1;
            }
        }
        let label = if spec.num_classes > 1 { obj.family.index() } else { 0 };
        if let Some(b) = tight_hull(&sil, size, label) {
            boxes.push(b);
        }
    }

    gaussian_blur(&mut image, size, spec.blur_sigma);

    if spec.bg_noise_std > 0.0 {
        let noise = Normal::new(0.0, spec.bg_noise_std).unwrap();
        for p in image.iter_mut() {
            *p += noise.sample(&mut rng);
        }
    }

    let image_f32: Vec<f32> = image.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();

    let annotation = match spec.task {
        Task::Segmentation => Annotation::Mask {
            rle: rle_encode(&union_mask),
        },
        Task::Classification => {
            // label: family of the dominant (largest) object; all objects in a
            // classification sample share one family
            let dominant = areas
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Annotation::Label {
                label: if spec.num_classes > 1 {
                    objects[dominant].family.index()
                } else {
                    0
                },
            }
        }
        Task::Detection => Annotation::Boxes { boxes },
    };

    Sample {
        image: image_f32,
        size,
        annotation,
    }
}

/// Generate `n` samples for a domain. Deterministic in `(spec, n)` and
/// order-independent: sample `i` depends only on `(spec.seed, i)`.
pub fn generate_domain(spec: &DomainSpec, n: usize) -> Result<Vec<Sample>> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::validation("n", "must be >= 1"));
    }
    Ok((0..n as u64).map(|i| render_sample(spec, i)).collect())
}

/// Split a dataset into train/val/test. Val and test sizes are floored,
/// the remainder goes to train; shuffling is keyed by `seed`.
pub fn split(n: usize, ratios: (f64, f64, f64), seed: u64) -> Result<DatasetSplit> {
    if n == 0 {
        return Err(Error::validation("dataset", "must not be empty"));
    }
    let (rt, rv, rs) = ratios;
    if rt <= 0.0 || rv <= 0.0 || rs <= 0.0 {
        return Err(Error::validation("ratios", "must all be positive"));
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::validation("ratios", "must sum to 1"));
    }
    let n_val = (n as f64 * rv).floor() as usize;
    let n_test = (n as f64 * rs).floor() as usize;
    let n_train = n - n_val - n_test;

    let idx = shuffled_range(n, splitmix64(seed));
    Ok(DatasetSplit {
        train: idx[..n_train].to_vec(),
        val: idx[n_train..n_train + n_val].to_vec(),
        test: idx[n_train + n_val..].to_vec(),
        ratios,
    })
}

/// Paired source/target batches for one epoch of adversarial training.
///
/// Source indices are shuffled by `seed` and chunked into `b1`-sized
/// batches; if the source size is not divisible by `b1` the last batch
/// wraps to the start of the shuffled order so every source sample appears
/// at least once. Target samples cycle with wraparound.
pub fn pair_batches(
    source: &[Sample],
    source_idx: &[usize],
    target: &[Sample],
    target_idx: &[usize],
    b1: usize,
    b2: usize,
    seed: u64,
) -> Result<Vec<PairedBatch>> {
    if b1 == 0 || b2 == 0 {
        return Err(Error::validation("b1/b2", "batch sizes must be >= 1"));
    }
    if source_idx.is_empty() || target_idx.is_empty() {
        return Err(Error::validation(
            "splits",
            "source and target splits must be nonempty",
        ));
    }
    let order = shuffled(source_idx, seed);
    let t_order = shuffled(target_idx, splitmix64(seed ^ 0x70c1));
    let n_batches = source_idx.len().div_ceil(b1);
    let mut out = Vec::with_capacity(n_batches);
    let mut t_cursor = 0usize;
    for bi in 0..n_batches {
        let mut src = Vec::with_capacity(b1);
        for k in 0..b1 {
            let pos = (bi * b1 + k) % order.len();
            src.push(source[order[pos]].clone());
        }
        let mut tgt = Vec::with_capacity(b2);
        for _ in 0..b2 {
            tgt.push(target[t_order[t_cursor % t_order.len()]].clone());
            t_cursor += 1;
        }
        let mut domain_labels = vec![1u8; b1];
        domain_labels.extend(std::iter::repeat(0u8).take(b2));
        out.push(PairedBatch {
            source: src,
            target: tgt,
            domain_labels,
        });
    }
    Ok(out)
}

/// Deterministic per-epoch batch order over a split.
pub fn epoch_batches(indices: &[usize], batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = shuffled(indices, splitmix64(seed ^ (epoch as u64).wrapping_mul(0x9e37)));
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn shuffled(indices: &[usize], seed: u64) -> Vec<usize> {
    let mut order = indices.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

fn shuffled_range(n: usize, seed: u64) -> Vec<usize> {
    let idx: Vec<usize> = (0..n).collect();
    shuffled(&idx, seed)
}

/// Stack sample images into an `[n, 1, h, w]` f64 buffer.
pub fn batch_images(samples: &[&Sample]) -> (Vec<f64>, Vec<usize>) {
    let size = samples.first().map(|s| s.size).unwrap_or(0);
    let mut data = Vec::with_capacity(samples.len() * size * size);
    for s in samples {
        data.extend(s.image.iter().map(|&v| v as f64));
    }
    (data, vec![samples.len(), 1, size, size])
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    spec: DomainSpec,
    n: usize,
    split: DatasetSplit,
}

/// Write a dataset directory: `manifest.json` plus one image file and one
/// annotation sidecar per sample. Image files are little-endian f32 with a
/// `(width u32, height u32)` header.
pub fn save_dataset(
    dir: &Path,
    spec: &DomainSpec,
    samples: &[Sample],
    split: &DatasetSplit,
) -> Result<()> {
    let samples_dir = dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;
    for (i, s) in samples.iter().enumerate() {
        let img_path = samples_dir.join(format!("sample_{i:05}.img"));
        let mut buf = Vec::with_capacity(8 + s.image.len() * 4);
        buf.extend_from_slice(&(s.size as u32).to_le_bytes());
        buf.extend_from_slice(&(s.size as u32).to_le_bytes());
        for v in &s.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&img_path, buf).map_err(|e| Error::io(&img_path, e))?;

        let ann_path = samples_dir.join(format!("sample_{i:05}.json"));
        let json = serde_json::to_string(&s.annotation)
            .map_err(|e| Error::Other(format!("annotation encode: {e}")))?;
        std::fs::write(&ann_path, json).map_err(|e| Error::io(&ann_path, e))?;
    }
    let manifest = Manifest {
        format_version: 1,
        spec: spec.clone(),
        n: samples.len(),
        split: split.clone(),
    };
    let manifest_path = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Other(format!("manifest encode: {e}")))?;
    std::fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<(DomainSpec, Vec<Sample>, DatasetSplit)> {
    let manifest_path = dir.join("manifest.json");
    let text =
        std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Other(format!("manifest decode: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.n);
    for i in 0..manifest.n {
        let img_path = dir.join("samples").join(format!("sample_{i:05}.img"));
        let mut file = std::fs::File::open(&img_path).map_err(|e| Error::io(&img_path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)
            .map_err(|e| Error::io(&img_path, e))?;
        if bytes.len() < 8 {
            return Err(Error::Other(format!(
                "truncated image file {}",
                img_path.display()
            )));
        }
        let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        if bytes.len() != 8 + 4 * w * h {
            return Err(Error::Other(format!(
                "bad image payload {}",
                img_path.display()
            )));
        }
        let image: Vec<f32> = bytes[8..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let ann_path = dir.join("samples").join(format!("sample_{i:05}.json"));
        let ann_text = std::fs::read_to_string(&ann_path).map_err(|e| Error::io(&ann_path, e))?;
        let annotation: Annotation = serde_json::from_str(&ann_text)
            .map_err(|e| Error::Other(format!("annotation decode: {e}")))?;
        samples.push(Sample {
            image,
            size: w,
            annotation,
        });
        debug_assert_eq!(w, h);
    }
    Ok((manifest.spec, samples, manifest.split))
}

/// Dump an image as binary PGM for quick eyeballing.
pub fn write_pgm(path: &Path, image: &[f32], size: usize) -> Result<()> {
    let mut out = Vec::with_capacity(size * size + 32);
    out.extend_from_slice(format!("P5\n{size} {size}\n255\n").as_bytes());
    out.extend(
        image
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seg_spec() -> DomainSpec {
        DomainSpec {
            name: "seg-a".into(),
            task: Task::Segmentation,
            image_size: 32,
            shape_family: ShapeFamily::Ellipse,
            fg_mean: 0.75,
            fg_std: 0.05,
            bg_noise_std: 0.03,
            blur_sigma: 0.5,
            num_classes: 1,
            max_objects: 2,
            seed: 11,
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = seg_spec();
        let a = generate_domain(&spec, 16).unwrap();
        let b = generate_domain(&spec, 16).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rectangle_mask_hull_equals_box() {
        let seg_rect = DomainSpec {
            name: "seg-rect".into(),
            task: Task::Segmentation,
            shape_family: ShapeFamily::Rectangle,
            max_objects: 1,
            ..seg_spec()
        };
        for i in 0..100u64 {
            let s = render_sample(&seg_rect, i);
            let mask = s.mask().unwrap();
            let hull = super::tight_hull(&mask, s.size, 0).unwrap();
            let area = mask.iter().map(|&m| m as usize).sum::<usize>();
            let hull_area =
                ((hull.x_max - hull.x_min) * (hull.y_max - hull.y_min)).round() as usize;
            assert_eq!(area, hull_area, "sample {i}: mask is not a filled rectangle");
        }
        // detection twin: the emitted box equals the hull of the same
        // geometry rendered as a segmentation mask
        let det_one = DomainSpec {
            task: Task::Detection,
            num_classes: 1,
            ..seg_rect.clone()
        };
        for i in 0..100u64 {
            let s = render_sample(&det_one, i);
            let boxes = s.boxes().unwrap();
            assert_eq!(boxes.len(), 1);
            let seg_twin = DomainSpec {
                task: Task::Segmentation,
                ..det_one.clone()
            };
            let mask = render_sample(&seg_twin, i).mask().unwrap();
            let hull = super::tight_hull(&mask, s.size, boxes[0].label).unwrap();
            assert_eq!(boxes[0], hull, "sample {i}");
        }
    }

    #[test]
    fn clean_background_equals_bg_mean() {
        let spec = DomainSpec {
            bg_noise_std: 0.0,
            blur_sigma: 0.0,
            ..seg_spec()
        };
        let samples = generate_domain(&spec, 8).unwrap();
        for s in &samples {
            let mask = s.mask().unwrap();
            for (p, &m) in mask.iter().enumerate() {
                if m == 0 {
                    assert_eq!(s.image[p], BG_MEAN as f32);
                }
            }
        }
    }

    #[test]
    fn masks_are_nonempty() {
        let samples = generate_domain(&seg_spec(), 100).unwrap();
        let nonempty = samples
            .iter()
            .filter(|s| s.mask().unwrap().iter().any(|&m| m == 1))
            .count();
        assert!(nonempty >= 90, "only {nonempty}/100 masks nonempty");
    }

    #[test]
    fn invalid_specs_name_the_field() {
        let mut spec = seg_spec();
        spec.image_size = 8;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("image_size"), "{err}");

        let mut spec = seg_spec();
        spec.fg_mean = 0.25;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("fg_mean"), "{err}");

        let mut spec = seg_spec();
        spec.task = Task::Classification;
        spec.num_classes = 9;
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("num_classes"), "{err}");
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let s = split(100, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        assert!(s.check_partition(100));

        let s = split(10, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));

        let s = split(13, (0.8, 0.1, 0.1), 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (11, 1, 1));
        assert!(s.check_partition(13));
    }

    #[test]
    fn split_rejects_bad_input() {
        assert!(split(0, (0.8, 0.1, 0.1), 1).is_err());
        assert!(split(10, (0.9, 0.2, 0.1), 1).is_err());
        assert!(split(10, (1.0, -0.1, 0.1), 1).is_err());
    }

    #[test]
    fn paired_batches_cover_and_cycle() {
        let spec = seg_spec();
        let source = generate_domain(&spec, 16).unwrap();
        let target = generate_domain(
            &DomainSpec {
                seed: 99,
                ..spec.clone()
            },
            4,
        )
        .unwrap();
        let s_idx: Vec<usize> = (0..16).collect();
        let t_idx: Vec<usize> = (0..4).collect();

        let batches = pair_batches(&source, &s_idx, &target, &t_idx, 8, 8, 5).unwrap();
        assert_eq!(batches.len(), 2);
        for b in &batches {
            assert_eq!(b.source.len(), 8);
            assert_eq!(b.target.len(), 8);
            assert_eq!(&b.domain_labels[..8], &[1u8; 8]);
            assert_eq!(&b.domain_labels[8..], &[0u8; 8]);
            // target has only 4 distinct samples: items must repeat in-batch
            let mut seen = std::collections::HashSet::new();
            for t in &b.target {
                seen.insert(t.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
            }
            assert!(seen.len() <= 4);
        }

        let again = pair_batches(&source, &s_idx, &target, &t_idx, 8, 8, 5).unwrap();
        for (a, b) in batches.iter().zip(&again) {
            assert_eq!(a.source, b.source);
            assert_eq!(a.target, b.target);
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = seg_spec();
        let samples = generate_domain(&spec, 6).unwrap();
        let sp = split(6, (0.8, 0.1, 0.1), 1).unwrap();
        save_dataset(dir.path(), &spec, &samples, &sp).unwrap();
        let (spec2, samples2, sp2) = load_dataset(dir.path()).unwrap();
        assert_eq!(spec, spec2);
        assert_eq!(samples, samples2);
        assert_eq!(sp, sp2);
    }

    #[test]
    fn classification_labels_cover_classes() {
        let spec = DomainSpec {
            task: Task::Classification,
            num_classes: 3,
            ..seg_spec()
        };
        let samples = generate_domain(&spec, 60).unwrap();
        let mut seen = [0usize; 3];
        for s in &samples {
            let l = s.label().unwrap();
            assert!(l < 3);
            seen[l] += 1;
        }
        assert!(seen.iter().all(|&c| c > 0), "all classes should appear: {seen:?}");
    }

    proptest! {
        #[test]
        fn detection_boxes_are_valid(seed in 0u64..500) {
            let spec = DomainSpec {
                name: "det-prop".into(),
                task: Task::Detection,
                image_size: 32,
                shape_family: ShapeFamily::Ellipse,
                fg_mean: 0.8,
                fg_std: 0.1,
                bg_noise_std: 0.05,
                blur_sigma: 0.4,
                num_classes: 2,
                max_objects: 3,
                seed,
            };
            let s = render_sample(&spec, 0);
            for b in s.boxes().unwrap() {
                prop_assert!(b.is_valid(32), "box {b:?}");
            }
        }

        #[test]
        fn split_is_partition(n in 1usize..200, seed in 0u64..100) {
            let s = split(n, (0.8, 0.1, 0.1), seed).unwrap();
            prop_assert!(s.check_partition(n));
        }

        #[test]
        fn rle_round_trips(mask in proptest::collection::vec(0u8..2, 1..256)) {
            let rle = rle_encode(&mask);
            prop_assert_eq!(rle_decode(&rle, mask.len()), mask);
        }
    }
}
