//! Tiny configurable task networks with multi-level feature taps, plus the
//! domain discriminator used by adversarial teacher training.
//!
//! Every model is a shallow conv encoder (one 3x3 conv + ReLU + 2x average
//! pool per level, then a 3x3 bottleneck conv) with a task head on top:
//! a skip-connected upsampling decoder for segmentation, pooled embedding
//! blocks plus a linear classifier for classification, and per-cell
//! objectness/class/offset 1x1 heads on the coarsest grid for detection.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Init, ParamId, ParamStore, Shape, Tape, V};
use crate::error::{Error, Result};
use crate::synthdata::Task;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    /// Downsampling stages; level l halves the spatial size l times.
    pub levels: usize,
    /// Output channels per level; must be nondecreasing.
    pub channels: Vec<usize>,
    pub bottleneck_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            levels: 2,
            channels: vec![8, 16],
            bottleneck_channels: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, image_size: usize) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::validation("levels", "must be >= 2"));
        }
        if self.channels.len() != self.levels {
            return Err(Error::validation(
                "channels",
                format!("need {} entries, got {}", self.levels, self.channels.len()),
            ));
        }
        if self.channels.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::validation("channels", "must be nondecreasing"));
        }
        if self.channels.iter().any(|&c| c == 0) || self.bottleneck_channels == 0 {
            return Err(Error::validation("channels", "must be positive"));
        }
        if image_size >> self.levels == 0 {
            return Err(Error::validation(
                "levels",
                format!("image size {image_size} too small for {} levels", self.levels),
            ));
        }
        if image_size % (1 << self.levels) != 0 {
            return Err(Error::validation(
                "image_size",
                format!("must be divisible by 2^levels = {}", 1 << self.levels),
            ));
        }
        Ok(())
    }

    /// Spatial size of the tap at 1-based level `l`.
    pub fn level_size(&self, image_size: usize, l: usize) -> usize {
        image_size >> l
    }
}

/// Full model configuration shared by all three task heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub image_size: usize,
    /// Classes for classification / detection heads.
    pub num_classes: usize,
    /// Width of the classification embedding blocks.
    pub emb_dim: usize,
    /// Number of post-pool embedding blocks (classification taps).
    pub embed_blocks: usize,
    /// Dimension of the per-region embedding (detection).
    pub region_dim: usize,
    /// Regions/queries kept per image for head-level distillation.
    pub top_k: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            encoder: EncoderConfig::default(),
            image_size: 32,
            num_classes: 2,
            emb_dim: 32,
            embed_blocks: 3,
            region_dim: 16,
            top_k: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.image_size)?;
        if self.num_classes == 0 {
            return Err(Error::validation("num_classes", "must be >= 1"));
        }
        if self.emb_dim == 0 || self.embed_blocks == 0 {
            return Err(Error::validation("emb_dim/embed_blocks", "must be >= 1"));
        }
        if self.region_dim == 0 || self.top_k == 0 {
            return Err(Error::validation("region_dim/top_k", "must be >= 1"));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size >> self.encoder.levels
    }

    /// Stable hash of (task, config) used to guard checkpoint loading.
    pub fn config_hash(&self, task: Task) -> String {
        let json = serde_json::to_string(&(task, self)).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Per-level feature maps plus the bottleneck map, as tape handles.
#[derive(Clone, Debug)]
pub struct FeatureTaps {
    pub per_level: Vec<V>,
    pub bottleneck: V,
}

impl FeatureTaps {
    /// Taps selected by depth: encoder levels, bottleneck only, or both.
    pub fn select(&self, depth: TapDepth) -> Vec<V> {
        match depth {
            TapDepth::Encoder => self.per_level.clone(),
            TapDepth::Bottleneck => vec![self.bottleneck],
            TapDepth::Both => {
                let mut v = self.per_level.clone();
                v.push(self.bottleneck);
                v
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapDepth {
    Encoder,
    Bottleneck,
    Both,
}

struct ConvParams {
    w: ParamId,
    b: ParamId,
}

fn conv_params(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams {
    let w = store.add(
        format!("{name}.w"),
        Shape(vec![c_out, c_in, k, k]),
        Init::FanInUniform { fan_in: c_in * k * k },
        rng,
    );
    let b = store.add(format!("{name}.b"), Shape(vec![c_out]), Init::Zero, rng);
    ConvParams { w, b }
}

fn linear_params(
    store: &mut ParamStore,
    name: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut ChaCha8Rng,
) -> ConvParams {
    let w = store.add(
        format!("{name}.w"),
        Shape(vec![c_out, c_in]),
        Init::FanInUniform { fan_in: c_in },
        rng,
    );
    let b = store.add(format!("{name}.b"), Shape(vec![c_out]), Init::Zero, rng);
    ConvParams { w, b }
}

/// Shared conv encoder: per level `conv3x3 -> relu -> avgpool2`, then a
/// 3x3 bottleneck conv + relu at the coarsest resolution.
pub struct Encoder {
    levels: Vec<ConvParams>,
    bottleneck: ConvParams,
    pub cfg: EncoderConfig,
}

impl Encoder {
    pub fn new(prefix: &str, cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let mut levels = Vec::with_capacity(cfg.levels);
        let mut c_in = 1;
        for (l, &c_out) in cfg.channels.iter().enumerate() {
            levels.push(conv_params(store, &format!("{prefix}.enc{l}"), c_in, c_out, 3, rng));
            c_in = c_out;
        }
        let bottleneck = conv_params(
            store,
            &format!("{prefix}.bottleneck"),
            c_in,
            cfg.bottleneck_channels,
            3,
            rng,
        );
        Encoder {
            levels,
            bottleneck,
            cfg: cfg.clone(),
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, images: V) -> FeatureTaps {
        let mut x = images;
        let mut per_level = Vec::with_capacity(self.levels.len());
        for lp in &self.levels {
            let w = t.param(store, lp.w);
            let b = t.param(store, lp.b);
            let c = t.conv2d(x, w, b, 1);
            let r = t.relu(c);
            x = t.avg_pool2(r);
            per_level.push(x);
        }
        let w = t.param(store, self.bottleneck.w);
        let b = t.param(store, self.bottleneck.b);
        let c = t.conv2d(x, w, b, 1);
        let bottleneck = t.relu(c);
        FeatureTaps {
            per_level,
            bottleneck,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for lp in &self.levels {
            ids.push(lp.w);
            ids.push(lp.b);
        }
        ids.push(self.bottleneck.w);
        ids.push(self.bottleneck.b);
        ids
    }
}

/// Skip-connected upsampling decoder emitting a per-pixel probability map.
/// Shared by the plain segmentation model and the joint teacher's head.
pub struct SegDecoder {
    up_convs: Vec<ConvParams>,
    out_conv: ConvParams,
    levels: usize,
}

impl SegDecoder {
    pub fn new(prefix: &str, enc: &EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Self {
        let l = enc.levels;
        let mut up_convs = Vec::with_capacity(l);
        let mut c_in = enc.bottleneck_channels;
        // step from level l down to full resolution; skips come from taps l-1
        for step in (1..=l).rev() {
            let skip_c = if step >= 2 { enc.channels[step - 2] } else { 0 };
            let c_out = enc.channels[step - 1];
            up_convs.push(conv_params(
                store,
                &format!("{prefix}.up{step}"),
                c_in + skip_c,
                c_out,
                3,
                rng,
            ));
            c_in = c_out;
        }
        let out_conv = conv_params(store, &format!("{prefix}.out"), c_in, 1, 1, rng);
        SegDecoder {
            up_convs,
            out_conv,
            levels: l,
        }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, taps: &FeatureTaps) -> V {
        let mut x = taps.bottleneck;
        for (i, step) in (1..=self.levels).rev().enumerate() {
            x = t.upsample_nearest2(x);
            if step >= 2 {
                x = t.concat_axis1(&[x, taps.per_level[step - 2]]);
            }
            let w = t.param(store, self.up_convs[i].w);
            let b = t.param(store, self.up_convs[i].b);
            let c = t.conv2d(x, w, b, 1);
            x = t.relu(c);
        }
        let w = t.param(store, self.out_conv.w);
        let b = t.param(store, self.out_conv.b);
        let logits = t.conv2d(x, w, b, 0);
        t.sigmoid(logits)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in &self.up_convs {
            ids.push(c.w);
            ids.push(c.b);
        }
        ids.push(self.out_conv.w);
        ids.push(self.out_conv.b);
        ids
    }
}

pub struct SegModel {
    pub encoder: Encoder,
    decoder: SegDecoder,
    pub cfg: ModelConfig,
}

impl SegModel {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new("seg", &cfg.encoder, store, &mut rng);
        let decoder = SegDecoder::new("seg", &cfg.encoder, store, &mut rng);
        Ok(SegModel {
            encoder,
            decoder,
            cfg: cfg.clone(),
        })
    }

    /// Returns the per-pixel probability map `[n, 1, h, w]` and the taps
    /// used to compute it.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, images: V) -> (V, FeatureTaps) {
        let taps = self.encoder.forward(t, store, images);
        let probs = self.decoder.forward(t, store, &taps);
        (probs, taps)
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.decoder.param_ids()
    }
}

/// Classification head: a short stack of embedding blocks over the pooled
/// bottleneck (their outputs are the distillation taps) plus a linear
/// classifier. Shared by the plain classifier and the multi-head baseline.
pub struct ClsHead {
    blocks: Vec<ConvParams>,
    classifier: ConvParams,
}

impl ClsHead {
    pub fn new(
        prefix: &str,
        in_dim: usize,
        emb_dim: usize,
        embed_blocks: usize,
        num_classes: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut blocks = Vec::with_capacity(embed_blocks);
        let mut c_in = in_dim;
        for i in 0..embed_blocks {
            blocks.push(linear_params(store, &format!("{prefix}.block{i}"), c_in, emb_dim, rng));
            c_in = emb_dim;
        }
        let classifier = linear_params(store, &format!("{prefix}.head"), c_in, num_classes, rng);
        ClsHead { blocks, classifier }
    }

    /// `pooled [n, in_dim]` -> `(logits, embed-block outputs)`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, pooled: V) -> (V, Vec<V>) {
        let mut x = pooled;
        let mut embed_taps = Vec::with_capacity(self.blocks.len());
        for bp in &self.blocks {
            let w = t.param(store, bp.w);
            let b = t.param(store, bp.b);
            let y = t.linear(x, w, b);
            x = t.relu(y);
            embed_taps.push(x);
        }
        let w = t.param(store, self.classifier.w);
        let b = t.param(store, self.classifier.b);
        let logits = t.linear(x, w, b);
        (logits, embed_taps)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for c in &self.blocks {
            ids.push(c.w);
            ids.push(c.b);
        }
        ids.push(self.classifier.w);
        ids.push(self.classifier.b);
        ids
    }
}

/// Pooled-embedding classifier with a short stack of embedding blocks whose
/// outputs serve as distillation taps.
pub struct ClsModel {
    pub encoder: Encoder,
    head: ClsHead,
    pub cfg: ModelConfig,
}

impl ClsModel {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new("cls", &cfg.encoder, store, &mut rng);
        let head = ClsHead::new(
            "cls",
            cfg.encoder.bottleneck_channels,
            cfg.emb_dim,
            cfg.embed_blocks,
            cfg.num_classes,
            store,
            &mut rng,
        );
        Ok(ClsModel {
            encoder,
            head,
            cfg: cfg.clone(),
        })
    }

    /// Returns `(logits [n, classes], encoder taps, embed-block outputs)`.
    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        images: V,
    ) -> (V, FeatureTaps, Vec<V>) {
        let taps = self.encoder.forward(t, store, images);
        let pooled = t.global_avg_pool(taps.bottleneck);
        let (logits, embed_taps) = self.head.forward(t, store, pooled);
        (logits, taps, embed_taps)
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }
}

/// Per-image detection head outputs on the coarsest grid, flattened to
/// `cells = grid^2` rows.
pub struct DetHeadOut {
    /// objectness logits `[cells]` per image
    pub objectness: Vec<V>,
    /// class logits `[cells, classes]` per image
    pub class_logits: Vec<V>,
    /// box offsets `[cells, 4]` per image
    pub offsets: Vec<V>,
    /// region embeddings `[cells, region_dim]` per image
    pub regions: Vec<V>,
    pub grid: usize,
}

/// The per-cell detection head: 1x1 convs for objectness, class logits,
/// box offsets and region embeddings on the coarsest grid. Shared by the
/// plain detector and the joint teacher.
pub struct DetHead {
    obj_conv: ConvParams,
    cls_conv: ConvParams,
    off_conv: ConvParams,
    region_conv: ConvParams,
    num_classes: usize,
    region_dim: usize,
}

impl DetHead {
    pub fn new(
        prefix: &str,
        in_channels: usize,
        num_classes: usize,
        region_dim: usize,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        DetHead {
            obj_conv: conv_params(store, &format!("{prefix}.obj"), in_channels, 1, 1, rng),
            cls_conv: conv_params(store, &format!("{prefix}.cls"), in_channels, num_classes, 1, rng),
            off_conv: conv_params(store, &format!("{prefix}.off"), in_channels, 4, 1, rng),
            region_conv: conv_params(store, &format!("{prefix}.region"), in_channels, region_dim, 1, rng),
            num_classes,
            region_dim,
        }
    }

    /// Run the head on a coarsest-grid feature map `[n, c, g, g]`.
    pub fn forward(&self, t: &mut Tape, store: &ParamStore, feature_map: V) -> DetHeadOut {
        let dims = t.shape(feature_map).dims().to_vec();
        let (n, grid) = (dims[0], dims[2]);

        let head_map = |t: &mut Tape, p: &ConvParams| -> V {
            let w = t.param(store, p.w);
            let b = t.param(store, p.b);
            t.conv2d(feature_map, w, b, 0)
        };
        let obj_map = head_map(t, &self.obj_conv);
        let cls_map = head_map(t, &self.cls_conv);
        let off_map = head_map(t, &self.off_conv);
        let reg_map = head_map(t, &self.region_conv);

        // slice per image and flip [c, g*g] into [cells, c]
        let per_image = |t: &mut Tape, map: V, c: usize, i: usize| -> V {
            let flat = t.reshape(map, Shape(vec![n, c * grid * grid]));
            let row = t.gather_rows(flat, &[i]);
            let cg = t.reshape(row, Shape(vec![c, grid * grid]));
            t.transpose2d(cg)
        };

        let mut out = DetHeadOut {
            objectness: Vec::with_capacity(n),
            class_logits: Vec::with_capacity(n),
            offsets: Vec::with_capacity(n),
            regions: Vec::with_capacity(n),
            grid,
        };
        for i in 0..n {
            let obj = per_image(t, obj_map, 1, i);
            out.objectness.push(t.reshape(obj, Shape(vec![grid * grid])));
            out.class_logits.push(per_image(t, cls_map, self.num_classes, i));
            out.offsets.push(per_image(t, off_map, 4, i));
            out.regions.push(per_image(t, reg_map, self.region_dim, i));
        }
        out
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.obj_conv.w,
            self.obj_conv.b,
            self.cls_conv.w,
            self.cls_conv.b,
            self.off_conv.w,
            self.off_conv.b,
            self.region_conv.w,
            self.region_conv.b,
        ]
    }
}

/// Decode per-cell offsets `[cells, 4]` into box coordinate vectors
/// `(x1, y1, x2, y2)`, each `[cells]`, for one image.
pub fn decode_boxes(t: &mut Tape, offsets: V, grid: usize, image_size: usize) -> (V, V, V, V) {
    let cells = grid * grid;
    let stride = (image_size / grid) as f64;
    let col = |t: &mut Tape, k: usize| -> V {
        let tr = t.transpose2d(offsets);
        let row = t.gather_rows(tr, &[k]);
        t.reshape(row, Shape(vec![cells]))
    };
    let tx = col(t, 0);
    let ty = col(t, 1);
    let tw = col(t, 2);
    let th = col(t, 3);
    let gx = t.constant(
        (0..cells).map(|c| (c % grid) as f64).collect(),
        Shape(vec![cells]),
    );
    let gy = t.constant(
        (0..cells).map(|c| (c / grid) as f64).collect(),
        Shape(vec![cells]),
    );
    let cx_rel = t.add(tx, gx);
    let cx = t.scale(cx_rel, stride);
    let cy_rel = t.add(ty, gy);
    let cy = t.scale(cy_rel, stride);
    let w_rel = t.exp(tw);
    let w = t.scale(w_rel, stride);
    let h_rel = t.exp(th);
    let h = t.scale(h_rel, stride);
    let half_w = t.scale(w, 0.5);
    let half_h = t.scale(h, 0.5);
    let x1 = t.sub(cx, half_w);
    let y1 = t.sub(cy, half_h);
    let x2 = t.add(cx, half_w);
    let y2 = t.add(cy, half_h);
    (x1, y1, x2, y2)
}

/// Class logits with an appended background column (`-objectness`) for the
/// set-prediction loss.
pub fn query_logits(t: &mut Tape, class_logits: V, objectness: V) -> V {
    let cells = t.value(objectness).len();
    let bg = t.scale(objectness, -1.0);
    let bg_col = t.reshape(bg, Shape(vec![cells, 1]));
    t.concat_axis1(&[class_logits, bg_col])
}

/// Indices of the top-k scores, descending, with index tie-breaks.
pub fn top_k_cells(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Anchor-free single-stage detector: per-cell objectness, class logits and
/// four box offsets on the coarsest grid, plus a per-cell region embedding
/// used for head-level distillation.
pub struct DetModel {
    pub encoder: Encoder,
    head: DetHead,
    pub cfg: ModelConfig,
}

impl DetModel {
    pub fn new(cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new("det", &cfg.encoder, store, &mut rng);
        let head = DetHead::new(
            "det",
            cfg.encoder.bottleneck_channels,
            cfg.num_classes,
            cfg.region_dim,
            store,
            &mut rng,
        );
        Ok(DetModel {
            encoder,
            head,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        images: V,
    ) -> (DetHeadOut, FeatureTaps) {
        let taps = self.encoder.forward(t, store, images);
        let out = self.head.forward(t, store, taps.bottleneck);
        (out, taps)
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        self.head.param_ids()
    }
}

/// Two affine layers with a ReLU between; input is the pooled bottleneck
/// vector, output one domain logit per sample.
pub struct Discriminator {
    l1: ConvParams,
    l2: ConvParams,
}

impl Discriminator {
    pub fn new(input_dim: usize, store: &mut ParamStore, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l1 = linear_params(store, "disc.l1", input_dim, input_dim, &mut rng);
        let l2 = linear_params(store, "disc.l2", input_dim, 1, &mut rng);
        Discriminator { l1, l2 }
    }

    pub fn forward(&self, t: &mut Tape, store: &ParamStore, pooled: V) -> V {
        let w1 = t.param(store, self.l1.w);
        let b1 = t.param(store, self.l1.b);
        let h = t.linear(pooled, w1, b1);
        let h = t.relu(h);
        let w2 = t.param(store, self.l2.w);
        let b2 = t.param(store, self.l2.b);
        t.linear(h, w2, b2)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.l1.w, self.l1.b, self.l2.w, self.l2.b]
    }
}

/// Global average pool of the bottleneck map: `[n, c, h, w] -> [n, c]`.
pub fn pooled_bottleneck(t: &mut Tape, taps: &FeatureTaps) -> V {
    t.global_avg_pool(taps.bottleneck)
}

/// Gradient reversal: identity forward, `-lambda`-scaled gradient backward.
pub fn grl_apply(t: &mut Tape, features: V, lambda: f64) -> V {
    t.grad_reverse(features, lambda)
}

/// One of the three task models behind a common forward surface.
pub enum TaskModel {
    Seg(SegModel),
    Cls(ClsModel),
    Det(DetModel),
}

/// The task prediction produced by [`TaskModel::forward_with_taps`].
pub enum Prediction {
    /// `[n, 1, h, w]` per-pixel probabilities
    Mask(V),
    /// `[n, classes]` logits plus embedding-block taps
    Logits { logits: V, embed_taps: Vec<V> },
    /// per-image detection head outputs
    Detections(DetHeadOut),
}

impl TaskModel {
    pub fn new(task: Task, cfg: &ModelConfig, store: &mut ParamStore, seed: u64) -> Result<Self> {
        Ok(match task {
            Task::Segmentation => TaskModel::Seg(SegModel::new(cfg, store, seed)?),
            Task::Classification => TaskModel::Cls(ClsModel::new(cfg, store, seed)?),
            Task::Detection => TaskModel::Det(DetModel::new(cfg, store, seed)?),
        })
    }

    pub fn task(&self) -> Task {
        match self {
            TaskModel::Seg(_) => Task::Segmentation,
            TaskModel::Cls(_) => Task::Classification,
            TaskModel::Det(_) => Task::Detection,
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        match self {
            TaskModel::Seg(m) => &m.cfg,
            TaskModel::Cls(m) => &m.cfg,
            TaskModel::Det(m) => &m.cfg,
        }
    }

    /// Forward pass returning the prediction and the taps that produced it.
    pub fn forward_with_taps(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        images: V,
    ) -> Result<(Prediction, FeatureTaps)> {
        let dims = t.shape(images).dims().to_vec();
        let size = self.cfg().image_size;
        if dims.len() != 4 || dims[1] != 1 || dims[2] != size || dims[3] != size {
            return Err(Error::shape(
                "forward_with_taps",
                format!("[n,1,{size},{size}]"),
                Shape(dims).to_string(),
            ));
        }
        Ok(match self {
            TaskModel::Seg(m) => {
                let (pred, taps) = m.forward(t, store, images);
                (Prediction::Mask(pred), taps)
            }
            TaskModel::Cls(m) => {
                let (logits, taps, embed_taps) = m.forward(t, store, images);
                (Prediction::Logits { logits, embed_taps }, taps)
            }
            TaskModel::Det(m) => {
                let (out, taps) = m.forward(t, store, images);
                (Prediction::Detections(out), taps)
            }
        })
    }

    pub fn encoder(&self) -> &Encoder {
        match self {
            TaskModel::Seg(m) => &m.encoder,
            TaskModel::Cls(m) => &m.encoder,
            TaskModel::Det(m) => &m.encoder,
        }
    }

    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.encoder().param_ids()
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        match self {
            TaskModel::Seg(m) => m.head_param_ids(),
            TaskModel::Cls(m) => m.head_param_ids(),
            TaskModel::Det(m) => m.head_param_ids(),
        }
    }

    pub fn all_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder_param_ids();
        ids.extend(self.head_param_ids());
        ids
    }
}
