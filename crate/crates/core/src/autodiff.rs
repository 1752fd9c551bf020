//! Minimal reverse-mode autodiff over dense f64 tensors.
//!
//! A [`Tape`] records a dynamic graph of operations; [`Tape::backward`]
//! walks it in reverse and accumulates gradients. Parameters live outside
//! the tape in a [`ParamStore`] so a fresh tape can be built every step
//! while parameter state (values, gradients, velocity, frozen flags)
//! persists across steps.
//!
//! The op set is intentionally small: elementwise arithmetic, matrix
//! products, 2-D convolution at stride 1, pooling/upsampling, row-wise
//! softmax / normalization, and a gradient-reversal op whose backward pass
//! multiplies incoming gradients by `-lambda`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Tensor shape. Layout is row-major; convolutional maps are `[n, c, h, w]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Shape(pub Vec<usize>);

impl Shape {
    pub fn scalar() -> Self {
        Shape(vec![])
    }
    pub fn numel(&self) -> usize {
        self.0.iter().product()
    }
    pub fn dims(&self) -> &[usize] {
        &self.0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}]", self.0.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
    }
}

/// Handle to a tape node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct V(pub usize);

/// Handle to a parameter tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct ParamId(pub usize);

struct ParamTensor {
    name: String,
    shape: Shape,
    value: Vec<f64>,
    grad: Vec<f64>,
    velocity: Option<Vec<f64>>,
    frozen: bool,
}

/// Owns parameter values and their optimizer state.
#[derive(Default)]
pub struct ParamStore {
    params: Vec<ParamTensor>,
}

/// Initialization scheme for a new parameter tensor.
pub enum Init {
    Zero,
    Const(f64),
    /// Fan-in-scaled uniform: `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanInUniform { fan_in: usize },
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, init: Init, rng: &mut ChaCha8Rng) -> ParamId {
        let n = shape.numel();
        let value = match init {
            Init::Zero => vec![0.0; n],
            Init::Const(c) => vec![c; n],
            Init::FanInUniform { fan_in } => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        self.params.push(ParamTensor {
            name: name.into(),
            shape,
            value,
            grad: vec![0.0; n],
            velocity: None,
            frozen: false,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }
    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }
    pub fn shape(&self, id: ParamId) -> &Shape {
        &self.params[id.0].shape
    }
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }
    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].grad
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }
    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.params[id.0].frozen
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        let p = &mut self.params[id.0];
        for (pg, gi) in p.grad.iter_mut().zip(g) {
            *pg += gi;
        }
    }

    /// Global L2-norm gradient clipping over a parameter group.
    pub fn clip_grad_norm(&mut self, group: &[ParamId], max_norm: f64) {
        let mut sq = 0.0;
        for id in group {
            sq += self.params[id.0].grad.iter().map(|g| g * g).sum::<f64>();
        }
        let norm = sq.sqrt();
        if norm > max_norm && norm > 0.0 {
            let scale = max_norm / norm;
            for id in group {
                self.params[id.0].grad.iter_mut().for_each(|g| *g *= scale);
            }
        }
    }

    /// One SGD step over a parameter group. Panics if the group contains a
    /// frozen parameter: frozen tensors must never reach an optimizer.
    pub fn sgd_step(&mut self, group: &[ParamId], lr: f64, momentum: f64) {
        for id in group {
            let p = &mut self.params[id.0];
            assert!(!p.frozen, "sgd_step on frozen parameter {}", p.name);
            if momentum > 0.0 {
                let vel = p.velocity.get_or_insert_with(|| vec![0.0; p.value.len()]);
                for ((v, g), x) in vel.iter_mut().zip(&p.grad).zip(p.value.iter_mut()) {
                    *v = momentum * *v + g;
                    *x -= lr * *v;
                }
            } else {
                for (x, g) in p.value.iter_mut().zip(&p.grad) {
                    *x -= lr * g;
                }
            }
        }
    }

    /// Total number of scalar values across a group.
    pub fn group_numel(&self, group: &[ParamId]) -> usize {
        group.iter().map(|id| self.params[id.0].value.len()).sum()
    }
}

enum Op {
    Const,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    MinElem(usize, usize),
    MaxElem(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    Sigmoid(usize),
    Ln(usize),
    Exp(usize),
    Abs(usize),
    /// Smooth-L1 kernel: 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise.
    Huber(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    /// x:[n,i] w:[o,i] b:[o] -> [n,o]
    Linear { x: usize, w: usize, b: usize },
    /// [m,k] x [k,n] -> [m,n]
    MatMul { a: usize, b: usize },
    /// [m,k] x [n,k]^T -> [m,n]
    MatMulNT { a: usize, b: usize },
    /// stride-1 conv, square kernel, symmetric zero padding
    Conv2d { x: usize, w: usize, b: usize, pad: usize },
    AvgPool2(usize),
    UpsampleNearest2(usize),
    ResizeBilinear { x: usize, oh: usize, ow: usize },
    /// concat along axis 1 ([n, c, ...] or [n, d])
    ConcatAxis1(Vec<usize>),
    /// concat along axis 0
    ConcatRows(Vec<usize>),
    /// select rows of a [n, d] tensor
    GatherRows { x: usize, idx: Vec<usize> },
    /// [n,c,h,w] -> [n,c]
    GlobalAvgPool(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    /// rows scaled to unit L2 norm with an epsilon-guarded denominator
    L2NormRows { x: usize, eps: f64 },
    /// [n,d],[n,d] -> [n]
    RowDot(usize, usize),
    /// [n,c,h,w] -> [n, h*w], sum of squared activations over channels
    ChannelEnergy(usize),
    /// normalize each (n,c) plane over its spatial extent
    InstanceNorm { x: usize, eps: f64 },
    /// identity forward, backward multiplies by -lambda
    GradReverse { x: usize, lambda: f64 },
    Reshape { x: usize },
    /// [a,b] -> [b,a]
    Transpose2d(usize),
}

struct Node {
    value: Vec<f64>,
    shape: Shape,
    op: Op,
    needs_grad: bool,
}

/// Dynamic computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: V) -> &[f64] {
        &self.nodes[v.0].value
    }
    pub fn shape(&self, v: V) -> &Shape {
        &self.nodes[v.0].shape
    }
    pub fn scalar_value(&self, v: V) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.len(), 1);
        self.nodes[v.0].value[0]
    }
    pub fn len(&self) -> usize {
        self.nodes.len()
    }
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f64>, shape: Shape, op: Op, needs_grad: bool) -> V {
        debug_assert_eq!(value.len(), shape.numel(), "value/shape mismatch");
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
        });
        V(self.nodes.len() - 1)
    }

    fn ng(&self, v: V) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant leaf: no gradient ever flows into it.
    pub fn constant(&mut self, value: Vec<f64>, shape: Shape) -> V {
        self.push(value, shape, Op::Const, false)
    }

    pub fn scalar(&mut self, value: f64) -> V {
        self.constant(vec![value], Shape::scalar())
    }

    /// Load a parameter as a leaf; its gradient is written back by
    /// [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> V {
        let value = store.value(id).to_vec();
        let shape = store.shape(id).clone();
        self.push(value, shape, Op::Param(id), true)
    }

    fn binary_same_shape(&mut self, a: V, b: V, op: &str) -> (Vec<f64>, Shape) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{op}: shape mismatch {} vs {}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        (Vec::with_capacity(self.nodes[a.0].value.len()), self.nodes[a.0].shape.clone())
    }

    pub fn add(&mut self, a: V, b: V) -> V {
        let (mut out, shape) = self.binary_same_shape(a, b, "add");
        out.extend(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x + y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Add(a.0, b.0), ng)
    }

    pub fn sub(&mut self, a: V, b: V) -> V {
        let (mut out, shape) = self.binary_same_shape(a, b, "sub");
        out.extend(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x - y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Sub(a.0, b.0), ng)
    }

    pub fn mul(&mut self, a: V, b: V) -> V {
        let (mut out, shape) = self.binary_same_shape(a, b, "mul");
        out.extend(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x * y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Mul(a.0, b.0), ng)
    }

    pub fn div(&mut self, a: V, b: V) -> V {
        let (mut out, shape) = self.binary_same_shape(a, b, "div");
        out.extend(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x / y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::Div(a.0, b.0), ng)
    }

    pub fn min_elem(&mut self, a: V, b: V) -> V {
        let (mut out, shape) = self.binary_same_shape(a, b, "min");
        out.extend(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x.min(*y)));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::MinElem(a.0, b.0), ng)
    }

    pub fn max_elem(&mut self, a: V, b: V) -> V {
        let (mut out, shape) = self.binary_same_shape(a, b, "max");
        out.extend(self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x.max(*y)));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, shape, Op::MaxElem(a.0, b.0), ng)
    }

    pub fn scale(&mut self, a: V, c: f64) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| x * c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Scale(a.0, c), ng)
    }

    pub fn offset(&mut self, a: V, c: f64) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| x + c).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Offset(a.0), ng)
    }

    /// `c - a`, as offset(scale(a, -1), c) in one node.
    pub fn rsub_const(&mut self, a: V, c: f64) -> V {
        let neg = self.scale(a, -1.0);
        self.offset(neg, c)
    }

    pub fn relu(&mut self, a: V) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| x.max(0.0)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Relu(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: V) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Sigmoid(a.0), ng)
    }

    pub fn ln(&mut self, a: V) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| x.ln()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Ln(a.0), ng)
    }

    pub fn exp(&mut self, a: V) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| x.exp()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Exp(a.0), ng)
    }

    pub fn abs(&mut self, a: V) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| x.abs()).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Abs(a.0), ng)
    }

    pub fn huber(&mut self, a: V) -> V {
        let out = self.nodes[a.0]
            .value
            .iter()
            .map(|x| if x.abs() < 1.0 { 0.5 * x * x } else { x.abs() - 0.5 })
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Huber(a.0), ng)
    }

    pub fn clamp(&mut self, a: V, lo: f64, hi: f64) -> V {
        let out = self.nodes[a.0].value.iter().map(|x| x.clamp(lo, hi)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let ng = self.ng(a);
        self.push(out, shape, Op::Clamp(a.0, lo, hi), ng)
    }

    pub fn sum(&mut self, a: V) -> V {
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(vec![s], Shape::scalar(), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: V) -> V {
        let n = self.nodes[a.0].value.len().max(1);
        let s: f64 = self.nodes[a.0].value.iter().sum();
        let ng = self.ng(a);
        self.push(vec![s / n as f64], Shape::scalar(), Op::Mean(a.0), ng)
    }

    pub fn linear(&mut self, x: V, w: V, b: V) -> V {
        let (nd, wd) = (self.nodes[x.0].shape.dims().to_vec(), self.nodes[w.0].shape.dims().to_vec());
        assert_eq!(nd.len(), 2, "linear: x must be [n,i], got {}", self.nodes[x.0].shape);
        assert_eq!(wd.len(), 2, "linear: w must be [o,i]");
        assert_eq!(nd[1], wd[1], "linear: fan-in mismatch {} vs {}", nd[1], wd[1]);
        let (n, i, o) = (nd[0], nd[1], wd[0]);
        assert_eq!(self.nodes[b.0].value.len(), o, "linear: bias length");
        let mut out = vec![0.0; n * o];
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        for r in 0..n {
            for c in 0..o {
                let mut s = bv[c];
                let xr = &xv[r * i..(r + 1) * i];
                let wr = &wv[c * i..(c + 1) * i];
                for k in 0..i {
                    s += xr[k] * wr[k];
                }
                out[r * o + c] = s;
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Shape(vec![n, o]), Op::Linear { x: x.0, w: w.0, b: b.0 }, ng)
    }

    pub fn matmul(&mut self, a: V, b: V) -> V {
        let ad = self.nodes[a.0].shape.dims().to_vec();
        let bd = self.nodes[b.0].shape.dims().to_vec();
        assert!(ad.len() == 2 && bd.len() == 2 && ad[1] == bd[0], "matmul: {}x{}", self.nodes[a.0].shape, self.nodes[b.0].shape);
        let (m, k, n) = (ad[0], ad[1], bd[1]);
        let mut out = vec![0.0; m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for r in 0..m {
            for kk in 0..k {
                let aik = av[r * k + kk];
                if aik == 0.0 {
                    continue;
                }
                let brow = &bv[kk * n..(kk + 1) * n];
                let orow = &mut out[r * n..(r + 1) * n];
                for c in 0..n {
                    orow[c] += aik * brow[c];
                }
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Shape(vec![m, n]), Op::MatMul { a: a.0, b: b.0 }, ng)
    }

    /// `a @ b^T`: `[m,k] x [n,k] -> [m,n]`.
    pub fn matmul_nt(&mut self, a: V, b: V) -> V {
        let ad = self.nodes[a.0].shape.dims().to_vec();
        let bd = self.nodes[b.0].shape.dims().to_vec();
        assert!(ad.len() == 2 && bd.len() == 2 && ad[1] == bd[1], "matmul_nt: {}x{}", self.nodes[a.0].shape, self.nodes[b.0].shape);
        let (m, k, n) = (ad[0], ad[1], bd[0]);
        let mut out = vec![0.0; m * n];
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        for r in 0..m {
            let arow = &av[r * k..(r + 1) * k];
            for c in 0..n {
                let brow = &bv[c * k..(c + 1) * k];
                let mut s = 0.0;
                for kk in 0..k {
                    s += arow[kk] * brow[kk];
                }
                out[r * n + c] = s;
            }
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Shape(vec![m, n]), Op::MatMulNT { a: a.0, b: b.0 }, ng)
    }

    /// Stride-1 square-kernel convolution with symmetric zero padding.
    pub fn conv2d(&mut self, x: V, w: V, b: V, pad: usize) -> V {
        let xd = self.nodes[x.0].shape.dims().to_vec();
        let wd = self.nodes[w.0].shape.dims().to_vec();
        assert_eq!(xd.len(), 4, "conv2d: x must be [n,c,h,w]");
        assert_eq!(wd.len(), 4, "conv2d: w must be [co,ci,k,k]");
        assert_eq!(xd[1], wd[1], "conv2d: channel mismatch {} vs {}", xd[1], wd[1]);
        assert_eq!(wd[2], wd[3], "conv2d: kernel must be square");
        let (n, ci, h, wdt) = (xd[0], xd[1], xd[2], xd[3]);
        let (co, k) = (wd[0], wd[2]);
        let (oh, ow) = (h + 2 * pad + 1 - k, wdt + 2 * pad + 1 - k);
        let mut out = vec![0.0; n * co * oh * ow];
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        for ni in 0..n {
            for oc in 0..co {
                let base_o = (ni * co + oc) * oh * ow;
                out[base_o..base_o + oh * ow].iter_mut().for_each(|v| *v = bv[oc]);
                for ic in 0..ci {
                    let base_x = (ni * ci + ic) * h * wdt;
                    let base_w = (oc * ci + ic) * k * k;
                    for ky in 0..k {
                        for kx in 0..k {
                            let wgt = wv[base_w + ky * k + kx];
                            if wgt == 0.0 {
                                continue;
                            }
                            // output (oy,ox) reads input (oy+ky-pad, ox+kx-pad)
                            let y0 = pad.saturating_sub(ky);
                            let y1 = oh.min(h + pad - ky);
                            let x0 = pad.saturating_sub(kx);
                            let x1 = ow.min(wdt + pad - kx);
                            let off = x0 + kx - pad; // x0 >= pad - kx keeps this nonnegative
                            for oy in y0..y1 {
                                let iy = oy + ky - pad;
                                let orow = base_o + oy * ow;
                                let xrow = base_x + iy * wdt + off;
                                let dst = &mut out[orow + x0..orow + x1];
                                let srcv = &xv[xrow..xrow + (x1 - x0)];
                                for (d, s) in dst.iter_mut().zip(srcv) {
                                    *d += wgt * s;
                                }
                            }
                        }
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(out, Shape(vec![n, co, oh, ow]), Op::Conv2d { x: x.0, w: w.0, b: b.0, pad }, ng)
    }

    pub fn avg_pool2(&mut self, x: V) -> V {
        let xd = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(xd.len(), 4, "avg_pool2: x must be [n,c,h,w]");
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2: odd spatial size {h}x{w}");
        let (oh, ow) = (h / 2, w / 2);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let bx = nc * h * w;
            let bo = nc * oh * ow;
            for oy in 0..oh {
                for ox in 0..ow {
                    let i = bx + 2 * oy * w + 2 * ox;
                    out[bo + oy * ow + ox] = 0.25 * (xv[i] + xv[i + 1] + xv[i + w] + xv[i + w + 1]);
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Shape(vec![n, c, oh, ow]), Op::AvgPool2(x.0), ng)
    }

    pub fn upsample_nearest2(&mut self, x: V) -> V {
        let xd = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(xd.len(), 4);
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        let (oh, ow) = (2 * h, 2 * w);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let bx = nc * h * w;
            let bo = nc * oh * ow;
            for oy in 0..oh {
                let iy = oy / 2;
                for ox in 0..ow {
                    out[bo + oy * ow + ox] = xv[bx + iy * w + ox / 2];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Shape(vec![n, c, oh, ow]), Op::UpsampleNearest2(x.0), ng)
    }

    /// Bilinear resize (half-pixel centers) of an `[n,c,h,w]` tensor.
    pub fn resize_bilinear(&mut self, x: V, oh: usize, ow: usize) -> V {
        let xd = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(xd.len(), 4);
        let (n, c, h, w) = (xd[0], xd[1], xd[2], xd[3]);
        if h == oh && w == ow {
            return self.reshape(x, Shape(vec![n, c, h, w]));
        }
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            let bx = nc * h * w;
            let bo = nc * oh * ow;
            for oy in 0..oh {
                let (y0, y1, fy) = bilinear_coords(oy, oh, h);
                for ox in 0..ow {
                    let (x0, x1, fx) = bilinear_coords(ox, ow, w);
                    let v00 = xv[bx + y0 * w + x0];
                    let v01 = xv[bx + y0 * w + x1];
                    let v10 = xv[bx + y1 * w + x0];
                    let v11 = xv[bx + y1 * w + x1];
                    out[bo + oy * ow + ox] = v00 * (1.0 - fy) * (1.0 - fx)
                        + v01 * (1.0 - fy) * fx
                        + v10 * fy * (1.0 - fx)
                        + v11 * fy * fx;
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Shape(vec![n, c, oh, ow]), Op::ResizeBilinear { x: x.0, oh, ow }, ng)
    }

    /// Concatenate along axis 1. All inputs share every other dimension.
    pub fn concat_axis1(&mut self, xs: &[V]) -> V {
        assert!(!xs.is_empty());
        let first = self.nodes[xs[0].0].shape.dims().to_vec();
        assert!(first.len() >= 2);
        let n = first[0];
        let tail: usize = first[2..].iter().product();
        let mut c_total = 0;
        for v in xs {
            let d = self.nodes[v.0].shape.dims();
            assert_eq!(d[0], n, "concat_axis1: axis-0 mismatch");
            assert_eq!(d[2..].iter().product::<usize>(), tail, "concat_axis1: trailing dims mismatch");
            c_total += d[1];
        }
        let mut out_shape = first.clone();
        out_shape[1] = c_total;
        let mut out = vec![0.0; n * c_total * tail];
        let mut c_off = 0;
        for v in xs {
            let d = self.nodes[v.0].shape.dims().to_vec();
            let c = d[1];
            let val = &self.nodes[v.0].value;
            for ni in 0..n {
                let src = ni * c * tail;
                let dst = ni * c_total * tail + c_off * tail;
                out[dst..dst + c * tail].copy_from_slice(&val[src..src + c * tail]);
            }
            c_off += c;
        }
        let ng = xs.iter().any(|v| self.ng(*v));
        self.push(out, Shape(out_shape), Op::ConcatAxis1(xs.iter().map(|v| v.0).collect()), ng)
    }

    /// Concatenate along axis 0.
    pub fn concat_rows(&mut self, xs: &[V]) -> V {
        assert!(!xs.is_empty());
        let first = self.nodes[xs[0].0].shape.dims().to_vec();
        let tail: usize = first[1..].iter().product();
        let mut n_total = 0;
        for v in xs {
            let d = self.nodes[v.0].shape.dims();
            assert_eq!(d[1..].iter().product::<usize>(), tail, "concat_rows: trailing dims mismatch");
            n_total += d[0];
        }
        let mut out_shape = first.clone();
        out_shape[0] = n_total;
        let mut out = Vec::with_capacity(n_total * tail);
        for v in xs {
            out.extend_from_slice(&self.nodes[v.0].value);
        }
        let ng = xs.iter().any(|v| self.ng(*v));
        self.push(out, Shape(out_shape), Op::ConcatRows(xs.iter().map(|v| v.0).collect()), ng)
    }

    /// Select rows (axis 0) of a 2-D tensor by constant indices.
    pub fn gather_rows(&mut self, x: V, idx: &[usize]) -> V {
        let d = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(d.len(), 2, "gather_rows: x must be [n,d]");
        let (n, dd) = (d[0], d[1]);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(idx.len() * dd);
        for &i in idx {
            assert!(i < n, "gather_rows: index {i} out of {n}");
            out.extend_from_slice(&xv[i * dd..(i + 1) * dd]);
        }
        let ng = self.ng(x);
        self.push(out, Shape(vec![idx.len(), dd]), Op::GatherRows { x: x.0, idx: idx.to_vec() }, ng)
    }

    pub fn global_avg_pool(&mut self, x: V) -> V {
        let d = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(d.len(), 4, "global_avg_pool: x must be [n,c,h,w]");
        let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * c];
        for i in 0..n * c {
            out[i] = xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
        }
        let ng = self.ng(x);
        self.push(out, Shape(vec![n, c]), Op::GlobalAvgPool(x.0), ng)
    }

    fn rows_of(&self, v: V) -> (usize, usize) {
        let d = self.nodes[v.0].shape.dims();
        assert!(!d.is_empty());
        let last = *d.last().unwrap();
        (self.nodes[v.0].value.len() / last, last)
    }

    pub fn softmax_rows(&mut self, x: V) -> V {
        let (rows, d) = self.rows_of(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - m).exp();
                z += *o;
            }
            out[r * d..(r + 1) * d].iter_mut().for_each(|o| *o /= z);
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::SoftmaxRows(x.0), ng)
    }

    pub fn log_softmax_rows(&mut self, x: V) -> V {
        let (rows, d) = self.rows_of(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v - lse;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::LogSoftmaxRows(x.0), ng)
    }

    pub fn l2_normalize_rows(&mut self, x: V, eps: f64) -> V {
        let (rows, d) = self.rows_of(x);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + eps;
            for (o, v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v / norm;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::L2NormRows { x: x.0, eps }, ng)
    }

    pub fn row_dot(&mut self, a: V, b: V) -> V {
        let (ra, da) = self.rows_of(a);
        let (rb, db) = self.rows_of(b);
        assert!(ra == rb && da == db, "row_dot: shape mismatch");
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; ra];
        for r in 0..ra {
            out[r] = av[r * da..(r + 1) * da]
                .iter()
                .zip(&bv[r * da..(r + 1) * da])
                .map(|(x, y)| x * y)
                .sum();
        }
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Shape(vec![ra]), Op::RowDot(a.0, b.0), ng)
    }

    /// Per-pixel channel energy `sum_c x^2`, emitted as `[n, h*w]` rows.
    pub fn channel_energy(&mut self, x: V) -> V {
        let d = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(d.len(), 4);
        let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; n * hw];
        for ni in 0..n {
            for ci in 0..c {
                let b = (ni * c + ci) * hw;
                for p in 0..hw {
                    out[ni * hw + p] += xv[b + p] * xv[b + p];
                }
            }
        }
        let ng = self.ng(x);
        self.push(out, Shape(vec![n, hw]), Op::ChannelEnergy(x.0), ng)
    }

    /// Normalize each `(n, c)` plane to zero mean / unit variance over space.
    pub fn instance_norm(&mut self, x: V, eps: f64) -> V {
        let d = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(d.len(), 4);
        let (nc, hw) = (d[0] * d[1], d[2] * d[3]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; nc * hw];
        for i in 0..nc {
            let plane = &xv[i * hw..(i + 1) * hw];
            let mean = plane.iter().sum::<f64>() / hw as f64;
            let var = plane.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[i * hw..(i + 1) * hw].iter_mut().zip(plane) {
                *o = (v - mean) * inv;
            }
        }
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::InstanceNorm { x: x.0, eps }, ng)
    }

    /// Identity in the forward pass; backward multiplies the incoming
    /// gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: V, lambda: f64) -> V {
        assert!(lambda >= 0.0, "grad_reverse: lambda must be >= 0");
        let out = self.nodes[x.0].value.clone();
        let shape = self.nodes[x.0].shape.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::GradReverse { x: x.0, lambda }, ng)
    }

    pub fn reshape(&mut self, x: V, shape: Shape) -> V {
        assert_eq!(self.nodes[x.0].value.len(), shape.numel(), "reshape: numel mismatch");
        let out = self.nodes[x.0].value.clone();
        let ng = self.ng(x);
        self.push(out, shape, Op::Reshape { x: x.0 }, ng)
    }

    pub fn transpose2d(&mut self, x: V) -> V {
        let d = self.nodes[x.0].shape.dims().to_vec();
        assert_eq!(d.len(), 2);
        let (a, b) = (d[0], d[1]);
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; a * b];
        for r in 0..a {
            for c in 0..b {
                out[c * a + r] = xv[r * b + c];
            }
        }
        let ng = self.ng(x);
        self.push(out, Shape(vec![b, a]), Op::Transpose2d(x.0), ng)
    }

    /// Reverse pass from a scalar loss node. Gradients of `Param` leaves are
    /// accumulated into `store`.
    pub fn backward(&mut self, loss: V, store: &mut ParamStore) {
        assert_eq!(self.nodes[loss.0].value.len(), 1, "backward: loss must be scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads, store);
        }
    }

    fn grad_buf<'a>(grads: &'a mut [Option<Vec<f64>>], id: usize, len: usize) -> &'a mut [f64] {
        grads[id].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
    }

    #[allow(clippy::too_many_lines)]
    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>], store: &mut ParamStore) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Const => {}
            Op::Param(pid) => store.accumulate_grad(*pid, g),
            Op::Add(a, b) => {
                if self.nodes[*a].needs_grad {
                    let ga = Self::grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.nodes[*b].needs_grad {
                    let gb = Self::grad_buf(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Sub(a, b) => {
                if self.nodes[*a].needs_grad {
                    let ga = Self::grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if self.nodes[*b].needs_grad {
                    let gb = Self::grad_buf(grads, *b, g.len());
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].needs_grad {
                    let bv = self.nodes[*b].value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * bv[k];
                    }
                }
                if self.nodes[*b].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let gb = Self::grad_buf(grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                if self.nodes[*a].needs_grad {
                    let bvc = bv.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] / bvc[k];
                    }
                }
                if self.nodes[*b].needs_grad {
                    let (avc, bvc) = (av.clone(), bv.clone());
                    let gb = Self::grad_buf(grads, *b, g.len());
                    for k in 0..g.len() {
                        gb[k] -= g[k] * avc[k] / (bvc[k] * bvc[k]);
                    }
                }
            }
            Op::MinElem(a, b) | Op::MaxElem(a, b) => {
                let take_a: Vec<bool> = {
                    let av = &self.nodes[*a].value;
                    let bv = &self.nodes[*b].value;
                    let is_min = matches!(node.op, Op::MinElem(..));
                    av.iter()
                        .zip(bv)
                        .map(|(x, y)| if is_min { x <= y } else { x >= y })
                        .collect()
                };
                if self.nodes[*a].needs_grad {
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        if take_a[k] {
                            ga[k] += g[k];
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let gb = Self::grad_buf(grads, *b, g.len());
                    for k in 0..g.len() {
                        if !take_a[k] {
                            gb[k] += g[k];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.nodes[*a].needs_grad {
                    let c = *c;
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * c;
                    }
                }
            }
            Op::Offset(a) => {
                if self.nodes[*a].needs_grad {
                    let ga = Self::grad_buf(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Relu(a) => {
                if self.nodes[*a].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        if av[k] > 0.0 {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.nodes[*a].needs_grad {
                    let yv = node.value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * yv[k] * (1.0 - yv[k]);
                    }
                }
            }
            Op::Ln(a) => {
                if self.nodes[*a].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] / av[k];
                    }
                }
            }
            Op::Exp(a) => {
                if self.nodes[*a].needs_grad {
                    let yv = node.value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * yv[k];
                    }
                }
            }
            Op::Abs(a) => {
                if self.nodes[*a].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * av[k].signum();
                    }
                }
            }
            Op::Huber(a) => {
                if self.nodes[*a].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * av[k].clamp(-1.0, 1.0);
                    }
                }
            }
            Op::Clamp(a, lo, hi) => {
                if self.nodes[*a].needs_grad {
                    let (lo, hi) = (*lo, *hi);
                    let av = self.nodes[*a].value.clone();
                    let ga = Self::grad_buf(grads, *a, g.len());
                    for k in 0..g.len() {
                        if av[k] > lo && av[k] < hi {
                            ga[k] += g[k];
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.nodes[*a].needs_grad {
                    let n = self.nodes[*a].value.len();
                    let ga = Self::grad_buf(grads, *a, n);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::Mean(a) => {
                if self.nodes[*a].needs_grad {
                    let n = self.nodes[*a].value.len();
                    let gi = g[0] / n.max(1) as f64;
                    let ga = Self::grad_buf(grads, *a, n);
                    for x in ga.iter_mut() {
                        *x += gi;
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (n, i) = {
                    let d = self.nodes[*x].shape.dims();
                    (d[0], d[1])
                };
                let o = self.nodes[*w].shape.dims()[0];
                if self.nodes[*x].needs_grad {
                    let wv = self.nodes[*w].value.clone();
                    let gx = Self::grad_buf(grads, *x, n * i);
                    for r in 0..n {
                        for c in 0..o {
                            let go = g[r * o + c];
                            if go == 0.0 {
                                continue;
                            }
                            let wrow = &wv[c * i..(c + 1) * i];
                            let gxr = &mut gx[r * i..(r + 1) * i];
                            for k in 0..i {
                                gxr[k] += go * wrow[k];
                            }
                        }
                    }
                }
                if self.nodes[*w].needs_grad {
                    let xv = self.nodes[*x].value.clone();
                    let gw = Self::grad_buf(grads, *w, o * i);
                    for r in 0..n {
                        let xr = &xv[r * i..(r + 1) * i];
                        for c in 0..o {
                            let go = g[r * o + c];
                            if go == 0.0 {
                                continue;
                            }
                            let gwr = &mut gw[c * i..(c + 1) * i];
                            for k in 0..i {
                                gwr[k] += go * xr[k];
                            }
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let gb = Self::grad_buf(grads, *b, o);
                    for r in 0..n {
                        for c in 0..o {
                            gb[c] += g[r * o + c];
                        }
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (m, k) = {
                    let d = self.nodes[*a].shape.dims();
                    (d[0], d[1])
                };
                let n = self.nodes[*b].shape.dims()[1];
                if self.nodes[*a].needs_grad {
                    let bv = self.nodes[*b].value.clone();
                    let ga = Self::grad_buf(grads, *a, m * k);
                    for r in 0..m {
                        for c in 0..n {
                            let go = g[r * n + c];
                            if go == 0.0 {
                                continue;
                            }
                            for kk in 0..k {
                                ga[r * k + kk] += go * bv[kk * n + c];
                            }
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let gb = Self::grad_buf(grads, *b, k * n);
                    for r in 0..m {
                        for kk in 0..k {
                            let av_rk = av[r * k + kk];
                            if av_rk == 0.0 {
                                continue;
                            }
                            for c in 0..n {
                                gb[kk * n + c] += av_rk * g[r * n + c];
                            }
                        }
                    }
                }
            }
            Op::MatMulNT { a, b } => {
                let (m, k) = {
                    let d = self.nodes[*a].shape.dims();
                    (d[0], d[1])
                };
                let n = self.nodes[*b].shape.dims()[0];
                if self.nodes[*a].needs_grad {
                    let bv = self.nodes[*b].value.clone();
                    let ga = Self::grad_buf(grads, *a, m * k);
                    for r in 0..m {
                        for c in 0..n {
                            let go = g[r * n + c];
                            if go == 0.0 {
                                continue;
                            }
                            let brow = &bv[c * k..(c + 1) * k];
                            let gar = &mut ga[r * k..(r + 1) * k];
                            for kk in 0..k {
                                gar[kk] += go * brow[kk];
                            }
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let gb = Self::grad_buf(grads, *b, n * k);
                    for r in 0..m {
                        let arow = &av[r * k..(r + 1) * k];
                        for c in 0..n {
                            let go = g[r * n + c];
                            if go == 0.0 {
                                continue;
                            }
                            let gbr = &mut gb[c * k..(c + 1) * k];
                            for kk in 0..k {
                                gbr[kk] += go * arow[kk];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, pad } => {
                let pad = *pad;
                let xd = self.nodes[*x].shape.dims().to_vec();
                let wd = self.nodes[*w].shape.dims().to_vec();
                let (n, ci, h, wdt) = (xd[0], xd[1], xd[2], xd[3]);
                let (co, k) = (wd[0], wd[2]);
                let (oh, ow) = (h + 2 * pad + 1 - k, wdt + 2 * pad + 1 - k);
                if self.nodes[*x].needs_grad {
                    let wv = self.nodes[*w].value.clone();
                    let gx = Self::grad_buf(grads, *x, n * ci * h * wdt);
                    for ni in 0..n {
                        for oc in 0..co {
                            let base_o = (ni * co + oc) * oh * ow;
                            for ic in 0..ci {
                                let base_x = (ni * ci + ic) * h * wdt;
                                let base_w = (oc * ci + ic) * k * k;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let wgt = wv[base_w + ky * k + kx];
                                        if wgt == 0.0 {
                                            continue;
                                        }
                                        let y0 = pad.saturating_sub(ky);
                                        let y1 = oh.min(h + pad - ky);
                                        let x0 = pad.saturating_sub(kx);
                                        let x1 = ow.min(wdt + pad - kx);
                                        let off = x0 + kx - pad;
                                        for oy in y0..y1 {
                                            let iy = oy + ky - pad;
                                            let orow = base_o + oy * ow;
                                            let xrow = base_x + iy * wdt + off;
                                            let dst = &mut gx[xrow..xrow + (x1 - x0)];
                                            let srcg = &g[orow + x0..orow + x1];
                                            for (d, s) in dst.iter_mut().zip(srcg) {
                                                *d += wgt * s;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[*w].needs_grad {
                    let xv = self.nodes[*x].value.clone();
                    let gw = Self::grad_buf(grads, *w, co * ci * k * k);
                    for ni in 0..n {
                        for oc in 0..co {
                            let base_o = (ni * co + oc) * oh * ow;
                            for ic in 0..ci {
                                let base_x = (ni * ci + ic) * h * wdt;
                                let base_w = (oc * ci + ic) * k * k;
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let y0 = pad.saturating_sub(ky);
                                        let y1 = oh.min(h + pad - ky);
                                        let x0 = pad.saturating_sub(kx);
                                        let x1 = ow.min(wdt + pad - kx);
                                        let mut acc = 0.0;
                                        let off = x0 + kx - pad;
                                        for oy in y0..y1 {
                                            let iy = oy + ky - pad;
                                            let orow = base_o + oy * ow;
                                            let xrow = base_x + iy * wdt + off;
                                            let ga = &g[orow + x0..orow + x1];
                                            let xa = &xv[xrow..xrow + (x1 - x0)];
                                            acc += ga
                                                .iter()
                                                .zip(xa)
                                                .map(|(a, b)| a * b)
                                                .sum::<f64>();
                                        }
                                        gw[base_w + ky * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let gb = Self::grad_buf(grads, *b, co);
                    for ni in 0..n {
                        for oc in 0..co {
                            let base_o = (ni * co + oc) * oh * ow;
                            gb[oc] += g[base_o..base_o + oh * ow].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::AvgPool2(a) => {
                if self.nodes[*a].needs_grad {
                    let d = self.nodes[*a].shape.dims().to_vec();
                    let (h, w) = (d[2], d[3]);
                    let (oh, ow) = (h / 2, w / 2);
                    let nc = d[0] * d[1];
                    let ga = Self::grad_buf(grads, *a, nc * h * w);
                    for i in 0..nc {
                        let bo = i * oh * ow;
                        let bx = i * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gq = 0.25 * g[bo + oy * ow + ox];
                                let j = bx + 2 * oy * w + 2 * ox;
                                ga[j] += gq;
                                ga[j + 1] += gq;
                                ga[j + w] += gq;
                                ga[j + w + 1] += gq;
                            }
                        }
                    }
                }
            }
            Op::UpsampleNearest2(a) => {
                if self.nodes[*a].needs_grad {
                    let d = self.nodes[*a].shape.dims().to_vec();
                    let (h, w) = (d[2], d[3]);
                    let (oh, ow) = (2 * h, 2 * w);
                    let nc = d[0] * d[1];
                    let ga = Self::grad_buf(grads, *a, nc * h * w);
                    for i in 0..nc {
                        let bo = i * oh * ow;
                        let bx = i * h * w;
                        for oy in 0..oh {
                            for ox in 0..ow {
                                ga[bx + (oy / 2) * w + ox / 2] += g[bo + oy * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::ResizeBilinear { x, oh, ow } => {
                if self.nodes[*x].needs_grad {
                    let d = self.nodes[*x].shape.dims().to_vec();
                    let (h, w) = (d[2], d[3]);
                    let nc = d[0] * d[1];
                    let (oh, ow) = (*oh, *ow);
                    let gx = Self::grad_buf(grads, *x, nc * h * w);
                    for i in 0..nc {
                        let bo = i * oh * ow;
                        let bx = i * h * w;
                        for oy in 0..oh {
                            let (y0, y1, fy) = bilinear_coords(oy, oh, h);
                            for ox in 0..ow {
                                let (x0, x1, fx) = bilinear_coords(ox, ow, w);
                                let go = g[bo + oy * ow + ox];
                                gx[bx + y0 * w + x0] += go * (1.0 - fy) * (1.0 - fx);
                                gx[bx + y0 * w + x1] += go * (1.0 - fy) * fx;
                                gx[bx + y1 * w + x0] += go * fy * (1.0 - fx);
                                gx[bx + y1 * w + x1] += go * fy * fx;
                            }
                        }
                    }
                }
            }
            Op::ConcatAxis1(xs) => {
                let d_out = node.shape.dims().to_vec();
                let n = d_out[0];
                let tail: usize = d_out[2..].iter().product();
                let c_total = d_out[1];
                let mut c_off = 0;
                for id in xs {
                    let c = self.nodes[*id].shape.dims()[1];
                    if self.nodes[*id].needs_grad {
                        let gi = Self::grad_buf(grads, *id, n * c * tail);
                        for ni in 0..n {
                            let src = ni * c_total * tail + c_off * tail;
                            let dst = ni * c * tail;
                            for j in 0..c * tail {
                                gi[dst + j] += g[src + j];
                            }
                        }
                    }
                    c_off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for id in xs {
                    let len = self.nodes[*id].value.len();
                    if self.nodes[*id].needs_grad {
                        let gi = Self::grad_buf(grads, *id, len);
                        for j in 0..len {
                            gi[j] += g[off + j];
                        }
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                if self.nodes[*x].needs_grad {
                    let d = self.nodes[*x].shape.dims().to_vec();
                    let dd = d[1];
                    let gx = Self::grad_buf(grads, *x, d[0] * dd);
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..dd {
                            gx[i * dd + j] += g[r * dd + j];
                        }
                    }
                }
            }
            Op::GlobalAvgPool(a) => {
                if self.nodes[*a].needs_grad {
                    let d = self.nodes[*a].shape.dims().to_vec();
                    let hw = d[2] * d[3];
                    let nc = d[0] * d[1];
                    let ga = Self::grad_buf(grads, *a, nc * hw);
                    for i in 0..nc {
                        let gi = g[i] / hw as f64;
                        for j in 0..hw {
                            ga[i * hw + j] += gi;
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.nodes[*a].needs_grad {
                    let y = node.value.clone();
                    let last = *node.shape.dims().last().unwrap();
                    let rows = y.len() / last;
                    let ga = Self::grad_buf(grads, *a, y.len());
                    for r in 0..rows {
                        let yr = &y[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let gar = &mut ga[r * last..(r + 1) * last];
                        for k in 0..last {
                            gar[k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if self.nodes[*a].needs_grad {
                    let y = node.value.clone(); // log-probs
                    let last = *node.shape.dims().last().unwrap();
                    let rows = y.len() / last;
                    let ga = Self::grad_buf(grads, *a, y.len());
                    for r in 0..rows {
                        let yr = &y[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let gsum: f64 = gr.iter().sum();
                        let gar = &mut ga[r * last..(r + 1) * last];
                        for k in 0..last {
                            gar[k] += gr[k] - yr[k].exp() * gsum;
                        }
                    }
                }
            }
            Op::L2NormRows { x, eps } => {
                if self.nodes[*x].needs_grad {
                    let xv = self.nodes[*x].value.clone();
                    let last = *node.shape.dims().last().unwrap();
                    let rows = xv.len() / last;
                    let gx = Self::grad_buf(grads, *x, xv.len());
                    for r in 0..rows {
                        let xr = &xv[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let m = norm + eps;
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let gxr = &mut gx[r * last..(r + 1) * last];
                        if norm > 0.0 {
                            let c = dot / (m * m * norm);
                            for k in 0..last {
                                gxr[k] += gr[k] / m - xr[k] * c;
                            }
                        } else {
                            for k in 0..last {
                                gxr[k] += gr[k] / m;
                            }
                        }
                    }
                }
            }
            Op::RowDot(a, b) => {
                let last = *self.nodes[*a].shape.dims().last().unwrap();
                if self.nodes[*a].needs_grad {
                    let bv = self.nodes[*b].value.clone();
                    let ga = Self::grad_buf(grads, *a, bv.len());
                    for r in 0..g.len() {
                        for k in 0..last {
                            ga[r * last + k] += g[r] * bv[r * last + k];
                        }
                    }
                }
                if self.nodes[*b].needs_grad {
                    let av = self.nodes[*a].value.clone();
                    let gb = Self::grad_buf(grads, *b, av.len());
                    for r in 0..g.len() {
                        for k in 0..last {
                            gb[r * last + k] += g[r] * av[r * last + k];
                        }
                    }
                }
            }
            Op::ChannelEnergy(a) => {
                if self.nodes[*a].needs_grad {
                    let xv = self.nodes[*a].value.clone();
                    let d = self.nodes[*a].shape.dims().to_vec();
                    let (n, c, hw) = (d[0], d[1], d[2] * d[3]);
                    let ga = Self::grad_buf(grads, *a, xv.len());
                    for ni in 0..n {
                        for ci in 0..c {
                            let b = (ni * c + ci) * hw;
                            for p in 0..hw {
                                ga[b + p] += 2.0 * xv[b + p] * g[ni * hw + p];
                            }
                        }
                    }
                }
            }
            Op::InstanceNorm { x, eps } => {
                if self.nodes[*x].needs_grad {
                    let xv = self.nodes[*x].value.clone();
                    let y = node.value.clone();
                    let d = self.nodes[*x].shape.dims().to_vec();
                    let (nc, hw) = (d[0] * d[1], d[2] * d[3]);
                    let gx = Self::grad_buf(grads, *x, xv.len());
                    for i in 0..nc {
                        let xr = &xv[i * hw..(i + 1) * hw];
                        let yr = &y[i * hw..(i + 1) * hw];
                        let gr = &g[i * hw..(i + 1) * hw];
                        let mean = xr.iter().sum::<f64>() / hw as f64;
                        let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / hw as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = gr.iter().sum::<f64>() / hw as f64;
                        let gydot = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / hw as f64;
                        let gxr = &mut gx[i * hw..(i + 1) * hw];
                        for k in 0..hw {
                            gxr[k] += inv * (gr[k] - gmean - yr[k] * gydot);
                        }
                    }
                }
            }
            Op::GradReverse { x, lambda } => {
                if self.nodes[*x].needs_grad {
                    let lam = *lambda;
                    let gx = Self::grad_buf(grads, *x, g.len());
                    for k in 0..g.len() {
                        gx[k] += -lam * g[k];
                    }
                }
            }
            Op::Reshape { x } => {
                if self.nodes[*x].needs_grad {
                    let gx = Self::grad_buf(grads, *x, g.len());
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::Transpose2d(x) => {
                if self.nodes[*x].needs_grad {
                    let d = node.shape.dims().to_vec(); // transposed dims [b, a]
                    let (b, a) = (d[0], d[1]);
                    let gx = Self::grad_buf(grads, *x, a * b);
                    for r in 0..b {
                        for c in 0..a {
                            gx[c * b + r] += g[r * a + c];
                        }
                    }
                }
            }
        }
    }
}

fn bilinear_coords(o: usize, osize: usize, isize: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * isize as f64 / osize as f64 - 0.5;
    let clamped = src.max(0.0).min((isize - 1) as f64);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(isize - 1);
    (i0, i1, clamped - i0 as f64)
}
