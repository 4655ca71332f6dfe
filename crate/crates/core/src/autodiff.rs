//! Tape-based reverse-mode automatic differentiation over dense row-major
//! `f64` tensors.
//!
//! A [`Tape`] owns every value produced during one forward pass. Ops append
//! nodes in evaluation order, so the node list is topologically sorted by
//! construction. [`Tape::backward`] walks it in reverse and returns
//! gradients for any requested node, leaf or intermediate, which is what
//! LayerCAM needs for `d y^c / d A^k`.
//!
//! Image tensors are NCHW. Scalars have shape `[]`.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", numel, data.len()));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(Error::shape("reshape", shape, self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub type NamedTensors = BTreeMap<String, Tensor>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId(usize);

impl TensorId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub enum BatchNormMode<'a> {
    /// Normalise with the batch statistics (biased variance).
    Train,
    /// Normalise with fixed running statistics.
    Eval { mean: &'a [f64], var: &'a [f64] },
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    Relu(TensorId),
    Sigmoid(TensorId),
    BatchNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
        batch_mean: Vec<f64>,
        batch_var: Vec<f64>,
    },
    GlobalAvgPool(TensorId),
    AvgPool2d {
        input: TensorId,
        kernel: usize,
    },
    Linear {
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    },
    Add(TensorId, TensorId),
    MulScalar(TensorId, f64),
    Mul(TensorId, TensorId),
    SoftmaxCrossEntropy {
        logits: TensorId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    SquaredL2(TensorId, TensorId),
    Sum(TensorId),
    Select {
        input: TensorId,
        index: usize,
    },
    Narrow {
        input: TensorId,
        start: usize,
    },
}

impl Op {
    fn inputs(&self) -> Vec<TensorId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, .. } | Op::Linear { input, weight, bias } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::BatchNorm { input, gamma, beta, .. } => vec![*input, *gamma, *beta],
            Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::GlobalAvgPool(a)
            | Op::MulScalar(a, _)
            | Op::Sum(a)
            | Op::AvgPool2d { input: a, .. }
            | Op::SoftmaxCrossEntropy { logits: a, .. }
            | Op::Select { input: a, .. }
            | Op::Narrow { input: a, .. } => vec![*a],
            Op::Add(a, b) | Op::Mul(a, b) | Op::SquaredL2(a, b) => vec![*a, *b],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Record of one forward pass. Single owner; distinct tapes are independent.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    map: HashMap<TensorId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: TensorId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn remove(&mut self, id: TensorId) -> Option<Tensor> {
        self.map.remove(&id)
    }
}

/// `c = a * b` for row-major `m x k` and `k x n` operands; `*_t` means the
/// operand is stored transposed. `beta` scales the existing `c`.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover the m x k, k x n and m x n strided extents.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Patch matrix of one sample: row `r` starts at `cols[r * ld]`, so
    /// several samples can share one `[patch, n * positions]` matrix.
    fn im2col(&self, x: &[f64], cols: &mut [f64], ld: usize) {
        for c in 0..self.c {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ld;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        let dst = &mut cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        if ih < 0 || ih >= self.h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            *d = if iw < 0 || iw >= self.w as isize { 0.0 } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], ld: usize, dx: &mut [f64]) {
        for c in 0..self.c {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = ((c * self.kh + ki) * self.kw + kj) * ld;
                    for oh in 0..self.ho {
                        let ih = (oh * self.stride + ki) as isize - self.pad as isize;
                        if ih < 0 || ih >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * self.w..(ih as usize + 1) * self.w];
                        let src = &cols[row + oh * self.wo..row + (oh + 1) * self.wo];
                        for (ow, s) in src.iter().enumerate() {
                            let iw = (ow * self.stride + kj) as isize - self.pad as isize;
                            if iw >= 0 && iw < self.w as isize {
                                dst[iw as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

impl ConvGeom {
    /// `[patch, n * positions]` patch matrix of a whole batch.
    fn batch_cols(&self, x: &[f64], n: usize, in_stride: usize) -> Vec<f64> {
        let p = self.positions();
        let mut cols = vec![0.0; self.patch() * n * p];
        for s in 0..n {
            self.im2col(&x[s * in_stride..(s + 1) * in_stride], &mut cols[s * p..], n * p);
        }
        cols
    }
}

/// `[O, N * P]` to `[N, O, P]`.
fn batch_major(joint: &[f64], n: usize, o: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o * p];
    for oi in 0..o {
        for s in 0..n {
            let src = &joint[oi * n * p + s * p..oi * n * p + (s + 1) * p];
            out[(s * o + oi) * p..(s * o + oi + 1) * p].copy_from_slice(src);
        }
    }
    out
}

/// `[N, O, P]` to `[O, N * P]`.
fn channel_major(x: &[f64], n: usize, o: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * o * p];
    for s in 0..n {
        for oi in 0..o {
            let src = &x[(s * o + oi) * p..(s * o + oi + 1) * p];
            out[oi * n * p + s * p..oi * n * p + (s + 1) * p].copy_from_slice(src);
        }
    }
    out
}

fn zeros_into(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor) -> TensorId {
        self.nodes.push(Node { value, op: Op::Leaf });
        TensorId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Batch mean and biased variance recorded by a training-mode batchnorm.
    pub fn batch_stats(&self, id: TensorId) -> Option<(&[f64], &[f64])> {
        match &self.nodes.get(id.0)?.op {
            Op::BatchNorm {
                training: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    fn check(&self, id: TensorId) -> Result<()> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::NotOnTape(id.0))
        }
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<TensorId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.nodes.push(Node { value, op });
        Ok(TensorId(self.nodes.len() - 1))
    }

    fn rank4(&self, id: TensorId, op: &'static str) -> Result<[usize; 4]> {
        self.check(id)?;
        match *self.shape(id) {
            [n, c, h, w] => Ok([n, c, h, w]),
            ref s => Err(Error::shape(op, "[N, C, H, W]", s)),
        }
    }

    fn rank2(&self, id: TensorId, op: &'static str) -> Result<[usize; 2]> {
        self.check(id)?;
        match *self.shape(id) {
            [a, b] => Ok([a, b]),
            ref s => Err(Error::shape(op, "[N, D]", s)),
        }
    }

    fn conv_geom(&self, input: TensorId, weight: TensorId, stride: usize, padding: usize) -> Result<(usize, usize, ConvGeom)> {
        let [n, c, h, w] = self.rank4(input, "conv2d input")?;
        let [o, wc, kh, kw] = self.rank4(weight, "conv2d weight")?;
        if wc != c {
            return Err(Error::shape("conv2d", [o, c, kh, kw], [o, wc, kh, kw]));
        }
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape("conv2d", "kernel within padded input", [h, w, kh, kw]));
        }
        let ho = (h + 2 * padding - kh) / stride + 1;
        let wo = (w + 2 * padding - kw) / stride + 1;
        Ok((
            n,
            o,
            ConvGeom {
                c,
                h,
                w,
                kh,
                kw,
                stride,
                pad: padding,
                ho,
                wo,
            },
        ))
    }

    pub fn conv2d(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    ) -> Result<TensorId> {
        let (n, o, g) = self.conv_geom(input, weight, stride, padding)?;
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", [o], self.shape(b)));
            }
        }
        let (patch, p) = (g.patch(), g.positions());
        let x = &self.value(input).data;
        let wt = &self.value(weight).data;
        let in_stride = g.c * g.h * g.w;
        let cols = g.batch_cols(x, n, in_stride);
        let mut joint = vec![0.0; o * n * p];
        gemm(o, patch, n * p, wt, false, &cols, false, &mut joint, 0.0);
        let mut out = batch_major(&joint, n, o, p);
        if let Some(b) = bias {
            let bv = &self.value(b).data;
            for (i, chunk) in out.chunks_mut(p).enumerate() {
                let bo = bv[i % o];
                chunk.iter_mut().for_each(|v| *v += bo);
            }
        }
        let value = Tensor::new(vec![n, o, g.ho, g.wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            },
            "conv2d",
        )
    }

    pub fn relu(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| a.max(0.0)).collect(),
        };
        self.push(value, Op::Relu(x), "relu")
    }

    pub fn sigmoid(&mut self, x: TensorId) -> Result<TensorId> {
        self.check(x)?;
        let v = self.value(x);
        let value = Tensor {
            shape: v.shape.clone(),
            data: v.data.iter().map(|&a| 1.0 / (1.0 + (-a).exp())).collect(),
        };
        self.push(value, Op::Sigmoid(x), "sigmoid")
    }

    pub fn batchnorm_2d(&mut self, x: TensorId, gamma: TensorId, beta: TensorId, mode: BatchNormMode<'_>) -> Result<TensorId> {
        let [n, c, h, w] = self.rank4(x, "batchnorm_2d")?;
        self.check(gamma)?;
        self.check(beta)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batchnorm_2d affine", [c], self.shape(gamma)));
        }
        let hw = h * w;
        let count = (n * hw) as f64;
        let xv = &self.value(x).data;
        let (mean, var, training) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        mean[ch] += plane.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for s in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(s * c + ch) * hw..(s * c + ch + 1) * hw];
                        var[ch] += plane.iter().map(|v| (v - mean[ch]) * (v - mean[ch])).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var, true)
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::shape("batchnorm_2d running stats", [c], [mean.len(), var.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let gv = &self.value(gamma).data;
        let bv = &self.value(beta).data;
        let mut normalized = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let z = (xv[i] - mean[ch]) * inv_std[ch];
                    normalized[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        let value = Tensor::new(vec![n, c, h, w], out)?;
        let (batch_mean, batch_var) = if training { (mean, var) } else { (Vec::new(), Vec::new()) };
        self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
                batch_mean,
                batch_var,
            },
            "batchnorm_2d",
        )
    }

    pub fn global_avg_pool(&mut self, x: TensorId) -> Result<TensorId> {
        let [n, c, h, w] = self.rank4(x, "global_avg_pool")?;
        let hw = h * w;
        let xv = &self.value(x).data;
        let data = xv.chunks(hw).map(|p| p.iter().sum::<f64>() / hw as f64).collect();
        self.push(Tensor::new(vec![n, c], data)?, Op::GlobalAvgPool(x), "global_avg_pool")
    }

    /// Non-overlapping `kernel x kernel` average pooling; trailing rows and
    /// columns that do not fill a window are dropped.
    pub fn avg_pool2d(&mut self, x: TensorId, kernel: usize) -> Result<TensorId> {
        let [n, c, h, w] = self.rank4(x, "avg_pool2d")?;
        if kernel == 0 || kernel > h || kernel > w {
            return Err(Error::shape("avg_pool2d", "kernel <= spatial dims", [h, w, kernel]));
        }
        let (ho, wo) = (h / kernel, w / kernel);
        let xv = &self.value(x).data;
        let scale = 1.0 / (kernel * kernel) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for plane in 0..n * c {
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut acc = 0.0;
                    for i in 0..kernel {
                        let row = plane * h * w + (oh * kernel + i) * w + ow * kernel;
                        acc += xv[row..row + kernel].iter().sum::<f64>();
                    }
                    out[(plane * ho + oh) * wo + ow] = acc * scale;
                }
            }
        }
        self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::AvgPool2d { input: x, kernel }, "avg_pool2d")
    }

    /// `x [N, I] * W^T + b` with `W [O, I]`.
    pub fn linear(&mut self, x: TensorId, weight: TensorId, bias: Option<TensorId>) -> Result<TensorId> {
        let [n, i] = self.rank2(x, "linear input")?;
        let [o, wi] = self.rank2(weight, "linear weight")?;
        if wi != i {
            return Err(Error::shape("linear", [o, i], [o, wi]));
        }
        let mut out = vec![0.0; n * o];
        gemm(n, i, o, &self.value(x).data, false, &self.value(weight).data, true, &mut out, 0.0);
        if let Some(b) = bias {
            self.check(b)?;
            if self.shape(b) != [o] {
                return Err(Error::shape("linear bias", [o], self.shape(b)));
            }
            let bv = &self.value(b).data;
            for row in out.chunks_mut(o) {
                row.iter_mut().zip(bv).for_each(|(v, b)| *v += b);
            }
        }
        self.push(Tensor::new(vec![n, o], out)?, Op::Linear { input: x, weight, bias }, "linear")
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect(),
        };
        self.push(value, Op::Add(a, b), "add")
    }

    pub fn mul_scalar(&mut self, a: TensorId, s: f64) -> Result<TensorId> {
        self.check(a)?;
        let av = self.value(a);
        let value = Tensor {
            shape: av.shape.clone(),
            data: av.data.iter().map(|x| x * s).collect(),
        };
        self.push(value, Op::MulScalar(a, s), "mul_scalar")
    }

    /// Elementwise product. `b` may also be `[N, C]` against an `a` of
    /// `[N, C, H, W]`, scaling each channel plane (squeeze-and-excitation).
    pub fn elementwise_mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let data = if sa == sb {
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            av.iter().zip(bv).map(|(x, y)| x * y).collect()
        } else if sa.len() == 4 && sb.len() == 2 && sa[..2] == sb[..] {
            let hw = sa[2] * sa[3];
            let (av, bv) = (&self.value(a).data, &self.value(b).data);
            av.chunks(hw).zip(bv).flat_map(|(plane, g)| plane.iter().map(move |x| x * g)).collect()
        } else {
            return Err(Error::shape("elementwise_mul", sa, sb));
        };
        self.push(Tensor { shape: sa, data }, Op::Mul(a, b), "elementwise_mul")
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: TensorId, labels: &[usize]) -> Result<TensorId> {
        let [n, c] = self.rank2(logits, "softmax_cross_entropy")?;
        if labels.len() != n {
            return Err(Error::shape("softmax_cross_entropy labels", n, labels.len()));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::LabelOutOfRange { label, n_classes: c });
        }
        let lv = &self.value(logits).data;
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for (s, &label) in labels.iter().enumerate() {
            let row = &lv[s * c..(s + 1) * c];
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for (p, v) in probs[s * c..(s + 1) * c].iter_mut().zip(row) {
                *p = (v - max).exp() / z;
            }
            loss += z.ln() + max - row[label];
        }
        self.push(
            Tensor::scalar(loss / n as f64),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "softmax_cross_entropy",
        )
    }

    /// Mean over rows of the squared Euclidean distance between `a [N, D]`
    /// and `b [N, D]`.
    pub fn squared_l2_distance(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let [n, _] = self.rank2(a, "squared_l2_distance")?;
        self.rank2(b, "squared_l2_distance")?;
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("squared_l2_distance", self.shape(a), self.shape(b)));
        }
        let d: f64 = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.push(Tensor::scalar(d / n as f64), Op::SquaredL2(a, b), "squared_l2_distance")
    }

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        self.check(a)?;
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Scalar at `index` of a `[N, C]` tensor, e.g. one class logit.
    pub fn select(&mut self, a: TensorId, row: usize, col: usize) -> Result<TensorId> {
        let [n, c] = self.rank2(a, "select")?;
        if row >= n || col >= c {
            return Err(Error::shape("select", [n, c], [row, col]));
        }
        let index = row * c + col;
        let v = self.value(a).data[index];
        self.push(Tensor::scalar(v), Op::Select { input: a, index }, "select")
    }

    /// Rows `[start, start + len)` along dimension 0.
    pub fn narrow(&mut self, a: TensorId, start: usize, len: usize) -> Result<TensorId> {
        self.check(a)?;
        let shape = self.shape(a).to_vec();
        if shape.is_empty() || start + len > shape[0] {
            return Err(Error::shape("narrow", shape, [start, start + len]));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.value(a).data[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        self.push(Tensor { shape: out_shape, data }, Op::Narrow { input: a, start }, "narrow")
    }

    /// Gradients of the scalar `output` with respect to every id in `wrt`.
    /// The tape is left untouched, so repeated calls agree exactly.
    pub fn backward(&self, output: TensorId, wrt: &[TensorId]) -> Result<Gradients> {
        self.check(output)?;
        for &id in wrt {
            self.check(id)?;
        }
        let out_shape = self.shape(output);
        if !out_shape.is_empty() {
            return Err(Error::NonScalarOutput(out_shape.to_vec()));
        }
        let targets: HashSet<TensorId> = wrt.iter().copied().collect();
        let last = output.0;
        let mut needed = vec![false; last + 1];
        for i in 0..=last {
            needed[i] = targets.contains(&TensorId(i)) || self.nodes[i].op.inputs().iter().any(|j| needed[j.0]);
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=last).map(|_| None).collect();
        let mut result = Gradients::default();
        if needed[last] {
            grads[last] = Some(vec![1.0]);
        }
        for i in (0..=last).rev() {
            let Some(g) = grads[i].take() else { continue };
            if targets.contains(&TensorId(i)) {
                result.map.insert(
                    TensorId(i),
                    Tensor {
                        shape: self.nodes[i].value.shape.clone(),
                        data: g.clone(),
                    },
                );
            }
            self.propagate(i, &g, &needed, &mut grads)?;
        }
        for &id in wrt {
            result
                .map
                .entry(id)
                .or_insert_with(|| Tensor::zeros(&self.nodes[id.0].value.shape));
        }
        Ok(result)
    }

    fn propagate(&self, i: usize, g: &[f64], needed: &[bool], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let len = |id: TensorId| self.nodes[id.0].value.data.len();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
            } => {
                let (n, o, geom) = self.conv_geom(*input, *weight, *stride, *padding)?;
                let (patch, p) = (geom.patch(), geom.positions());
                let in_stride = geom.c * geom.h * geom.w;
                let x = &self.value(*input).data;
                let wt = &self.value(*weight).data;
                let joint_g = channel_major(g, n, o, p);
                let mut dw = None;
                let mut dx = None;
                if needed[weight.0] {
                    let cols = geom.batch_cols(x, n, in_stride);
                    let mut d = vec![0.0; o * patch];
                    gemm(o, n * p, patch, &joint_g, false, &cols, true, &mut d, 0.0);
                    dw = Some(d);
                }
                if needed[input.0] {
                    let mut dcols = vec![0.0; patch * n * p];
                    gemm(patch, o, n * p, wt, true, &joint_g, false, &mut dcols, 0.0);
                    let mut d = vec![0.0; n * in_stride];
                    for s in 0..n {
                        geom.col2im(&dcols[s * p..], n * p, &mut d[s * in_stride..(s + 1) * in_stride]);
                    }
                    dx = Some(d);
                }
                if let Some(dw) = dw {
                    add_into(zeros_into(&mut grads[weight.0], len(*weight)), &dw);
                }
                if let Some(dx) = dx {
                    add_into(zeros_into(&mut grads[input.0], len(*input)), &dx);
                }
                if let Some(b) = bias.filter(|b| needed[b.0]) {
                    let db = zeros_into(&mut grads[b.0], o);
                    for (idx, chunk) in g.chunks(p).enumerate() {
                        db[idx % o] += chunk.iter().sum::<f64>();
                    }
                }
            }
            Op::Relu(x) => {
                if needed[x.0] {
                    let xv = &self.value(*x).data;
                    let dx = zeros_into(&mut grads[x.0], xv.len());
                    for ((d, &gi), &v) in dx.iter_mut().zip(g).zip(xv) {
                        // relu'(0) = 0
                        if v > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if needed[x.0] {
                    let yv = &node.value.data;
                    let dx = zeros_into(&mut grads[x.0], yv.len());
                    for ((d, &gi), &y) in dx.iter_mut().zip(g).zip(yv) {
                        *d += gi * y * (1.0 - y);
                    }
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
                training,
                ..
            } => {
                let [n, c, h, w] = self.rank4(*input, "batchnorm_2d")?;
                let hw = h * w;
                let count = (n * hw) as f64;
                let gv = &self.value(*gamma).data;
                let mut sum_g = vec![0.0; c];
                let mut sum_gz = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * hw;
                        for i in off..off + hw {
                            sum_g[ch] += g[i];
                            sum_gz[ch] += g[i] * normalized[i];
                        }
                    }
                }
                if needed[gamma.0] {
                    add_into(zeros_into(&mut grads[gamma.0], c), &sum_gz);
                }
                if needed[beta.0] {
                    add_into(zeros_into(&mut grads[beta.0], c), &sum_g);
                }
                if needed[input.0] {
                    let dx = zeros_into(&mut grads[input.0], n * c * hw);
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * hw;
                            let k = gv[ch] * inv_std[ch];
                            for i in off..off + hw {
                                dx[i] += if *training {
                                    k * (g[i] - sum_g[ch] / count - normalized[i] * sum_gz[ch] / count)
                                } else {
                                    k * g[i]
                                };
                            }
                        }
                    }
                }
            }
            Op::GlobalAvgPool(x) => {
                if needed[x.0] {
                    let n = len(*x);
                    let hw = n / g.len();
                    let dx = zeros_into(&mut grads[x.0], n);
                    for (plane, &gi) in dx.chunks_mut(hw).zip(g) {
                        let v = gi / hw as f64;
                        plane.iter_mut().for_each(|d| *d += v);
                    }
                }
            }
            Op::AvgPool2d { input, kernel } => {
                if needed[input.0] {
                    let [n, c, h, w] = self.rank4(*input, "avg_pool2d")?;
                    let (ho, wo) = (h / kernel, w / kernel);
                    let scale = 1.0 / (kernel * kernel) as f64;
                    let dx = zeros_into(&mut grads[input.0], n * c * h * w);
                    for plane in 0..n * c {
                        for oh in 0..ho {
                            for ow in 0..wo {
                                let v = g[(plane * ho + oh) * wo + ow] * scale;
                                for i in 0..*kernel {
                                    let row = plane * h * w + (oh * kernel + i) * w + ow * kernel;
                                    dx[row..row + kernel].iter_mut().for_each(|d| *d += v);
                                }
                            }
                        }
                    }
                }
            }
            Op::Linear { input, weight, bias } => {
                let [n, i_dim] = self.rank2(*input, "linear")?;
                let [o, _] = self.rank2(*weight, "linear")?;
                if needed[input.0] {
                    let dx = zeros_into(&mut grads[input.0], n * i_dim);
                    gemm(n, o, i_dim, g, false, &self.value(*weight).data, false, dx, 1.0);
                }
                if needed[weight.0] {
                    let dw = zeros_into(&mut grads[weight.0], o * i_dim);
                    gemm(o, n, i_dim, g, true, &self.value(*input).data, false, dw, 1.0);
                }
                if let Some(b) = bias.filter(|b| needed[b.0]) {
                    let db = zeros_into(&mut grads[b.0], o);
                    for row in g.chunks(o) {
                        add_into(db, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for x in [a, b] {
                    if needed[x.0] {
                        add_into(zeros_into(&mut grads[x.0], g.len()), g);
                    }
                }
            }
            Op::MulScalar(a, s) => {
                if needed[a.0] {
                    let da = zeros_into(&mut grads[a.0], g.len());
                    da.iter_mut().zip(g).for_each(|(d, gi)| *d += gi * s);
                }
            }
            Op::Mul(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                if av.len() == bv.len() {
                    if needed[a.0] {
                        let da = zeros_into(&mut grads[a.0], av.len());
                        for ((d, gi), y) in da.iter_mut().zip(g).zip(bv) {
                            *d += gi * y;
                        }
                    }
                    if needed[b.0] {
                        let db = zeros_into(&mut grads[b.0], bv.len());
                        for ((d, gi), x) in db.iter_mut().zip(g).zip(av) {
                            *d += gi * x;
                        }
                    }
                } else {
                    let hw = av.len() / bv.len();
                    if needed[a.0] {
                        let da = zeros_into(&mut grads[a.0], av.len());
                        for ((dplane, gplane), y) in da.chunks_mut(hw).zip(g.chunks(hw)).zip(bv) {
                            dplane.iter_mut().zip(gplane).for_each(|(d, gi)| *d += gi * y);
                        }
                    }
                    if needed[b.0] {
                        let db = zeros_into(&mut grads[b.0], bv.len());
                        for ((d, gplane), xplane) in db.iter_mut().zip(g.chunks(hw)).zip(av.chunks(hw)) {
                            *d += gplane.iter().zip(xplane).map(|(gi, x)| gi * x).sum::<f64>();
                        }
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                if needed[logits.0] {
                    let n = labels.len();
                    let c = probs.len() / n;
                    let scale = g[0] / n as f64;
                    let dl = zeros_into(&mut grads[logits.0], probs.len());
                    for (s, &label) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == label { 1.0 } else { 0.0 };
                            dl[s * c + k] += scale * (probs[s * c + k] - onehot);
                        }
                    }
                }
            }
            Op::SquaredL2(a, b) => {
                let av = &self.value(*a).data;
                let bv = &self.value(*b).data;
                let n = self.shape(*a)[0] as f64;
                let k = 2.0 * g[0] / n;
                if needed[a.0] {
                    let da = zeros_into(&mut grads[a.0], av.len());
                    for ((d, x), y) in da.iter_mut().zip(av).zip(bv) {
                        *d += k * (x - y);
                    }
                }
                if needed[b.0] {
                    let db = zeros_into(&mut grads[b.0], bv.len());
                    for ((d, x), y) in db.iter_mut().zip(av).zip(bv) {
                        *d -= k * (x - y);
                    }
                }
            }
            Op::Sum(a) => {
                if needed[a.0] {
                    let da = zeros_into(&mut grads[a.0], len(*a));
                    da.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Select { input, index } => {
                if needed[input.0] {
                    zeros_into(&mut grads[input.0], len(*input))[*index] += g[0];
                }
            }
            Op::Narrow { input, start } => {
                if needed[input.0] {
                    let offset = start * (g.len() / node.value.shape[0]);
                    let di = zeros_into(&mut grads[input.0], len(*input));
                    add_into(&mut di[offset..offset + g.len()], g);
                }
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// SGD with heavy-ball momentum: `v = momentum * v + g; p -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies one update. Parameters without a gradient are left alone; on
    /// error nothing is modified.
    pub fn step(&mut self, params: &mut NamedTensors, grads: &NamedTensors) -> Result<()> {
        for (name, g) in grads {
            let p = params
                .get(name)
                .ok_or_else(|| Error::InvalidArgument(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    expected: format!("{name} {:?}", p.shape()),
                    actual: format!("{:?}", g.shape()),
                });
            }
            if !g.is_finite() {
                return Err(Error::TrainingDiverged(format!("non-finite gradient for {name}")));
            }
        }
        for (name, g) in grads {
            let p = params.get_mut(name).expect("checked above");
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.numel()]);
            for ((pv, vv), gv) in p.data.iter_mut().zip(v.iter_mut()).zip(&g.data) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.learning_rate * *vv;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![2, 3], vec![1.0, -2.0, 3.0, 0.5, 0.0, 7.0]).unwrap());
        let y = tape.sum(a).unwrap();
        let g = tape.backward(y, &[a]).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut tape = Tape::new();
        let vals = vec![1.5, -2.0, 0.25, 4.0];
        let a = tape.leaf(Tensor::new(vec![4], vals.clone()).unwrap());
        let sq = tape.elementwise_mul(a, a).unwrap();
        let half = tape.mul_scalar(sq, 0.5).unwrap();
        let y = tape.sum(half).unwrap();
        let g = tape.backward(y, &[a]).unwrap();
        assert_eq!(g.get(a).unwrap().data(), vals.as_slice());
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(a).unwrap();
        let y = tape.sum(r).unwrap();
        let g = tape.backward(y, &[a]).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn uniform_logits_give_ln_c() {
        let mut tape = Tape::new();
        let logits = tape.leaf(Tensor::full(&[2, 7], 0.3));
        let loss = tape.softmax_cross_entropy(logits, &[0, 6]).unwrap();
        assert!((tape.value(loss).item() - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(logits, &[0, 7]),
            Err(Error::LabelOutOfRange { label: 7, n_classes: 7 })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_and_unknown_ids() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(a, &[a]), Err(Error::NonScalarOutput(_))));
        let y = tape.sum(a).unwrap();
        assert!(matches!(tape.backward(y, &[TensorId(99)]), Err(Error::NotOnTape(99))));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[3, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[3, 2]"), "{err}");
    }

    #[test]
    fn unreachable_wrt_gets_zero_gradient() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::full(&[2], 1.0));
        let b = tape.leaf(Tensor::full(&[3], 1.0));
        let y = tape.sum(a).unwrap();
        let g = tape.backward(y, &[b]).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn sgd_zero_lr_is_identity_and_rejects_nan() {
        let mut params = NamedTensors::new();
        params.insert("w".into(), Tensor::full(&[3], 2.0));
        let mut grads = NamedTensors::new();
        grads.insert("w".into(), Tensor::full(&[3], 5.0));
        let mut opt = Sgd::new(0.0, 0.9);
        opt.step(&mut params, &grads).unwrap();
        assert_eq!(params["w"].data(), &[2.0; 3]);
        grads.insert("w".into(), Tensor::new(vec![3], vec![1.0, f64::NAN, 0.0]).unwrap());
        let err = opt.step(&mut params, &grads).unwrap_err();
        assert!(err.to_string().contains("training diverged"));
        assert_eq!(params["w"].data(), &[2.0; 3]);
    }

    fn quadratic_steps(momentum: f64, lr: f64, tol: f64) -> (usize, Vec<f64>) {
        // loss(p) = 0.5 * 3 * p^2, gradient 3p.
        let mut params = NamedTensors::new();
        params.insert("p".into(), Tensor::scalar(1.0));
        let mut opt = Sgd::new(lr, momentum);
        let mut losses = Vec::new();
        for step in 0..10_000 {
            let p = params["p"].item();
            let loss = 1.5 * p * p;
            losses.push(loss);
            if loss < tol {
                return (step, losses);
            }
            let mut grads = NamedTensors::new();
            grads.insert("p".into(), Tensor::scalar(3.0 * p));
            opt.step(&mut params, &grads).unwrap();
        }
        (10_000, losses)
    }

    #[test]
    fn plain_sgd_descends_monotonically() {
        let (_, losses) = quadratic_steps(0.0, 0.01, 0.0);
        assert!(losses[..100].windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn momentum_converges_faster() {
        let (plain, _) = quadratic_steps(0.0, 0.01, 1e-6);
        let (heavy, _) = quadratic_steps(0.9, 0.01, 1e-6);
        assert!(heavy < plain, "momentum {heavy} vs plain {plain}");
    }
}
