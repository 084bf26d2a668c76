//! Recorded forward evaluation and reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only list of executed operations. Every method
//! computes its result eagerly, stores it with whatever the backward pass
//! needs, and returns a [`Var`] handle. Because nodes can only refer to nodes
//! created before them, insertion order is a topological order and
//! [`Graph::backward`] is a single reverse sweep.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use super::dense::Tensor;
use super::kernels;
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pooling flavours used by the fusion attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    /// Global average over `H x W`, result `C x 1 x 1`.
    Gap,
    /// Global maximum over `H x W`, result `C x 1 x 1`.
    Gmp,
    /// 2x2 stride-1 local mean, same spatial size.
    MeanP,
    /// 2x2 stride-1 local maximum, same spatial size.
    MaxP,
}

impl std::str::FromStr for PoolKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gap" => Ok(PoolKind::Gap),
            "gmp" => Ok(PoolKind::Gmp),
            "meanp" => Ok(PoolKind::MeanP),
            "maxp" => Ok(PoolKind::MaxP),
            other => Err(Error::Config(format!("unknown pooling kind `{other}`"))),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Depthwise {
        input: Var,
        kernel: Var,
        dilation: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Sobel {
        x: Var,
        gx: Vec<f64>,
        gy: Vec<f64>,
    },
    GlobalAvg(Var),
    Argmax {
        x: Var,
        // source index for every output element
        route: Vec<usize>,
    },
    LocalMean(Var),
    Broadcast(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Max(Var, Var),
    Scale(Var, f64),
    DivConst(Var, f64),
    MulScalar(Var, Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Concat(Var, Var),
    Sum(Var),
    Mean(Var),
    L1(Var, Var),
    Mse(Var, Var),
    Bce(Var, Var),
    Cosine(Var, Var),
    CosineRows(Var, Var),
    Resize(Var),
    Pick(Var, usize),
    Row(Var, usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Stabilizer for the Sobel magnitude `sqrt(gx^2 + gy^2 + eps)`.
pub const SOBEL_EPS: f64 = 1e-12;
/// Guard added to the norm product of cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;
/// Probability clamp of the binary cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

/// The computation record.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Digest of every branch taken by a non-smooth operation (activation
    /// signs, max/abs sides, pooling routes, BCE clamps). Two records of the
    /// same computation with equal patterns lie on one smooth piece.
    pub fn branch_pattern(&self) -> u64 {
        let mut h = DefaultHasher::new();
        let side = |h: &mut DefaultHasher, a: &Tensor, b: &Tensor| {
            for (x, y) in a.data().iter().zip(b.data()) {
                (x.partial_cmp(y)).hash(h);
            }
        };
        for (i, node) in self.nodes.iter().enumerate() {
            match &node.op {
                Op::Argmax { route, .. } => (i, route).hash(&mut h),
                Op::Max(a, b) | Op::L1(a, b) => {
                    i.hash(&mut h);
                    side(&mut h, self.value(*a), self.value(*b));
                }
                Op::LeakyRelu(a, _) => {
                    i.hash(&mut h);
                    self.value(*a).data().iter().for_each(|&x| (x > 0.0).hash(&mut h));
                }
                Op::Bce(p, _) => {
                    i.hash(&mut h);
                    for &x in self.value(*p).data() {
                        (x < BCE_CLAMP, x > 1.0 - BCE_CLAMP).hash(&mut h);
                    }
                }
                _ => {}
            }
        }
        h.finish()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input tensor.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    // ---------------------------------------------------------------- convolution

    fn conv_dims(&self, op: &'static str, input: Var, k: usize, dilation: usize) -> Result<(usize, usize, usize)> {
        if k != 1 && k != 3 {
            return Err(Error::shape(op, format!("kernel size {k} is not 1 or 3")));
        }
        if dilation == 0 || (k == 1 && dilation != 1) {
            return Err(Error::shape(op, format!("dilation {dilation} invalid for k={k}")));
        }
        self.value(input).dims3()
    }

    /// Same-padded cross-correlation; `kernel` is `C_out x C_in x k x k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, dilation: usize) -> Result<Var> {
        let kshape = self.shape(kernel).to_vec();
        let [cout, kcin, k, k2] = kshape[..] else {
            return Err(Error::shape("conv2d", format!("kernel must be rank 4, got {kshape:?}")));
        };
        if k != k2 {
            return Err(Error::shape("conv2d", "kernel must be square"));
        }
        let (cin, h, w) = self.conv_dims("conv2d", input, k, dilation)?;
        if cin != kcin {
            return Err(Error::shape(
                "conv2d",
                format!("input has {cin} channels, kernel expects {kcin}"),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d", format!("bias must be [{cout}]")));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            cin,
            cout,
            h,
            w,
            k,
            dilation,
        );
        let value = Tensor::new(vec![cout, h, w], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
            },
            &inputs,
        ))
    }

    /// Channel-wise convolution; `kernel` is `C x k x k`.
    pub fn depthwise_conv2d(&mut self, input: Var, kernel: Var, dilation: usize) -> Result<Var> {
        let kshape = self.shape(kernel).to_vec();
        let [kc, k, k2] = kshape[..] else {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("kernel must be rank 3, got {kshape:?}"),
            ));
        };
        if k != k2 {
            return Err(Error::shape("depthwise_conv2d", "kernel must be square"));
        }
        let (c, h, w) = self.conv_dims("depthwise_conv2d", input, k, dilation)?;
        if c != kc {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input has {c} channels, kernel has {kc}"),
            ));
        }
        let out = kernels::depthwise_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            c,
            h,
            w,
            k,
            dilation,
        );
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::Depthwise { input, kernel, dilation }, &[input, kernel]))
    }

    // ---------------------------------------------------------------- dense algebra

    /// `y = W^T x + b` with `x: [n]`, `W: [n, m]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let bs = self.shape(b).to_vec();
        let ([n], [wn, m], [bm]) = (&xs[..], &ws[..], &bs[..]) else {
            return Err(Error::shape("linear", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        };
        if n != wn || m != bm {
            return Err(Error::shape("linear", format!("x {xs:?}, W {ws:?}, b {bs:?}")));
        }
        let (n, m) = (*n, *m);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut y = vec![0.0; m];
        for i in 0..n {
            let xi = xv[i];
            for (yj, wij) in y.iter_mut().zip(&wv[i * m..(i + 1) * m]) {
                *yj += xi * wij;
            }
        }
        for (yj, bj) in y.iter_mut().zip(self.value(b).data()) {
            *yj += bj;
        }
        Ok(self.push(Tensor::vector(y), Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Matrix product of `[p, q]` and `[q, r]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ([p, q], [q2, r]) = (&asz[..], &bsz[..]) else {
            return Err(Error::shape("matmul", format!("{asz:?} x {bsz:?}")));
        };
        if q != q2 {
            return Err(Error::shape("matmul", format!("{asz:?} x {bsz:?}")));
        }
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), *p, *q, *r);
        let value = Tensor::new(vec![*p, *r], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let [r, c] = s[..] else {
            return Err(Error::shape("transpose", format!("expected a matrix, got {s:?}")));
        };
        let out = transpose_raw(self.value(a).data(), r, c);
        let value = Tensor::new(vec![c, r], out)?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Max-shifted softmax along `axis` of a vector or matrix.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, stride) = softmax_layout(&shape, axis)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            let base = softmax_base(o, len, stride);
            let mut m = f64::NEG_INFINITY;
            for i in 0..len {
                m = m.max(src[base + i * stride]);
            }
            let mut z = 0.0;
            for i in 0..len {
                let e = (src[base + i * stride] - m).exp();
                out[base + i * stride] = e;
                z += e;
            }
            for i in 0..len {
                out[base + i * stride] /= z;
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    // ---------------------------------------------------------------- image operators

    /// Per-channel Sobel gradient magnitude `sqrt(gx^2 + gy^2 + eps)`.
    pub fn sobel(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        if h < 3 || w < 3 {
            return Err(Error::TooSmall { h, w, min: 3 });
        }
        let hw = h * w;
        let mut gx = Vec::with_capacity(c * hw);
        let mut gy = Vec::with_capacity(c * hw);
        for ch in 0..c {
            let (px, py) = kernels::sobel_components(self.value(x).plane(ch), h, w);
            gx.extend(px);
            gy.extend(py);
        }
        let mag = gx
            .iter()
            .zip(&gy)
            .map(|(a, b)| (a * a + b * b + SOBEL_EPS).sqrt())
            .collect();
        let value = Tensor::new(vec![c, h, w], mag)?;
        Ok(self.push(value, Op::Sobel { x, gx, gy }, &[x]))
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind) -> Result<Var> {
        let (c, h, w) = self.value(x).dims3()?;
        let src = self.value(x).data();
        let hw = h * w;
        match kind {
            PoolKind::Gap => {
                let out = (0..c).map(|ch| src[ch * hw..(ch + 1) * hw].iter().sum::<f64>() / hw as f64);
                let value = Tensor::new(vec![c, 1, 1], out.collect())?;
                Ok(self.push(value, Op::GlobalAvg(x), &[x]))
            }
            PoolKind::Gmp => {
                let mut out = Vec::with_capacity(c);
                let mut route = Vec::with_capacity(c);
                for ch in 0..c {
                    let plane = &src[ch * hw..(ch + 1) * hw];
                    let mut best = 0;
                    for (i, &v) in plane.iter().enumerate() {
                        if v > plane[best] {
                            best = i;
                        }
                    }
                    out.push(plane[best]);
                    route.push(ch * hw + best);
                }
                let value = Tensor::new(vec![c, 1, 1], out)?;
                Ok(self.push(value, Op::Argmax { x, route }, &[x]))
            }
            PoolKind::MeanP => {
                let mut out = vec![0.0; c * hw];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let (mut s, mut n) = (0.0, 0.0);
                            for (wy, wx) in window(y, xx, h, w) {
                                s += src[ch * hw + wy * w + wx];
                                n += 1.0;
                            }
                            out[ch * hw + y * w + xx] = s / n;
                        }
                    }
                }
                let value = Tensor::new(vec![c, h, w], out)?;
                Ok(self.push(value, Op::LocalMean(x), &[x]))
            }
            PoolKind::MaxP => {
                let mut out = vec![0.0; c * hw];
                let mut route = vec![0; c * hw];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let mut best = ch * hw + y * w + xx;
                            for (wy, wx) in window(y, xx, h, w) {
                                let i = ch * hw + wy * w + wx;
                                if src[i] > src[best] {
                                    best = i;
                                }
                            }
                            out[ch * hw + y * w + xx] = src[best];
                            route[ch * hw + y * w + xx] = best;
                        }
                    }
                }
                let value = Tensor::new(vec![c, h, w], out)?;
                Ok(self.push(value, Op::Argmax { x, route }, &[x]))
            }
        }
    }

    /// Expands a `C x 1 x 1` map to `C x h x w`.
    pub fn broadcast_spatial(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, one_h, one_w) = self.value(x).dims3()?;
        if one_h != 1 || one_w != 1 {
            return Err(Error::shape("broadcast_spatial", "input must be C x 1 x 1"));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * h * w);
        for &v in src {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::Broadcast(x), &[x]))
    }

    /// Bilinear resampling of a map to `h x w` (half-pixel centres, edge clamp).
    pub fn resize_bilinear(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let (c, sh, sw) = self.value(x).dims3()?;
        let ys = bilinear_taps(sh, h);
        let xs = bilinear_taps(sw, w);
        let src = self.value(x).data();
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &src[ch * sh * sw..(ch + 1) * sh * sw];
            for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                for (xx, &(x0, x1, fx)) in xs.iter().enumerate() {
                    let top = plane[y0 * sw + x0] * (1.0 - fx) + plane[y0 * sw + x1] * fx;
                    let bot = plane[y1 * sw + x0] * (1.0 - fx) + plane[y1 * sw + x1] * fx;
                    out[ch * h * w + y * w + xx] = top * (1.0 - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(value, Op::Resize(x), &[x]))
    }

    // ---------------------------------------------------------------- pointwise

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, node: Op) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        if va.shape() != vb.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let value = va.zip_map(vb, f)?;
        Ok(self.push(value, node, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Elementwise maximum; ties resolve to `a`.
    pub fn max(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("max", a, b, |x, y| if x >= y { x } else { y }, Op::Max(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    /// Divides every element by the constant `c`.
    pub fn div_const(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x / c);
        self.push(value, Op::DivConst(a, c), &[a])
    }

    /// Multiplies every element of `a` by the scalar node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::shape("mul_scalar", format!("factor has shape {:?}", self.shape(s))));
        }
        let f = self.value(s).item();
        let value = self.value(a).map(|x| x * f);
        Ok(self.push(value, Op::MulScalar(a, s), &[a, s]))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(value, Op::LeakyRelu(a, slope), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.leaky_relu(a, 0.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid(a), &[a])
    }

    /// Concatenation along the leading axis (channels for maps).
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.is_empty() || sa.len() != sb.len() || sa[1..] != sb[1..] {
            return Err(Error::shape("concat", format!("{sa:?} vs {sb:?}")));
        }
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Concat(a, b), &[a, b]))
    }

    /// Selects one element as a scalar.
    pub fn pick(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        if index >= v.len() {
            return Err(Error::shape("pick", format!("index {index} out of {}", v.len())));
        }
        let value = Tensor::scalar(v.data()[index]);
        Ok(self.push(value, Op::Pick(a, index), &[a]))
    }

    /// Row `index` of a matrix as a vector.
    pub fn row(&mut self, a: Var, index: usize) -> Result<Var> {
        let v = self.value(a);
        let &[rows, cols] = v.shape() else {
            return Err(Error::shape("row", format!("expected a matrix, got {:?}", v.shape())));
        };
        if index >= rows {
            return Err(Error::shape("row", format!("row {index} out of {rows}")));
        }
        let value = Tensor::vector(v.data()[index * cols..(index + 1) * cols].to_vec());
        Ok(self.push(value, Op::Row(a, index), &[a]))
    }

    // ---------------------------------------------------------------- reductions

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        self.push(value, Op::Mean(a), &[a])
    }

    /// Mean absolute difference.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = super::dense::l1_distance(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(d), Op::L1(a, b), &[a, b]))
    }

    /// Mean squared error.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape("mse", t)?;
        let s: f64 = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let value = Tensor::scalar(s / p.len() as f64);
        Ok(self.push(value, Op::Mse(pred, target), &[pred, target]))
    }

    /// Mean binary cross-entropy with the prediction clamped to
    /// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
    pub fn bce(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape("bce", t)?;
        let s: f64 = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&pv, &tv)| {
                let q = pv.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                -(tv * q.ln() + (1.0 - tv) * (1.0 - q).ln())
            })
            .sum();
        let value = Tensor::scalar(s / p.len() as f64);
        Ok(self.push(value, Op::Bce(pred, target), &[pred, target]))
    }

    /// `<a, b> / (|a| |b| + eps)` for two equal-length vectors.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 1 || va.shape() != vb.shape() {
            return Err(Error::shape(
                "cosine_similarity",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let value = Tensor::scalar(cosine(va.data(), vb.data()));
        Ok(self.push(value, Op::Cosine(a, b), &[a, b]))
    }

    /// Cosine similarity of a query `[n]` against every row of `[r, n]`.
    pub fn cosine_rows(&mut self, query: Var, rows: Var) -> Result<Var> {
        let (q, m) = (self.value(query), self.value(rows));
        let (qs, ms) = (q.shape().to_vec(), m.shape().to_vec());
        let ([n], [r, n2]) = (&qs[..], &ms[..]) else {
            return Err(Error::shape("cosine_rows", format!("{qs:?} vs {ms:?}")));
        };
        if n != n2 {
            return Err(Error::shape("cosine_rows", format!("{qs:?} vs {ms:?}")));
        }
        let out = (0..*r)
            .map(|i| cosine(q.data(), &m.data()[i * n..(i + 1) * n]))
            .collect();
        Ok(self.push(Tensor::vector(out), Op::CosineRows(query, rows), &[query, rows]))
    }

    // ---------------------------------------------------------------- backward

    /// Reverse sweep from the scalar `root`.
    ///
    /// A record can be differentiated once; later calls fail with
    /// [`Error::RecordConsumed`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients> {
        self.backward_seeded(root, 1.0)
    }

    /// Like [`Graph::backward`] with `d(out)/d(root)` set to `seed`.
    pub fn backward_seeded(&mut self, root: Var, seed: f64) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::RecordConsumed);
        }
        if root.0 >= self.nodes.len() {
            return Err(Error::ForeignRoot(root.0));
        }
        if self.nodes[root.0].value.len() != 1 {
            return Err(Error::NonScalarRoot(self.nodes[root.0].value.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.nodes[root.0].value.shape(), seed));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| {
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&t),
                None => grads[v.0] = Some(t),
            }
        };
        let like = |v: Var, data: Vec<f64>| Tensor::new(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                dilation,
            } => {
                let (cin, h, w) = self.value(*input).dims3()?;
                let ks = self.shape(*kernel);
                let (cout, k) = (ks[0], ks[2]);
                if self.wants(*input) {
                    let gi = kernels::conv2d_backward_input(gd, self.value(*kernel).data(), cin, cout, h, w, k, *dilation);
                    acc(grads, *input, like(*input, gi)?);
                }
                if self.wants(*kernel) {
                    let gk = kernels::conv2d_backward_kernel(gd, self.value(*input).data(), cin, cout, h, w, k, *dilation);
                    acc(grads, *kernel, like(*kernel, gk)?);
                }
                if let Some(b) = bias {
                    if self.wants(*b) {
                        let hw = h * w;
                        let gb = (0..cout).map(|co| gd[co * hw..(co + 1) * hw].iter().sum()).collect();
                        acc(grads, *b, Tensor::vector(gb));
                    }
                }
            }
            Op::Depthwise { input, kernel, dilation } => {
                let (c, h, w) = self.value(*input).dims3()?;
                let k = self.shape(*kernel)[1];
                let (gi, gk) = kernels::depthwise_backward(
                    gd,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    c,
                    h,
                    w,
                    k,
                    *dilation,
                    self.wants(*input),
                    self.wants(*kernel),
                );
                if let Some(gi) = gi {
                    acc(grads, *input, like(*input, gi)?);
                }
                if let Some(gk) = gk {
                    acc(grads, *kernel, like(*kernel, gk)?);
                }
            }
            Op::Linear { x, w, b } => {
                let ws = self.shape(*w);
                let (n, m) = (ws[0], ws[1]);
                if self.wants(*x) {
                    let wv = self.value(*w).data();
                    let gx = (0..n)
                        .map(|i| wv[i * m..(i + 1) * m].iter().zip(gd).map(|(a, b)| a * b).sum())
                        .collect();
                    acc(grads, *x, Tensor::vector(gx));
                }
                if self.wants(*w) {
                    let xv = self.value(*x).data();
                    let mut gw = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..m {
                            gw[i * m + j] = xv[i] * gd[j];
                        }
                    }
                    acc(grads, *w, like(*w, gw)?);
                }
                if self.wants(*b) {
                    acc(grads, *b, Tensor::vector(gd.to_vec()));
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (p, q, r) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let bt = transpose_raw(self.value(*b).data(), q, r);
                    acc(grads, *a, like(*a, matmul_raw(gd, &bt, p, r, q))?);
                }
                if self.wants(*b) {
                    let at = transpose_raw(self.value(*a).data(), p, q);
                    acc(grads, *b, like(*b, matmul_raw(&at, gd, q, p, r))?);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let gt = transpose_raw(gd, s[1], s[0]);
                acc(grads, *a, like(*a, gt)?);
            }
            Op::Reshape(a) => acc(grads, *a, like(*a, gd.to_vec())?),
            Op::Softmax { x, axis } => {
                let shape = node.value.shape();
                let (outer, len, stride) = softmax_layout(shape, *axis)?;
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    let base = softmax_base(o, len, stride);
                    let dot: f64 = (0..len).map(|i| y[base + i * stride] * gd[base + i * stride]).sum();
                    for i in 0..len {
                        let j = base + i * stride;
                        gx[j] = y[j] * (gd[j] - dot);
                    }
                }
                acc(grads, *x, like(*x, gx)?);
            }
            Op::Sobel { x, gx, gy } => {
                let (c, h, w) = self.value(*x).dims3()?;
                let hw = h * w;
                let mag = node.value.data();
                let mut out = vec![0.0; c * hw];
                let mut dx = vec![0.0; hw];
                let mut dy = vec![0.0; hw];
                for ch in 0..c {
                    for p in 0..hw {
                        let j = ch * hw + p;
                        dx[p] = gd[j] * gx[j] / mag[j];
                        dy[p] = gd[j] * gy[j] / mag[j];
                    }
                    let dst = &mut out[ch * hw..(ch + 1) * hw];
                    kernels::stencil3_adjoint(&dx, dst, h, w, &kernels::SOBEL_X);
                    kernels::stencil3_adjoint(&dy, dst, h, w, &kernels::SOBEL_Y);
                }
                acc(grads, *x, like(*x, out)?);
            }
            Op::GlobalAvg(x) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let hw = h * w;
                let mut out = Vec::with_capacity(c * hw);
                for &gv in gd.iter().take(c) {
                    out.extend(std::iter::repeat_n(gv / hw as f64, hw));
                }
                acc(grads, *x, like(*x, out)?);
            }
            Op::Argmax { x, route } => {
                let mut out = vec![0.0; self.value(*x).len()];
                for (gv, &src) in gd.iter().zip(route) {
                    out[src] += gv;
                }
                acc(grads, *x, like(*x, out)?);
            }
            Op::LocalMean(x) => {
                let (c, h, w) = self.value(*x).dims3()?;
                let hw = h * w;
                let mut out = vec![0.0; c * hw];
                for ch in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let taps: Vec<_> = window(y, xx, h, w).collect();
                            let share = gd[ch * hw + y * w + xx] / taps.len() as f64;
                            for (wy, wx) in taps {
                                out[ch * hw + wy * w + wx] += share;
                            }
                        }
                    }
                }
                acc(grads, *x, like(*x, out)?);
            }
            Op::Broadcast(x) => {
                let c = self.value(*x).len();
                let plane = gd.len() / c;
                let out = (0..c).map(|ch| gd[ch * plane..(ch + 1) * plane].iter().sum()).collect();
                acc(grads, *x, like(*x, out)?);
            }
            Op::Resize(x) => {
                let (c, sh, sw) = self.value(*x).dims3()?;
                let (_, h, w) = node.value.dims3()?;
                let ys = bilinear_taps(sh, h);
                let xs = bilinear_taps(sw, w);
                let mut out = vec![0.0; c * sh * sw];
                for ch in 0..c {
                    let plane = &mut out[ch * sh * sw..(ch + 1) * sh * sw];
                    for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
                        for (xx, &(x0, x1, fx)) in xs.iter().enumerate() {
                            let gv = gd[ch * h * w + y * w + xx];
                            plane[y0 * sw + x0] += gv * (1.0 - fy) * (1.0 - fx);
                            plane[y0 * sw + x1] += gv * (1.0 - fy) * fx;
                            plane[y1 * sw + x0] += gv * fy * (1.0 - fx);
                            plane[y1 * sw + x1] += gv * fy * fx;
                        }
                    }
                }
                acc(grads, *x, like(*x, out)?);
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*b) {
                    acc(grads, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(grads, *a, g.zip_map(self.value(*b), |x, y| x * y)?);
                }
                if self.wants(*b) {
                    acc(grads, *b, g.zip_map(self.value(*a), |x, y| x * y)?);
                }
            }
            Op::Max(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let ga = gd.iter().zip(va.iter().zip(vb)).map(|(&gv, (x, y))| if x >= y { gv } else { 0.0 });
                    acc(grads, *a, like(*a, ga.collect())?);
                }
                if self.wants(*b) {
                    let gb = gd.iter().zip(va.iter().zip(vb)).map(|(&gv, (x, y))| if x >= y { 0.0 } else { gv });
                    acc(grads, *b, like(*b, gb.collect())?);
                }
            }
            Op::Scale(a, c) => acc(grads, *a, g.map(|v| v * c)),
            Op::DivConst(a, c) => acc(grads, *a, g.map(|v| v / c)),
            Op::MulScalar(a, s) => {
                let f = self.value(*s).item();
                if self.wants(*a) {
                    acc(grads, *a, g.map(|v| v * f));
                }
                if self.wants(*s) {
                    let d: f64 = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                    acc(grads, *s, like(*s, vec![d])?);
                }
            }
            Op::LeakyRelu(a, slope) => {
                let ga = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { slope * gv })?;
                acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?;
                acc(grads, *a, ga);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                if self.wants(*a) {
                    acc(grads, *a, like(*a, gd[..na].to_vec())?);
                }
                if self.wants(*b) {
                    acc(grads, *b, like(*b, gd[na..].to_vec())?);
                }
            }
            Op::Pick(a, index) => {
                let mut out = vec![0.0; self.value(*a).len()];
                out[*index] = gd[0];
                acc(grads, *a, like(*a, out)?);
            }
            Op::Row(a, index) => {
                let mut out = vec![0.0; self.value(*a).len()];
                let n = gd.len();
                out[index * n..(index + 1) * n].copy_from_slice(gd);
                acc(grads, *a, like(*a, out)?);
            }
            Op::Sum(a) => acc(grads, *a, Tensor::full(self.shape(*a), gd[0])),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(grads, *a, Tensor::full(self.shape(*a), gd[0] / n));
            }
            Op::L1(a, b) => {
                let n = self.value(*a).len() as f64;
                let s = self.value(*a).zip_map(self.value(*b), |x, y| {
                    if x > y {
                        1.0
                    } else if x < y {
                        -1.0
                    } else {
                        0.0
                    }
                })?;
                if self.wants(*a) {
                    acc(grads, *a, s.map(|v| v * gd[0] / n));
                }
                if self.wants(*b) {
                    acc(grads, *b, s.map(|v| -v * gd[0] / n));
                }
            }
            Op::Mse(p, t) => {
                let n = self.value(*p).len() as f64;
                let d = self.value(*p).zip_map(self.value(*t), |x, y| 2.0 * (x - y) * gd[0] / n)?;
                if self.wants(*p) {
                    acc(grads, *p, d.clone());
                }
                if self.wants(*t) {
                    acc(grads, *t, d.map(|v| -v));
                }
            }
            Op::Bce(p, t) => {
                let n = self.value(*p).len() as f64;
                let (pv, tv) = (self.value(*p), self.value(*t));
                if self.wants(*p) {
                    let gp = pv.zip_map(tv, |x, y| {
                        if x < BCE_CLAMP || x > 1.0 - BCE_CLAMP {
                            0.0
                        } else {
                            -(y / x - (1.0 - y) / (1.0 - x)) * gd[0] / n
                        }
                    })?;
                    acc(grads, *p, gp);
                }
                if self.wants(*t) {
                    let gt = pv.zip_map(tv, |x, _| {
                        let q = x.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
                        -(q.ln() - (1.0 - q).ln()) * gd[0] / n
                    })?;
                    acc(grads, *t, gt);
                }
            }
            Op::Cosine(a, b) => {
                let (ga, gb) = cosine_grad(self.value(*a).data(), self.value(*b).data(), gd[0]);
                if self.wants(*a) {
                    acc(grads, *a, like(*a, ga)?);
                }
                if self.wants(*b) {
                    acc(grads, *b, like(*b, gb)?);
                }
            }
            Op::CosineRows(q, m) => {
                let qv = self.value(*q).data();
                let mv = self.value(*m).data();
                let n = qv.len();
                let mut gq = vec![0.0; n];
                let mut gm = vec![0.0; mv.len()];
                for (r, &gr) in gd.iter().enumerate() {
                    if gr == 0.0 {
                        continue;
                    }
                    let (a, b) = cosine_grad(qv, &mv[r * n..(r + 1) * n], gr);
                    for (d, s) in gq.iter_mut().zip(a) {
                        *d += s;
                    }
                    gm[r * n..(r + 1) * n].copy_from_slice(&b);
                }
                if self.wants(*q) {
                    acc(grads, *q, like(*q, gq)?);
                }
                if self.wants(*m) {
                    acc(grads, *m, like(*m, gm)?);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    d / (norm(a) * norm(b) + COSINE_EPS)
}

fn cosine_grad(a: &[f64], b: &[f64], g: f64) -> (Vec<f64>, Vec<f64>) {
    let (na, nb) = (norm(a), norm(b));
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let den = na * nb + COSINE_EPS;
    let f = d / (den * den);
    let ga = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| g * (y / den - if na > 0.0 { f * nb * x / na } else { 0.0 }))
        .collect();
    let gb = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| g * (x / den - if nb > 0.0 { f * na * y / nb } else { 0.0 }))
        .collect();
    (ga, gb)
}

fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..q {
            let av = a[i * q + k];
            for j in 0..r {
                out[i * r + j] += av * b[k * r + j];
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `(outer, len, stride)` of the softmax slices.
fn softmax_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    match (shape, axis) {
        ([n], 0) => Ok((1, *n, 1)),
        ([r, c], 0) => Ok((*c, *r, *c)),
        ([r, c], 1) => Ok((*r, *c, 1)),
        _ => Err(Error::shape("softmax", format!("axis {axis} of {shape:?}"))),
    }
}

fn softmax_base(outer: usize, len: usize, stride: usize) -> usize {
    if stride == 1 {
        outer * len
    } else {
        outer
    }
}

/// In-bounds pixels of the 2x2 window anchored at `(y, x)`.
fn window(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    [(y, x), (y, x + 1), (y + 1, x), (y + 1, x + 1)]
        .into_iter()
        .filter(move |&(a, b)| a < h && b < w)
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}
