//! A small reverse-mode automatic differentiation tape.
//!
//! Every op appends a node holding its forward value. [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients only along nodes that
//! depend on a leaf created with [`Graph::param`].
//!
//! Shape errors inside the tape are programming errors and panic; public
//! entry points validate user-facing shapes before building graphs.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
struct Tap {
    src: usize,
    weight: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddScalarVar(Var, Var),
    Abs(Var),
    Square(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Outer(Var, Var),
    MeanRows(Var),
    MaxRows(Var, Vec<usize>),
    Sum(Var),
    Mean(Var),
    Concat(Vec<Var>),
    SliceCols(Var, usize, usize),
    Reshape(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Stencil3 { x: Var, kernel: [f64; 9] },
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    UpsampleNearest(Var, usize),
    AvgPool2(Var),
    Resample { x: Var, taps: Vec<[Tap; 4]> },
    L2NormalizeRows(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
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

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn hwc(shape: &[usize]) -> (usize, usize, usize) {
    assert_eq!(shape.len(), 3, "expected [H, W, C], got {shape:?}");
    (shape[0], shape[1], shape[2])
}

fn mat(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected a matrix, got {shape:?}");
    (shape[0], shape[1])
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-libm::fabs(x)))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = libm::tanh(u);
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn matmul_raw(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], n: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

/// Output extent of a strided window op.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copies the value of `v` into a new constant leaf (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(x);
        self.push(t, op, rg)
    }

    fn binary_same(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise op on mismatched shapes");
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(va.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// `x + s` where `s` is a single-element node broadcast over `x`.
    pub fn add_scalar_var(&mut self, x: Var, s: Var) -> Var {
        assert_eq!(self.value(s).len(), 1);
        let sv = self.value(s).item();
        let t = self.value(x).map(|v| v + sv);
        let rg = self.rg(x) || self.rg(s);
        self.push(t, Op::AddScalarVar(x, s), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, libm::fabs, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, |v| libm::sqrt(v.max(0.0)), Op::Sqrt(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, libm::tanh, Op::Tanh(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu(x))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { slope * v }, Op::LeakyRelu(x, slope))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    /// `log(sigmoid(x))`, computed as `-softplus(-x)`.
    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        let sp = self.softplus(n);
        self.scale(sp, -1.0)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    /// `1 - x`.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let n = self.scale(x, -1.0);
        self.add_scalar(n, 1.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (n, k) = mat(self.shape(a));
        let (k2, m) = mat(self.shape(b));
        assert_eq!(k, k2, "matmul inner dims");
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), n, k, m);
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::from_parts(vec![n, m], out), Op::MatMul(a, b), rg)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (n, m) = mat(self.shape(x));
        let out = transpose_raw(self.value(x).data(), n, m);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![m, n], out), Op::Transpose(x), rg)
    }

    fn row_broadcast(&mut self, x: Var, row: Var, mul: bool) -> Var {
        let d = self.value(x).last_dim();
        assert_eq!(self.value(row).len(), d, "row broadcast width");
        let r = self.value(row).data();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            for (o, &rv) in chunk.iter_mut().zip(r) {
                if mul {
                    *o *= rv;
                } else {
                    *o += rv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(row);
        let op = if mul { Op::MulRow(x, row) } else { Op::AddRow(x, row) };
        self.push(out, op, rg)
    }

    /// `x + row`, broadcasting a `[1, d]` (or `[d]`) row over all rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, false)
    }

    /// `x * row`, broadcasting a `[1, d]` row over all rows of `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        self.row_broadcast(x, row, true)
    }

    /// `x * col`, broadcasting an `[n, 1]` column over the last axis of `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Var {
        let d = self.value(x).last_dim();
        let n = self.value(x).rows();
        assert_eq!(self.value(col).len(), n, "column broadcast height");
        let c = self.value(col).data();
        let mut out = self.value(x).clone();
        for (chunk, &cv) in out.data_mut().chunks_mut(d).zip(c) {
            for o in chunk.iter_mut() {
                *o *= cv;
            }
        }
        let rg = self.rg(x) || self.rg(col);
        self.push(out, Op::MulCol(x, col), rg)
    }

    /// Outer product of an `[n, 1]` column and a `[1, m]` row.
    pub fn outer(&mut self, col: Var, row: Var) -> Var {
        let n = self.value(col).len();
        let m = self.value(row).len();
        let (c, r) = (self.value(col).data(), self.value(row).data());
        let mut out = Vec::with_capacity(n * m);
        for &cv in c {
            out.extend(r.iter().map(|&rv| cv * rv));
        }
        let rg = self.rg(col) || self.rg(row);
        self.push(Tensor::from_parts(vec![n, m], out), Op::Outer(col, row), rg)
    }

    /// Mean over rows: `[n, d] -> [1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let (d, n) = (v.last_dim(), v.rows());
        let mut out = vec![0.0; d];
        for chunk in v.data().chunks(d) {
            for (o, c) in out.iter_mut().zip(chunk) {
                *o += c;
            }
        }
        for o in out.iter_mut() {
            *o /= n as f64;
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1, d], out), Op::MeanRows(x), rg)
    }

    /// Max over rows: `[n, d] -> [1, d]`. Ties resolve to the first row.
    pub fn max_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = vec![f64::NEG_INFINITY; d];
        let mut arg = vec![0usize; d];
        for (i, chunk) in v.data().chunks(d).enumerate() {
            for j in 0..d {
                if chunk[j] > out[j] {
                    out[j] = chunk[j];
                    arg[j] = i;
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![1, d], out), Op::MaxRows(x, arg), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Concatenates along the last axis; leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let lead = self.shape(parts[0]);
        let lead = &lead[..lead.len() - 1];
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).last_dim()).collect();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[..s.len() - 1], lead, "concat leading dims");
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec()), rg)
    }

    /// Columns `[start, end)` of the last axis.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        assert!(start < end && end <= d);
        let mut out = Vec::with_capacity(v.rows() * (end - start));
        for chunk in v.data().chunks(d) {
            out.extend_from_slice(&chunk[start..end]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let rg = self.rg(x);
        self.push(Tensor::from_parts(shape, out), Op::SliceCols(x, start, end), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone().reshape(shape).expect("reshape size");
        let rg = self.rg(x);
        self.push(t, Op::Reshape(x), rg)
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        assert_eq!(self.value(gamma).len(), d);
        assert_eq!(self.value(beta).len(), d);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        for chunk in v.data().chunks(d) {
            let mean = chunk.iter().sum::<f64>() / d as f64;
            let var = chunk.iter().map(|c| (c - mean) * (c - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / libm::sqrt(var + eps);
            rstd.push(r);
            for j in 0..d {
                let h = (chunk[j] - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let shape = v.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            rg,
        )
    }

    /// 2-D convolution on `[H, W, Cin]` with weights `[k, k, Cin, Cout]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let (h, wd, cin) = hwc(self.shape(x));
        let ws = self.shape(w);
        assert_eq!(ws.len(), 4);
        let (k, cin2, cout) = (ws[0], ws[2], ws[3]);
        assert_eq!(ws[1], k);
        assert_eq!(cin, cin2, "conv input channels");
        let ho = conv_out_dim(h, k, stride, pad);
        let wo = conv_out_dim(wd, k, stride, pad);
        let xd = self.value(x).data();
        let wdt = self.value(w).data();
        let mut out = vec![0.0; ho * wo * cout];
        if let Some(b) = b {
            let bd = self.value(b).data();
            for chunk in out.chunks_mut(cout) {
                chunk.copy_from_slice(bd);
            }
        }
        for oy in 0..ho {
            for ox in 0..wo {
                let o = &mut out[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xi = &xd[(iy as usize * wd + ix as usize) * cin..][..cin];
                        let wbase = (ky * k + kx) * cin * cout;
                        for (ci, &xv) in xi.iter().enumerate() {
                            let wr = &wdt[wbase + ci * cout..wbase + (ci + 1) * cout];
                            for (ov, wv) in o.iter_mut().zip(wr) {
                                *ov += xv * wv;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(
            Tensor::from_parts(vec![ho, wo, cout], out),
            Op::Conv2d { x, w, b, stride, pad },
            rg,
        )
    }

    /// Fixed 3×3 kernel applied to every channel independently, edge-replicated borders.
    pub fn stencil3(&mut self, x: Var, kernel: [f64; 9]) -> Var {
        let (h, w, c) = hwc(self.shape(x));
        let xd = self.value(x).data();
        let mut out = vec![0.0; h * w * c];
        for y in 0..h {
            for xx in 0..w {
                for ky in 0..3 {
                    let iy = (y as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                    for kx in 0..3 {
                        let ix = (xx as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                        let kv = kernel[ky * 3 + kx];
                        if kv == 0.0 {
                            continue;
                        }
                        for ch in 0..c {
                            out[(y * w + xx) * c + ch] += kv * xd[(iy * w + ix) * c + ch];
                        }
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![h, w, c], out), Op::Stencil3 { x, kernel }, rg)
    }

    /// Space-to-depth: `[H, W, C] -> [H/r, W/r, r*r*C]`.
    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Var {
        let (h, w, c) = hwc(self.shape(x));
        assert!(h % r == 0 && w % r == 0, "pixel_unshuffle needs dims divisible by {r}");
        let out = pixel_unshuffle_raw(self.value(x).data(), h, w, c, r);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![h / r, w / r, r * r * c], out),
            Op::PixelUnshuffle(x, r),
            rg,
        )
    }

    /// Depth-to-space, inverse of [`Graph::pixel_unshuffle`].
    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Var {
        let (h, w, cc) = hwc(self.shape(x));
        assert!(cc % (r * r) == 0);
        let out = pixel_shuffle_raw(self.value(x).data(), h, w, cc / (r * r), r);
        let rg = self.rg(x);
        self.push(
            Tensor::from_parts(vec![h * r, w * r, cc / (r * r)], out),
            Op::PixelShuffle(x, r),
            rg,
        )
    }

    pub fn upsample_nearest(&mut self, x: Var, r: usize) -> Var {
        let (h, w, c) = hwc(self.shape(x));
        let xd = self.value(x).data();
        let (ho, wo) = (h * r, w * r);
        let mut out = Vec::with_capacity(ho * wo * c);
        for y in 0..ho {
            for xx in 0..wo {
                let s = ((y / r) * w + xx / r) * c;
                out.extend_from_slice(&xd[s..s + c]);
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![ho, wo, c], out), Op::UpsampleNearest(x, r), rg)
    }

    /// 2×2 average pooling with stride 2 (odd trailing row/column dropped).
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (h, w, c) = hwc(self.shape(x));
        let (ho, wo) = (h / 2, w / 2);
        let xd = self.value(x).data();
        let mut out = vec![0.0; ho * wo * c];
        for y in 0..ho {
            for xx in 0..wo {
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((2 * y + dy) * w + 2 * xx + dx) * c;
                    for ch in 0..c {
                        out[(y * wo + xx) * c + ch] += 0.25 * xd[s + ch];
                    }
                }
            }
        }
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![ho, wo, c], out), Op::AvgPool2(x), rg)
    }

    /// Bilinear resize of a `[H, W, C]` node (half-pixel centers, edge clamped).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let (h, w, c) = hwc(self.shape(x));
        let taps = bilinear_taps(h, w, out_h, out_w);
        let out = apply_taps(self.value(x).data(), &taps, c);
        let rg = self.rg(x);
        self.push(Tensor::from_parts(vec![out_h, out_w, c], out), Op::Resample { x, taps }, rg)
    }

    /// Normalizes every row to unit Euclidean length.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let d = v.last_dim();
        let mut out = v.clone();
        for chunk in out.data_mut().chunks_mut(d) {
            let n = libm::sqrt(chunk.iter().map(|a| a * a).sum::<f64>()).max(1e-12);
            for a in chunk.iter_mut() {
                *a /= n;
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::L2NormalizeRows(x), rg)
    }

    /// Reverse pass from a single-element node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).len(), 1, "backward root must be a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0).reshape(self.shape(root)).unwrap());
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let mut acc = |v: Var, t: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let zip_map = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| {
            Tensor::from_parts(
                a.shape().to_vec(),
                a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect(),
            )
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                acc(*a, zip_map(val(*b), &|bv, gv| bv * gv));
                acc(*b, zip_map(val(*a), &|av, gv| av * gv));
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::AddScalarVar(x, s) => {
                acc(*x, g.clone());
                acc(*s, Tensor::scalar(g.data().iter().sum()).reshape(val(*s).shape()).unwrap());
            }
            Op::Abs(x) => acc(*x, zip_map(val(*x), &|xv, gv| if xv > 0.0 { gv } else if xv < 0.0 { -gv } else { 0.0 })),
            Op::Square(x) => acc(*x, zip_map(val(*x), &|xv, gv| 2.0 * xv * gv)),
            Op::Sqrt(_) | Op::Sigmoid(_) | Op::Tanh(_) => {
                let (x, f): (Var, &dyn Fn(f64) -> f64) = match &node.op {
                    Op::Sqrt(x) => (*x, &|yv: f64| if yv > 0.0 { 0.5 / yv } else { 0.0 }),
                    Op::Sigmoid(x) => (*x, &|yv: f64| yv * (1.0 - yv)),
                    Op::Tanh(x) => (*x, &|yv: f64| 1.0 - yv * yv),
                    _ => unreachable!(),
                };
                acc(x, zip_map(y, &|yv, gv| f(yv) * gv));
            }
            Op::Gelu(x) => acc(*x, zip_map(val(*x), &|xv, gv| gelu_grad(xv) * gv)),
            Op::LeakyRelu(x, s) => acc(*x, zip_map(val(*x), &|xv, gv| if xv > 0.0 { gv } else { s * gv })),
            Op::Softplus(x) => acc(*x, zip_map(val(*x), &|xv, gv| sigmoid(xv) * gv)),
            Op::Clamp(x, lo, hi) => acc(
                *x,
                zip_map(val(*x), &|xv, gv| if xv > *lo && xv < *hi { gv } else { 0.0 }),
            ),
            Op::MatMul(a, b) => {
                let (n, k) = mat(val(*a).shape());
                let m = val(*b).shape()[1];
                if self.nodes[a.0].requires_grad {
                    let bt = transpose_raw(val(*b).data(), k, m);
                    acc(*a, Tensor::from_parts(vec![n, k], matmul_raw(g.data(), &bt, n, m, k)));
                }
                if self.nodes[b.0].requires_grad {
                    let at = transpose_raw(val(*a).data(), n, k);
                    acc(*b, Tensor::from_parts(vec![k, m], matmul_raw(&at, g.data(), k, n, m)));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = mat(y.shape());
                acc(*x, Tensor::from_parts(vec![n, m], transpose_raw(g.data(), m, n)));
            }
            Op::AddRow(x, row) | Op::MulRow(x, row) => {
                let is_mul = matches!(node.op, Op::MulRow(..));
                let d = y.last_dim();
                let xv = val(*x);
                let rv = val(*row);
                let mut gr = vec![0.0; d];
                let mut gx = g.clone();
                for (gc, xc) in gx.data_mut().chunks_mut(d).zip(xv.data().chunks(d)) {
                    for j in 0..d {
                        if is_mul {
                            gr[j] += gc[j] * xc[j];
                            gc[j] *= rv.data()[j];
                        } else {
                            gr[j] += gc[j];
                        }
                    }
                }
                acc(*x, gx);
                acc(*row, Tensor::from_parts(rv.shape().to_vec(), gr));
            }
            Op::MulCol(x, col) => {
                let d = y.last_dim();
                let xv = val(*x);
                let cv = val(*col);
                let mut gc = vec![0.0; cv.len()];
                let mut gx = g.clone();
                for (r, (gch, xch)) in gx.data_mut().chunks_mut(d).zip(xv.data().chunks(d)).enumerate() {
                    let c = cv.data()[r];
                    for j in 0..d {
                        gc[r] += gch[j] * xch[j];
                        gch[j] *= c;
                    }
                }
                acc(*x, gx);
                acc(*col, Tensor::from_parts(cv.shape().to_vec(), gc));
            }
            Op::Outer(col, row) => {
                let (c, r) = (val(*col), val(*row));
                let m = r.len();
                let mut gc = vec![0.0; c.len()];
                let mut gr = vec![0.0; m];
                for (i, gch) in g.data().chunks(m).enumerate() {
                    for j in 0..m {
                        gc[i] += gch[j] * r.data()[j];
                        gr[j] += gch[j] * c.data()[i];
                    }
                }
                acc(*col, Tensor::from_parts(c.shape().to_vec(), gc));
                acc(*row, Tensor::from_parts(r.shape().to_vec(), gr));
            }
            Op::MeanRows(x) => {
                let xv = val(*x);
                let n = xv.rows() as f64;
                let d = xv.last_dim();
                let gd = g.data();
                acc(*x, Tensor::from_fn(xv.shape(), |idx| gd[idx % d] / n));
            }
            Op::MaxRows(x, arg) => {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut gx = Tensor::zeros(xv.shape());
                for j in 0..d {
                    gx.data_mut()[arg[j] * d + j] += g.data()[j];
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, Tensor::full(val(*x).shape(), g.item())),
            Op::Mean(x) => {
                let xv = val(*x);
                acc(*x, Tensor::full(xv.shape(), g.item() / xv.len() as f64));
            }
            Op::Concat(parts) => {
                let total = y.last_dim();
                let rows = y.rows();
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let w = pv.last_dim();
                    if self.nodes[p.0].requires_grad {
                        let mut out = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            out.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(p, Tensor::from_parts(pv.shape().to_vec(), out));
                    }
                    offset += w;
                }
            }
            Op::SliceCols(x, start, end) => {
                let xv = val(*x);
                let d = xv.last_dim();
                let w = end - start;
                let mut gx = Tensor::zeros(xv.shape());
                for (r, gch) in g.data().chunks(w).enumerate() {
                    gx.data_mut()[r * d + start..r * d + end].copy_from_slice(gch);
                }
                acc(*x, gx);
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape()).unwrap()),
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = y.last_dim();
                let gm = val(*gamma).data();
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                let mut gx = Vec::with_capacity(y.len());
                for (r, gch) in g.data().chunks(d).enumerate() {
                    let xh = &xhat[r * d..(r + 1) * d];
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..d {
                        gg[j] += gch[j] * xh[j];
                        gb[j] += gch[j];
                        let dxh = gch[j] * gm[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh[j];
                    }
                    mean_dxh /= d as f64;
                    mean_dxh_xh /= d as f64;
                    for j in 0..d {
                        let dxh = gch[j] * gm[j];
                        gx.push(rstd[r] * (dxh - mean_dxh - xh[j] * mean_dxh_xh));
                    }
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), gx));
                acc(*gamma, Tensor::from_parts(val(*gamma).shape().to_vec(), gg));
                acc(*beta, Tensor::from_parts(val(*beta).shape().to_vec(), gb));
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                self.conv_backward(*x, *w, *b, *stride, *pad, g, &mut acc);
            }
            Op::Stencil3 { x, kernel } => {
                let (h, w, c) = hwc(y.shape());
                let mut gx = vec![0.0; h * w * c];
                let gd = g.data();
                for yy in 0..h {
                    for xx in 0..w {
                        for ky in 0..3 {
                            let iy = (yy as isize + ky as isize - 1).clamp(0, h as isize - 1) as usize;
                            for kx in 0..3 {
                                let ix = (xx as isize + kx as isize - 1).clamp(0, w as isize - 1) as usize;
                                let kv = kernel[ky * 3 + kx];
                                for ch in 0..c {
                                    gx[(iy * w + ix) * c + ch] += kv * gd[(yy * w + xx) * c + ch];
                                }
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_parts(vec![h, w, c], gx));
            }
            Op::PixelUnshuffle(x, r) => {
                let (h, w, c) = hwc(val(*x).shape());
                acc(*x, Tensor::from_parts(vec![h, w, c], pixel_shuffle_raw(g.data(), h / r, w / r, c, *r)));
            }
            Op::PixelShuffle(x, r) => {
                let (h, w, c) = hwc(y.shape());
                acc(*x, Tensor::from_parts(val(*x).shape().to_vec(), pixel_unshuffle_raw(g.data(), h, w, c, *r)));
            }
            Op::UpsampleNearest(x, r) => {
                let (h, w, c) = hwc(val(*x).shape());
                let wo = w * r;
                let mut gx = vec![0.0; h * w * c];
                for yy in 0..h * r {
                    for xx in 0..wo {
                        let s = ((yy / r) * w + xx / r) * c;
                        let gs = (yy * wo + xx) * c;
                        for ch in 0..c {
                            gx[s + ch] += g.data()[gs + ch];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(vec![h, w, c], gx));
            }
            Op::AvgPool2(x) => {
                let (h, w, c) = hwc(val(*x).shape());
                let (ho, wo) = (h / 2, w / 2);
                let mut gx = vec![0.0; h * w * c];
                for yy in 0..ho {
                    for xx in 0..wo {
                        for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                            let s = ((2 * yy + dy) * w + 2 * xx + dx) * c;
                            for ch in 0..c {
                                gx[s + ch] += 0.25 * g.data()[(yy * wo + xx) * c + ch];
                            }
                        }
                    }
                }
                acc(*x, Tensor::from_parts(vec![h, w, c], gx));
            }
            Op::Resample { x, taps } => {
                let xv = val(*x);
                let c = xv.last_dim();
                let mut gx = vec![0.0; xv.len()];
                for (o, t) in taps.iter().enumerate() {
                    for tap in t {
                        for ch in 0..c {
                            gx[tap.src * c + ch] += tap.weight * g.data()[o * c + ch];
                        }
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
            Op::L2NormalizeRows(x) => {
                let xv = val(*x);
                let d = xv.last_dim();
                let mut gx = Vec::with_capacity(xv.len());
                for ((xch, ych), gch) in xv.data().chunks(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                    let n = libm::sqrt(xch.iter().map(|a| a * a).sum::<f64>()).max(1e-12);
                    let dot: f64 = ych.iter().zip(gch).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx.push((gch[j] - ych[j] * dot) / n);
                    }
                }
                acc(*x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &Tensor,
        acc: &mut impl FnMut(Var, Tensor),
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (h, wd, cin) = hwc(xv.shape());
        let ws = wv.shape();
        let (k, cout) = (ws[0], ws[3]);
        let (ho, wo, _) = hwc(g.shape());
        let need_x = self.nodes[x.0].requires_grad;
        let need_w = self.nodes[w.0].requires_grad;
        let mut gx = if need_x { vec![0.0; xv.len()] } else { Vec::new() };
        let mut gw = if need_w { vec![0.0; wv.len()] } else { Vec::new() };
        let xd = xv.data();
        let wdt = wv.data();
        let gd = g.data();
        for oy in 0..ho {
            for ox in 0..wo {
                let go = &gd[(oy * wo + ox) * cout..(oy * wo + ox + 1) * cout];
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let xbase = (iy as usize * wd + ix as usize) * cin;
                        let wbase = (ky * k + kx) * cin * cout;
                        for ci in 0..cin {
                            let wr = wbase + ci * cout;
                            if need_x {
                                let mut s = 0.0;
                                for (gv, wv) in go.iter().zip(&wdt[wr..wr + cout]) {
                                    s += gv * wv;
                                }
                                gx[xbase + ci] += s;
                            }
                            if need_w {
                                let xval = xd[xbase + ci];
                                for (gwv, gv) in gw[wr..wr + cout].iter_mut().zip(go) {
                                    *gwv += xval * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        if need_x {
            acc(x, Tensor::from_parts(xv.shape().to_vec(), gx));
        }
        if need_w {
            acc(w, Tensor::from_parts(ws.to_vec(), gw));
        }
        if let Some(b) = b {
            if self.nodes[b.0].requires_grad {
                let mut gb = vec![0.0; cout];
                for chunk in gd.chunks(cout) {
                    for (a, v) in gb.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                acc(b, Tensor::from_parts(self.nodes[b.0].value.shape().to_vec(), gb));
            }
        }
    }
}

pub(crate) fn pixel_unshuffle_raw(x: &[f64], h: usize, w: usize, c: usize, r: usize) -> Vec<f64> {
    let (ho, wo, co) = (h / r, w / r, r * r * c);
    let mut out = vec![0.0; ho * wo * co];
    for y in 0..h {
        for xx in 0..w {
            let (oy, dy, ox, dx) = (y / r, y % r, xx / r, xx % r);
            let dst = (oy * wo + ox) * co + (dy * r + dx) * c;
            let src = (y * w + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

/// `x` is `[h, w, r*r*c]`; output `[h*r, w*r, c]`.
pub(crate) fn pixel_shuffle_raw(x: &[f64], h: usize, w: usize, c: usize, r: usize) -> Vec<f64> {
    let (ho, wo, ci) = (h * r, w * r, r * r * c);
    let mut out = vec![0.0; ho * wo * c];
    for y in 0..ho {
        for xx in 0..wo {
            let (iy, dy, ix, dx) = (y / r, y % r, xx / r, xx % r);
            let src = (iy * w + ix) * ci + (dy * r + dx) * c;
            let dst = (y * wo + xx) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
    out
}

fn bilinear_taps(h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<[Tap; 4]> {
    let axis = |n_in: usize, n_out: usize, o: usize| -> (usize, usize, f64) {
        let pos = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let i0 = libm::floor(pos) as usize;
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, pos - i0 as f64)
    };
    let mut taps = Vec::with_capacity(out_h * out_w);
    for oy in 0..out_h {
        let (y0, y1, fy) = axis(h, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, fx) = axis(w, out_w, ox);
            taps.push([
                Tap { src: y0 * w + x0, weight: (1.0 - fy) * (1.0 - fx) },
                Tap { src: y0 * w + x1, weight: (1.0 - fy) * fx },
                Tap { src: y1 * w + x0, weight: fy * (1.0 - fx) },
                Tap { src: y1 * w + x1, weight: fy * fx },
            ]);
        }
    }
    taps
}

fn apply_taps(x: &[f64], taps: &[[Tap; 4]], c: usize) -> Vec<f64> {
    let mut out = vec![0.0; taps.len() * c];
    for (o, t) in taps.iter().enumerate() {
        for tap in t {
            for ch in 0..c {
                out[o * c + ch] += tap.weight * x[tap.src * c + ch];
            }
        }
    }
    out
}

/// Bilinear resize of raw `[h, w, c]` data, shared with the non-differentiable image path.
pub(crate) fn resize_bilinear_raw(x: &[f64], h: usize, w: usize, c: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    apply_taps(x, &bilinear_taps(h, w, out_h, out_w), c)
}
