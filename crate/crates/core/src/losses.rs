//! Training objectives: reconstruction, perceptual with a Sobel edge branch,
//! identity, standard and relativistic-average GAN terms, and the weighted
//! totals of both regimes.
//!
//! Every loss exists twice: as a graph builder (`*_graph`) used in training
//! and as a plain function on tensors.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{softplus, Graph, Var};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{Bound, Conv2d, Init, Linear, ParamStore};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_g: f64,
    pub lambda_id: f64,
    pub lambda_per: f64,
    pub lambda_rec: f64,
}

impl LossWeights {
    pub const EPSILON_DEFAULT: Self = Self { lambda_g: 5e-3, lambda_id: 0.5, lambda_per: 1.0, lambda_rec: 2.0 };
    pub const RF_DEFAULT: Self = Self { lambda_g: 0.02, lambda_id: 0.0, lambda_per: 1.0, lambda_rec: 1.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_id", self.lambda_id),
            ("lambda_per", self.lambda_per),
            ("lambda_rec", self.lambda_rec),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be a finite value >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-term values of one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub per: f64,
    pub id: f64,
    pub gan: f64,
}

impl LossTerms {
    pub fn all_finite(&self) -> bool {
        [self.rec, self.per, self.id, self.gan].iter().all(|v| v.is_finite())
    }

    pub fn describe(&self) -> String {
        format!("rec={} per={} id={} gan={}", self.rec, self.per, self.id, self.gan)
    }
}

/// `λ_G·L_G + λ_ID·L_ID + λ_per·L_per + λ_rec·MSE`.
pub fn total_loss_sd(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.lambda_g * terms.gan + w.lambda_id * terms.id + w.lambda_per * terms.per + w.lambda_rec * terms.rec
}

/// `λ_rec·MSE + λ_per·L_per + λ_G·L_G`; the identity term does not exist in this regime.
pub fn total_loss_qwen(terms: &LossTerms, w: &LossWeights) -> f64 {
    w.lambda_rec * terms.rec + w.lambda_per * terms.per + w.lambda_g * terms.gan
}

fn check_same(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { op, left: a.shape().to_vec(), right: b.shape().to_vec() });
    }
    Ok(())
}

fn eval_scalar(a: &Tensor, b: &Tensor, f: impl FnOnce(&mut Graph, Var, Var) -> Var) -> f64 {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let out = f(&mut g, va, vb);
    g.value(out).item()
}

pub fn mse_graph(g: &mut Graph, pred: Var, target: Var) -> Var {
    let d = g.sub(pred, target);
    let sq = g.square(d);
    g.mean(sq)
}

pub fn reconstruction_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    check_same("reconstruction_loss", pred, target)?;
    if pred.is_empty() {
        return Err(Error::EmptyBatch("reconstruction_loss"));
    }
    Ok(eval_scalar(pred, target, mse_graph))
}

const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];
const SOBEL_DELTA: f64 = 1e-16;

/// Per-channel Sobel gradient magnitude with replicated borders.
///
/// Computed as `sqrt(gx² + gy² + δ) − sqrt(δ)` with a tiny `δ`, so flat
/// regions map to exactly zero while the gradient stays bounded.
pub fn sobel_graph(g: &mut Graph, img: Var) -> Var {
    let gx = g.stencil3(img, SOBEL_X);
    let gy = g.stencil3(img, SOBEL_Y);
    let gx2 = g.square(gx);
    let gy2 = g.square(gy);
    let s = g.add(gx2, gy2);
    let s = g.add_scalar(s, SOBEL_DELTA);
    let r = g.sqrt(s);
    g.add_scalar(r, -libm::sqrt(SOBEL_DELTA))
}

pub fn sobel(img: &ImageGrid) -> ImageGrid {
    let (h, w, c) = img.dims();
    let at = |y: isize, x: isize, ch: usize| img.get(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize, ch);
    ImageGrid::from_fn(h, w, c, |y, x, ch| {
        let (y, x) = (y as isize, x as isize);
        let gx = (at(y - 1, x + 1, ch) - at(y - 1, x - 1, ch))
            + 2.0 * (at(y, x + 1, ch) - at(y, x - 1, ch))
            + (at(y + 1, x + 1, ch) - at(y + 1, x - 1, ch));
        let gy = (at(y + 1, x - 1, ch) - at(y - 1, x - 1, ch))
            + 2.0 * (at(y + 1, x, ch) - at(y - 1, x, ch))
            + (at(y + 1, x + 1, ch) - at(y - 1, x + 1, ch));
        libm::sqrt(gx * gx + gy * gy)
    })
}

/// Full-reference image distance; `distance(x, x) = 0` and symmetric.
pub trait PerceptualBackend {
    fn name(&self) -> &str;
    fn distance_graph(&self, g: &mut Graph, a: Var, b: Var) -> Var;

    fn distance(&self, a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
        check_same("perceptual distance", a.tensor(), b.tensor())?;
        Ok(eval_scalar(a.tensor(), b.tensor(), |g, x, y| self.distance_graph(g, x, y)))
    }
}

/// Plain pixel MSE through the perceptual interface.
#[derive(Clone, Copy, Debug, Default)]
pub struct MsePerceptual;

impl PerceptualBackend for MsePerceptual {
    fn name(&self) -> &str {
        "mse"
    }

    fn distance_graph(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        mse_graph(g, a, b)
    }
}

/// Multi-scale feature distance through a fixed random conv stack.
///
/// `Σ_s mean((φ_s(a) − φ_s(b))²)` over the input itself and the activations
/// after each stage; each stage is a 3×3 conv, GELU and 2× average pool.
#[derive(Clone, Debug)]
pub struct ToyPerceptual {
    store: ParamStore,
    stages: Vec<Conv2d>,
}

impl ToyPerceptual {
    pub fn new(channels: usize, widths: &[usize], seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[purpose::INIT, 10]);
        let mut cin = channels;
        let stages = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut store, &format!("perceptual.stage{i}"), cin, w, 3, 1, 1.0, &mut rng);
                cin = w;
                c
            })
            .collect();
        Self { store, stages }
    }
}

impl Default for ToyPerceptual {
    fn default() -> Self {
        Self::new(3, &[8, 16], 0x5EED)
    }
}

impl PerceptualBackend for ToyPerceptual {
    fn name(&self) -> &str {
        "toy-multiscale"
    }

    fn distance_graph(&self, g: &mut Graph, a: Var, b: Var) -> Var {
        let p = self.store.bind(g, false);
        let mut total = mse_graph(g, a, b);
        let (mut fa, mut fb) = (a, b);
        for stage in &self.stages {
            let run = |g: &mut Graph, x: Var| {
                let y = stage.forward(g, &p, x);
                let y = g.gelu(y);
                let s = g.shape(y);
                if s[0] >= 2 && s[1] >= 2 && s[0] % 2 == 0 && s[1] % 2 == 0 {
                    g.avg_pool2(y)
                } else {
                    y
                }
            };
            fa = run(g, fa);
            fb = run(g, fb);
            let d = mse_graph(g, fa, fb);
            total = g.add(total, d);
        }
        total
    }
}

/// `L_per = D(hr, pred) + D(S(hr), S(pred))`.
pub fn perceptual_loss_sd_graph(g: &mut Graph, hr: Var, pred: Var, backend: &dyn PerceptualBackend) -> Var {
    let plain = backend.distance_graph(g, hr, pred);
    let sh = sobel_graph(g, hr);
    let sp = sobel_graph(g, pred);
    let edge = backend.distance_graph(g, sh, sp);
    g.add(plain, edge)
}

pub fn perceptual_loss_sd(hr: &ImageGrid, pred: &ImageGrid, backend: &dyn PerceptualBackend) -> Result<f64> {
    check_same("perceptual_loss_sd", hr.tensor(), pred.tensor())?;
    Ok(eval_scalar(hr.tensor(), pred.tensor(), |g, a, b| perceptual_loss_sd_graph(g, a, b, backend)).max(0.0))
}

/// Face embedder producing unit-norm `[1, D]` rows.
pub trait IdentityBackend {
    fn name(&self) -> &str;
    /// Input size images are resized to before embedding, if any.
    fn native_resolution(&self) -> Option<(usize, usize)>;
    fn embed_graph(&self, g: &mut Graph, img: Var) -> Var;

    fn embed(&self, img: &ImageGrid) -> Result<Tensor> {
        let mut g = Graph::new();
        let x = g.constant(img.tensor().clone());
        let x = resize_for(&mut g, x, self.native_resolution());
        let e = self.embed_graph(&mut g, x);
        Ok(g.value(e).clone())
    }
}

fn resize_for(g: &mut Graph, x: Var, native: Option<(usize, usize)>) -> Var {
    match native {
        Some((h, w)) if (g.shape(x)[0], g.shape(x)[1]) != (h, w) => g.resize_bilinear(x, h, w),
        _ => x,
    }
}

/// Two stride-2 convs, spatial mean, linear head, L2 normalization.
#[derive(Clone, Debug)]
pub struct ToyIdentity {
    store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    head: Linear,
}

impl ToyIdentity {
    pub fn new(channels: usize, dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = stream(seed, &[purpose::INIT, 11]);
        let conv1 = Conv2d::new(&mut store, "identity.conv1", channels, 8, 3, 2, 1.0, &mut rng);
        let conv2 = Conv2d::new(&mut store, "identity.conv2", 8, 16, 3, 2, 1.0, &mut rng);
        let head = Linear::new(&mut store, "identity.head", 16, dim, Init::Normal { fan_in: 16, gain: 1.0 }, true, &mut rng);
        Self { store, conv1, conv2, head }
    }
}

impl Default for ToyIdentity {
    fn default() -> Self {
        Self::new(3, 16, 0x1D)
    }
}

impl IdentityBackend for ToyIdentity {
    fn name(&self) -> &str {
        "toy-conv"
    }

    fn native_resolution(&self) -> Option<(usize, usize)> {
        None
    }

    fn embed_graph(&self, g: &mut Graph, img: Var) -> Var {
        let p: Bound = self.store.bind(g, false);
        let x = self.conv1.forward(g, &p, img);
        let x = g.gelu(x);
        let x = self.conv2.forward(g, &p, x);
        let x = g.gelu(x);
        let s = g.shape(x).to_vec();
        let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
        let pooled = g.mean_rows(flat);
        let e = self.head.forward(g, &p, pooled);
        g.l2_normalize_rows(e)
    }
}

/// `1 − cos(embed(a), embed(b))`.
pub fn identity_loss_graph(g: &mut Graph, a: Var, b: Var, backend: &dyn IdentityBackend) -> Var {
    let native = backend.native_resolution();
    let a = resize_for(g, a, native);
    let b = resize_for(g, b, native);
    let ea = backend.embed_graph(g, a);
    let eb = backend.embed_graph(g, b);
    let prod = g.mul(ea, eb);
    let cos = g.sum(prod);
    let neg = g.scale(cos, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Value in `[0, 2]`.
pub fn identity_loss(a: &ImageGrid, b: &ImageGrid, backend: &dyn IdentityBackend) -> Result<f64> {
    let (ea, eb) = (backend.embed(a)?, backend.embed(b)?);
    check_same("identity embeddings", &ea, &eb)?;
    let cos: f64 = ea.data().iter().zip(eb.data()).map(|(x, y)| x * y).sum();
    Ok((1.0 - cos).clamp(0.0, 2.0))
}

/// Discriminator and generator losses of one adversarial pass.
#[derive(Clone, Copy, Debug)]
pub struct GanVars {
    pub d_loss: Var,
    pub g_loss: Var,
}

/// `L_D = −E log σ(real) − E log(1 − σ(fake))`, `L_G = −E log σ(fake)`.
pub fn gan_standard_graph(g: &mut Graph, real: Var, fake: Var) -> GanVars {
    let nr = g.scale(real, -1.0);
    let sr = g.softplus(nr);
    let lr = g.mean(sr);
    let sf = g.softplus(fake);
    let lf = g.mean(sf);
    let d_loss = g.add(lr, lf);
    let nf = g.scale(fake, -1.0);
    let gf = g.softplus(nf);
    let g_loss = g.mean(gf);
    GanVars { d_loss, g_loss }
}

/// `½[E log(1 − σ(a − E b)) + E log σ(b − E a)]`, the literal generator form
/// with `a = real`, `b = fake`. The discriminator loss is the same
/// expression with the roles exchanged.
fn ragan_half(g: &mut Graph, a: Var, b: Var) -> Var {
    let ma = g.mean(a);
    let mb = g.mean(b);
    // log(1 − σ(x)) = −softplus(x)
    let x1 = g.scale(mb, -1.0);
    let x1 = g.add_scalar_var(a, x1);
    let t1 = g.softplus(x1);
    let t1 = g.mean(t1);
    // log σ(x) = −softplus(−x)
    let x2 = g.scale(ma, -1.0);
    let x2 = g.add_scalar_var(b, x2);
    let x2 = g.scale(x2, -1.0);
    let t2 = g.softplus(x2);
    let t2 = g.mean(t2);
    let s = g.add(t1, t2);
    g.scale(s, -0.5)
}

pub fn gan_relativistic_avg_graph(g: &mut Graph, real: Var, fake: Var) -> GanVars {
    GanVars { d_loss: ragan_half(g, fake, real), g_loss: ragan_half(g, real, fake) }
}

/// Minimization form of the relativistic pair: the negation of
/// [`gan_relativistic_avg_graph`], i.e. `½·` the usual RaGAN losses.
///
/// The literal expression is a log-likelihood; it is unbounded below in the
/// direction both players would move when minimizing it, so training descends
/// on its negation instead.
pub fn gan_relativistic_descent_graph(g: &mut Graph, real: Var, fake: Var) -> GanVars {
    let v = gan_relativistic_avg_graph(g, real, fake);
    GanVars { d_loss: g.scale(v.d_loss, -1.0), g_loss: g.scale(v.g_loss, -1.0) }
}

fn gan_eval(real: &[f64], fake: &[f64], f: fn(&mut Graph, Var, Var) -> GanVars) -> Result<(f64, f64)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::EmptyBatch("gan logits"));
    }
    let mut g = Graph::new();
    let r = g.constant(Tensor::new(alloc::vec![real.len()], real.to_vec())?);
    let fk = g.constant(Tensor::new(alloc::vec![fake.len()], fake.to_vec())?);
    let v = f(&mut g, r, fk);
    Ok((g.value(v.d_loss).item(), g.value(v.g_loss).item()))
}

/// `(L_D, L_G)` of the standard conditional GAN.
pub fn gan_standard(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    gan_eval(real, fake, gan_standard_graph)
}

/// `(L_D, L_G)` of the relativistic-average GAN.
pub fn gan_relativistic_avg(real: &[f64], fake: &[f64]) -> Result<(f64, f64)> {
    gan_eval(real, fake, gan_relativistic_avg_graph)
}

/// `−log σ(x)` without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    softplus(-x)
}
