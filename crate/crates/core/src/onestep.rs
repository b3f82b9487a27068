//! One-step generation: noise schedules, the closed-form single denoising
//! step for ε-prediction and rectified-flow regimes, auxiliary noisy-LR
//! conditions, latent codecs and the end-to-end restore pipeline.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{encode_native, EncoderBackend, FeatureSequence, SourceTag};
use crate::error::{Error, Result, StageExt};
use crate::image::{ImageGrid, LatentGrid};
use crate::rng::{normal_vec, purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Epsilon,
    RectifiedFlow,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "epsilon" | "eps" | "sd" => Ok(Self::Epsilon),
            "rf" | "rectified_flow" | "qwen" => Ok(Self::RectifiedFlow),
            _ => Err(Error::invalid(format!("unknown regime `{s}` (expected `epsilon` or `rf`)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum AlphaBarFamily {
    /// Squared-cosine cumulative schedule with offset `s`.
    Cosine { s: f64 },
    /// Linear in `sqrt(beta)` between the two endpoints.
    ScaledLinear { beta_start: f64, beta_end: f64 },
}

/// Cumulative products `ᾱ_t` for `t = 0..num_steps`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaBarTable {
    pub family: AlphaBarFamily,
    pub values: Vec<f64>,
}

impl AlphaBarTable {
    pub fn generate(family: AlphaBarFamily, num_steps: usize) -> Result<Self> {
        if num_steps == 0 {
            return Err(Error::invalid("schedule needs at least one step"));
        }
        let betas: Vec<f64> = match family {
            AlphaBarFamily::Cosine { s } => {
                let f = |t: f64| {
                    let c = libm::cos((t + s) / (1.0 + s) * core::f64::consts::FRAC_PI_2);
                    c * c
                };
                (0..num_steps)
                    .map(|i| {
                        let t0 = i as f64 / num_steps as f64;
                        let t1 = (i + 1) as f64 / num_steps as f64;
                        (1.0 - f(t1) / f(t0)).min(0.999)
                    })
                    .collect()
            }
            AlphaBarFamily::ScaledLinear { beta_start, beta_end } => {
                let (a, b) = (libm::sqrt(beta_start), libm::sqrt(beta_end));
                (0..num_steps)
                    .map(|i| {
                        let frac = if num_steps == 1 { 0.0 } else { i as f64 / (num_steps - 1) as f64 };
                        let r = a + (b - a) * frac;
                        r * r
                    })
                    .collect()
            }
        };
        let mut acc = 1.0;
        let values = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Ok(Self { family, values })
    }

    pub fn at(&self, t: usize) -> Result<f64> {
        self.values
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside schedule of {} steps", self.values.len())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub regime: Regime,
    pub fixed_t: usize,
    pub num_steps: usize,
    /// Used by [`Regime::Epsilon`] only.
    pub alpha_bar_t: f64,
    /// Used by [`Regime::RectifiedFlow`] only.
    pub sigma_t: f64,
    /// Table `alpha_bar_t` was read from, kept so checkpoints are self-contained.
    pub table: Option<AlphaBarTable>,
}

pub const DEFAULT_EPSILON_T: usize = 399;
pub const DEFAULT_RF_T: usize = 750;
pub const DEFAULT_NUM_STEPS: usize = 1000;

impl NoiseSchedule {
    pub fn epsilon(table: AlphaBarTable, fixed_t: usize) -> Result<Self> {
        let alpha_bar_t = table.at(fixed_t)?;
        let s = Self {
            regime: Regime::Epsilon,
            fixed_t,
            num_steps: table.values.len(),
            alpha_bar_t,
            sigma_t: 0.0,
            table: Some(table),
        };
        s.validate()?;
        Ok(s)
    }

    /// Rectified-flow schedule with `sigma_T = t / num_steps`.
    pub fn rectified_flow(fixed_t: usize, num_steps: usize) -> Result<Self> {
        if num_steps == 0 || fixed_t > num_steps {
            return Err(Error::invalid(format!("timestep {fixed_t} outside [0, {num_steps}]")));
        }
        Self::with_sigma(fixed_t, num_steps, fixed_t as f64 / num_steps as f64)
    }

    pub fn with_sigma(fixed_t: usize, num_steps: usize, sigma_t: f64) -> Result<Self> {
        let s = Self { regime: Regime::RectifiedFlow, fixed_t, num_steps, alpha_bar_t: 1.0, sigma_t, table: None };
        s.validate()?;
        Ok(s)
    }

    pub fn default_for(regime: Regime) -> Self {
        match regime {
            Regime::Epsilon => Self::epsilon(
                AlphaBarTable::generate(AlphaBarFamily::Cosine { s: 0.008 }, DEFAULT_NUM_STEPS).expect("static schedule"),
                DEFAULT_EPSILON_T,
            )
            .expect("static schedule"),
            Regime::RectifiedFlow => Self::rectified_flow(DEFAULT_RF_T, DEFAULT_NUM_STEPS).expect("static schedule"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.regime {
            Regime::Epsilon => {
                if !(self.alpha_bar_t > 0.0 && self.alpha_bar_t <= 1.0) {
                    return Err(Error::Singular(format!("alpha_bar_T must lie in (0, 1], got {}", self.alpha_bar_t)));
                }
            }
            Regime::RectifiedFlow => check_sigma(self.sigma_t)?,
        }
        Ok(())
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if (0.0..=1.0).contains(&sigma) {
        Ok(())
    } else {
        Err(Error::invalid(format!("sigma_T must lie in [0, 1], got {sigma}")))
    }
}

fn same_shape(op: &'static str, a: &LatentGrid, b: &LatentGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.tensor().shape().to_vec(),
            right: b.tensor().shape().to_vec(),
        });
    }
    Ok(())
}

fn zip_latent(a: &LatentGrid, b: &LatentGrid, f: impl Fn(f64, f64) -> f64) -> Result<LatentGrid> {
    let (h, w, c) = a.dims();
    LatentGrid::new(h, w, c, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

/// `x̂₀ = (z_T − √(1−ᾱ_T)·ε̂) / √ᾱ_T`.
pub fn epsilon_one_step(z_t: &LatentGrid, schedule: &NoiseSchedule, eps_pred: &LatentGrid) -> Result<LatentGrid> {
    if schedule.regime != Regime::Epsilon {
        return Err(Error::invalid("epsilon_one_step needs an epsilon-regime schedule"));
    }
    let ab = schedule.alpha_bar_t;
    if !(ab > 0.0 && ab <= 1.0) {
        return Err(Error::Singular(format!("alpha_bar_T = {ab}")));
    }
    same_shape("epsilon_one_step", z_t, eps_pred)?;
    let (sa, sn) = (libm::sqrt(ab), libm::sqrt(1.0 - ab));
    zip_latent(z_t, eps_pred, |z, e| (z - sn * e) / sa)
}

/// `z_T = (1 − σ)·z_LR + σ·ε`.
pub fn rf_forward(z_lr: &LatentGrid, sigma_t: f64, noise: &LatentGrid) -> Result<LatentGrid> {
    check_sigma(sigma_t)?;
    same_shape("rf_forward", z_lr, noise)?;
    zip_latent(z_lr, noise, |z, e| (1.0 - sigma_t) * z + sigma_t * e)
}

/// `ẑ = z_T − σ·v̂`.
pub fn rf_one_step(z_t: &LatentGrid, sigma_t: f64, v_pred: &LatentGrid) -> Result<LatentGrid> {
    check_sigma(sigma_t)?;
    same_shape("rf_one_step", z_t, v_pred)?;
    zip_latent(z_t, v_pred, |z, v| z - sigma_t * v)
}

/// Graph form of the active regime's one-step update.
pub fn one_step_graph(g: &mut Graph, schedule: &NoiseSchedule, z_t: Var, pred: Var) -> Var {
    match schedule.regime {
        Regime::Epsilon => {
            let ab = schedule.alpha_bar_t;
            let scaled = g.scale(pred, libm::sqrt(1.0 - ab));
            let diff = g.sub(z_t, scaled);
            g.scale(diff, 1.0 / libm::sqrt(ab))
        }
        Regime::RectifiedFlow => {
            let scaled = g.scale(pred, schedule.sigma_t);
            g.sub(z_t, scaled)
        }
    }
}

/// Auxiliary LR condition for the rectified-flow generator.
#[derive(Clone, Debug, PartialEq)]
pub struct LrCondition {
    pub z_cond: LatentGrid,
    /// Fraction of `sigma_T` removed; `1` when the clean skip fired.
    pub f: f64,
    /// Effective noise level `(1 − f)·sigma_T`.
    pub sigma_prime: f64,
    pub skipped: bool,
}

/// `z_cond = (1 − σ')·z_LR + σ'·ε` with `σ' = (1 − f)·σ_T`.
pub fn lr_condition_from(z_lr: &LatentGrid, sigma_t: f64, f: f64, noise: &LatentGrid) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&f) {
        return Err(Error::invalid(format!("f must lie in [0, 1], got {f}")));
    }
    let sigma_prime = (1.0 - f) * sigma_t;
    rf_forward(z_lr, sigma_prime, noise)
}

/// With probability `p_clean` keeps `z_LR` unchanged (`f = 1`); otherwise draws
/// `f ~ U[0, 1]` and `ε ~ N(0, I)`.
pub fn build_lr_condition<R: Rng + ?Sized>(z_lr: &LatentGrid, sigma_t: f64, rng: &mut R, p_clean: f64) -> Result<LrCondition> {
    if !(0.0..=1.0).contains(&p_clean) {
        return Err(Error::invalid(format!("p_clean must lie in [0, 1], got {p_clean}")));
    }
    check_sigma(sigma_t)?;
    let u: f64 = rng.random();
    if u < p_clean {
        return Ok(LrCondition { z_cond: z_lr.clone(), f: 1.0, sigma_prime: 0.0, skipped: true });
    }
    let f: f64 = rng.random();
    let (h, w, c) = z_lr.dims();
    let noise = LatentGrid::new(h, w, c, normal_vec(rng, h * w * c))?;
    let z_cond = lr_condition_from(z_lr, sigma_t, f, &noise)?;
    Ok(LrCondition { z_cond, f, sigma_prime: (1.0 - f) * sigma_t, skipped: false })
}

/// Frozen image ↔ latent codec.
pub trait LatentCodec {
    fn latent_dims(&self, height: usize, width: usize, channels: usize) -> Result<(usize, usize, usize)>;
    fn encode_graph(&self, g: &mut Graph, img: Var) -> Var;
    fn decode_graph(&self, g: &mut Graph, z: Var) -> Var;

    fn encode(&self, img: &ImageGrid) -> Result<LatentGrid> {
        let (h, w, c) = img.dims();
        self.latent_dims(h, w, c)?;
        let mut g = Graph::new();
        let x = g.constant(img.tensor().clone());
        let z = self.encode_graph(&mut g, x);
        LatentGrid::from_tensor(g.value(z).clone())
    }

    fn decode(&self, z: &LatentGrid) -> Result<ImageGrid> {
        let mut g = Graph::new();
        let x = g.constant(z.tensor().clone());
        let img = self.decode_graph(&mut g, x);
        ImageGrid::from_tensor(g.value(img).clone())
    }
}

/// Parameter-free toy codecs standing in for a VAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Codec {
    /// Latent is the image itself.
    Identity,
    /// Lossless space-to-depth by `factor` with values mapped to `[-1, 1]`.
    SpaceToDepth { factor: usize },
    /// Orthonormal DCT projection of each `stride × stride` patch onto the
    /// `channels` lowest-frequency basis functions. Lossy unless
    /// `channels == stride² · C`.
    Strided { stride: usize, channels: usize },
}

impl Default for Codec {
    fn default() -> Self {
        Codec::SpaceToDepth { factor: 4 }
    }
}

impl Codec {
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let num = |v: &str| v.parse::<usize>().map_err(|_| Error::invalid(format!("bad codec number `{v}` in `{s}`")));
        match parts.as_slice() {
            ["identity"] => Ok(Codec::Identity),
            ["space_to_depth", f] => Ok(Codec::SpaceToDepth { factor: num(f)? }),
            ["strided", st, ch] => Ok(Codec::Strided { stride: num(st)?, channels: num(ch)? }),
            _ => Err(Error::invalid(format!(
                "unknown codec `{s}` (expected identity, space_to_depth:<f> or strided:<stride>:<channels>)"
            ))),
        }
    }

    /// Rows are orthonormal `stride²·C`-dim basis vectors in patch layout `(dy, dx, c)`.
    fn dct_basis(stride: usize, img_channels: usize, channels: usize) -> Tensor {
        let s = stride;
        let mut order: Vec<(usize, usize, usize)> = Vec::new();
        for ch in 0..img_channels {
            for u in 0..s {
                for v in 0..s {
                    order.push((u + v, ch, u * s + v));
                }
            }
        }
        order.sort_by_key(|&(freq, ch, uv)| (freq, uv, ch));
        let coef = |k: usize, n: usize| {
            let a = if k == 0 { libm::sqrt(1.0 / s as f64) } else { libm::sqrt(2.0 / s as f64) };
            a * libm::cos(core::f64::consts::PI * (2 * n + 1) as f64 * k as f64 / (2 * s) as f64)
        };
        let dim = s * s * img_channels;
        let mut basis = vec![0.0; dim * channels];
        for (out, &(_, ch, uv)) in order.iter().take(channels).enumerate() {
            let (u, v) = (uv / s, uv % s);
            for dy in 0..s {
                for dx in 0..s {
                    // column `out` of a [dim, channels] matrix
                    basis[((dy * s + dx) * img_channels + ch) * channels + out] = coef(u, dy) * coef(v, dx);
                }
            }
        }
        Tensor::from_parts(vec![dim, channels], basis)
    }
}

impl LatentCodec for Codec {
    fn latent_dims(&self, h: usize, w: usize, c: usize) -> Result<(usize, usize, usize)> {
        let need = |f: usize| {
            if f == 0 || h % f != 0 || w % f != 0 {
                Err(Error::invalid(format!("{h}×{w} image is incompatible with codec stride {f}")))
            } else {
                Ok(())
            }
        };
        match *self {
            Codec::Identity => Ok((h, w, c)),
            Codec::SpaceToDepth { factor } => {
                need(factor)?;
                Ok((h / factor, w / factor, factor * factor * c))
            }
            Codec::Strided { stride, channels } => {
                need(stride)?;
                if channels == 0 || channels > stride * stride * c {
                    return Err(Error::invalid(format!(
                        "strided codec supports 1..={} channels, got {channels}",
                        stride * stride * c
                    )));
                }
                Ok((h / stride, w / stride, channels))
            }
        }
    }

    fn encode_graph(&self, g: &mut Graph, img: Var) -> Var {
        match *self {
            Codec::Identity => img,
            Codec::SpaceToDepth { factor } => {
                let u = g.pixel_unshuffle(img, factor);
                let s = g.scale(u, 2.0);
                g.add_scalar(s, -1.0)
            }
            Codec::Strided { stride, channels } => {
                let c = g.shape(img)[2];
                let u = g.pixel_unshuffle(img, stride);
                let s = g.shape(u).to_vec();
                let flat = g.reshape(u, &[s[0] * s[1], s[2]]);
                let basis = g.constant(Self::dct_basis(stride, c, channels));
                let z = g.matmul(flat, basis);
                g.reshape(z, &[s[0], s[1], channels])
            }
        }
    }

    fn decode_graph(&self, g: &mut Graph, z: Var) -> Var {
        match *self {
            Codec::Identity => z,
            Codec::SpaceToDepth { factor } => {
                let shifted = g.add_scalar(z, 1.0);
                let s = g.scale(shifted, 0.5);
                g.pixel_shuffle(s, factor)
            }
            Codec::Strided { stride, channels } => {
                let s = g.shape(z).to_vec();
                // Channels alone do not determine the image channel count; toy images are RGB.
                let img_c = 3;
                let basis = Self::dct_basis(stride, img_c, channels);
                let dim = stride * stride * img_c;
                let bt = Tensor::from_fn(&[channels, dim], |i| basis.data()[(i % dim) * channels + i / dim]);
                let bt = g.constant(bt);
                let flat = g.reshape(z, &[s[0] * s[1], channels]);
                let patches = g.matmul(flat, bt);
                let grid = g.reshape(patches, &[s[0], s[1], dim]);
                g.pixel_shuffle(grid, stride)
            }
        }
    }
}

/// Everything the generator is conditioned on besides `z_T`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionBundle {
    /// Projected semantic condition `C = φ(F_fused)`.
    pub semantic: FeatureSequence,
    /// Noisy-LR latent; present exactly in the rectified-flow regime.
    pub aux_latent: Option<LatentGrid>,
    pub timestep: usize,
    /// Noise-fraction signal, only consumed when the generator enables it.
    pub f: Option<f64>,
}

impl ConditionBundle {
    pub fn validate(&self, regime: Regime) -> Result<()> {
        match (regime, &self.aux_latent) {
            (Regime::RectifiedFlow, None) => Err(Error::invalid("rectified-flow regime needs an auxiliary latent")),
            (Regime::Epsilon, Some(_)) => Err(Error::invalid("epsilon regime takes no auxiliary latent")),
            _ => Ok(()),
        }
    }
}

/// Produces the noise (ε regime) or velocity (RF regime) prediction.
pub trait Denoiser {
    fn predict(&self, z_t: &LatentGrid, bundle: &ConditionBundle) -> Result<LatentGrid>;
}

/// Maps the two encoded streams to the generator's semantic condition.
pub trait Conditioner {
    fn condition(&self, face: &FeatureSequence, lr: &FeatureSequence) -> Result<FeatureSequence>;
}

/// First-pass restorer producing the intermediate image.
pub trait IntermediateRestorer {
    fn restore(&self, lq: &ImageGrid) -> Result<ImageGrid>;
}

#[derive(Clone, Copy, Debug, Default)]
pub struct IdentityRestorer;

impl IntermediateRestorer for IdentityRestorer {
    fn restore(&self, lq: &ImageGrid) -> Result<ImageGrid> {
        Ok(lq.clone())
    }
}

impl<F: Fn(&ImageGrid) -> Result<ImageGrid>> IntermediateRestorer for F {
    fn restore(&self, lq: &ImageGrid) -> Result<ImageGrid> {
        self(lq)
    }
}

/// Components of one restore pass.
pub struct Pipeline<'a> {
    pub restorer: &'a dyn IntermediateRestorer,
    pub encoder: &'a dyn EncoderBackend,
    pub conditioner: &'a dyn Conditioner,
    pub denoiser: &'a dyn Denoiser,
    pub codec: &'a dyn LatentCodec,
    pub schedule: &'a NoiseSchedule,
}

/// Noisy input the generator sees for a given LR latent.
pub fn prepare_noisy_latent(z_lr: &LatentGrid, schedule: &NoiseSchedule, noise_seed: u64) -> Result<LatentGrid> {
    match schedule.regime {
        Regime::Epsilon => Ok(z_lr.clone()),
        Regime::RectifiedFlow => {
            let (h, w, c) = z_lr.dims();
            let noise = LatentGrid::new(h, w, c, normal_vec(&mut stream(noise_seed, &[purpose::NOISE]), h * w * c))?;
            rf_forward(z_lr, schedule.sigma_t, &noise)
        }
    }
}

/// `I_mid = R(I_LQ)`, encode both streams, condition, one step, decode.
/// Output is clamped to `[0, 1]`. At inference the auxiliary latent is the
/// clean LR latent.
pub fn restore(lq: &ImageGrid, pipe: &Pipeline<'_>, noise_seed: u64) -> Result<ImageGrid> {
    pipe.schedule.validate().stage("schedule")?;
    let mid = pipe.restorer.restore(lq).stage("intermediate restorer")?;
    let face = encode_native(&mid, pipe.encoder, SourceTag::FaceMid).stage("encode intermediate")?;
    let lr = encode_native(lq, pipe.encoder, SourceTag::Lr).stage("encode lq")?;
    let semantic = pipe.conditioner.condition(&face, &lr).stage("condition")?;
    let z_lr = pipe.codec.encode(lq).stage("latent encode")?;
    let z_t = prepare_noisy_latent(&z_lr, pipe.schedule, noise_seed).stage("noising")?;
    let bundle = ConditionBundle {
        semantic,
        aux_latent: (pipe.schedule.regime == Regime::RectifiedFlow).then(|| z_lr.clone()),
        timestep: pipe.schedule.fixed_t,
        f: (pipe.schedule.regime == Regime::RectifiedFlow).then_some(1.0),
    };
    let pred = pipe.denoiser.predict(&z_t, &bundle).stage("generator")?;
    let z_hat = match pipe.schedule.regime {
        Regime::Epsilon => epsilon_one_step(&z_t, pipe.schedule, &pred),
        Regime::RectifiedFlow => rf_one_step(&z_t, pipe.schedule.sigma_t, &pred),
    }
    .stage("one step")?;
    Ok(pipe.codec.decode(&z_hat).stage("latent decode")?.clamp01())
}

/// Sinusoidal embedding of a scalar position, `[1, dim]`.
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = libm::exp(-libm::log(10_000.0) * i as f64 / half.max(1) as f64);
        out[i] = libm::sin(position * freq);
        out[half + i] = libm::cos(position * freq);
    }
    Tensor::from_parts(vec![1, dim], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lat(v: f64) -> LatentGrid {
        LatentGrid::filled(2, 2, 3, v)
    }

    #[test]
    fn default_schedules_use_fixed_steps() {
        let e = NoiseSchedule::default_for(Regime::Epsilon);
        assert_eq!(e.fixed_t, 399);
        assert!(e.alpha_bar_t > 0.0 && e.alpha_bar_t < 1.0);
        let r = NoiseSchedule::default_for(Regime::RectifiedFlow);
        assert_eq!(r.fixed_t, 750);
        assert_eq!(r.sigma_t, 0.75);
    }

    #[test]
    fn alpha_bar_is_decreasing() {
        for fam in [AlphaBarFamily::Cosine { s: 0.008 }, AlphaBarFamily::ScaledLinear { beta_start: 0.00085, beta_end: 0.012 }] {
            let t = AlphaBarTable::generate(fam, 1000).unwrap();
            assert!(t.values.windows(2).all(|w| w[1] < w[0]));
            assert!(t.values[0] <= 1.0 && *t.values.last().unwrap() > 0.0);
        }
    }

    #[test]
    fn epsilon_step_degenerate_cases() {
        let mut s = NoiseSchedule::default_for(Regime::Epsilon);
        s.alpha_bar_t = 1.0;
        assert_eq!(epsilon_one_step(&lat(0.3), &s, &lat(5.0)).unwrap(), lat(0.3));
        s.alpha_bar_t = 0.25;
        let out = epsilon_one_step(&lat(0.3), &s, &lat(0.0)).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.6).abs() < 1e-15));
        s.alpha_bar_t = 0.0;
        assert!(matches!(epsilon_one_step(&lat(0.3), &s, &lat(0.0)), Err(Error::Singular(_))));
    }

    #[test]
    fn rf_scalar_cases() {
        assert_eq!(rf_forward(&lat(0.4), 0.0, &lat(-1.2)).unwrap(), lat(0.4));
        assert_eq!(rf_forward(&lat(0.4), 1.0, &lat(-1.2)).unwrap(), lat(-1.2));
        let z = rf_forward(&lat(0.4), 0.75, &lat(-1.2)).unwrap();
        assert!(z.data().iter().all(|&v| (v - (-0.8)).abs() < 1e-12));
        assert!(rf_forward(&lat(0.4), 1.5, &lat(0.0)).is_err());
        assert_eq!(rf_one_step(&lat(0.2), 0.0, &lat(9.0)).unwrap(), lat(0.2));
        assert_eq!(rf_one_step(&lat(0.2), 0.7, &lat(0.0)).unwrap(), lat(0.2));
    }

    #[test]
    fn lr_condition_cases() {
        let z = lat(1.0);
        let mut rng = stream(3, &[]);
        for _ in 0..50 {
            let c = build_lr_condition(&z, 0.75, &mut rng, 1.0).unwrap();
            assert!(c.skipped);
            assert_eq!(c.z_cond, z);
            assert_eq!(c.sigma_prime, 0.0);
        }
        assert_eq!(lr_condition_from(&z, 0.75, 1.0, &lat(-3.0)).unwrap(), z);
        let c = lr_condition_from(&z, 0.6, 0.0, &lat(0.0)).unwrap();
        assert!(c.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
        assert!(build_lr_condition(&z, 0.5, &mut rng, 1.5).is_err());
    }

    #[test]
    fn codec_shapes() {
        let img = ImageGrid::filled(64, 64, 3, 0.5);
        let strided = Codec::Strided { stride: 8, channels: 4 };
        assert_eq!(strided.encode(&img).unwrap().dims(), (8, 8, 4));
        assert_eq!(Codec::SpaceToDepth { factor: 4 }.encode(&img).unwrap().dims(), (16, 16, 48));
        assert!(Codec::SpaceToDepth { factor: 3 }.encode(&img).is_err());
        assert_eq!(Codec::parse("strided:8:4").unwrap(), strided);
        assert!(Codec::parse("vae").is_err());
    }

    #[test]
    fn strided_codec_keeps_patch_means() {
        let mut rng = stream(2, &[]);
        let img = ImageGrid::from_fn(16, 16, 3, |_, _, _| rng.random::<f64>());
        let codec = Codec::Strided { stride: 4, channels: 3 };
        let back = codec.decode(&codec.encode(&img).unwrap()).unwrap();
        for c in 0..3 {
            let (mut a, mut b) = (0.0, 0.0);
            for y in 0..4 {
                for x in 0..4 {
                    a += img.get(y, x, c);
                    b += back.get(y, x, c);
                }
            }
            assert!((a - b).abs() < 1e-9);
        }
        // full basis is lossless
        let full = Codec::Strided { stride: 4, channels: 48 };
        let rt = full.decode(&full.encode(&img).unwrap()).unwrap();
        assert!(rt.tensor().max_abs_diff(img.tensor()) < 1e-12);
    }

    #[test]
    fn bundle_aux_presence_matches_regime() {
        let semantic = FeatureSequence::new(Tensor::zeros(&[1, 1]), SourceTag::Fused).unwrap();
        let mut b = ConditionBundle { semantic, aux_latent: None, timestep: 0, f: None };
        assert!(b.validate(Regime::Epsilon).is_ok());
        assert!(b.validate(Regime::RectifiedFlow).is_err());
        b.aux_latent = Some(lat(0.0));
        assert!(b.validate(Regime::Epsilon).is_err());
    }
}
