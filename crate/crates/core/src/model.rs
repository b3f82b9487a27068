//! Toy generator, discriminator and the assembled restoration model.
//!
//! The semantic condition `C` (`N × k` tokens laid out on the encoder's patch
//! grid) enters the generator through per-location FiLM: a linear map turns
//! every token into a `(scale, shift)` pair, the pair map is resized to the
//! feature resolution, and hidden features become `h ⊙ (1 + scale) + shift`.
//! The auxiliary noisy-LR latent (rectified-flow regime) is concatenated to
//! `z_T` along channels. The timestep always arrives as a sinusoidal
//! embedding added to every location.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{FeatureSequence, Projection, SourceTag, ToyEncoder, ToyEncoderConfig};
use crate::error::{Error, Result};
use crate::image::{ImageGrid, LatentGrid};
use crate::nn::{Bound, Conv2d, Init, LayerNorm, Linear, ParamId, ParamStore};
use crate::onestep::{
    self, sinusoidal_embedding, Codec, ConditionBundle, Conditioner, Denoiser, IdentityRestorer, IntermediateRestorer, LatentCodec,
    NoiseSchedule, Pipeline, Regime,
};
use crate::rng::{purpose, stream};
use crate::sdfm::{FusionVars, Sdfm, SdfmConfig};
use crate::tensor::Tensor;

/// How the two encoded streams become the generator's semantic condition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConditionMode {
    /// A learned `N × k` parameter; image features are ignored.
    Placeholder,
    /// `φ_raw([F_face; F_lr])` without normalization or gating.
    Raw,
    /// `φ(SDFM(F_face, F_lr))`.
    Sdfm,
    /// `φ(LN(F_lr))`.
    LrOnly,
    /// `φ(LN(F_face))`.
    FaceOnly,
}

impl ConditionMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "placeholder" => Ok(Self::Placeholder),
            "raw" => Ok(Self::Raw),
            "sdfm" => Ok(Self::Sdfm),
            "lr_only" | "lr" => Ok(Self::LrOnly),
            "face_only" | "sr" => Ok(Self::FaceOnly),
            _ => Err(Error::invalid(format!(
                "unknown condition mode `{s}` (expected placeholder, raw, sdfm, lr_only or face_only)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Placeholder => "placeholder",
            Self::Raw => "raw",
            Self::Sdfm => "sdfm",
            Self::LrOnly => "lr_only",
            Self::FaceOnly => "face_only",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorArch {
    Unet,
    Mixer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub arch: GeneratorArch,
    pub hidden: usize,
    pub time_dim: usize,
    /// Token-mixer depth.
    pub mixer_blocks: usize,
    /// Feed the noise fraction `f` as a second sinusoidal embedding.
    pub f_embedding: bool,
    /// Rectified flow: the network outputs a residual `Δ` and the velocity is
    /// `(z_T − z_cond − Δ)/σ_T`, so the one-step sample is `z_cond + Δ`.
    pub aux_anchored: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { arch: GeneratorArch::Unet, hidden: 32, time_dim: 16, mixer_blocks: 2, f_embedding: false, aux_anchored: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscriminatorConfig {
    pub hidden: usize,
    /// Adds a per-location bias derived from the (detached) semantic condition.
    pub conditioned: Option<bool>,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self { hidden: 16, conditioned: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub regime: Regime,
    pub image_size: (usize, usize),
    pub encoder: ToyEncoderConfig,
    pub sdfm: SdfmConfig,
    pub cond_dim: usize,
    pub condition: ConditionMode,
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub codec: Codec,
    /// Overrides the regime's default schedule when set.
    pub schedule: Option<NoiseSchedule>,
    /// Seed for parameter initialization.
    pub seed: u64,
    /// Noise seed used by inference in the rectified-flow regime.
    pub inference_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::for_regime(Regime::Epsilon)
    }
}

impl ModelConfig {
    pub fn for_regime(regime: Regime) -> Self {
        let encoder = ToyEncoderConfig::default();
        let sdfm = SdfmConfig { dim: encoder.dim, ..SdfmConfig::default() };
        Self {
            regime,
            image_size: (64, 64),
            cond_dim: encoder.dim,
            encoder,
            sdfm,
            condition: ConditionMode::Sdfm,
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            codec: Codec::default(),
            schedule: None,
            seed: 0,
            inference_seed: 0,
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = self.schedule.clone().unwrap_or_else(|| NoiseSchedule::default_for(self.regime));
        if s.regime != self.regime {
            return Err(Error::invalid("schedule regime differs from model regime"));
        }
        s.validate()?;
        Ok(s)
    }

    /// Discriminator conditioning defaults to on for ε-prediction only.
    pub fn disc_conditioned(&self) -> bool {
        self.discriminator.conditioned.unwrap_or(self.regime == Regime::Epsilon)
    }

    pub fn cond_grid(&self) -> Result<(usize, usize)> {
        let (h, w) = self.encoder.resolution;
        let p = self.encoder.patch;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid(format!("encoder resolution {h}×{w} not divisible by patch {p}")));
        }
        Ok((h / p, w / p))
    }

    pub fn latent_dims(&self) -> Result<(usize, usize, usize)> {
        self.codec.latent_dims(self.image_size.0, self.image_size.1, self.encoder.channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sdfm.dim != self.encoder.dim {
            return Err(Error::invalid(format!(
                "sdfm.dim ({}) must equal encoder.dim ({})",
                self.sdfm.dim, self.encoder.dim
            )));
        }
        if self.cond_dim == 0 || self.generator.hidden == 0 || self.generator.time_dim < 2 {
            return Err(Error::invalid("cond_dim and generator.hidden must be >= 1, generator.time_dim >= 2"));
        }
        self.sdfm.validate()?;
        self.cond_grid()?;
        let (lh, lw, _) = self.latent_dims()?;
        if self.regime == Regime::Epsilon && (lh % 2 != 0 || lw % 2 != 0) {
            return Err(Error::invalid(format!("epsilon generator needs an even latent grid, got {lh}×{lw}")));
        }
        self.schedule()?;
        Ok(())
    }
}

/// Resizes an `N × m` token map laid out on `grid` to `[h·w, m]`.
fn tokens_to_grid(g: &mut Graph, tokens: Var, grid: (usize, usize), h: usize, w: usize) -> Var {
    let m = g.shape(tokens)[1];
    let map = g.reshape(tokens, &[grid.0, grid.1, m]);
    let map = if (grid.0, grid.1) == (h, w) { map } else { g.resize_bilinear(map, h, w) };
    g.reshape(map, &[h * w, m])
}

/// `x ⊙ (1 + scale) + shift` with `[scale | shift]` given per row.
fn film(g: &mut Graph, x: Var, pairs: Var, width: usize) -> Var {
    let scale = g.slice_cols(pairs, 0, width);
    let shift = g.slice_cols(pairs, width, 2 * width);
    let xs = g.mul(x, scale);
    let x = g.add(x, xs);
    g.add(x, shift)
}

#[derive(Clone, Debug)]
struct UnetBody {
    input: Conv2d,
    skip: Option<Linear>,
    enc: Conv2d,
    down: Conv2d,
    mid: Conv2d,
    film_mid: Linear,
    dec: Conv2d,
    output: Conv2d,
}

#[derive(Clone, Debug)]
struct MixerBlock {
    ln_tok: LayerNorm,
    tok: Conv2d,
    ln_ch: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
struct MixerBody {
    input: Linear,
    skip: Option<Linear>,
    blocks: Vec<MixerBlock>,
    output: Linear,
}

#[derive(Clone, Debug)]
enum Body {
    Unet(UnetBody),
    Mixer(MixerBody),
}

/// ε-predictor (small conv U-Net) or velocity predictor (token mixer).
#[derive(Clone, Debug)]
pub struct Generator {
    regime: Regime,
    latent: (usize, usize, usize),
    grid: (usize, usize),
    config: GeneratorConfig,
    time: Linear,
    film_in: Linear,
    /// Per-input-channel gain from the timestep/f embedding, present with `f_embedding`.
    in_gate: Option<Linear>,
    body: Body,
    sigma_t: f64,
}

impl Generator {
    pub fn new(store: &mut ParamStore, config: &ModelConfig, rng: &mut impl rand::Rng) -> Result<Self> {
        let latent = config.latent_dims()?;
        let grid = config.cond_grid()?;
        let gc = config.generator.clone();
        let hdn = gc.hidden;
        let k = config.cond_dim;
        let c = latent.2;
        let t_in = if gc.f_embedding { 2 * gc.time_dim } else { gc.time_dim };
        let time = Linear::new(store, "gen.time", t_in, hdn, Init::Normal { fan_in: t_in, gain: 0.5 }, true, rng);
        let film_in = Linear::new(store, "gen.film_in", k, 2 * hdn, Init::Normal { fan_in: k, gain: 0.1 }, true, rng);
        let cin = if config.regime == Regime::RectifiedFlow { 2 * c } else { c };
        let in_gate = gc.f_embedding.then(|| Linear::new(store, "gen.in_gate", t_in, cin, Init::Zeros, true, rng));
        let skip = (config.regime == Regime::RectifiedFlow).then(|| Linear::new(store, "gen.skip", cin, c, Init::Zeros, false, rng));
        let body = match gc.arch {
            GeneratorArch::Unet => Body::Unet(UnetBody {
                input: Conv2d::new(store, "gen.unet.input", cin, hdn, 1, 1, 1.0, rng),
                skip,
                enc: Conv2d::new(store, "gen.unet.enc", hdn, hdn, 3, 1, 1.0, rng),
                down: Conv2d::new(store, "gen.unet.down", hdn, hdn, 3, 2, 1.0, rng),
                mid: Conv2d::new(store, "gen.unet.mid", hdn, hdn, 3, 1, 1.0, rng),
                film_mid: Linear::new(store, "gen.unet.film_mid", k, 2 * hdn, Init::Normal { fan_in: k, gain: 0.1 }, true, rng),
                dec: Conv2d::new(store, "gen.unet.dec", 2 * hdn, hdn, 3, 1, 1.0, rng),
                output: Conv2d::new(store, "gen.unet.output", hdn, c, 1, 1, 0.0, rng),
            }),
            GeneratorArch::Mixer => {
                let blocks = (0..gc.mixer_blocks)
                    .map(|i| MixerBlock {
                        ln_tok: LayerNorm::new(store, &format!("gen.mixer{i}.ln_tok"), hdn, 1e-5, rng),
                        tok: Conv2d::new(store, &format!("gen.mixer{i}.tok"), hdn, hdn, 3, 1, 0.5, rng),
                        ln_ch: LayerNorm::new(store, &format!("gen.mixer{i}.ln_ch"), hdn, 1e-5, rng),
                        fc1: Linear::new(store, &format!("gen.mixer{i}.fc1"), hdn, 2 * hdn, Init::Normal { fan_in: hdn, gain: 1.0 }, true, rng),
                        fc2: Linear::new(store, &format!("gen.mixer{i}.fc2"), 2 * hdn, hdn, Init::Normal { fan_in: 2 * hdn, gain: 0.5 }, true, rng),
                    })
                    .collect();
                Body::Mixer(MixerBody {
                    input: Linear::new(store, "gen.mixer.input", cin, hdn, Init::Normal { fan_in: cin, gain: 1.0 }, true, rng),
                    skip,
                    blocks,
                    output: Linear::new(store, "gen.mixer.output", hdn, c, Init::Zeros, true, rng),
                })
            }
        };
        let sigma_t = config.schedule()?.sigma_t;
        Ok(Self { regime: config.regime, latent, grid, config: gc, time, film_in, in_gate, body, sigma_t })
    }

    fn time_row(&self, g: &mut Graph, p: &Bound, timestep: usize, f: Option<f64>) -> (Var, Var) {
        let mut emb = sinusoidal_embedding(timestep as f64, self.config.time_dim);
        if self.config.f_embedding {
            let fe = sinusoidal_embedding(f.unwrap_or(1.0) * 1000.0, self.config.time_dim);
            let mut data = emb.into_data();
            data.extend_from_slice(fe.data());
            emb = Tensor::from_parts(alloc::vec![1, 2 * self.config.time_dim], data);
        }
        let e = g.constant(emb);
        let t = self.time.forward(g, p, e);
        (e, g.gelu(t))
    }

    /// Prediction for `z_t` (`[h, w, c]`) given condition tokens `cond` (`[N, k]`).
    #[allow(clippy::too_many_arguments)]
    pub fn forward(&self, g: &mut Graph, p: &Bound, z_t: Var, cond: Var, aux: Option<Var>, timestep: usize, f: Option<f64>) -> Var {
        let raw = self.network(g, p, z_t, cond, aux, timestep, f);
        match aux {
            Some(a) if self.config.aux_anchored => {
                if self.sigma_t <= 0.0 {
                    return g.scale(raw, 0.0);
                }
                let anchor = g.add(a, raw);
                let diff = g.sub(z_t, anchor);
                g.scale(diff, 1.0 / self.sigma_t)
            }
            _ => raw,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn network(&self, g: &mut Graph, p: &Bound, z_t: Var, cond: Var, aux: Option<Var>, timestep: usize, f: Option<f64>) -> Var {
        let (lh, lw, c) = self.latent;
        let hdn = self.config.hidden;
        let (emb, t_row) = self.time_row(g, p, timestep, f);
        let pairs_full = self.film_in.forward(g, p, cond);
        let pairs = tokens_to_grid(g, pairs_full, self.grid, lh, lw);
        let inp = match aux {
            Some(a) => g.concat(&[z_t, a]),
            None => z_t,
        };
        let cin = g.shape(inp)[2];
        let mut flat_in = g.reshape(inp, &[lh * lw, cin]);
        if let Some(gate) = &self.in_gate {
            let gain = gate.forward(g, p, emb);
            let gain = g.add_scalar(gain, 1.0);
            flat_in = g.mul_row(flat_in, gain);
        }
        let inp = g.reshape(flat_in, &[lh, lw, cin]);
        let skip = |g: &mut Graph, out: Var, skip: &Option<Linear>| match skip {
            Some(lin) => {
                let direct = lin.forward(g, p, flat_in);
                let direct = g.reshape(direct, &[lh, lw, c]);
                g.add(out, direct)
            }
            None => out,
        };
        match &self.body {
            Body::Unet(b) => {
                let x = b.input.forward(g, p, inp);
                let x = g.reshape(x, &[lh * lw, hdn]);
                let x = g.add_row(x, t_row);
                let x = film(g, x, pairs, hdn);
                let x = g.gelu(x);
                let x = g.reshape(x, &[lh, lw, hdn]);
                let e = b.enc.forward(g, p, x);
                let e = g.gelu(e);
                let d = b.down.forward(g, p, e);
                let d = g.gelu(d);
                let m = b.mid.forward(g, p, d);
                let (mh, mw) = (lh / 2, lw / 2);
                let m = g.reshape(m, &[mh * mw, hdn]);
                let pm = b.film_mid.forward(g, p, cond);
                let pm = tokens_to_grid(g, pm, self.grid, mh, mw);
                let m = film(g, m, pm, hdn);
                let m = g.gelu(m);
                let m = g.reshape(m, &[mh, mw, hdn]);
                let u = g.upsample_nearest(m, 2);
                let cat = g.concat(&[u, e]);
                let y = b.dec.forward(g, p, cat);
                let y = g.gelu(y);
                let out = b.output.forward(g, p, y);
                skip(g, out, &b.skip)
            }
            Body::Mixer(b) => {
                let x = b.input.forward(g, p, flat_in);
                let x = g.add_row(x, t_row);
                let mut x = film(g, x, pairs, hdn);
                for blk in &b.blocks {
                    let y = blk.ln_tok.forward(g, p, x);
                    let y = g.reshape(y, &[lh, lw, hdn]);
                    let y = blk.tok.forward(g, p, y);
                    let y = g.reshape(y, &[lh * lw, hdn]);
                    x = g.add(x, y);
                    let y = blk.ln_ch.forward(g, p, x);
                    let y = blk.fc1.forward(g, p, y);
                    let y = g.gelu(y);
                    let y = blk.fc2.forward(g, p, y);
                    x = g.add(x, y);
                }
                let out = b.output.forward(g, p, x);
                let out = g.reshape(out, &[lh, lw, c]);
                skip(g, out, &b.skip)
            }
        }
    }

    pub fn regime(&self) -> Regime {
        self.regime
    }
}

/// Patch discriminator on latents.
#[derive(Clone, Debug)]
pub struct Discriminator {
    pub store: ParamStore,
    grid: (usize, usize),
    conv1: Conv2d,
    conv2: Conv2d,
    cond_bias: Option<Linear>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = stream(config.seed, &[purpose::INIT, 2]);
        let (_, _, c) = config.latent_dims()?;
        let hdn = config.discriminator.hidden;
        let conv1 = Conv2d::new(&mut store, "disc.conv1", c, hdn, 3, 1, 1.0, &mut rng);
        let conv2 = Conv2d::new(&mut store, "disc.conv2", hdn, hdn, 3, 2, 1.0, &mut rng);
        let cond_bias = config.disc_conditioned().then(|| {
            Linear::new(&mut store, "disc.cond_bias", config.cond_dim, hdn, Init::Normal { fan_in: config.cond_dim, gain: 0.5 }, true, &mut rng)
        });
        let head = Conv2d::new(&mut store, "disc.head", hdn, 1, 3, 1, 1.0, &mut rng);
        Ok(Self { store, grid: config.cond_grid()?, conv1, conv2, cond_bias, head })
    }

    pub fn is_conditioned(&self) -> bool {
        self.cond_bias.is_some()
    }

    /// Patch logits `[P, 1]`.
    pub fn forward(&self, g: &mut Graph, p: &Bound, z: Var, cond: Option<Var>) -> Var {
        let x = self.conv1.forward(g, p, z);
        let x = g.leaky_relu(x, 0.2);
        let x = self.conv2.forward(g, p, x);
        let x = g.leaky_relu(x, 0.2);
        let x = match (&self.cond_bias, cond) {
            (Some(lin), Some(cond)) => {
                let s = g.shape(x).to_vec();
                let bias = lin.forward(g, p, cond);
                let bias = tokens_to_grid(g, bias, self.grid, s[0], s[1]);
                let flat = g.reshape(x, &[s[0] * s[1], s[2]]);
                let sum = g.add(flat, bias);
                g.reshape(sum, &s)
            }
            _ => x,
        };
        let y = self.head.forward(g, p, x);
        let s = g.shape(y).to_vec();
        g.reshape(y, &[s[0] * s[1], 1])
    }
}

/// Condition tokens plus, for the SDFM pathway, the fusion internals.
pub struct ConditionVars {
    pub cond: Var,
    pub fusion: Option<FusionVars>,
}

/// Graph outputs of one generator pass.
pub struct GenerateVars {
    pub cond: ConditionVars,
    pub prediction: Var,
    pub z_hat: Var,
    pub image: Var,
}

/// Everything trained in the generator step: conditioning path, projection
/// and generator. The encoder is frozen and kept outside the parameter store.
#[derive(Clone, Debug)]
pub struct HdrFaceModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: ToyEncoder,
    pub schedule: NoiseSchedule,
    sdfm: Sdfm,
    projection: Projection,
    raw_projection: Option<Linear>,
    placeholder: Option<ParamId>,
    generator: Generator,
}

impl HdrFaceModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let rng = |part: u64| stream(config.seed, &[purpose::INIT, 1, part]);
        let d = config.encoder.dim;
        let k = config.cond_dim;
        let sdfm = Sdfm::new(&mut store, "sdfm", config.sdfm.clone(), &mut rng(0))?;
        let projection = Projection::new(&mut store, "proj", d, k, &mut rng(1))?;
        let raw_projection = (config.condition == ConditionMode::Raw)
            .then(|| Linear::new(&mut store, "proj_raw", 2 * d, k, Init::Normal { fan_in: 2 * d, gain: 1.0 }, true, &mut rng(2)));
        let (gh, gw) = config.cond_grid()?;
        let placeholder = (config.condition == ConditionMode::Placeholder)
            .then(|| store.init("placeholder", &[gh * gw, k], Init::Normal { fan_in: 1, gain: 0.02 }, &mut rng(3)));
        let generator = Generator::new(&mut store, &config, &mut rng(4))?;
        let encoder = ToyEncoder::new(config.encoder.clone())?;
        let schedule = config.schedule()?;
        Ok(Self { config, store, encoder, schedule, sdfm, projection, raw_projection, placeholder, generator })
    }

    pub fn regime(&self) -> Regime {
        self.config.regime
    }

    pub fn codec(&self) -> &Codec {
        &self.config.codec
    }

    pub fn sdfm(&self) -> &Sdfm {
        &self.sdfm
    }

    pub fn condition_graph(&self, g: &mut Graph, p: &Bound, face: &Tensor, lr: &Tensor) -> ConditionVars {
        match self.config.condition {
            ConditionMode::Placeholder => ConditionVars { cond: p.var(self.placeholder.expect("placeholder param")), fusion: None },
            ConditionMode::Raw => {
                let (f, l) = (g.constant(face.clone()), g.constant(lr.clone()));
                let cat = g.concat(&[f, l]);
                let lin = self.raw_projection.as_ref().expect("raw projection");
                ConditionVars { cond: lin.forward(g, p, cat), fusion: None }
            }
            ConditionMode::Sdfm => {
                let (f, l) = (g.constant(face.clone()), g.constant(lr.clone()));
                let fusion = self.sdfm.forward(g, p, f, l);
                ConditionVars { cond: self.projection.forward(g, p, fusion.fused), fusion: Some(fusion) }
            }
            ConditionMode::LrOnly => {
                let l = g.constant(lr.clone());
                let n = self.sdfm.ln_lr.forward(g, p, l);
                ConditionVars { cond: self.projection.forward(g, p, n), fusion: None }
            }
            ConditionMode::FaceOnly => {
                let f = g.constant(face.clone());
                let n = self.sdfm.ln_face.forward(g, p, f);
                ConditionVars { cond: self.projection.forward(g, p, n), fusion: None }
            }
        }
    }

    /// Condition → prediction → one step → decoded image, all on the tape.
    #[allow(clippy::too_many_arguments)]
    pub fn generate_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        face: &Tensor,
        lr: &Tensor,
        z_t: &Tensor,
        aux: Option<&Tensor>,
        f: Option<f64>,
    ) -> GenerateVars {
        let cond = self.condition_graph(g, p, face, lr);
        let zt = g.constant(z_t.clone());
        let aux = aux.map(|a| g.constant(a.clone()));
        let prediction = self.generator.forward(g, p, zt, cond.cond, aux, self.schedule.fixed_t, f);
        let z_hat = onestep::one_step_graph(g, &self.schedule, zt, prediction);
        let image = self.config.codec.decode_graph(g, z_hat);
        GenerateVars { cond, prediction, z_hat, image }
    }

    pub fn restore(&self, lq: &ImageGrid, restorer: &dyn IntermediateRestorer) -> Result<ImageGrid> {
        let pipe = Pipeline {
            restorer,
            encoder: &self.encoder,
            conditioner: self,
            denoiser: self,
            codec: &self.config.codec,
            schedule: &self.schedule,
        };
        onestep::restore(lq, &pipe, self.config.inference_seed)
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

impl Conditioner for HdrFaceModel {
    fn condition(&self, face: &FeatureSequence, lr: &FeatureSequence) -> Result<FeatureSequence> {
        let want = [self.config.cond_grid().map(|(a, b)| a * b)?, self.config.encoder.dim];
        for s in [face, lr] {
            if s.tokens().shape() != want {
                return Err(Error::ShapeMismatch { op: "condition inputs", left: want.to_vec(), right: s.tokens().shape().to_vec() });
            }
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let c = self.condition_graph(&mut g, &p, face.tokens(), lr.tokens());
        FeatureSequence::new(g.value(c.cond).clone(), SourceTag::Fused)
    }
}

impl Denoiser for HdrFaceModel {
    fn predict(&self, z_t: &LatentGrid, bundle: &ConditionBundle) -> Result<LatentGrid> {
        bundle.validate(self.config.regime)?;
        let want = self.config.latent_dims()?;
        if z_t.dims() != want {
            return Err(Error::ShapeMismatch {
                op: "generator input",
                left: alloc::vec![want.0, want.1, want.2],
                right: z_t.tensor().shape().to_vec(),
            });
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let zt = g.constant(z_t.tensor().clone());
        let cond = g.constant(bundle.semantic.tokens().clone());
        let aux = bundle.aux_latent.as_ref().map(|a| g.constant(a.tensor().clone()));
        let out = self.generator.forward(&mut g, &p, zt, cond, aux, bundle.timestep, bundle.f);
        LatentGrid::from_tensor(g.value(out).clone())
    }
}

/// A trained model frozen into an intermediate restorer.
pub struct ModelRestorer<'a>(pub &'a HdrFaceModel);

impl IntermediateRestorer for ModelRestorer<'_> {
    fn restore(&self, lq: &ImageGrid) -> Result<ImageGrid> {
        self.0.restore(lq, &IdentityRestorer)
    }
}
