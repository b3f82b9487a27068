//! Token-sequence representations of images and their projection into the
//! generator's condition space.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::degrade;
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{Bound, Init, Linear, ParamStore};
use crate::rng::{purpose, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SourceTag {
    FaceMid,
    Lr,
    Fused,
}

/// `N × d` feature tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSequence {
    tokens: Tensor,
    pub source: SourceTag,
}

impl FeatureSequence {
    pub fn new(tokens: Tensor, source: SourceTag) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.shape()[0] == 0 || tokens.shape()[1] == 0 {
            return Err(Error::invalid(format!(
                "feature tokens must be a non-empty N×d matrix, got {:?}",
                tokens.shape()
            )));
        }
        if !tokens.all_finite() {
            return Err(Error::NonFinite("feature tokens".into()));
        }
        Ok(Self { tokens, source })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }

    pub fn into_tokens(self) -> Tensor {
        self.tokens
    }
}

/// A frozen feature extractor producing `N × d` tokens from an image.
pub trait EncoderBackend {
    fn name(&self) -> &str;
    fn output_dim(&self) -> usize;
    fn patch_size(&self) -> usize;
    /// Resolution both encoder streams are resized to before encoding.
    fn native_resolution(&self) -> (usize, usize);
    /// Raw forward pass; callers go through [`encode`], which validates the input.
    fn forward(&self, img: &ImageGrid) -> Result<Tensor>;

    fn token_count(&self, height: usize, width: usize) -> Result<usize> {
        let p = self.patch_size();
        if height % p != 0 || width % p != 0 {
            let ph = (p - height % p) % p;
            let pw = (p - width % p) % p;
            return Err(Error::invalid(format!(
                "{height}×{width} is not divisible by patch size {p}; pad by {ph} rows and {pw} columns"
            )));
        }
        Ok((height / p) * (width / p))
    }
}

pub fn encode(img: &ImageGrid, backend: &dyn EncoderBackend, source: SourceTag) -> Result<FeatureSequence> {
    let n = backend.token_count(img.height(), img.width())?;
    let tokens = backend.forward(img)?;
    if tokens.shape() != [n, backend.output_dim()] {
        return Err(Error::ShapeMismatch {
            op: "encoder output",
            left: vec![n, backend.output_dim()],
            right: tokens.shape().to_vec(),
        });
    }
    FeatureSequence::new(tokens, source)
}

/// Resizes to the backend's native resolution, then encodes, so both streams
/// share the same token count.
pub fn encode_native(img: &ImageGrid, backend: &dyn EncoderBackend, source: SourceTag) -> Result<FeatureSequence> {
    let (h, w) = backend.native_resolution();
    let resized = degrade::resize(img, h, w)?;
    encode(&resized, backend, source)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyEncoderConfig {
    pub patch: usize,
    pub dim: usize,
    pub mixing_layers: usize,
    pub channels: usize,
    pub resolution: (usize, usize),
    pub seed: u64,
}

impl Default for ToyEncoderConfig {
    fn default() -> Self {
        Self { patch: 8, dim: 32, mixing_layers: 2, channels: 3, resolution: (64, 64), seed: 0x00D1_0u64 }
    }
}

/// Patchify → linear embed → residual per-token mixing layers.
///
/// Weights are drawn once from the config seed and never trained. Mixing is
/// per-token, so changing one patch changes exactly one output row.
#[derive(Clone, Debug)]
pub struct ToyEncoder {
    config: ToyEncoderConfig,
    store: ParamStore,
    embed: Linear,
    mixers: Vec<(Linear, Linear)>,
}

impl ToyEncoder {
    pub fn new(config: ToyEncoderConfig) -> Result<Self> {
        if config.patch == 0 || config.dim == 0 || config.channels == 0 {
            return Err(Error::invalid("toy encoder patch, dim and channels must be positive"));
        }
        let mut rng = stream(config.seed, &[purpose::INIT]);
        let mut store = ParamStore::new();
        let fan_in = config.patch * config.patch * config.channels;
        let embed = Linear::new(&mut store, "encoder.embed", fan_in, config.dim, Init::Normal { fan_in, gain: 1.0 }, true, &mut rng);
        let mixers = (0..config.mixing_layers)
            .map(|i| {
                let a = Linear::new(
                    &mut store,
                    &format!("encoder.mix{i}.in"),
                    config.dim,
                    config.dim,
                    Init::Normal { fan_in: config.dim, gain: 1.0 },
                    true,
                    &mut rng,
                );
                let b = Linear::new(
                    &mut store,
                    &format!("encoder.mix{i}.out"),
                    config.dim,
                    config.dim,
                    Init::Normal { fan_in: config.dim, gain: 0.5 },
                    true,
                    &mut rng,
                );
                (a, b)
            })
            .collect();
        Ok(Self { config, store, embed, mixers })
    }

    pub fn config(&self) -> &ToyEncoderConfig {
        &self.config
    }

    fn build(&self, g: &mut Graph, p: &Bound, img: Var) -> Var {
        let pch = self.config.patch;
        let u = g.pixel_unshuffle(img, pch);
        let s = g.shape(u).to_vec();
        let tokens = g.reshape(u, &[s[0] * s[1], s[2]]);
        let mut x = self.embed.forward(g, p, tokens);
        for (a, b) in &self.mixers {
            let hdn = a.forward(g, p, x);
            let hdn = g.gelu(hdn);
            let delta = b.forward(g, p, hdn);
            x = g.add(x, delta);
        }
        x
    }
}

impl EncoderBackend for ToyEncoder {
    fn name(&self) -> &str {
        "toy"
    }

    fn output_dim(&self) -> usize {
        self.config.dim
    }

    fn patch_size(&self) -> usize {
        self.config.patch
    }

    fn native_resolution(&self) -> (usize, usize) {
        self.config.resolution
    }

    fn forward(&self, img: &ImageGrid) -> Result<Tensor> {
        if img.channels() != self.config.channels {
            return Err(Error::invalid(format!(
                "toy encoder expects {} channels, got {}",
                self.config.channels,
                img.channels()
            )));
        }
        let mut g = Graph::new();
        let p = self.store.bind(&mut g, false);
        let x = g.constant(img.tensor().clone());
        let out = self.build(&mut g, &p, x);
        Ok(g.value(out).clone())
    }
}

/// Backend selection string: `toy` or `external:<path>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendSpec {
    Toy,
    External(String),
}

impl BackendSpec {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            _ => match s.strip_prefix("external:") {
                Some(path) if !path.is_empty() => Ok(Self::External(path.into())),
                _ => Err(Error::invalid(format!("unknown encoder backend `{s}` (expected `toy` or `external:<path>`)"))),
            },
        }
    }
}

/// Linear map `φ` from fused features to the generator's condition width.
#[derive(Clone, Debug)]
pub struct Projection {
    pub linear: Linear,
}

impl Projection {
    /// Identity-initialized when square, scaled-normal otherwise.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("projection dims must be >= 1"));
        }
        let init = if in_dim == out_dim { Init::Identity } else { Init::Normal { fan_in: in_dim, gain: 1.0 } };
        Ok(Self { linear: Linear::new(store, name, in_dim, out_dim, init, true, rng) })
    }

    pub fn in_dim(&self) -> usize {
        self.linear.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.linear.out_dim
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        self.linear.forward(g, p, x)
    }
}

/// `C = φ(f)` outside of any training graph.
pub fn project(f: &FeatureSequence, projection: &Projection, store: &ParamStore) -> Result<FeatureSequence> {
    if f.dim() != projection.in_dim() {
        return Err(Error::ShapeMismatch {
            op: "project",
            left: vec![f.num_tokens(), f.dim()],
            right: vec![projection.in_dim(), projection.out_dim()],
        });
    }
    let mut g = Graph::new();
    let p = store.bind(&mut g, false);
    let x = g.constant(f.tokens().clone());
    let y = projection.forward(&mut g, &p, x);
    FeatureSequence::new(g.value(y).clone(), f.source)
}
