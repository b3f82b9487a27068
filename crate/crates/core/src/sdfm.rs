//! Structure–detail adaptive fusion of two feature sequences.
//!
//! Both streams are layer-normalized, their absolute difference is formed,
//! and two gates are learned from `[face; lr; diff]`: a channel gate from
//! token-pooled statistics and a token gate from per-token features. Their
//! outer product, clamped to `[ε, 1-ε]`, weights a convex combination of the
//! normalized streams.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::encoder::{FeatureSequence, SourceTag};
use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::nn::{Bound, Init, LayerNorm, Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pool {
    #[default]
    Mean,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdfmConfig {
    pub dim: usize,
    /// Hidden width of both gate MLPs; `0` means "same as `dim`".
    pub hidden: usize,
    pub epsilon: f64,
    pub ln_eps: f64,
    pub pool: Pool,
}

impl Default for SdfmConfig {
    fn default() -> Self {
        Self { dim: 32, hidden: 0, epsilon: 0.01, ln_eps: 1e-5, pool: Pool::Mean }
    }
}

impl SdfmConfig {
    pub fn hidden_width(&self) -> usize {
        if self.hidden == 0 {
            self.dim
        } else {
            self.hidden
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::invalid(format!("sdfm epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        if self.dim == 0 {
            return Err(Error::invalid("sdfm dim must be >= 1"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("sdfm ln_eps must be > 0"));
        }
        Ok(())
    }
}

/// Two-layer gate network with a zero-initialized output layer.
#[derive(Clone, Debug)]
pub struct GateMlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl GateMlp {
    fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let h = Linear::new(store, &format!("{name}.fc1"), input, hidden, Init::Normal { fan_in: input, gain: 1.0 }, true, rng);
        let o = Linear::new(store, &format!("{name}.fc2"), hidden, output, Init::Zeros, true, rng);
        Self { hidden: h, out: o }
    }

    fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let h = self.hidden.forward(g, p, x);
        let h = g.gelu(h);
        self.out.forward(g, p, h)
    }
}

/// Parameter handles of the fusion module; the weights live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Sdfm {
    pub config: SdfmConfig,
    pub ln_face: LayerNorm,
    pub ln_lr: LayerNorm,
    pub mlp_c: GateMlp,
    pub mlp_t: GateMlp,
}

/// Fusion gates: channel `1×d`, token `N×1`, combined `N×d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateTensor {
    pub channel: Tensor,
    pub token: Tensor,
    pub combined: Tensor,
    pub epsilon: f64,
}

/// Graph handles of one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub face: Var,
    pub lr: Var,
    pub diff: Var,
    pub channel_gate: Var,
    pub token_gate: Var,
    pub alpha: Var,
    pub fused: Var,
}

impl Sdfm {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, config: SdfmConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let hid = config.hidden_width();
        Ok(Self {
            ln_face: LayerNorm::new(store, &format!("{name}.ln_face"), d, config.ln_eps, rng),
            ln_lr: LayerNorm::new(store, &format!("{name}.ln_lr"), d, config.ln_eps, rng),
            mlp_c: GateMlp::new(store, &format!("{name}.mlp_c"), 3 * d, hid, d, rng),
            mlp_t: GateMlp::new(store, &format!("{name}.mlp_t"), 3 * d, hid, 1, rng),
            config,
        })
    }

    pub fn normalize_and_diff(&self, g: &mut Graph, p: &Bound, face: Var, lr: Var) -> (Var, Var, Var) {
        let nf = self.ln_face.forward(g, p, face);
        let nl = self.ln_lr.forward(g, p, lr);
        let d = g.sub(nf, nl);
        let diff = g.abs(d);
        (nf, nl, diff)
    }

    fn pool(&self, g: &mut Graph, x: Var) -> Var {
        match self.config.pool {
            Pool::Mean => g.mean_rows(x),
            Pool::Max => g.max_rows(x),
        }
    }

    pub fn channel_gate(&self, g: &mut Graph, p: &Bound, nf: Var, nl: Var, diff: Var) -> Var {
        let pf = self.pool(g, nf);
        let pl = self.pool(g, nl);
        let pd = self.pool(g, diff);
        let cat = g.concat(&[pf, pl, pd]);
        let logits = self.mlp_c.forward(g, p, cat);
        g.sigmoid(logits)
    }

    pub fn token_gate(&self, g: &mut Graph, p: &Bound, nf: Var, nl: Var, diff: Var) -> Var {
        let cat = g.concat(&[nf, nl, diff]);
        let logits = self.mlp_t.forward(g, p, cat);
        g.sigmoid(logits)
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, face: Var, lr: Var) -> FusionVars {
        let (nf, nl, diff) = self.normalize_and_diff(g, p, face, lr);
        let channel_gate = self.channel_gate(g, p, nf, nl, diff);
        let token_gate = self.token_gate(g, p, nf, nl, diff);
        let prod = g.outer(token_gate, channel_gate);
        let eps = self.config.epsilon;
        let alpha = g.clamp(prod, eps, 1.0 - eps);
        // alpha * nf + (1 - alpha) * nl == nl + alpha * (nf - nl)
        let spread = g.sub(nf, nl);
        let weighted = g.mul(alpha, spread);
        let fused = g.add(nl, weighted);
        FusionVars { face: nf, lr: nl, diff, channel_gate, token_gate, alpha, fused }
    }

    fn check_pair(&self, face: &FeatureSequence, lr: &FeatureSequence) -> Result<()> {
        if face.tokens().shape() != lr.tokens().shape() {
            return Err(Error::ShapeMismatch {
                op: "sdfm inputs",
                left: face.tokens().shape().to_vec(),
                right: lr.tokens().shape().to_vec(),
            });
        }
        if face.dim() != self.config.dim {
            return Err(Error::ShapeMismatch {
                op: "sdfm width",
                left: vec![self.config.dim],
                right: vec![face.dim()],
            });
        }
        Ok(())
    }

    /// Normalized streams and their absolute difference.
    pub fn normalized(&self, store: &ParamStore, face: &FeatureSequence, lr: &FeatureSequence) -> Result<(Tensor, Tensor, Tensor)> {
        self.check_pair(face, lr)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (f, l) = (g.constant(face.tokens().clone()), g.constant(lr.tokens().clone()));
        let (nf, nl, d) = self.normalize_and_diff(&mut g, &p, f, l);
        Ok((g.value(nf).clone(), g.value(nl).clone(), g.value(d).clone()))
    }

    /// Fused sequence and the gates that produced it.
    pub fn fuse(&self, store: &ParamStore, face: &FeatureSequence, lr: &FeatureSequence) -> Result<(FeatureSequence, GateTensor)> {
        self.check_pair(face, lr)?;
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let (f, l) = (g.constant(face.tokens().clone()), g.constant(lr.tokens().clone()));
        let v = self.forward(&mut g, &p, f, l);
        let gates = GateTensor {
            channel: g.value(v.channel_gate).clone(),
            token: g.value(v.token_gate).clone(),
            combined: g.value(v.alpha).clone(),
            epsilon: self.config.epsilon,
        };
        Ok((FeatureSequence::new(g.value(v.fused).clone(), SourceTag::Fused)?, gates))
    }
}

/// "hot" colormap: black → red → yellow → white. Channel sum increases with `v`.
fn hot(v: f64) -> [f64; 3] {
    [(3.0 * v).clamp(0.0, 1.0), (3.0 * v - 1.0).clamp(0.0, 1.0), (3.0 * v - 2.0).clamp(0.0, 1.0)]
}

/// Per-token mean of the combined gate on a `grid_h × grid_w` grid,
/// min-max normalized and colormapped. A constant gate renders as the
/// colormap midpoint.
pub fn gate_heatmap(gate: &GateTensor, grid_shape: (usize, usize)) -> Result<ImageGrid> {
    let (gh, gw) = grid_shape;
    let d = gate.combined.last_dim();
    let n = gate.combined.rows();
    if n != gh * gw || n == 0 {
        return Err(Error::invalid(format!("gate has {n} tokens but grid is {gh}×{gw}")));
    }
    let means: Vec<f64> = gate.combined.data().chunks(d).map(|c| c.iter().sum::<f64>() / d as f64).collect();
    let lo = means.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(ImageGrid::from_fn(gh, gw, 3, |y, x, c| {
        let v = if span > 1e-12 { (means[y * gw + x] - lo) / span } else { 0.5 };
        hot(v)[c]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn setup(d: usize) -> (ParamStore, Sdfm) {
        let mut store = ParamStore::new();
        let sdfm = Sdfm::new(&mut store, "sdfm", SdfmConfig { dim: d, ..Default::default() }, &mut stream(0, &[])).unwrap();
        (store, sdfm)
    }

    fn seq(seed: u64, n: usize, d: usize) -> FeatureSequence {
        let mut rng = stream(seed, &[]);
        FeatureSequence::new(Tensor::from_fn(&[n, d], |_| rng.random_range(-2.0..2.0)), SourceTag::Lr).unwrap()
    }

    #[test]
    fn rejects_bad_epsilon() {
        let mut store = ParamStore::new();
        for eps in [0.0, 0.5, -0.1] {
            let cfg = SdfmConfig { epsilon: eps, ..Default::default() };
            assert!(Sdfm::new(&mut store, "s", cfg, &mut stream(0, &[])).is_err());
        }
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let (store, sdfm) = setup(4);
        assert!(sdfm.fuse(&store, &seq(1, 3, 4), &seq(2, 2, 4)).is_err());
        assert!(sdfm.fuse(&store, &seq(1, 3, 5), &seq(2, 3, 5)).is_err());
    }

    #[test]
    fn zero_init_gives_half_gates() {
        let (store, sdfm) = setup(4);
        let (_, gate) = sdfm.fuse(&store, &seq(1, 3, 4), &seq(2, 3, 4)).unwrap();
        assert!(gate.channel.data().iter().all(|&v| v == 0.5));
        assert!(gate.token.data().iter().all(|&v| v == 0.5));
        assert!(gate.combined.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn equal_inputs_give_zero_diff_and_face_output() {
        let (store, sdfm) = setup(5);
        let a = seq(3, 4, 5);
        let (nf, _, diff) = sdfm.normalized(&store, &a, &a).unwrap();
        assert!(diff.data().iter().all(|&v| v == 0.0));
        let (fused, _) = sdfm.fuse(&store, &a, &a).unwrap();
        assert!(fused.tokens().max_abs_diff(&nf) < 1e-12);
    }

    #[test]
    fn normalized_rows_are_standardized() {
        let (store, sdfm) = setup(8);
        let (nf, _, _) = sdfm.normalized(&store, &seq(4, 6, 8), &seq(5, 6, 8)).unwrap();
        for row in nf.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-9);
            assert!((var - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn heatmap_rejects_grid_mismatch() {
        let gate = GateTensor {
            channel: Tensor::full(&[1, 2], 0.5),
            token: Tensor::full(&[4, 1], 0.5),
            combined: Tensor::full(&[4, 2], 0.25),
            epsilon: 0.01,
        };
        assert!(gate_heatmap(&gate, (3, 1)).is_err());
        let img = gate_heatmap(&gate, (2, 2)).unwrap();
        let mid = hot(0.5);
        assert!((0..4).all(|i| (0..3).all(|c| img.get(i / 2, i % 2, c) == mid[c])));
    }
}
