use std::time::Instant;

use hdrface_core::encoder::{FeatureSequence, SourceTag};
use hdrface_core::nn::ParamStore;
use hdrface_core::rng::{normal_vec, stream};
use hdrface_core::sdfm::{gate_heatmap, GateTensor, Sdfm, SdfmConfig};
use hdrface_core::Tensor;
use proptest::prelude::*;
use rand::Rng;

fn randn(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = normal_vec(&mut stream(seed, &[]), n).into_iter().map(|v| v * scale).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn seq(t: Tensor, source: SourceTag) -> FeatureSequence {
    FeatureSequence::new(t, source).unwrap()
}

/// Module with every parameter redrawn from N(0, scale²); layer-norm gains
/// are kept near one so the oracle also exercises the affine part.
fn random_module(seed: u64, d: usize, scale: f64) -> (ParamStore, Sdfm) {
    let mut store = ParamStore::new();
    let sdfm = Sdfm::new(&mut store, "sdfm", SdfmConfig { dim: d, ..Default::default() }, &mut stream(seed, &[0])).unwrap();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let t = store.by_name_mut(name).unwrap();
        let noise = randn(seed ^ (i as u64 + 1) << 20, t.shape(), scale);
        for (v, z) in t.data_mut().iter_mut().zip(noise.data()) {
            *v = if name.ends_with("gamma") { 1.0 + 0.3 * z } else { *z };
        }
    }
    (store, sdfm)
}

struct Oracle<'a> {
    store: &'a ParamStore,
    eps: f64,
    ln_eps: f64,
}

impl Oracle<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.store.by_name(name).unwrap().data()
    }

    fn layer_norm(&self, x: &[Vec<f64>], prefix: &str) -> Vec<Vec<f64>> {
        let gamma = self.p(&format!("{prefix}.gamma"));
        let beta = self.p(&format!("{prefix}.beta"));
        x.iter()
            .map(|row| {
                let d = row.len() as f64;
                let mean = row.iter().sum::<f64>() / d;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
                row.iter().enumerate().map(|(j, v)| (v - mean) / (var + self.ln_eps).sqrt() * gamma[j] + beta[j]).collect()
            })
            .collect()
    }

    fn linear(&self, x: &[f64], prefix: &str, out: usize) -> Vec<f64> {
        let w = self.p(&format!("{prefix}.weight"));
        let b = self.p(&format!("{prefix}.bias"));
        let mut y = b.to_vec();
        for (i, xi) in x.iter().enumerate() {
            for o in 0..out {
                y[o] += xi * w[i * out + o];
            }
        }
        y
    }

    fn mlp(&self, x: &[f64], prefix: &str, hidden: usize, out: usize) -> Vec<f64> {
        let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
        let h: Vec<f64> = self.linear(x, &format!("{prefix}.fc1"), hidden).into_iter().map(gelu).collect();
        self.linear(&h, &format!("{prefix}.fc2"), out)
    }

    fn fuse(&self, face: &[Vec<f64>], lr: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, d) = (face.len(), face[0].len());
        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        let nf = self.layer_norm(face, "sdfm.ln_face");
        let nl = self.layer_norm(lr, "sdfm.ln_lr");
        let diff: Vec<Vec<f64>> = (0..n).map(|i| (0..d).map(|j| (nf[i][j] - nl[i][j]).abs()).collect()).collect();
        let mut pooled = Vec::with_capacity(3 * d);
        for src in [&nf, &nl, &diff] {
            for j in 0..d {
                pooled.push((0..n).map(|i| src[i][j]).sum::<f64>() / n as f64);
            }
        }
        let alpha_c: Vec<f64> = self.mlp(&pooled, "sdfm.mlp_c", d, d).into_iter().map(sigmoid).collect();
        let mut out = vec![vec![0.0; d]; n];
        for i in 0..n {
            let cat: Vec<f64> = nf[i].iter().chain(&nl[i]).chain(&diff[i]).copied().collect();
            let alpha_t = sigmoid(self.mlp(&cat, "sdfm.mlp_t", d, 1)[0]);
            for j in 0..d {
                let a = (alpha_t * alpha_c[j]).clamp(self.eps, 1.0 - self.eps);
                out[i][j] = a * nf[i][j] + (1.0 - a) * nl[i][j];
            }
        }
        out
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.data().chunks(t.last_dim()).map(<[f64]>::to_vec).collect()
}

#[test]
fn fuse_matches_scalar_loop_oracle() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for case in 0..1000u64 {
        let mut rng = stream(case, &[99]);
        let n = rng.random_range(1..=8);
        let d = rng.random_range(1..=16);
        let scale = [0.3, 1.0, 3.0][case as usize % 3];
        let (store, sdfm) = random_module(case, d, scale);
        let face = randn(case * 2 + 1, &[n, d], 2.0);
        let lr = randn(case * 2 + 2, &[n, d], 2.0);
        let (fused, _) = sdfm.fuse(&store, &seq(face.clone(), SourceTag::FaceMid), &seq(lr.clone(), SourceTag::Lr)).unwrap();
        let oracle = Oracle { store: &store, eps: sdfm.config.epsilon, ln_eps: sdfm.config.ln_eps };
        let want = oracle.fuse(&rows(&face), &rows(&lr));
        for (a, b) in fused.tokens().data().iter().zip(want.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-6, "max abs error {worst}");
    assert!(start.elapsed().as_secs_f64() < 10.0, "took {:?}", start.elapsed());
}

#[test]
fn diff_matches_loop_oracle() {
    let (store, sdfm) = random_module(5, 8, 1.0);
    let face = randn(1, &[4, 8], 1.5);
    let lr = randn(2, &[4, 8], 1.5);
    let (_, _, diff) = sdfm.normalized(&store, &seq(face.clone(), SourceTag::FaceMid), &seq(lr.clone(), SourceTag::Lr)).unwrap();
    let oracle = Oracle { store: &store, eps: 0.01, ln_eps: sdfm.config.ln_eps };
    let nf = oracle.layer_norm(&rows(&face), "sdfm.ln_face");
    let nl = oracle.layer_norm(&rows(&lr), "sdfm.ln_lr");
    for i in 0..4 {
        for j in 0..8 {
            assert!((diff.data()[i * 8 + j] - (nf[i][j] - nl[i][j]).abs()).abs() < 1e-6);
        }
    }
}

/// One hidden unit per gate MLP with hand-picked weights on 2 tokens × 2 channels.
#[test]
fn hand_computed_gates() {
    let mut store = ParamStore::new();
    let cfg = SdfmConfig { dim: 2, hidden: 1, ..Default::default() };
    let sdfm = Sdfm::new(&mut store, "sdfm", cfg, &mut stream(0, &[])).unwrap();
    let set = |s: &mut ParamStore, name: &str, v: &[f64]| s.by_name_mut(name).unwrap().data_mut().copy_from_slice(v);
    set(&mut store, "sdfm.mlp_c.fc1.weight", &[0.5, -0.25, 1.0, 0.0, 0.75, -0.5]);
    set(&mut store, "sdfm.mlp_c.fc1.bias", &[0.1]);
    set(&mut store, "sdfm.mlp_c.fc2.weight", &[2.0, -1.0]);
    set(&mut store, "sdfm.mlp_c.fc2.bias", &[0.2, 0.3]);
    set(&mut store, "sdfm.mlp_t.fc1.weight", &[1.0, 0.5, -0.5, 0.25, 0.0, 1.0]);
    set(&mut store, "sdfm.mlp_t.fc1.bias", &[-0.2]);
    set(&mut store, "sdfm.mlp_t.fc2.weight", &[1.5]);
    set(&mut store, "sdfm.mlp_t.fc2.bias", &[-0.1]);

    // Every row differs by 2, so LN maps it to (±1, ∓1) up to the epsilon.
    let face = Tensor::new(vec![2, 2], vec![3.0, 1.0, 0.0, 2.0]).unwrap();
    let lr = Tensor::new(vec![2, 2], vec![1.0, 3.0, 5.0, 3.0]).unwrap();
    let (_, gates) = sdfm.fuse(&store, &seq(face, SourceTag::FaceMid), &seq(lr, SourceTag::Lr)).unwrap();

    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    let nf = [[s, -s], [-s, s]];
    let nl = [[-s, s], [s, -s]];
    let diff = [[2.0 * s, 2.0 * s], [2.0 * s, 2.0 * s]];
    let gelu = |v: f64| 0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh());
    let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());

    let pooled = [0.0, 0.0, 0.0, 0.0, 2.0 * s, 2.0 * s];
    let w1 = [0.5, -0.25, 1.0, 0.0, 0.75, -0.5];
    let h = gelu(pooled.iter().zip(w1).map(|(x, w)| x * w).sum::<f64>() + 0.1);
    let want_c = [sigmoid(2.0 * h + 0.2), sigmoid(-h + 0.3)];
    for j in 0..2 {
        assert!((gates.channel.data()[j] - want_c[j]).abs() < 1e-6);
    }

    let wt = [1.0, 0.5, -0.5, 0.25, 0.0, 1.0];
    for i in 0..2 {
        let x = [nf[i][0], nf[i][1], nl[i][0], nl[i][1], diff[i][0], diff[i][1]];
        let h = gelu(x.iter().zip(wt).map(|(x, w)| x * w).sum::<f64>() - 0.2);
        let want_t = sigmoid(1.5 * h - 0.1);
        assert!((gates.token.data()[i] - want_t).abs() < 1e-6);
        for j in 0..2 {
            assert!((gates.combined.data()[i * 2 + j] - (want_t * want_c[j]).clamp(0.01, 0.99)).abs() < 1e-6);
        }
    }
}

#[test]
fn channel_gate_is_permutation_invariant_and_token_gate_equivariant() {
    let (store, sdfm) = random_module(11, 6, 1.0);
    let (n, d) = (5, 6);
    let face = randn(3, &[n, d], 1.0);
    let lr = randn(4, &[n, d], 1.0);
    let perm = [3, 0, 4, 1, 2];
    let permute = |t: &Tensor| {
        let r = rows(t);
        Tensor::new(vec![n, d], perm.iter().flat_map(|&i| r[i].clone()).collect()).unwrap()
    };
    let (fa, ga) = sdfm.fuse(&store, &seq(face.clone(), SourceTag::FaceMid), &seq(lr.clone(), SourceTag::Lr)).unwrap();
    let (fb, gb) = sdfm.fuse(&store, &seq(permute(&face), SourceTag::FaceMid), &seq(permute(&lr), SourceTag::Lr)).unwrap();
    assert!(ga.channel.max_abs_diff(&gb.channel) < 1e-12);
    for (k, &i) in perm.iter().enumerate() {
        assert!((ga.token.data()[i] - gb.token.data()[k]).abs() < 1e-12);
    }
    assert!(permute(fa.tokens()).max_abs_diff(fb.tokens()) < 1e-12);
}

#[test]
fn duplicated_token_gets_duplicated_gate() {
    let (store, sdfm) = random_module(12, 4, 1.0);
    let mut face = rows(&randn(5, &[3, 4], 1.0));
    let mut lr = rows(&randn(6, &[3, 4], 1.0));
    face[2] = face[0].clone();
    lr[2] = lr[0].clone();
    let flat = |r: Vec<Vec<f64>>| Tensor::new(vec![3, 4], r.concat()).unwrap();
    let (_, gates) = sdfm.fuse(&store, &seq(flat(face), SourceTag::FaceMid), &seq(flat(lr), SourceTag::Lr)).unwrap();
    assert_eq!(gates.token.data()[0], gates.token.data()[2]);
}

#[test]
fn saturated_gates_hit_the_upper_clamp() {
    let mut store = ParamStore::new();
    let sdfm = Sdfm::new(&mut store, "sdfm", SdfmConfig { dim: 4, ..Default::default() }, &mut stream(0, &[])).unwrap();
    for name in ["sdfm.mlp_c.fc2.bias", "sdfm.mlp_t.fc2.bias"] {
        store.by_name_mut(name).unwrap().data_mut().fill(50.0);
    }
    let face = randn(1, &[3, 4], 1.0);
    let lr = randn(2, &[3, 4], 1.0);
    let (fa, fb) = (seq(face, SourceTag::FaceMid), seq(lr, SourceTag::Lr));
    let (fused, gates) = sdfm.fuse(&store, &fa, &fb).unwrap();
    let (nf, nl, _) = sdfm.normalized(&store, &fa, &fb).unwrap();
    assert!(gates.combined.data().iter().all(|&a| a == 0.99));
    for i in 0..12 {
        let want = 0.99 * nf.data()[i] + 0.01 * nl.data()[i];
        assert!((fused.tokens().data()[i] - want).abs() < 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn gates_in_range_and_fused_in_hull(seed in any::<u64>(), n in 1usize..=8, d in 1usize..=16, scale in 0.1f64..20.0) {
        let (store, sdfm) = random_module(seed, d, scale);
        let face = randn(seed.wrapping_add(1), &[n, d], scale);
        let lr = randn(seed.wrapping_add(2), &[n, d], scale);
        let (fa, fb) = (seq(face, SourceTag::FaceMid), seq(lr, SourceTag::Lr));
        let (fused, gates) = sdfm.fuse(&store, &fa, &fb).unwrap();
        let (nf, nl, _) = sdfm.normalized(&store, &fa, &fb).unwrap();
        let eps = sdfm.config.epsilon;
        for &a in gates.combined.data() {
            prop_assert!(a >= eps && a <= 1.0 - eps, "gate {a}");
        }
        for ((&v, &x), &y) in fused.tokens().data().iter().zip(nf.data()).zip(nl.data()) {
            let tol = 1e-12 * (1.0 + x.abs().max(y.abs()));
            prop_assert!(v >= x.min(y) - tol && v <= x.max(y) + tol, "{v} outside [{x}, {y}]");
        }
    }
}

fn gate_from_tokens(token_means: &[f64], d: usize) -> GateTensor {
    let n = token_means.len();
    GateTensor {
        channel: Tensor::full(&[1, d], 1.0),
        token: Tensor::new(vec![n, 1], token_means.to_vec()).unwrap(),
        combined: Tensor::from_fn(&[n, d], |i| token_means[i / d]),
        epsilon: 0.01,
    }
}

fn intensity(img: &hdrface_core::ImageGrid, y: usize, x: usize) -> f64 {
    (0..3).map(|c| img.get(y, x, c)).sum()
}

#[test]
fn heatmap_cases() {
    let uniform = gate_heatmap(&gate_from_tokens(&[0.3; 16], 4), (4, 4)).unwrap();
    let first = [uniform.get(0, 0, 0), uniform.get(0, 0, 1), uniform.get(0, 0, 2)];
    assert!(first.iter().sum::<f64>() > 0.0 && first.iter().sum::<f64>() < 3.0);
    assert!((0..4).all(|y| (0..4).all(|x| (0..3).all(|c| uniform.get(y, x, c) == first[c]))));

    let mut single = [0.01; 16];
    single[6] = 0.99;
    let img = gate_heatmap(&gate_from_tokens(&single, 2), (4, 4)).unwrap();
    let hot: Vec<(usize, usize)> = (0..16).map(|i| (i / 4, i % 4)).filter(|&(y, x)| intensity(&img, y, x) > 0.0).collect();
    assert_eq!(hot, vec![(1, 2)]);

    for seed in 0..20 {
        let mut rng = stream(seed, &[]);
        let d = 3;
        let combined = Tensor::from_fn(&[12, d], |_| rng.random_range(0.01..0.99));
        let means: Vec<f64> = combined.data().chunks(d).map(|c| c.iter().sum::<f64>() / d as f64).collect();
        let gate = GateTensor { channel: Tensor::full(&[1, d], 1.0), token: Tensor::full(&[12, 1], 1.0), combined, epsilon: 0.01 };
        let img = gate_heatmap(&gate, (3, 4)).unwrap();
        let argmax_token = (0..12).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        let argmax_cell = (0..12).max_by(|&a, &b| intensity(&img, a / 4, a % 4).total_cmp(&intensity(&img, b / 4, b % 4))).unwrap();
        assert_eq!(argmax_token, argmax_cell);
    }
}
