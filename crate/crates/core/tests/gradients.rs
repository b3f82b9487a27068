//! Finite-difference checks of the trainable pieces and every loss term,
//! each over 20 random points.

use hdrface_core::autodiff::{Graph, Var};
use hdrface_core::encoder::Projection;
use hdrface_core::gradcheck::{check_inputs, check_params, GradCheckReport};
use hdrface_core::losses::{
    gan_relativistic_avg_graph, gan_relativistic_descent_graph, gan_standard_graph, identity_loss_graph, mse_graph,
    perceptual_loss_sd_graph, MsePerceptual, ToyIdentity, ToyPerceptual,
};
use hdrface_core::nn::ParamStore;
use hdrface_core::rng::{normal_vec, stream};
use hdrface_core::sdfm::{Sdfm, SdfmConfig};
use hdrface_core::Tensor;

const POINTS: u64 = 20;
const H: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TOL: f64 = 1e-4;

fn randn(seed: u64, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), normal_vec(&mut stream(seed, &[]), n).into_iter().map(|v| v * scale).collect()).unwrap()
}

fn uniform01(seed: u64, shape: &[usize]) -> Tensor {
    randn(seed, shape, 1.0).map(|v| 0.5 + 0.2 * v.tanh())
}

fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let w = g.constant(randn(seed, g.shape(x), 1.0));
    let p = g.mul(x, w);
    g.sum(p)
}

fn assert_ok(name: &str, point: u64, r: GradCheckReport) {
    assert!(r.checked > 0, "{name}: nothing checked");
    assert!(r.max_rel_error < TOL, "{name} point {point}: rel err {} (abs {})", r.max_rel_error, r.max_abs_error);
}

fn random_sdfm(seed: u64) -> (ParamStore, Sdfm) {
    let mut store = ParamStore::new();
    let sdfm = Sdfm::new(&mut store, "sdfm", SdfmConfig { dim: 4, hidden: 5, ..Default::default() }, &mut stream(seed, &[])).unwrap();
    let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
    for (i, name) in names.iter().enumerate() {
        let t = store.by_name_mut(name).unwrap();
        let noise = randn(seed * 1000 + i as u64, t.shape(), 0.5);
        for (v, z) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += z;
        }
    }
    (store, sdfm)
}

#[test]
fn sdfm_parameters_and_inputs() {
    for point in 0..POINTS {
        let (store, sdfm) = random_sdfm(point);
        let face = randn(point + 100, &[3, 4], 1.0);
        let lr = randn(point + 200, &[3, 4], 1.0);
        let r = check_params(&store, H, FLOOR, |g, p| {
            let (f, l) = (g.constant(face.clone()), g.constant(lr.clone()));
            let v = sdfm.forward(g, p, f, l);
            project(g, v.fused, point)
        });
        assert_ok("sdfm params", point, r);
        let r = check_inputs(&[face.clone(), lr.clone()], H, FLOOR, |g, v| {
            let p = store.bind(g, false);
            let out = sdfm.forward(g, &p, v[0], v[1]);
            project(g, out.fused, point)
        });
        assert_ok("sdfm inputs", point, r);
    }
}

#[test]
fn projection() {
    for point in 0..POINTS {
        let mut store = ParamStore::new();
        let proj = Projection::new(&mut store, "proj", 6, 5, &mut stream(point, &[])).unwrap();
        let x = randn(point + 50, &[4, 6], 1.0);
        let r = check_params(&store, H, FLOOR, |g, p| {
            let xv = g.constant(x.clone());
            let y = proj.forward(g, p, xv);
            project(g, y, point)
        });
        assert_ok("projection params", point, r);
        let r = check_inputs(&[x.clone()], H, FLOOR, |g, v| {
            let p = store.bind(g, false);
            let y = proj.forward(g, &p, v[0]);
            project(g, y, point)
        });
        assert_ok("projection input", point, r);
    }
}

#[test]
fn reconstruction_mse() {
    for point in 0..POINTS {
        let r = check_inputs(&[randn(point, &[4, 4, 3], 1.0), randn(point + 77, &[4, 4, 3], 1.0)], H, FLOOR, |g, v| {
            mse_graph(g, v[0], v[1])
        });
        assert_ok("mse", point, r);
    }
}

#[test]
fn perceptual_with_edge_term() {
    let toy = ToyPerceptual::default();
    for point in 0..POINTS {
        let inputs = [uniform01(point, &[6, 6, 3]), uniform01(point + 500, &[6, 6, 3])];
        let r = check_inputs(&inputs, H, FLOOR, |g, v| perceptual_loss_sd_graph(g, v[0], v[1], &MsePerceptual));
        assert_ok("perceptual (mse backend)", point, r);
        let r = check_inputs(&inputs, H, FLOOR, |g, v| perceptual_loss_sd_graph(g, v[0], v[1], &toy));
        assert_ok("perceptual (toy backend)", point, r);
    }
}

#[test]
fn identity() {
    let backend = ToyIdentity::default();
    for point in 0..POINTS {
        let inputs = [uniform01(point, &[8, 8, 3]), uniform01(point + 900, &[8, 8, 3])];
        let r = check_inputs(&inputs, H, FLOOR, |g, v| identity_loss_graph(g, v[0], v[1], &backend));
        assert_ok("identity", point, r);
    }
}

#[test]
fn adversarial_terms() {
    type GanFn = fn(&mut Graph, Var, Var) -> hdrface_core::losses::GanVars;
    let forms: [(&str, GanFn); 3] = [
        ("standard", gan_standard_graph),
        ("relativistic", gan_relativistic_avg_graph),
        ("relativistic descent", gan_relativistic_descent_graph),
    ];
    for point in 0..POINTS {
        let logits = [randn(point, &[6, 1], 2.0), randn(point + 300, &[6, 1], 2.0)];
        for (name, f) in forms {
            let r = check_inputs(&logits, H, FLOOR, |g, v| f(g, v[0], v[1]).g_loss);
            assert_ok(&format!("{name} generator"), point, r);
            let r = check_inputs(&logits, H, FLOOR, |g, v| f(g, v[0], v[1]).d_loss);
            assert_ok(&format!("{name} discriminator"), point, r);
        }
    }
}
