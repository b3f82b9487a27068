use hdrface_core::autodiff::{Graph, Var};
use hdrface_core::degrade::{add_gaussian_noise, degrade, downsample, gaussian_blur, DegradationRecipe, Lossless};
use hdrface_core::encoder::{encode, SourceTag, ToyEncoder, ToyEncoderConfig};
use hdrface_core::eval::{identity_degree, psnr};
use hdrface_core::losses::{
    gan_standard, identity_loss, perceptual_loss_sd, reconstruction_loss, sobel, sobel_graph, IdentityBackend, MsePerceptual,
    ToyIdentity,
};
use hdrface_core::rng::stream;
use hdrface_core::synth::toy_face;
use hdrface_core::{ImageGrid, Tensor};
use rand::Rng;

fn random_image(seed: u64, h: usize, w: usize, c: usize) -> ImageGrid {
    let mut rng = stream(seed, &[]);
    ImageGrid::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
}

#[test]
fn blur_of_impulse_is_the_sampled_gaussian() {
    let mut img = ImageGrid::filled(9, 9, 1, 0.0);
    img.set(4, 4, 0, 1.0);
    let out = gaussian_blur(&img, 1.0).unwrap();
    let taps: Vec<f64> = (-3..=3).map(|d: i32| (-(d * d) as f64 / 2.0).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let src = |y: i32, x: i32| if (0..9).contains(&y) && (0..9).contains(&x) { img.get(y as usize, x as usize, 0) } else { 0.0 };
    for y in 0..9i32 {
        for x in 0..9i32 {
            let mut want = 0.0;
            for ky in -3..=3i32 {
                for kx in -3..=3i32 {
                    want += taps[(ky + 3) as usize] * taps[(kx + 3) as usize] / (norm * norm) * src(y + ky, x + kx);
                }
            }
            assert!((out.get(y as usize, x as usize, 0) - want).abs() < 1e-12, "({y}, {x})");
        }
    }
}

#[test]
fn blur_edge_cases() {
    let c = ImageGrid::filled(7, 5, 3, 0.37);
    assert!(gaussian_blur(&c, 4.0).unwrap().tensor().max_abs_diff(c.tensor()) < 1e-12);
    let small = random_image(1, 3, 3, 3);
    assert!(gaussian_blur(&small, 1e-9).unwrap().tensor().max_abs_diff(small.tensor()) < 1e-3);
}

#[test]
fn downsample_oracles() {
    assert_eq!(downsample(&random_image(2, 8, 8, 3), 2.0).unwrap().dims(), (4, 4, 3));
    let c = ImageGrid::filled(9, 9, 1, 0.6);
    assert!(downsample(&c, 3.0).unwrap().data().iter().all(|v| (v - 0.6).abs() < 1e-12));
    let checker = ImageGrid::from_fn(2, 2, 1, |y, x, _| ((y + x) % 2) as f64);
    let out = downsample(&checker, 2.0).unwrap();
    assert_eq!(out.dims(), (1, 1, 1));
    assert!((out.get(0, 0, 0) - 0.5).abs() < 1e-12);
}

#[test]
fn noise_statistics_and_determinism() {
    let img = ImageGrid::filled(1000, 1000, 1, 0.5);
    let out = add_gaussian_noise(&img, 0.1, &mut stream(3, &[])).unwrap();
    let n = out.data().len() as f64;
    let mean = out.data().iter().sum::<f64>() / n;
    let std = (out.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    assert!((0.099..=0.101).contains(&std), "std {std}");
    let small = random_image(4, 8, 8, 3);
    let a = add_gaussian_noise(&small, 0.1, &mut stream(5, &[])).unwrap();
    let b = add_gaussian_noise(&small, 0.1, &mut stream(5, &[])).unwrap();
    assert_eq!(a, b);
    assert_eq!(add_gaussian_noise(&small, 0.0, &mut stream(5, &[])).unwrap(), small);
}

#[test]
fn degradation_chain_oracles() {
    let face = toy_face(1, 64, 64);
    let id = degrade(&face, &DegradationRecipe::identity(0), &Lossless).unwrap();
    assert!(psnr(&id, &face).unwrap() > 35.0);

    let recipe = DegradationRecipe { blur_sigma: 1.0, down_factor: 2.0, noise_sigma: 0.01, jpeg_quality: 80, seed: 9 };
    assert_eq!(degrade(&face, &recipe, &Lossless).unwrap(), degrade(&face, &recipe, &Lossless).unwrap());
    let noisy = DegradationRecipe { noise_sigma: 0.2, ..recipe };
    let p_low = psnr(&degrade(&face, &recipe, &Lossless).unwrap(), &face).unwrap();
    let p_high = psnr(&degrade(&face, &noisy, &Lossless).unwrap(), &face).unwrap();
    assert!(p_high < p_low, "{p_high} vs {p_low}");
}

#[test]
fn encoder_shape_determinism_and_locality() {
    let enc = ToyEncoder::new(ToyEncoderConfig::default()).unwrap();
    let img = toy_face(2, 64, 64);
    let a = encode(&img, &enc, SourceTag::Lr).unwrap();
    assert_eq!((a.num_tokens(), a.dim()), (64, 32));
    assert_eq!(a, encode(&img, &enc, SourceTag::Lr).unwrap());

    let mut changed = img.clone();
    for y in 16..24 {
        for x in 40..48 {
            changed.set(y, x, 1, 1.0 - img.get(y, x, 1));
        }
    }
    let b = encode(&changed, &enc, SourceTag::Lr).unwrap();
    let differing: Vec<usize> = (0..64)
        .filter(|&i| (0..32).any(|j| a.tokens().data()[i * 32 + j] != b.tokens().data()[i * 32 + j]))
        .collect();
    assert_eq!(differing, vec![2 * 8 + 5]);
}

#[test]
fn mse_matches_loop() {
    for seed in 0..10 {
        let a = random_image(seed, 2, 2, 1);
        let b = random_image(seed + 50, 2, 2, 1);
        let want = (0..4).map(|i| (a.data()[i] - b.data()[i]).powi(2)).sum::<f64>() / 4.0;
        assert!((reconstruction_loss(a.tensor(), b.tensor()).unwrap() - want).abs() < 1e-7);
    }
    let a = random_image(1, 4, 4, 3);
    assert_eq!(reconstruction_loss(a.tensor(), a.tensor()).unwrap(), 0.0);
    let shifted = a.map(|v| v + 0.5);
    assert!((reconstruction_loss(shifted.tensor(), a.tensor()).unwrap() - 0.25).abs() < 1e-12);
}

fn sobel_by_graph(img: &ImageGrid) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(img.tensor().clone());
    let s = sobel_graph(&mut g, x);
    g.value(s).clone()
}

#[test]
fn sobel_matches_kernel_convolution() {
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let ky = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
    let img = random_image(8, 5, 5, 1);
    let at = |y: i32, x: i32| img.get(y.clamp(0, 4) as usize, x.clamp(0, 4) as usize, 0);
    let (plain, graph) = (sobel(&img), sobel_by_graph(&img));
    for y in 0..5 {
        for x in 0..5 {
            let (mut gx, mut gy) = (0.0, 0.0);
            for i in 0..3 {
                for j in 0..3 {
                    let v = at(y + i as i32 - 1, x + j as i32 - 1);
                    gx += kx[i][j] * v;
                    gy += ky[i][j] * v;
                }
            }
            let want = (gx * gx + gy * gy).sqrt();
            let idx = (y * 5 + x) as usize;
            assert!((plain.data()[idx] - want).abs() < 1e-6);
            assert!((graph.data()[idx] - want).abs() < 1e-6);
        }
    }

    let flat = ImageGrid::filled(6, 6, 3, 0.4);
    assert!(sobel(&flat).data().iter().all(|&v| v == 0.0));
    assert!(sobel_by_graph(&flat).data().iter().all(|&v| v == 0.0));

    let step = ImageGrid::from_fn(6, 6, 1, |_, x, _| if x < 3 { 0.0 } else { 1.0 });
    let s = sobel(&step);
    for col in 0..6 {
        assert!((1..6).all(|y| s.get(y, col, 0) == s.get(0, col, 0)));
    }
    assert!(s.get(0, 2, 0) > 0.0);
}

fn edge_term(a: &ImageGrid, b: &ImageGrid) -> f64 {
    reconstruction_loss(sobel(a).tensor(), sobel(b).tensor()).unwrap()
}

#[test]
fn edge_term_penalizes_blur_more_than_equal_mse_noise() {
    let hr = ImageGrid::from_fn(32, 32, 1, |y, x, _| (((x / 2) + (y / 8)) % 2) as f64);
    let blurred = gaussian_blur(&hr, 1.5).unwrap();
    let mse = reconstruction_loss(blurred.tensor(), hr.tensor()).unwrap();
    let amp = mse.sqrt();
    let mut rng = stream(12, &[]);
    let mut noisy = hr.clone();
    for v in noisy.data_mut() {
        *v += if rng.random::<bool>() { amp } else { -amp };
    }
    assert!((reconstruction_loss(noisy.tensor(), hr.tensor()).unwrap() - mse).abs() < 1e-12);
    assert!(edge_term(&blurred, &hr) > edge_term(&noisy, &hr));
}

#[test]
fn perceptual_with_mse_backend_on_constants() {
    let hr = random_image(13, 8, 8, 3);
    assert_eq!(perceptual_loss_sd(&hr, &hr, &MsePerceptual).unwrap(), 0.0);
    let (a, b) = (0.7, 0.2);
    let l = perceptual_loss_sd(&ImageGrid::filled(8, 8, 3, a), &ImageGrid::filled(8, 8, 3, b), &MsePerceptual).unwrap();
    assert!((l - (a - b) * (a - b)).abs() < 1e-12);
}

/// Embeds an image as the unit vector at angle `π · mean`.
struct AngleBackend;

impl IdentityBackend for AngleBackend {
    fn name(&self) -> &str {
        "angle"
    }

    fn native_resolution(&self) -> Option<(usize, usize)> {
        None
    }

    fn embed_graph(&self, g: &mut Graph, img: Var) -> Var {
        let theta = std::f64::consts::PI * g.value(img).data().iter().sum::<f64>() / g.value(img).len() as f64;
        g.constant(Tensor::new(vec![1, 2], vec![theta.cos(), theta.sin()]).unwrap())
    }
}

#[test]
fn identity_loss_and_degree_with_test_backend() {
    let img = |m: f64| ImageGrid::filled(4, 4, 3, m);
    assert!((identity_loss(&img(0.0), &img(1.0), &AngleBackend).unwrap() - 2.0).abs() < 1e-12);
    assert!((identity_loss(&img(0.0), &img(0.5), &AngleBackend).unwrap() - 1.0).abs() < 1e-12);
    assert!((identity_degree(&img(0.0), &img(0.5), &AngleBackend).unwrap() - 90.0).abs() < 1e-9);
    assert!((identity_degree(&img(0.0), &img(1.0 / 3.0), &AngleBackend).unwrap() - 60.0).abs() < 1e-6);
    let face = toy_face(3, 32, 32);
    let toy = ToyIdentity::default();
    assert!(identity_loss(&face, &face, &toy).unwrap().abs() < 1e-12);
    assert!(identity_degree(&face, &face, &toy).unwrap() < 1e-5);
}

#[test]
fn perfect_discriminator_has_vanishing_loss() {
    let (d, _) = gan_standard(&[40.0, 50.0], &[-40.0, -50.0]).unwrap();
    assert!(d < 1e-15);
}
