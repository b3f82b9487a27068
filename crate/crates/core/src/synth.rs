//! Procedural toy faces: deterministic per seed, with hair texture, eyes,
//! brows, nose, mouth and freckles so restorers have structure and detail to
//! recover.

use rand::Rng;

use crate::image::ImageGrid;
use crate::rng::{purpose, stream};

/// Linear ramp from 1 to 0 over `[-edge/2, edge/2]`.
fn ramp(edge: f64, x: f64) -> f64 {
    (0.5 - x / edge).clamp(0.0, 1.0)
}

/// Soft ellipse membership in `[0, 1]`; `soft` is the edge width in pixels.
fn ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64, soft: f64) -> f64 {
    let (dy, dx) = ((y - cy) / ry, (x - cx) / rx);
    let d = libm::sqrt(dy * dy + dx * dx);
    ramp(soft / ry.min(rx), d - 1.0)
}

fn blend(dst: &mut [f64; 3], src: [f64; 3], a: f64) {
    for c in 0..3 {
        dst[c] = dst[c] * (1.0 - a) + src[c] * a;
    }
}

fn jitter<R: Rng>(rng: &mut R, base: f64, spread: f64) -> f64 {
    base + spread * (rng.random::<f64>() * 2.0 - 1.0)
}

fn color<R: Rng>(rng: &mut R, base: [f64; 3], spread: f64) -> [f64; 3] {
    [jitter(rng, base[0], spread), jitter(rng, base[1], spread), jitter(rng, base[2], spread)].map(|v| v.clamp(0.0, 1.0))
}

/// An RGB toy face of `height × width` pixels.
pub fn toy_face(seed: u64, height: usize, width: usize) -> ImageGrid {
    let mut rng = stream(seed, &[purpose::SYNTH]);
    let (h, w) = (height as f64, width as f64);
    let bg_top = color(&mut rng, [0.45, 0.55, 0.7], 0.25);
    let bg_bottom = color(&mut rng, [0.3, 0.35, 0.45], 0.2);
    let skin = color(&mut rng, [0.85, 0.68, 0.55], 0.12);
    let hair = color(&mut rng, [0.25, 0.17, 0.1], 0.12);
    let iris = color(&mut rng, [0.25, 0.35, 0.3], 0.2);
    let lips = color(&mut rng, [0.75, 0.3, 0.32], 0.1);
    let cx = jitter(&mut rng, 0.5, 0.04) * w;
    let cy = jitter(&mut rng, 0.55, 0.03) * h;
    let (ry, rx) = (jitter(&mut rng, 0.36, 0.03) * h, jitter(&mut rng, 0.28, 0.03) * w);
    let eye_dx = jitter(&mut rng, 0.11, 0.015) * w;
    let eye_y = cy - jitter(&mut rng, 0.08, 0.015) * h;
    let eye_r = jitter(&mut rng, 0.035, 0.006) * w;
    let mouth_y = cy + jitter(&mut rng, 0.19, 0.02) * h;
    let mouth_rx = jitter(&mut rng, 0.09, 0.02) * w;
    let hair_freq = jitter(&mut rng, 1.1, 0.3);
    let hair_phase = rng.random::<f64>() * 6.28;
    let freckles: [(f64, f64); 6] =
        core::array::from_fn(|_| (cy + jitter(&mut rng, 0.04, 0.05) * h, cx + jitter(&mut rng, 0.0, 0.16) * w));
    let soft = 0.8;

    ImageGrid::from_fn(height, width, 3, {
        let mut cache = (usize::MAX, [0.0; 3]);
        move |yi, xi, c| {
            let idx = yi * width + xi;
            if cache.0 != idx {
                let (y, x) = (yi as f64 + 0.5, xi as f64 + 0.5);
                let t = y / h;
                let mut px = [0.0; 3];
                for k in 0..3 {
                    px[k] = bg_top[k] * (1.0 - t) + bg_bottom[k] * t;
                }
                let stripes = 0.5 + 0.5 * libm::sin(x * hair_freq + hair_phase + 0.3 * y);
                let hair_px = hair.map(|v| (v * (0.7 + 0.6 * stripes)).clamp(0.0, 1.0));
                blend(&mut px, hair_px, ellipse(y, x, cy - 0.1 * h, cx, ry * 1.05, rx * 1.2, soft));
                blend(&mut px, skin, ellipse(y, x, cy + 0.04 * h, cx, ry * 0.92, rx, soft));
                for side in [-1.0, 1.0] {
                    let ex = cx + side * eye_dx;
                    blend(&mut px, [0.95, 0.95, 0.95], ellipse(y, x, eye_y, ex, eye_r * 0.7, eye_r * 1.4, soft));
                    blend(&mut px, iris, ellipse(y, x, eye_y, ex, eye_r * 0.6, eye_r * 0.6, soft));
                    blend(&mut px, [0.05, 0.05, 0.05], ellipse(y, x, eye_y, ex, eye_r * 0.28, eye_r * 0.28, soft));
                    blend(&mut px, hair, ellipse(y, x, eye_y - 1.8 * eye_r, ex, eye_r * 0.35, eye_r * 1.6, soft));
                }
                let nose = skin.map(|v| v * 0.8);
                blend(&mut px, nose, ellipse(y, x, cy + 0.05 * h, cx, 0.07 * h, 0.018 * w, soft));
                blend(&mut px, lips, ellipse(y, x, mouth_y, cx, 0.03 * h, mouth_rx, soft));
                for &(fy, fx) in &freckles {
                    blend(&mut px, skin.map(|v| v * 0.6), 0.8 * ellipse(y, x, fy, fx, 0.7, 0.7, 0.5));
                }
                cache = (idx, px.map(|v| v.clamp(0.0, 1.0)));
            }
            cache.1[c]
        }
    })
}
