//! Fidelity and identity metrics.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::losses::IdentityBackend;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn same_dims(op: &'static str, a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch { op, left: a.tensor().shape().to_vec(), right: b.tensor().shape().to_vec() });
    }
    Ok(())
}

/// Peak 1.0; capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_dims("psnr", a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(1.0 / mse)).min(PSNR_CAP_DB))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA));
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Mean single-scale SSIM over valid window positions on luminance.
pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w, _) = a.dims();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(alloc::format!("ssim needs at least {SSIM_WINDOW}×{SSIM_WINDOW} pixels, got {h}×{w}")));
    }
    let (ga, gb) = (a.to_gray(), b.to_gray());
    let (x, y) = (ga.data(), gb.data());
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for oy in 0..oh {
        for ox in 0..ow {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (ky, wy) in win.iter().enumerate() {
                for (kx, wx) in win.iter().enumerate() {
                    let wt = wy * wx;
                    let i = (oy + ky) * w + ox + kx;
                    let (p, q) = (x[i], y[i]);
                    mx += wt * p;
                    my += wt * q;
                    sxx += wt * p * p;
                    syy += wt * q * q;
                    sxy += wt * p * q;
                }
            }
            let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    Ok((total / (oh * ow) as f64).clamp(-1.0, 1.0))
}

/// Angle between identity embeddings, in degrees.
pub fn identity_degree(a: &ImageGrid, b: &ImageGrid, backend: &dyn IdentityBackend) -> Result<f64> {
    let (ea, eb) = (backend.embed(a)?, backend.embed(b)?);
    if ea.shape() != eb.shape() {
        return Err(Error::ShapeMismatch { op: "identity embeddings", left: ea.shape().to_vec(), right: eb.shape().to_vec() });
    }
    let cos: f64 = ea.data().iter().zip(eb.data()).map(|(x, y)| x * y).sum();
    Ok(libm::acos(cos.clamp(-1.0, 1.0)).to_degrees())
}

/// Facial landmark detector returning `(y, x)` pixel positions.
pub trait LandmarkDetector {
    fn name(&self) -> &str;
    fn landmark_count(&self) -> usize;
    fn detect(&self, img: &ImageGrid) -> Result<Vec<(f64, f64)>>;
}

/// Brightest luminance pixel in each image quadrant. Test use only.
#[derive(Clone, Copy, Debug, Default)]
pub struct QuadrantDetector;

impl LandmarkDetector for QuadrantDetector {
    fn name(&self) -> &str {
        "toy-quadrant"
    }

    fn landmark_count(&self) -> usize {
        4
    }

    fn detect(&self, img: &ImageGrid) -> Result<Vec<(f64, f64)>> {
        let (h, w, _) = img.dims();
        if h < 2 || w < 2 {
            return Err(Error::invalid("quadrant detector needs at least 2×2 pixels"));
        }
        let g = img.to_gray();
        let (hh, hw) = (h / 2, w / 2);
        let quads = [(0, hh, 0, hw), (0, hh, hw, w), (hh, h, 0, hw), (hh, h, hw, w)];
        Ok(quads
            .iter()
            .map(|&(y0, y1, x0, x1)| {
                let mut best = (f64::NEG_INFINITY, 0, 0);
                for y in y0..y1 {
                    for x in x0..x1 {
                        let v = g.get(y, x, 0);
                        if v > best.0 {
                            best = (v, y, x);
                        }
                    }
                }
                (best.1 as f64, best.2 as f64)
            })
            .collect())
    }
}

/// Mean Euclidean distance between corresponding landmark pairs.
pub fn landmark_distance_points(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op: "landmark sets", left: alloc::vec![a.len()], right: alloc::vec![b.len()] });
    }
    if a.is_empty() {
        return Err(Error::EmptyBatch("landmarks"));
    }
    Ok(a.iter().zip(b).map(|(p, q)| libm::hypot(p.0 - q.0, p.1 - q.1)).sum::<f64>() / a.len() as f64)
}

pub fn landmark_distance(a: &ImageGrid, b: &ImageGrid, detector: &dyn LandmarkDetector) -> Result<f64> {
    landmark_distance_points(&detector.detect(a)?, &detector.detect(b)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub name: String,
    pub psnr: f64,
    pub ssim: f64,
    pub id_degree: f64,
    pub lmd: f64,
}

/// Columns that need pretrained networks; filled only by external backends.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReservedMetrics {
    pub lpips: Option<f64>,
    pub dists: Option<f64>,
    pub topiq: Option<f64>,
    pub fid: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub rows: Vec<MetricRow>,
    pub mean: MetricRow,
    pub missing: Vec<String>,
    pub identity_backend: String,
    pub landmark_detector: String,
    pub landmark_count: usize,
    pub reserved: ReservedMetrics,
}

pub struct EvalBackends<'a> {
    pub identity: &'a dyn IdentityBackend,
    pub landmarks: &'a dyn LandmarkDetector,
}

pub fn evaluate_pair(name: &str, pred: &ImageGrid, gt: &ImageGrid, backends: &EvalBackends<'_>) -> Result<MetricRow> {
    Ok(MetricRow {
        name: name.into(),
        psnr: psnr(pred, gt)?,
        ssim: ssim(pred, gt)?,
        id_degree: identity_degree(pred, gt, backends.identity)?,
        lmd: landmark_distance(pred, gt, backends.landmarks)?,
    })
}

/// Aggregates already-computed rows; `missing` lists unmatched names.
pub fn build_report(rows: Vec<MetricRow>, missing: Vec<String>, backends: &EvalBackends<'_>) -> Result<MetricReport> {
    if rows.is_empty() {
        return Err(Error::EmptyBatch("no prediction/ground-truth pairs"));
    }
    let n = rows.len() as f64;
    let avg = |f: fn(&MetricRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let mean = MetricRow {
        name: "mean".into(),
        psnr: avg(|r| r.psnr),
        ssim: avg(|r| r.ssim),
        id_degree: avg(|r| r.id_degree),
        lmd: avg(|r| r.lmd),
    };
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        rows,
        mean,
        missing,
        identity_backend: backends.identity.name().into(),
        landmark_detector: backends.landmarks.name().into(),
        landmark_count: backends.landmarks.landmark_count(),
        reserved: ReservedMetrics::default(),
    })
}
