//! 8-bit image files to and from [`ImageGrid`].

use std::path::{Path, PathBuf};

use hdrface_core::ImageGrid;
use image::{ImageFormat, RgbImage};

use crate::error::{HdrError, Result};

const EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

pub fn from_rgb8(img: &RgbImage) -> ImageGrid {
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    ImageGrid::new(h as usize, w as usize, 3, data).expect("rgb buffer matches its dimensions")
}

/// Rounds to 8 bits after clamping to `[0, 1]`. Grayscale grids are replicated to RGB.
pub fn to_rgb8(grid: &ImageGrid) -> RgbImage {
    let (h, w, c) = grid.dims();
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let at = |ch: usize| q(grid.get(y as usize, x as usize, ch.min(c - 1)));
        image::Rgb([at(0), at(1), at(2)])
    })
}

pub fn load(path: &Path) -> Result<ImageGrid> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => HdrError::io(path, e),
        source => HdrError::Image { path: path.to_path_buf(), source },
    })?;
    Ok(from_rgb8(&img.to_rgb8()))
}

pub fn save_png(grid: &ImageGrid, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HdrError::io(dir, e))?;
    }
    to_rgb8(grid).save_with_format(path, ImageFormat::Png).map_err(|source| HdrError::Image { path: path.to_path_buf(), source })
}

fn is_image(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Image files directly inside `dir`, sorted by file name.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| HdrError::io(dir, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| HdrError::io(dir, e))?.path();
        if path.is_file() && is_image(&path) {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Loads every decodable image in `dir` as `(file stem, image)`.
/// Files that fail to decode are skipped with a warning.
pub fn load_dir(dir: &Path) -> Result<Vec<(String, ImageGrid)>> {
    let mut out = Vec::new();
    for path in list_images(dir)? {
        match load(&path) {
            Ok(img) => out.push((stem(&path), img)),
            Err(e) => log::warn!("skipping {e}"),
        }
    }
    Ok(out)
}

pub fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}
