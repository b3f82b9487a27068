use std::io::Cursor;

use hdrface_core::degrade::LossyCodec;
use hdrface_core::{Error, ImageGrid, Result};
use image::codecs::jpeg::JpegEncoder;
use image::ImageReader;

use crate::imageio::{from_rgb8, to_rgb8};

/// Baseline JPEG round trip through the `image` crate.
#[derive(Clone, Copy, Debug, Default)]
pub struct JpegCodec;

impl LossyCodec for JpegCodec {
    fn round_trip(&self, img: &ImageGrid, quality: u8) -> Result<ImageGrid> {
        if !(1..=100).contains(&quality) {
            return Err(Error::invalid(format!("jpeg quality must be in [1, 100], got {quality}")));
        }
        let rgb = to_rgb8(img);
        let mut buf = Vec::new();
        JpegEncoder::new_with_quality(&mut buf, quality)
            .encode_image(&rgb)
            .map_err(|e| Error::invalid(format!("jpeg encode: {e}")))?;
        let decoded = ImageReader::with_format(Cursor::new(buf), image::ImageFormat::Jpeg)
            .decode()
            .map_err(|e| Error::invalid(format!("jpeg decode: {e}")))?;
        Ok(from_rgb8(&decoded.to_rgb8()))
    }
}
