//! PNG / PPM decoding into normalized RGB images.

use std::path::Path;

use th2_core::Image;

use crate::{Error, Result};

/// Loads an image as 3-channel data scaled to `[0, 1]`.
pub fn load_rgb(path: &Path) -> Result<Image> {
    let decoded = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let rgb = decoded.to_rgb8();
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Image::new(w as usize, h as usize, 3, data)?)
}
