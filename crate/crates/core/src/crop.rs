//! Shape-adaptive cropping: choose a sub-image grid for an arbitrary image.
//!
//! The ideal grid covers the image with `ceil(h / tile) × ceil(w / tile)`
//! tiles. When that grid breaks the area or side cap, every admissible grid is
//! scored by covered-pixel ratio `min(rows·cols·tile² / (w·h), 1)`; ties go to
//! the grid whose aspect ratio is closest to the image's, then to the smaller
//! tile count, then to fewer rows.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::image::Image;

/// Grid limits and tile geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropConfig {
    pub tile_px: usize,
    /// Maximum number of sub-images.
    pub max_area: usize,
    /// Maximum sub-images per row or column.
    pub max_side: usize,
    pub thumbnail: bool,
}

impl CropConfig {
    /// Pre-training limits: 36 sub-images, 12 per side, 224-px tiles.
    pub const PRETRAIN: Self = Self {
        tile_px: 224,
        max_area: 36,
        max_side: 12,
        thumbnail: true,
    };

    /// Fine-tuning doubles the area cap.
    pub const FINETUNE: Self = Self {
        max_area: 72,
        ..Self::PRETRAIN
    };

    pub fn validate(&self) -> Result<()> {
        if self.tile_px == 0 {
            bail!(Config, "tile size must be positive");
        }
        if self.max_side == 0 || self.max_area == 0 {
            bail!(Config, "grid caps must be positive");
        }
        if self.max_side > self.max_area {
            bail!(Config, "max_side {} exceeds max_area {}", self.max_side, self.max_area);
        }
        Ok(())
    }

    pub fn admits(&self, rows: usize, cols: usize) -> bool {
        rows >= 1 && cols >= 1 && rows <= self.max_side && cols <= self.max_side && rows * cols <= self.max_area
    }

    /// Largest pixel count any plan can reach.
    pub fn max_pixels(&self) -> usize {
        self.max_area * self.tile_px * self.tile_px
    }

    /// Longest edge any plan can reach.
    pub fn max_long_edge(&self) -> usize {
        self.max_side * self.tile_px
    }
}

impl Default for CropConfig {
    fn default() -> Self {
        Self::PRETRAIN
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    pub rows: usize,
    pub cols: usize,
    pub scaled_w: usize,
    pub scaled_h: usize,
    /// Pixel origin `(x, y)` of each tile in the resized image, row-major.
    pub tiles: Vec<(usize, usize)>,
    pub has_thumbnail: bool,
}

impl CropPlan {
    pub fn sub_images(&self) -> usize {
        self.rows * self.cols
    }

    /// Sub-images plus the thumbnail, if any.
    pub fn tile_count(&self) -> usize {
        self.sub_images() + usize::from(self.has_thumbnail)
    }
}

fn covered_ratio(rows: usize, cols: usize, width: usize, height: usize, tile: usize) -> f64 {
    let covered = (rows * cols * tile * tile) as f64;
    (covered / (width as f64 * height as f64)).min(1.0)
}

fn aspect_error(rows: usize, cols: usize, width: usize, height: usize) -> f64 {
    libm::fabs(libm::log((cols as f64 / rows as f64) * (height as f64 / width as f64)))
}

/// Picks the sub-image grid for a `width × height` image.
pub fn plan_crop(width: usize, height: usize, cfg: &CropConfig) -> Result<CropPlan> {
    if width == 0 || height == 0 {
        bail!(Input, "image dimensions must be positive, got {width}x{height}");
    }
    cfg.validate()?;
    let t = cfg.tile_px;
    let ideal = (height.div_ceil(t), width.div_ceil(t));
    let (rows, cols) = if cfg.admits(ideal.0, ideal.1) {
        ideal
    } else {
        let mut best: Option<(usize, usize, f64, f64)> = None;
        for r in 1..=cfg.max_side {
            for c in 1..=cfg.max_side {
                if !cfg.admits(r, c) {
                    continue;
                }
                let score = covered_ratio(r, c, width, height, t);
                let aspect = aspect_error(r, c, width, height);
                let better = match best {
                    None => true,
                    Some((br, bc, bs, ba)) => {
                        score > bs || (score == bs && (aspect < ba || (aspect == ba && r * c < br * bc)))
                    }
                };
                if better {
                    best = Some((r, c, score, aspect));
                }
            }
        }
        let (r, c, _, _) = best.expect("max_side >= 1 admits 1x1");
        (r, c)
    };
    let tiles = (0..rows).flat_map(|r| (0..cols).map(move |c| (c * t, r * t))).collect();
    Ok(CropPlan {
        rows,
        cols,
        scaled_w: cols * t,
        scaled_h: rows * t,
        tiles,
        has_thumbnail: cfg.thumbnail,
    })
}

/// Resized sub-images (row-major) plus the optional whole-image thumbnail.
#[derive(Debug, Clone, PartialEq)]
pub struct Tiles {
    pub sub_images: Vec<Image>,
    pub thumbnail: Option<Image>,
}

impl Tiles {
    pub fn len(&self) -> usize {
        self.sub_images.len() + usize::from(self.thumbnail.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sub-images followed by the thumbnail.
    pub fn iter(&self) -> impl Iterator<Item = &Image> {
        self.sub_images.iter().chain(self.thumbnail.as_ref())
    }
}

/// Resizes `img` to the plan's scaled size and cuts it into tiles.
pub fn tile_image(img: &Image, plan: &CropPlan, cfg: &CropConfig) -> Result<Tiles> {
    let t = cfg.tile_px;
    if plan.scaled_w != plan.cols * t || plan.scaled_h != plan.rows * t || plan.tiles.len() != plan.sub_images() {
        bail!(Input, "crop plan does not match tile size {t}");
    }
    let resized = img.resize_bilinear(plan.scaled_w, plan.scaled_h)?;
    let sub_images = plan
        .tiles
        .iter()
        .map(|&(x, y)| resized.crop(x, y, t, t))
        .collect::<Result<Vec<_>>>()?;
    let thumbnail = if plan.has_thumbnail {
        Some(img.resize_bilinear(t, t)?)
    } else {
        None
    };
    Ok(Tiles { sub_images, thumbnail })
}
