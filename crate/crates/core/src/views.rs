//! Rig rendering shared by both training stages.
//!
//! Views are rendered at full resolution and quantized to 8 bits, so an
//! in-memory cache and a PNG cache on disk hold identical pixels.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    apply_transform, crop_window, normalize_to_unit_sphere, render_bounded, Camera, CropPolicy,
    Image, NormTransform, PointCloud, RenderConfig, DEFAULT_CROP, DEFAULT_DISTANCE,
    DEFAULT_RESOLUTION,
};
use crate::patches::{patchify, PatchGrid, PATCH_SIZE};

/// Radius accepted for a distorted cloud placed by its reference transform.
const PAIRED_MAX_NORM: f64 = 2.0;
const SELF_MAX_NORM: f64 = 1.0 + 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    pub resolution: usize,
    pub crop: usize,
    pub splat_radius: usize,
    pub distance: f64,
    /// Seeded random crop windows during pre-training instead of center.
    pub random_crop: bool,
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            crop: DEFAULT_CROP,
            splat_radius: 2,
            distance: DEFAULT_DISTANCE,
            random_crop: false,
        }
    }
}

impl ViewConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        if self.resolution == 0 || self.crop == 0 || self.crop > self.resolution {
            return Err(Error::config(
                field,
                format!(
                    "crop {} must be in 1..={} (the resolution)",
                    self.crop, self.resolution
                ),
            ));
        }
        if self.crop % PATCH_SIZE != 0 {
            return Err(Error::config(
                field,
                format!("crop {} must be a multiple of the patch size {PATCH_SIZE}", self.crop),
            ));
        }
        if !(self.distance.is_finite() && self.distance > 0.0) {
            return Err(Error::config(field, "distance must be positive"));
        }
        Ok(())
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            resolution: self.resolution,
            splat_radius: self.splat_radius,
            ..RenderConfig::default()
        }
    }

    /// Patch grid side length after cropping.
    pub fn grid_side(&self) -> usize {
        self.crop / PATCH_SIZE
    }

    pub fn patch_count(&self) -> usize {
        self.grid_side() * self.grid_side()
    }
}

pub fn quantize(img: &Image) -> Image {
    let data = img
        .data()
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
        .collect();
    Image::from_raw(img.width(), img.height(), data).expect("same shape")
}

fn render_rig(
    pc: &PointCloud,
    cams: &[Camera],
    t: &NormTransform,
    cfg: &ViewConfig,
    max_norm: f64,
) -> Result<Vec<Image>> {
    let rc = cfg.render_config();
    cams.par_iter()
        .map(|cam| Ok(quantize(&render_bounded(pc, cam, t, &rc, max_norm)?.pixels)))
        .collect()
}

/// Full-resolution views of a distorted/reference pair, both placed by the
/// reference's normalization so pixels correspond.
pub fn render_pair_rig(
    reference: &PointCloud,
    distorted: &PointCloud,
    cams: &[Camera],
    cfg: &ViewConfig,
) -> Result<Vec<(Image, Image)>> {
    let (ref_n, t) = normalize_to_unit_sphere(reference)?;
    let dist_n = apply_transform(distorted, &t);
    let xs = render_rig(&dist_n, cams, &t, cfg, PAIRED_MAX_NORM)?;
    let ys = render_rig(&ref_n, cams, &t, cfg, SELF_MAX_NORM)?;
    Ok(xs.into_iter().zip(ys).collect())
}

/// Center-cropped views of a cloud normalized by itself (no reference).
pub fn render_self_rig(pc: &PointCloud, cams: &[Camera], cfg: &ViewConfig) -> Result<Vec<Image>> {
    let (pc_n, t) = normalize_to_unit_sphere(pc)?;
    let window = crop_window(cfg.resolution, cfg.crop, CropPolicy::Center)?;
    render_rig(&pc_n, cams, &t, cfg, SELF_MAX_NORM)?
        .iter()
        .map(|img| img.crop(&window))
        .collect()
}

pub fn patch_grids(images: &[Image]) -> Result<Vec<PatchGrid>> {
    images.iter().map(patchify).collect()
}

/// Loads `path` if it exists, otherwise renders with `make` and stores it.
pub fn cached_png(path: &Path, make: impl FnOnce() -> Result<Image>) -> Result<Image> {
    if path.exists() {
        return Image::load_png(path);
    }
    let img = make()?;
    img.save_png(path)?;
    Ok(img)
}
