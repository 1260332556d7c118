//! Deterministic z-buffer point splatting.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::camera::{Camera, Projection};
use super::cloud::{dot, sub, NormTransform, PointCloud};
use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 512;
pub const DEFAULT_CROP: usize = 224;

/// Tolerance on "inside the unit ball" for render preconditions.
const UNIT_BALL_TOL: f64 = 1e-6;

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "{} values cannot form a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, row: usize, col: usize, rgb: [f32; 3]) {
        let i = (row * self.width + col) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn crop(&self, w: &CropWindow) -> Result<Self> {
        if w.top + w.size > self.height || w.left + w.size > self.width {
            return Err(Error::CropTooLarge {
                size: w.size,
                resolution: self.width.min(self.height),
            });
        }
        let mut data = Vec::with_capacity(w.size * w.size * 3);
        for r in w.top..w.top + w.size {
            let start = (r * self.width + w.left) * 3;
            data.extend_from_slice(&self.data[start..start + w.size * 3]);
        }
        Ok(Self {
            width: w.size,
            height: w.size,
            data,
        })
    }

    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0f64; 3];
        for px in self.data.chunks(3) {
            for k in 0..3 {
                acc[k] += px[k] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        acc.map(|v| v / n)
    }

    /// 8-bit quantized RGB bytes.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .ok_or_else(|| Error::shape("image buffer size"))?;
        buf.save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect();
        Self::from_raw(w as usize, h as usize, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub top: usize,
    pub left: usize,
    pub size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CropPolicy {
    Center,
    Random { seed: u64 },
}

/// Square crop window of side `size` inside a `resolution²` image.
pub fn crop_window(resolution: usize, size: usize, policy: CropPolicy) -> Result<CropWindow> {
    if size > resolution || size == 0 {
        return Err(Error::CropTooLarge { size, resolution });
    }
    let slack = resolution - size;
    let (top, left) = match policy {
        CropPolicy::Center => (slack / 2, slack / 2),
        CropPolicy::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (rng.random_range(0..=slack), rng.random_range(0..=slack))
        }
    };
    Ok(CropWindow { top, left, size })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub resolution: usize,
    /// Disk splat radius in pixels.
    pub splat_radius: usize,
    pub background: [f32; 3],
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            resolution: DEFAULT_RESOLUTION,
            splat_radius: 2,
            background: [1.0, 1.0, 1.0],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedView {
    pub pixels: Image,
    pub camera: Camera,
    pub transform: NormTransform,
    pub source_id: String,
    pub crop: Option<CropWindow>,
}

/// Per-pixel index of the visible point (`None` for background).
#[derive(Clone, Debug, PartialEq)]
pub struct IndexBuffer {
    pub resolution: usize,
    pub indices: Vec<Option<u32>>,
}

impl IndexBuffer {
    pub fn occupancy(&self) -> Vec<bool> {
        self.indices.iter().map(Option::is_some).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.iter().all(Option::is_none)
    }
}

/// Continuous image-plane position of a point: `(col, row, depth)`, with the
/// origin of a normalized scene landing at the image center. `None` when the
/// point is behind the camera.
pub fn project_point(cam: &Camera, p: [f64; 3], resolution: usize) -> Option<(f64, f64, f64)> {
    let frame = cam.frame();
    let rel = sub(p, cam.position);
    let depth = dot(rel, frame.forward);
    if depth <= 0.0 {
        return None;
    }
    let (x, y) = (dot(rel, frame.right), dot(rel, frame.up));
    let (u, v) = match cam.projection {
        Projection::Orthographic { half_extent } => (x / half_extent, y / half_extent),
        Projection::Perspective { fov_deg } => {
            let t = (fov_deg.to_radians() / 2.0).tan();
            (x / (depth * t), y / (depth * t))
        }
    };
    let res = resolution as f64;
    Some(((u + 1.0) * 0.5 * res, (1.0 - v) * 0.5 * res, depth))
}

/// Z-buffer rasterization: every point is a disk of `splat_radius` pixels;
/// the nearest depth wins and exact ties keep the lower point index.
pub fn rasterize(pc: &PointCloud, cam: &Camera, cfg: &RenderConfig) -> IndexBuffer {
    let res = cfg.resolution;
    let r = cfg.splat_radius as i64;
    let mut zbuf = vec![f64::INFINITY; res * res];
    let mut indices = vec![None; res * res];
    for (i, &p) in pc.coords().iter().enumerate() {
        let Some((u, v, depth)) = project_point(cam, p, res) else {
            continue;
        };
        let (cc, rc) = (u.floor(), v.floor());
        if !cc.is_finite() || !rc.is_finite() {
            continue;
        }
        let (cc, rc) = (cc as i64, rc as i64);
        for dy in -r..=r {
            let row = rc + dy;
            if row < 0 || row >= res as i64 {
                continue;
            }
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let col = cc + dx;
                if col < 0 || col >= res as i64 {
                    continue;
                }
                let k = row as usize * res + col as usize;
                if depth < zbuf[k] {
                    zbuf[k] = depth;
                    indices[k] = Some(i as u32);
                }
            }
        }
    }
    IndexBuffer {
        resolution: res,
        indices,
    }
}

/// Renders a normalized cloud. `transform` is recorded as metadata only.
pub fn render(
    pc: &PointCloud,
    cam: &Camera,
    transform: &NormTransform,
    cfg: &RenderConfig,
) -> Result<RenderedView> {
    render_bounded(pc, cam, transform, cfg, 1.0 + UNIT_BALL_TOL)
}

/// As [`render`], accepting clouds up to `max_norm` from the origin. Used for
/// a distorted cloud placed by its reference's transform, whose points may
/// leave the unit ball slightly.
pub fn render_bounded(
    pc: &PointCloud,
    cam: &Camera,
    transform: &NormTransform,
    cfg: &RenderConfig,
    max_norm: f64,
) -> Result<RenderedView> {
    let max = pc.max_norm();
    if max > max_norm {
        return Err(Error::InvalidCloud(format!(
            "render expects a cloud within radius {max_norm}, max norm is {max}"
        )));
    }
    let ib = rasterize(pc, cam, cfg);
    if ib.is_empty() {
        log::warn!("no point projected into the view; image is background only");
    }
    Ok(RenderedView {
        pixels: shade(pc, &ib, cfg.background),
        camera: *cam,
        transform: *transform,
        source_id: String::new(),
        crop: None,
    })
}

fn shade(pc: &PointCloud, ib: &IndexBuffer, background: [f32; 3]) -> Image {
    let res = ib.resolution;
    let mut img = Image::filled(res, res, background);
    for (k, idx) in ib.indices.iter().enumerate() {
        if let Some(i) = idx {
            let c = pc.colors()[*i as usize];
            img.set_pixel(k / res, k % res, [c[0] as f32, c[1] as f32, c[2] as f32]);
        }
    }
    img
}

pub fn crop(view: &RenderedView, size: usize, policy: CropPolicy) -> Result<RenderedView> {
    let res = view.pixels.width().min(view.pixels.height());
    let window = crop_window(res, size, policy)?;
    crop_with(view, window)
}

pub fn crop_with(view: &RenderedView, window: CropWindow) -> Result<RenderedView> {
    Ok(RenderedView {
        pixels: view.pixels.crop(&window)?,
        crop: Some(window),
        ..view.clone()
    })
}

/// Crops a distorted/reference pair with one shared window.
pub fn crop_pair(
    a: &RenderedView,
    b: &RenderedView,
    size: usize,
    policy: CropPolicy,
) -> Result<(RenderedView, RenderedView)> {
    let res = a.pixels.width().min(a.pixels.height());
    let window = crop_window(res, size, policy)?;
    Ok((crop_with(a, window)?, crop_with(b, window)?))
}

/// JSON sidecar written next to each exported view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMeta {
    pub source_id: String,
    pub camera_index: usize,
    pub camera: Camera,
    pub transform: NormTransform,
    pub crop_window: Option<CropWindow>,
}
