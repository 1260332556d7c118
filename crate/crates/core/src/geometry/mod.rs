//! Point clouds, normalization, camera rigs and rendering.

mod camera;
mod cloud;
mod ply;
mod render;

pub use camera::{
    rig_evenly_distributed, rig_perpendicular, Camera, CameraFrame, Projection,
    DEFAULT_DISTANCE, DEFAULT_HALF_EXTENT,
};
pub use cloud::{apply_transform, normalize_to_unit_sphere, NormTransform, PointCloud, Vec3};
pub use ply::{read_ply, write_ply, PlyFormat};
pub use render::{
    crop, crop_pair, crop_window, crop_with, project_point, rasterize, render, render_bounded, CropPolicy,
    CropWindow, Image, IndexBuffer, RenderConfig, RenderedView, ViewMeta, DEFAULT_CROP,
    DEFAULT_RESOLUTION,
};
