use serde::{Deserialize, Serialize};

use super::cloud::{cross, norm, normalized, sub, Vec3};
use crate::error::{Error, Result};

/// Orthographic half-extent covering the unit ball plus a small margin.
pub const DEFAULT_HALF_EXTENT: f64 = 1.05;
pub const DEFAULT_DISTANCE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Projection {
    Orthographic { half_extent: f64 },
    Perspective { fov_deg: f64 },
}

impl Default for Projection {
    fn default() -> Self {
        Projection::Orthographic {
            half_extent: DEFAULT_HALF_EXTENT,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub position: Vec3,
    pub look_at: Vec3,
    pub up: Vec3,
    pub projection: Projection,
    pub distance: f64,
}

/// Orthonormal camera frame: `right` and `up` span the image plane and
/// `forward` points from the camera into the scene.
#[derive(Clone, Copy, Debug)]
pub struct CameraFrame {
    pub right: Vec3,
    pub up: Vec3,
    pub forward: Vec3,
}

impl Camera {
    pub fn new(position: Vec3, look_at: Vec3, up: Vec3, projection: Projection) -> Result<Self> {
        let view = sub(look_at, position);
        let distance = norm(view);
        if !(distance > 0.0) {
            return Err(Error::InvalidRig("camera coincides with its target".into()));
        }
        let up_len = norm(up);
        if !(up_len > 0.0) || norm(cross(view, up)) <= 1e-9 * distance * up_len {
            return Err(Error::InvalidRig(
                "up vector is parallel to the viewing direction".into(),
            ));
        }
        Ok(Self {
            position,
            look_at,
            up,
            projection,
            distance,
        })
    }

    /// Camera on the ray through `direction`, looking at the origin.
    pub fn orbit(direction: Vec3, distance: f64, projection: Projection) -> Result<Self> {
        if !(distance > 0.0) || !distance.is_finite() {
            return Err(Error::InvalidRig(format!(
                "viewing distance must be positive, got {distance}"
            )));
        }
        let d = normalized(direction);
        let position = d.map(|v| v * distance);
        // world +y is up unless the camera sits close to the y axis
        let up = if d[1].abs() > 0.9 {
            [0.0, 0.0, 1.0]
        } else {
            [0.0, 1.0, 0.0]
        };
        let mut cam = Self::new(position, [0.0; 3], up, projection)?;
        cam.distance = distance;
        Ok(cam)
    }

    pub fn frame(&self) -> CameraFrame {
        let forward = normalized(sub(self.look_at, self.position));
        let right = normalized(cross(forward, self.up));
        let up = cross(right, forward);
        CameraFrame { right, up, forward }
    }

    pub fn direction(&self) -> Vec3 {
        normalized(sub(self.position, self.look_at))
    }
}

/// `k` cameras at a common distance looking at the origin. Twelve cameras sit
/// on the vertices of a regular icosahedron; other counts use a Fibonacci
/// sphere lattice; a single camera sits on +z.
pub fn rig_evenly_distributed(k: usize, distance: f64) -> Result<Vec<Camera>> {
    if k == 0 {
        return Err(Error::InvalidRig("rig needs at least one camera".into()));
    }
    let dirs: Vec<Vec3> = match k {
        1 => vec![[0.0, 0.0, 1.0]],
        12 => icosahedron_vertices(),
        _ => fibonacci_sphere(k),
    };
    dirs.into_iter()
        .map(|d| Camera::orbit(d, distance, Projection::default()))
        .collect()
}

/// Six axis-aligned cameras in the order +x, −x, +y, −y, +z, −z.
pub fn rig_perpendicular(distance: f64) -> Result<Vec<Camera>> {
    const AXES: [Vec3; 6] = [
        [1.0, 0.0, 0.0],
        [-1.0, 0.0, 0.0],
        [0.0, 1.0, 0.0],
        [0.0, -1.0, 0.0],
        [0.0, 0.0, 1.0],
        [0.0, 0.0, -1.0],
    ];
    AXES.iter()
        .map(|&d| Camera::orbit(d, distance, Projection::default()))
        .collect()
}

fn icosahedron_vertices() -> Vec<Vec3> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut out = Vec::with_capacity(12);
    for &a in &[1.0, -1.0] {
        for &b in &[phi, -phi] {
            out.push(normalized([0.0, a, b]));
            out.push(normalized([a, b, 0.0]));
            out.push(normalized([b, 0.0, a]));
        }
    }
    out
}

fn fibonacci_sphere(k: usize) -> Vec<Vec3> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    (0..k)
        .map(|i| {
            let z = 1.0 - 2.0 * (i as f64 + 0.5) / k as f64;
            let r = (1.0 - z * z).sqrt();
            let theta = golden * i as f64;
            [r * theta.cos(), r * theta.sin(), z]
        })
        .collect()
}

#[cfg(test)]
pub(crate) fn angle_between(a: Vec3, b: Vec3) -> f64 {
    (super::cloud::dot(a, b) / (norm(a) * norm(b))).clamp(-1.0, 1.0).acos()
}
