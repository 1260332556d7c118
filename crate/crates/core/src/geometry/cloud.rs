use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Colored point set. Colors are RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    coords: Vec<Vec3>,
    colors: Vec<Vec3>,
}

impl PointCloud {
    pub fn new(coords: Vec<Vec3>, colors: Vec<Vec3>) -> Result<Self> {
        if coords.is_empty() {
            return Err(Error::InvalidCloud("cloud has no points".into()));
        }
        if coords.len() != colors.len() {
            return Err(Error::InvalidCloud(format!(
                "{} coordinates but {} colors",
                coords.len(),
                colors.len()
            )));
        }
        if let Some(i) = coords.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidCloud(format!("point {i} is not finite")));
        }
        if let Some(i) = colors
            .iter()
            .position(|c| c.iter().any(|v| !(0.0..=1.0).contains(v)))
        {
            return Err(Error::InvalidCloud(format!(
                "color of point {i} outside [0, 1]"
            )));
        }
        Ok(Self { coords, colors })
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[Vec3] {
        &self.coords
    }

    pub fn colors(&self) -> &[Vec3] {
        &self.colors
    }

    pub fn centroid(&self) -> Vec3 {
        let n = self.coords.len() as f64;
        let mut c = [0.0; 3];
        for p in &self.coords {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        c.map(|v| v / n)
    }

    pub fn max_norm(&self) -> f64 {
        self.coords.iter().map(|p| norm(*p)).fold(0.0, f64::max)
    }

    /// Same geometry, new colors.
    pub fn with_colors(&self, colors: Vec<Vec3>) -> Result<Self> {
        Self::new(self.coords.clone(), colors)
    }
}

/// Translation and isotropic scale mapping a cloud into the unit ball.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormTransform {
    pub centroid: Vec3,
    /// Reciprocal of the maximum distance to the centroid.
    pub scale: f64,
}

impl NormTransform {
    pub fn identity() -> Self {
        Self {
            centroid: [0.0; 3],
            scale: 1.0,
        }
    }

    #[inline]
    pub fn apply_point(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.centroid[0]) * self.scale,
            (p[1] - self.centroid[1]) * self.scale,
            (p[2] - self.centroid[2]) * self.scale,
        ]
    }
}

/// Centers the cloud at its centroid and scales it so the farthest point lies
/// on the unit sphere.
pub fn normalize_to_unit_sphere(pc: &PointCloud) -> Result<(PointCloud, NormTransform)> {
    let centroid = pc.centroid();
    let radius = pc
        .coords
        .iter()
        .map(|p| norm(sub(*p, centroid)))
        .fold(0.0, f64::max);
    if !(radius > 0.0) {
        return Err(Error::DegenerateGeometry);
    }
    let t = NormTransform {
        centroid,
        scale: 1.0 / radius,
    };
    Ok((apply_transform(pc, &t), t))
}

/// `coords' = (coords − centroid) · scale`; colors are untouched.
pub fn apply_transform(pc: &PointCloud, t: &NormTransform) -> PointCloud {
    PointCloud {
        coords: pc.coords.iter().map(|&p| t.apply_point(p)).collect(),
        colors: pc.colors.clone(),
    }
}

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub(crate) fn normalized(a: Vec3) -> Vec3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}
