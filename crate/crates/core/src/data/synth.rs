use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, ManifestEntry, Sample};
use crate::error::{Error, Result};
use crate::seed::derive;
use crate::geometry::{write_ply, PlyFormat, PointCloud, Vec3};

pub const MAX_LEVEL: u32 = 7;

const GEOM_SIGMA_STEP: f64 = 0.008;
const COLOR_SIGMA_STEP: f64 = 0.05;
const DOWNSAMPLE_STEP: f64 = 0.12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudKind {
    Sphere,
    Cube,
    GaussianBlob,
    CheckerTorus,
}

impl CloudKind {
    pub const ALL: [CloudKind; 4] = [
        CloudKind::Sphere,
        CloudKind::Cube,
        CloudKind::GaussianBlob,
        CloudKind::CheckerTorus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CloudKind::Sphere => "sphere",
            CloudKind::Cube => "cube",
            CloudKind::GaussianBlob => "gaussian-blob",
            CloudKind::CheckerTorus => "checker-torus",
        }
    }
}

impl FromStr for CloudKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown cloud kind {s:?}")))
    }
}

impl fmt::Display for CloudKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistortionType {
    GeomNoise,
    ColorNoise,
    Downsample,
}

impl DistortionType {
    pub const ALL: [DistortionType; 3] = [
        DistortionType::GeomNoise,
        DistortionType::ColorNoise,
        DistortionType::Downsample,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistortionType::GeomNoise => "geom-noise",
            DistortionType::ColorNoise => "color-noise",
            DistortionType::Downsample => "downsample",
        }
    }

    fn slope(self) -> f64 {
        match self {
            DistortionType::GeomNoise => 0.12,
            DistortionType::ColorNoise => 0.10,
            DistortionType::Downsample => 0.08,
        }
    }
}

impl FromStr for DistortionType {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown distortion type {s:?}")))
    }
}

impl fmt::Display for DistortionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Synthetic label: `1 − slope·level`, slopes 0.12 (geometry noise), 0.10
/// (color noise) and 0.08 (downsampling). Not a human opinion score.
pub fn pseudo_mos(ty: DistortionType, level: u32) -> f64 {
    1.0 - ty.slope() * level as f64
}

struct Palette {
    a: Vec3,
    b: Vec3,
    axis: Vec3,
    freq: f64,
    phase: f64,
}

impl Palette {
    fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut color = || [0.0; 3].map(|_: f64| rng.random_range(0.05..0.95));
        let (a, b) = (color(), color());
        let g: [f64; 3] = [0.0; 3].map(|_: f64| rng.sample(StandardNormal));
        let n = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-9);
        Self {
            a,
            b,
            axis: g.map(|v| v / n),
            freq: rng.random_range(1.5..4.0),
            phase: rng.random_range(0.0..std::f64::consts::TAU),
        }
    }

    fn lerp(&self, t: f64) -> Vec3 {
        [0, 1, 2].map(|k| self.a[k] + (self.b[k] - self.a[k]) * t)
    }

    fn wave(&self, p: Vec3) -> Vec3 {
        let s = p[0] * self.axis[0] + p[1] * self.axis[1] + p[2] * self.axis[2];
        self.lerp(0.5 + 0.5 * (self.freq * std::f64::consts::PI * s + self.phase).sin())
    }
}

/// Seeded colored synthetic cloud with exactly `n` points.
pub fn synth_cloud(kind: CloudKind, n: usize, seed: u64) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::InvalidArgument("synthetic cloud needs n >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pal = Palette::random(&mut rng);
    let mut coords = Vec::with_capacity(n);
    let mut colors = Vec::with_capacity(n);
    for _ in 0..n {
        let (p, c) = match kind {
            CloudKind::Sphere => {
                let g: [f64; 3] = [0.0; 3].map(|_: f64| rng.sample(StandardNormal));
                let len = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt().max(1e-12);
                let p = g.map(|v| v / len);
                (p, pal.wave(p))
            }
            CloudKind::Cube => {
                let h = 0.6;
                let face = rng.random_range(0..6usize);
                let (u, v) = (rng.random_range(-h..h), rng.random_range(-h..h));
                let s = if face % 2 == 0 { h } else { -h };
                let p = match face / 2 {
                    0 => [s, u, v],
                    1 => [u, s, v],
                    _ => [u, v, s],
                };
                let t = 0.5 + 0.5 * (face as f64 / 5.0 - 0.5) + 0.25 * (pal.freq * u).sin();
                (p, pal.lerp(t.clamp(0.0, 1.0)))
            }
            CloudKind::GaussianBlob => {
                let sig = [0.4, 0.3, 0.25];
                let p = [0, 1, 2].map(|k| sig[k] * rng.sample::<f64, _>(StandardNormal));
                (p, pal.wave(p))
            }
            CloudKind::CheckerTorus => {
                let (big, small) = (0.65, 0.25);
                let u = rng.random_range(0.0..std::f64::consts::TAU);
                let v = rng.random_range(0.0..std::f64::consts::TAU);
                let p = [
                    (big + small * v.cos()) * u.cos(),
                    (big + small * v.cos()) * u.sin(),
                    small * v.sin(),
                ];
                let cu = (u / std::f64::consts::TAU * 8.0) as usize;
                let cv = (v / std::f64::consts::TAU * 4.0) as usize;
                (p, if (cu + cv) % 2 == 0 { pal.a } else { pal.b })
            }
        };
        coords.push(p);
        colors.push(c);
    }
    PointCloud::new(coords, colors)
}

/// Applies one distortion at `level` in `1..=7` and returns the distorted
/// cloud with its pseudo label. Geometry noise has σ = 0.008·level, color
/// noise σ = 0.05·level (clamped to `[0, 1]`), and downsampling keeps a
/// `1 − 0.12·level` fraction of the points in their original order.
pub fn synth_distort(
    pc: &PointCloud,
    ty: DistortionType,
    level: u32,
    seed: u64,
) -> Result<(PointCloud, f64)> {
    if !(1..=MAX_LEVEL).contains(&level) {
        return Err(Error::InvalidArgument(format!(
            "distortion level {level} outside 1..={MAX_LEVEL}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lv = level as f64;
    let out = match ty {
        DistortionType::GeomNoise => {
            let noise = Normal::new(0.0, GEOM_SIGMA_STEP * lv).expect("positive sigma");
            let coords = pc
                .coords()
                .iter()
                .map(|p| p.map(|v| v + noise.sample(&mut rng)))
                .collect();
            PointCloud::new(coords, pc.colors().to_vec())?
        }
        DistortionType::ColorNoise => {
            let noise = Normal::new(0.0, COLOR_SIGMA_STEP * lv).expect("positive sigma");
            let colors = pc
                .colors()
                .iter()
                .map(|c| c.map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0)))
                .collect();
            pc.with_colors(colors)?
        }
        DistortionType::Downsample => {
            let n = pc.len();
            let keep = ((n as f64 * (1.0 - DOWNSAMPLE_STEP * lv)).round() as usize).clamp(1, n);
            let mut idx = sample(&mut rng, n, keep).into_vec();
            idx.sort_unstable();
            PointCloud::new(
                idx.iter().map(|&i| pc.coords()[i]).collect(),
                idx.iter().map(|&i| pc.colors()[i]).collect(),
            )?
        }
    };
    Ok((out, pseudo_mos(ty, level)))
}

/// Parameters of a generated dataset: `refs_per_kind` references of each
/// kind, each distorted by every type at every level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub kinds: Vec<CloudKind>,
    pub refs_per_kind: usize,
    pub n_points: usize,
    pub types: Vec<DistortionType>,
    pub levels: Vec<u32>,
    pub seed: u64,
}

/// Generates the clouds in memory together with a manifest whose paths are
/// relative (`clouds/<id>.ply`). When `out_dir` is given the clouds and
/// `manifest.jsonl` are written there.
pub fn generate_dataset(spec: &SynthSpec, out_dir: Option<&Path>) -> Result<(Manifest, Vec<Sample>)> {
    if spec.kinds.is_empty() || spec.types.is_empty() || spec.levels.is_empty() || spec.refs_per_kind == 0 {
        return Err(Error::InvalidArgument("synthetic dataset would be empty".into()));
    }
    if let Some(dir) = out_dir {
        let clouds = dir.join("clouds");
        std::fs::create_dir_all(&clouds).map_err(|e| Error::io(&clouds, e))?;
    }
    let rel = |id: &str| PathBuf::from("clouds").join(format!("{id}.ply"));
    let mut entries = Vec::new();
    let mut samples = Vec::new();
    let mut counter = 0u64;
    for (ki, &kind) in spec.kinds.iter().enumerate() {
        for r in 0..spec.refs_per_kind {
            let ref_id = format!("{}-{r:02}", kind.name());
            let ref_seed = derive(spec.seed, (ki * 1000 + r) as u64);
            let reference = synth_cloud(kind, spec.n_points, ref_seed)?;
            if let Some(dir) = out_dir {
                write_ply(&dir.join(rel(&ref_id)), &reference, PlyFormat::BinaryLittleEndian)?;
            }
            for &ty in &spec.types {
                for &level in &spec.levels {
                    counter += 1;
                    let id = format!("{ref_id}_{}_{level}", ty.name());
                    let (distorted, mos) =
                        synth_distort(&reference, ty, level, derive(ref_seed, counter))?;
                    if let Some(dir) = out_dir {
                        write_ply(&dir.join(rel(&id)), &distorted, PlyFormat::BinaryLittleEndian)?;
                    }
                    entries.push(ManifestEntry {
                        sample_id: id.clone(),
                        distorted_path: rel(&id),
                        reference_path: Some(rel(&ref_id)),
                        reference_id: ref_id.clone(),
                        mos: Some(mos),
                        distortion_type: ty.name().to_string(),
                        level,
                    });
                    samples.push(Sample {
                        id,
                        reference_id: ref_id.clone(),
                        distorted,
                        reference: Some(reference.clone()),
                        mos: Some(mos),
                    });
                }
            }
        }
    }
    let manifest = Manifest::new(entries)?;
    if let Some(dir) = out_dir {
        manifest.save(&dir.join("manifest.jsonl"))?;
    }
    Ok((manifest, samples))
}
