//! Patch tokenization: 16×16 patchify/unpatchify, random masking plans,
//! fixed 2-D sine-cosine positional embeddings and the visible-patch
//! embedding `linear(flatten(patch)) + PE`.
//!
//! Flatten order inside a patch is row, then column, then channel, which is
//! the same interleaved layout as [`Image`] rows.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::geometry::Image;
use crate::nn::Linear;
use crate::params::{Initializer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const PATCH_SIZE: usize = 16;
/// Values per flattened RGB patch.
pub const PATCH_DIM: usize = PATCH_SIZE * PATCH_SIZE * 3;
pub const DEFAULT_MASK_RATIO: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch_size: usize,
    pub rows: usize,
    pub cols: usize,
    /// Flattened patches in row-major grid order.
    pub patches: Vec<Vec<f32>>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// `count × PATCH_DIM` matrix of the selected patches.
    pub fn matrix<F: Real>(&self, idx: &[usize]) -> Tensor<F> {
        let dim = self.patch_size * self.patch_size * 3;
        let mut data = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            data.extend(self.patches[i].iter().map(|&v| F::from_f64(v as f64)));
        }
        Tensor::from_vec(idx.len(), dim, data).expect("patch matrix size")
    }

    pub fn full_matrix<F: Real>(&self) -> Tensor<F> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.matrix(&all)
    }
}

pub fn patchify(img: &Image) -> Result<PatchGrid> {
    patchify_with(img, PATCH_SIZE)
}

pub fn patchify_with(img: &Image, p: usize) -> Result<PatchGrid> {
    let (w, h) = (img.width(), img.height());
    if p == 0 || w % p != 0 || h % p != 0 || w == 0 || h == 0 {
        return Err(Error::shape(format!(
            "{w}x{h} image is not divisible into {p}x{p} patches"
        )));
    }
    let (rows, cols) = (h / p, w / p);
    let data = img.data();
    let mut patches = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let mut patch = Vec::with_capacity(p * p * 3);
            for y in 0..p {
                let start = ((gr * p + y) * w + gc * p) * 3;
                patch.extend_from_slice(&data[start..start + p * 3]);
            }
            patches.push(patch);
        }
    }
    Ok(PatchGrid {
        patch_size: p,
        rows,
        cols,
        patches,
    })
}

pub fn unpatchify(grid: &PatchGrid) -> Result<Image> {
    let p = grid.patch_size;
    if grid.patches.len() != grid.rows * grid.cols {
        return Err(Error::shape(format!(
            "grid {}x{} holds {} patches",
            grid.rows,
            grid.cols,
            grid.patches.len()
        )));
    }
    if let Some(i) = grid.patches.iter().position(|q| q.len() != p * p * 3) {
        return Err(Error::shape(format!("patch {i} has wrong size")));
    }
    let (w, h) = (grid.cols * p, grid.rows * p);
    let mut data = vec![0.0f32; w * h * 3];
    for gr in 0..grid.rows {
        for gc in 0..grid.cols {
            let patch = &grid.patches[gr * grid.cols + gc];
            for y in 0..p {
                let start = ((gr * p + y) * w + gc * p) * 3;
                data[start..start + p * 3].copy_from_slice(&patch[y * p * 3..(y + 1) * p * 3]);
            }
        }
    }
    Image::from_raw(w, h, data)
}

/// Partition of patch indices into visible and masked sets.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub total: usize,
    /// Order defines the order of latent tokens.
    pub visible_idx: Vec<usize>,
    pub masked_idx: Vec<usize>,
    pub ratio: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct MaskPlanRecord {
    seed: u64,
    ratio: f64,
    total: usize,
    masked_idx: Vec<usize>,
}

impl Serialize for MaskPlan {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskPlanRecord {
            seed: self.seed,
            ratio: self.ratio,
            total: self.total,
            masked_idx: self.masked_idx.clone(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for MaskPlan {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MaskPlanRecord::deserialize(d)?;
        let mut plan = MaskPlan::from_masked(r.total, r.masked_idx).map_err(serde::de::Error::custom)?;
        plan.ratio = r.ratio;
        plan.seed = r.seed;
        Ok(plan)
    }
}

impl MaskPlan {
    /// Nothing masked.
    pub fn all_visible(total: usize) -> Self {
        Self {
            total,
            visible_idx: (0..total).collect(),
            masked_idx: Vec::new(),
            ratio: 0.0,
            seed: 0,
        }
    }

    pub fn from_masked(total: usize, mut masked: Vec<usize>) -> Result<Self> {
        masked.sort_unstable();
        masked.dedup();
        if masked.last().is_some_and(|&m| m >= total) {
            return Err(Error::InvalidArgument(format!(
                "masked index out of range for {total} patches"
            )));
        }
        let visible = (0..total).filter(|i| masked.binary_search(i).is_err()).collect();
        Ok(Self {
            total,
            visible_idx: visible,
            ratio: masked.len() as f64 / total.max(1) as f64,
            masked_idx: masked,
            seed: 0,
        })
    }

    /// Same partition with latent tokens in a different order.
    pub fn with_visible_order(&self, order: Vec<usize>) -> Result<Self> {
        let mut a = order.clone();
        let mut b = self.visible_idx.clone();
        a.sort_unstable();
        b.sort_unstable();
        if a != b {
            return Err(Error::InvalidArgument(
                "visible order must permute the visible set".into(),
            ));
        }
        Ok(Self {
            visible_idx: order,
            ..self.clone()
        })
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked_idx.binary_search(&i).is_ok()
    }

    /// For every position `0..total`, the latent row it takes (`Some`) or the
    /// mask token (`None`).
    pub fn layout(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.total];
        for (row, &pos) in self.visible_idx.iter().enumerate() {
            out[pos] = Some(row);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.total];
        for &i in self.visible_idx.iter().chain(&self.masked_idx) {
            if i >= self.total || seen[i] {
                return Err(Error::InvalidArgument(
                    "mask plan index sets must partition 0..total".into(),
                ));
            }
            seen[i] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::InvalidArgument(
                "mask plan does not cover every patch".into(),
            ));
        }
        Ok(())
    }
}

/// Uniformly random subset of `floor(ratio·total)` masked patches.
pub fn sample_mask(total: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::InvalidArgument(format!(
            "mask ratio must lie in [0, 1), got {ratio}"
        )));
    }
    let n_masked = (ratio * total as f64).floor() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = order[..n_masked].to_vec();
    let mut visible = order[n_masked..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        total,
        visible_idx: visible,
        masked_idx: masked,
        ratio,
        seed,
    })
}

/// Fixed 2-D sine-cosine table of shape `(rows·cols) × dim`. The first half
/// of the channels encodes the grid row, the second half the grid column.
pub fn positional_embedding_2d<F: Real>(rows: usize, cols: usize, dim: usize) -> Result<Tensor<F>> {
    if dim % 4 != 0 || dim == 0 {
        return Err(Error::shape(format!(
            "positional embedding width {dim} must be a positive multiple of 4"
        )));
    }
    let quarter = dim / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
        .collect();
    Ok(Tensor::from_fn(rows * cols, dim, |pos, c| {
        let (r, col) = (pos / cols, pos % cols);
        let (coord, c) = if c < dim / 2 { (r, c) } else { (col, c - dim / 2) };
        let v = if c < quarter {
            (coord as f64 * omega[c]).sin()
        } else {
            (coord as f64 * omega[c - quarter]).cos()
        };
        F::from_f64(v)
    }))
}

/// Embedded visible patches, one row per entry of `positions`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchEmbedding<F> {
    pub vectors: Tensor<F>,
    pub positions: Vec<usize>,
}

impl<F: Real> PatchEmbedding<F> {
    pub fn width(&self) -> usize {
        self.vectors.cols()
    }
}

/// Linear patch projection shared by both branches.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        width: usize,
    ) -> Self {
        Self {
            proj: Linear::new(store, init, &format!("{name}.proj"), PATCH_DIM, width),
        }
    }

    pub fn width(&self) -> usize {
        self.proj.out_dim
    }

    /// In-graph embedding of `patches` (`V×PATCH_DIM`) at grid `positions`.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        patches: NodeId,
        positions: &[usize],
        pe: &Tensor<F>,
    ) -> NodeId {
        let x = self.proj.forward(g, patches);
        let pos = g.input(pe.select_rows(positions));
        g.add(x, pos)
    }
}

/// Embeds the visible patches of `grid` under `plan`.
pub fn embed_visible<F: Real>(
    grid: &PatchGrid,
    plan: &MaskPlan,
    embed: &PatchEmbed,
    store: &ParamStore<F>,
) -> Result<PatchEmbedding<F>> {
    if plan.total != grid.len() {
        return Err(Error::shape(format!(
            "mask plan over {} patches, grid has {}",
            plan.total,
            grid.len()
        )));
    }
    let patch_dim = grid.patch_size * grid.patch_size * 3;
    let w = store.get(embed.proj.w);
    if w.rows() != patch_dim {
        return Err(Error::shape(format!(
            "embedding expects {} inputs, patches have {patch_dim}",
            w.rows()
        )));
    }
    let pe = positional_embedding_2d::<F>(grid.rows, grid.cols, embed.width())?;
    let mut g = Graph::new(store);
    let x = g.input(grid.matrix(&plan.visible_idx));
    let out = embed.forward(&mut g, x, &plan.visible_idx, &pe);
    Ok(PatchEmbedding {
        vectors: g.value(out).clone(),
        positions: plan.visible_idx.clone(),
    })
}
