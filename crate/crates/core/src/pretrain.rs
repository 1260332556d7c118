//! Dual-branch masked-autoencoder pre-training.
//!
//! Both encoders read the same embedded visible patches of the distorted
//! view. The distortion branch reconstructs the masked patches of the
//! distorted view, the content branch the corresponding patches of the
//! reference view. The loss is `α·loss_x + (1 − α)·loss_y`, each term a mean
//! over all pixels of the assembled image, so only masked positions carry
//! gradient.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::backbone::checkpoint::Checkpoint;
use crate::backbone::{BackboneConfig, Decoder, Encoder};
use crate::error::{Error, Result};
use crate::geometry::{crop_window, rig_evenly_distributed, CropPolicy, Image, PointCloud};
use crate::params::{adam_step, AdamConfig, AdamState, Initializer, ParamGrads, ParamStore};
use crate::patches::{
    patchify, positional_embedding_2d, sample_mask, unpatchify, MaskPlan, PatchEmbed, PatchGrid,
    DEFAULT_MASK_RATIO,
};
use crate::real::Real;
use crate::seed::derive;
use crate::tensor::Tensor;
use crate::views::{cached_png, render_pair_rig, ViewConfig};

pub const DEFAULT_ALPHA: f64 = 0.7;
pub const CHECKPOINT_KIND: &str = "pretrain";
pub const LOSS_LOG: &str = "loss_log.csv";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

impl LrSchedule {
    /// Learning rate for 0-based `step` out of `total` steps.
    pub fn lr(self, base: f64, step: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * t.min(1.0)).cos())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    /// Size of the evenly distributed rig.
    pub views: usize,
    pub mask_ratio: f64,
    pub alpha: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub grad_clip: f64,
    pub schedule: LrSchedule,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            views: 12,
            mask_ratio: DEFAULT_MASK_RATIO,
            alpha: DEFAULT_ALPHA,
            lr: 3e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 200,
            max_steps: 0,
            grad_clip: 1.0,
            schedule: LrSchedule::Constant,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, field: &str) -> Result<()> {
        let f = |name: &str| format!("{field}.{name}");
        if self.views == 0 {
            return Err(Error::config(f("views"), "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(f("mask_ratio"), "must be in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(f("alpha"), "must be in [0, 1]"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config(f("lr"), "must be finite and >= 0"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config(f("weight_decay"), "must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::config(f("batch_size"), "must be at least 1"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config(f("grad_clip"), "must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// Shared patch embedding, two encoders and two decoders.
#[derive(Clone, Debug)]
pub struct MaskedAutoencoder {
    pub cfg: BackboneConfig,
    pub embed: PatchEmbed,
    /// Distortion-aware encoder, reconstructs the distorted view.
    pub enc_dist: Encoder,
    /// Content-aware encoder, reconstructs the reference view.
    pub enc_content: Encoder,
    pub dec_dist: Decoder,
    pub dec_content: Decoder,
}

/// Positional tables at encoder and decoder width for one grid shape.
#[derive(Clone, Debug)]
pub struct PeTables<F> {
    pub rows: usize,
    pub cols: usize,
    pub enc: Tensor<F>,
    pub dec: Tensor<F>,
}

impl<F: Real> PeTables<F> {
    pub fn new(cfg: &BackboneConfig, rows: usize, cols: usize) -> Result<Self> {
        Ok(Self {
            rows,
            cols,
            enc: positional_embedding_2d(rows, cols, cfg.encoder.width)?,
            dec: positional_embedding_2d(rows, cols, cfg.decoder.width)?,
        })
    }
}

pub struct SampleNodes {
    pub pred_x: NodeId,
    pub pred_y: NodeId,
    pub loss_x: NodeId,
    pub loss_y: NodeId,
    pub loss: NodeId,
}

impl MaskedAutoencoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        cfg: BackboneConfig,
    ) -> Self {
        let w = cfg.encoder.width;
        Self {
            cfg,
            embed: PatchEmbed::new(store, init, "embed", w),
            enc_dist: Encoder::new(store, init, "enc_dist", cfg.encoder),
            enc_content: Encoder::new(store, init, "enc_content", cfg.encoder),
            dec_dist: Decoder::new(store, init, "dec_dist", w, cfg.decoder),
            dec_content: Decoder::new(store, init, "dec_content", w, cfg.decoder),
        }
    }

    /// Fresh model and parameters from a seed.
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<(Self, ParamStore<f32>)> {
        cfg.validate("backbone")?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let model = Self::new(&mut store, &mut init, cfg);
        Ok((model, store))
    }

    /// Per-sample graph: predictions of both branches for all positions and
    /// the three loss scalars.
    #[allow(clippy::too_many_arguments)]
    pub fn sample_forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        grid_x: &PatchGrid,
        grid_y: &PatchGrid,
        plan: &MaskPlan,
        pe: &PeTables<F>,
        alpha: f64,
    ) -> Result<SampleNodes> {
        check_pair_grids(grid_x, grid_y, plan)?;
        if (grid_x.rows, grid_x.cols) != (pe.rows, pe.cols) {
            return Err(Error::shape("positional tables do not match the patch grid"));
        }
        let vis = g.input(grid_x.matrix(&plan.visible_idx));
        let emb = self.embed.forward(g, vis, &plan.visible_idx, &pe.enc);
        let lat_f = self.enc_dist.forward(g, emb)?;
        let lat_g = self.enc_content.forward(g, emb)?;
        let dec_f = self.dec_dist.forward(g, lat_f, plan, &pe.dec)?;
        let pred_x = self.dec_dist.project(g, dec_f);
        let dec_g = self.dec_content.forward(g, lat_g, plan, &pe.dec)?;
        let pred_y = self.dec_content.project(g, dec_g);

        let pixels = (plan.total * grid_x.patches[0].len()) as f64;
        let loss_x = masked_sq_error(g, pred_x, grid_x, plan, pixels);
        let loss_y = masked_sq_error(g, pred_y, grid_y, plan, pixels);
        let a = g.scale(loss_x, F::from_f64(alpha));
        let b = g.scale(loss_y, F::from_f64(1.0 - alpha));
        let loss = g.add(a, b);
        Ok(SampleNodes {
            pred_x,
            pred_y,
            loss_x,
            loss_y,
            loss,
        })
    }

    /// Patch predictions of both branches for every grid position.
    pub fn reconstruct<F: Real>(
        &self,
        store: &ParamStore<F>,
        grid_x: &PatchGrid,
        grid_y: &PatchGrid,
        plan: &MaskPlan,
    ) -> Result<(Vec<Vec<F>>, Vec<Vec<F>>)> {
        let pe = PeTables::new(&self.cfg, grid_x.rows, grid_x.cols)?;
        let mut g = Graph::new(store);
        let n = self.sample_forward(&mut g, grid_x, grid_y, plan, &pe, DEFAULT_ALPHA)?;
        let rows = |t: &Tensor<F>| (0..t.rows()).map(|r| t.row(r).to_vec()).collect();
        Ok((rows(g.value(n.pred_x)), rows(g.value(n.pred_y))))
    }
}

fn check_pair_grids(x: &PatchGrid, y: &PatchGrid, plan: &MaskPlan) -> Result<()> {
    if (x.rows, x.cols, x.patch_size) != (y.rows, y.cols, y.patch_size) {
        return Err(Error::shape("distorted and reference grids differ"));
    }
    if plan.total != x.len() {
        return Err(Error::shape(format!(
            "mask plan over {} patches, grid has {}",
            plan.total,
            x.len()
        )));
    }
    Ok(())
}

/// Sum of squared errors at masked positions divided by the pixel count of
/// the whole image: the mean over the assembled image, whose visible
/// positions match the target exactly.
fn masked_sq_error<F: Real>(
    g: &mut Graph<'_, F>,
    pred: NodeId,
    target: &PatchGrid,
    plan: &MaskPlan,
    pixels: f64,
) -> NodeId {
    if plan.masked_idx.is_empty() {
        return g.input(Tensor::zeros(1, 1));
    }
    let p = g.gather_rows(pred, &plan.masked_idx);
    let t = g.input(target.matrix(&plan.masked_idx));
    let d = g.sub(p, t);
    let sq = g.mul(d, d);
    let s = g.sum_all(sq);
    g.scale(s, F::from_f64(1.0 / pixels))
}

/// Masked positions take the predicted patches, visible positions keep the
/// original patches verbatim.
pub fn assemble<F: Real>(pred: &[Vec<F>], grid: &PatchGrid, plan: &MaskPlan) -> Result<Image> {
    plan.validate()?;
    if plan.total != grid.len() || pred.len() != grid.len() {
        return Err(Error::shape(format!(
            "{} predictions and a plan over {} for a grid of {}",
            pred.len(),
            plan.total,
            grid.len()
        )));
    }
    let mut out = grid.clone();
    for &i in &plan.masked_idx {
        if pred[i].len() != grid.patches[i].len() {
            return Err(Error::shape(format!("prediction {i} has the wrong length")));
        }
        out.patches[i] = pred[i].iter().map(|v| v.as_f64() as f32).collect();
    }
    unpatchify(&out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconOutput {
    pub assembled_distorted: Image,
    pub assembled_reference: Image,
    pub loss_x: f64,
    pub loss_y: f64,
    pub loss: f64,
}

fn image_mse(a: &Image, b: &Image) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::shape(format!(
            "images {}x{} and {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(s / a.data().len() as f64)
}

/// Reconstruction loss on assembled images.
pub fn recon_loss(
    assembled_x: &Image,
    target_x: &Image,
    assembled_y: &Image,
    target_y: &Image,
    alpha: f64,
) -> Result<ReconOutput> {
    if (assembled_x.width(), assembled_x.height()) != (assembled_y.width(), assembled_y.height()) {
        return Err(Error::shape("distorted and reference images differ in size"));
    }
    let loss_x = image_mse(assembled_x, target_x)?;
    let loss_y = image_mse(assembled_y, target_y)?;
    Ok(ReconOutput {
        assembled_distorted: assembled_x.clone(),
        assembled_reference: assembled_y.clone(),
        loss_x,
        loss_y,
        loss: combine(alpha, loss_x, loss_y),
    })
}

pub fn combine(alpha: f64, loss_x: f64, loss_y: f64) -> f64 {
    alpha * loss_x + (1.0 - alpha) * loss_y
}

/// Cropped distorted/reference views with their mask plans.
#[derive(Clone, Debug)]
pub struct PretrainBatch {
    pub ids: Vec<String>,
    pub distorted_views: Vec<Image>,
    pub reference_views: Vec<Image>,
    pub plans: Vec<MaskPlan>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub loss_x: f64,
    pub loss_y: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// One optimizer step on the batch mean of the per-sample loss. Per-sample
/// graphs run in parallel; gradients are merged in batch order.
pub fn pretrain_step(
    model: &MaskedAutoencoder,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    batch: &PretrainBatch,
    cfg: &PretrainConfig,
    lr: f64,
) -> Result<StepStats> {
    let b = batch.ids.len();
    if b == 0
        || batch.distorted_views.len() != b
        || batch.reference_views.len() != b
        || batch.plans.len() != b
    {
        return Err(Error::InvalidArgument(format!(
            "malformed batch: {} ids, {} distorted, {} reference, {} plans",
            b,
            batch.distorted_views.len(),
            batch.reference_views.len(),
            batch.plans.len()
        )));
    }
    let grids: Vec<(PatchGrid, PatchGrid)> = batch
        .distorted_views
        .iter()
        .zip(&batch.reference_views)
        .map(|(x, y)| Ok((patchify(x)?, patchify(y)?)))
        .collect::<Result<_>>()?;
    let (rows, cols) = (grids[0].0.rows, grids[0].0.cols);
    let pe = PeTables::<f32>::new(&model.cfg, rows, cols)?;
    let seed = 1.0 / b as f32;
    let shared: &ParamStore<f32> = store;
    let results: Vec<(ParamGrads<f32>, f64, f64)> = grids
        .par_iter()
        .zip(batch.plans.par_iter())
        .map(|((gx, gy), plan)| {
            let mut g = Graph::new(shared);
            let n = model.sample_forward(&mut g, gx, gy, plan, &pe, cfg.alpha)?;
            let lx = g.value(n.loss_x).get(0, 0) as f64;
            let ly = g.value(n.loss_y).get(0, 0) as f64;
            let grads = g.backward(n.loss, Tensor::filled(1, 1, seed)).params;
            Ok((grads, lx, ly))
        })
        .collect::<Result<_>>()?;
    let mut grads = ParamGrads::new(store.len());
    let (mut lx, mut ly) = (0.0, 0.0);
    for (gr, x, y) in results {
        grads.merge(gr);
        lx += x;
        ly += y;
    }
    lx /= b as f64;
    ly /= b as f64;
    let loss = combine(cfg.alpha, lx, ly);
    if !loss.is_finite() || !grads.is_finite() {
        return Err(Error::NonFinite {
            context: format!(
                "pre-training loss {loss} (loss_x {lx}, loss_y {ly}) on batch [{}]",
                batch.ids.join(", ")
            ),
        });
    }
    let pre = grads.clip_global_norm(cfg.grad_clip);
    let grad_norm = pre.unwrap_or_else(|| grads.global_norm());
    if let Some(n) = pre {
        log::debug!("gradient norm {n:.4} clipped to {}", cfg.grad_clip);
    }
    adam_step(store, &grads, adam, &cfg.adam(), lr);
    Ok(StepStats {
        loss,
        loss_x: lx,
        loss_y: ly,
        grad_norm,
        clipped: pre.is_some(),
    })
}

/// Unlabeled training pair. Carries no quality label by construction.
#[derive(Clone, Debug)]
pub struct PretrainPair {
    pub id: String,
    pub distorted: PointCloud,
    pub reference: PointCloud,
}

/// Full-resolution rendered rig of every pair.
#[derive(Clone, Debug)]
pub struct PretrainViews {
    pub ids: Vec<String>,
    /// `views[pair][camera] = (distorted, reference)`.
    pub views: Vec<Vec<(Image, Image)>>,
}

impl PretrainViews {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Mean RGB over every distorted and reference view.
    pub fn mean_color(&self) -> [f64; 3] {
        let mut acc = [0.0; 3];
        let mut n = 0.0f64;
        for (x, y) in self.views.iter().flatten() {
            for img in [x, y] {
                let c = img.mean_color();
                for k in 0..3 {
                    acc[k] += c[k];
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n.max(1.0))
    }
}

/// Renders the `views`-camera rig for every pair; with `cache_dir` the PNGs
/// are reused across runs.
pub fn prepare_views(
    pairs: &[PretrainPair],
    n_views: usize,
    view_cfg: &ViewConfig,
    cache_dir: Option<&Path>,
) -> Result<PretrainViews> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no pre-training pairs".into()));
    }
    let cams = rig_evenly_distributed(n_views, view_cfg.distance)?;
    if let Some(dir) = cache_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let views = pairs
        .par_iter()
        .map(|p| match cache_dir {
            None => render_pair_rig(&p.reference, &p.distorted, &cams, view_cfg),
            Some(dir) => {
                let path = |k: usize, s: &str| -> PathBuf {
                    dir.join(format!("{}_{}_v{k:02}_{s}.png", p.id, view_cfg.resolution))
                };
                let all_cached = (0..n_views).all(|k| path(k, "x").exists() && path(k, "y").exists());
                let rendered = if all_cached {
                    None
                } else {
                    Some(render_pair_rig(&p.reference, &p.distorted, &cams, view_cfg)?)
                };
                (0..n_views)
                    .map(|k| {
                        let x = cached_png(&path(k, "x"), || Ok(rendered.as_ref().expect("rendered")[k].0.clone()))?;
                        let y = cached_png(&path(k, "y"), || Ok(rendered.as_ref().expect("rendered")[k].1.clone()))?;
                        Ok((x, y))
                    })
                    .collect()
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainViews {
        ids: pairs.iter().map(|p| p.id.clone()).collect(),
        views,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub loss_x: f64,
    pub loss_y: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub model: MaskedAutoencoder,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub log: Vec<LossRecord>,
    pub epochs_done: usize,
}

/// Everything identifying a pre-training run, echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEcho {
    pub backbone: BackboneConfig,
    pub view: ViewConfig,
    pub pretrain: PretrainConfig,
    pub seed: u64,
}

fn crop_for(view_cfg: &ViewConfig, seed: u64) -> Result<crate::geometry::CropWindow> {
    let policy = if view_cfg.random_crop {
        CropPolicy::Random { seed }
    } else {
        CropPolicy::Center
    };
    crop_window(view_cfg.resolution, view_cfg.crop, policy)
}

/// Runs pre-training. Every epoch each pair contributes one uniformly chosen
/// view; pairs are shuffled and split into batches. With `out` set, the loss
/// log and checkpoints are written under it.
pub fn pretrain(
    echo: &PretrainEcho,
    data: &PretrainViews,
    out: Option<&Path>,
    resume: Option<&Checkpoint>,
) -> Result<PretrainOutcome> {
    let cfg = &echo.pretrain;
    cfg.validate("pretrain")?;
    echo.view.validate("view")?;
    if data.is_empty() {
        return Err(Error::EmptyDataset("no pre-training views".into()));
    }
    let (model, mut store) = MaskedAutoencoder::init(echo.backbone, echo.seed)?;
    let mut adam = AdamState::new(&store);
    let mut start_epoch = 0;
    if let Some(ck) = resume {
        ck.load_into(&mut store)?;
        adam = ck.optimizer_state(&store)?;
        start_epoch = ck.extra.get("epoch").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
    }

    let n = data.len();
    let per_epoch = n.div_ceil(cfg.batch_size);
    let mut total = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let config_json = serde_json::to_value(echo)?;
    let ckpt_dir = out.map(|o| o.join("checkpoints"));
    let mut log_file = match out {
        Some(o) => {
            fs::create_dir_all(ckpt_dir.as_ref().expect("set with out"))
                .map_err(|e| Error::io(o, e))?;
            let path = o.join(LOSS_LOG);
            let fresh = resume.is_none() || !path.exists();
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(&path)
                .map_err(|e| Error::io(&path, e))?;
            if fresh {
                writeln!(f, "step,epoch,loss,loss_x,loss_y,lr").map_err(|e| Error::io(&path, e))?;
            }
            Some((f, path))
        }
        None => None,
    };
    let save = |store: &ParamStore<f32>, adam: &AdamState<f32>, epoch: usize, name: &str| -> Result<()> {
        if let Some(dir) = &ckpt_dir {
            let mut ck = Checkpoint::from_store(CHECKPOINT_KIND, config_json.clone(), store, Some(adam));
            if let serde_json::Value::Object(m) = &mut ck.extra {
                m.insert("epoch".into(), epoch.into());
            }
            ck.save(&dir.join(name))?;
        }
        Ok(())
    };
    let mut log = Vec::new();
    let mut step = adam.step as usize;
    let mut epochs_done = start_epoch;
    'epochs: for epoch in start_epoch..cfg.epochs {
        if cfg.max_steps > 0 && step >= cfg.max_steps {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive(echo.seed, 0x5EED_0000 + epoch as u64));
        let view_of: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.views[0].len())).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break 'epochs;
            }
            let mut batch = PretrainBatch {
                ids: Vec::new(),
                distorted_views: Vec::new(),
                reference_views: Vec::new(),
                plans: Vec::new(),
            };
            for (slot, &i) in chunk.iter().enumerate() {
                let stream = (step as u64) << 16 | slot as u64;
                let (x, y) = &data.views[i][view_of[i]];
                let window = crop_for(&echo.view, derive(echo.seed, stream ^ 0xC0))?;
                let (x, y) = (x.crop(&window)?, y.crop(&window)?);
                let total_patches = echo.view.patch_count();
                batch.plans.push(sample_mask(
                    total_patches,
                    cfg.mask_ratio,
                    derive(echo.seed, stream ^ 0x3A5C),
                )?);
                batch.ids.push(format!("{}#v{}", data.ids[i], view_of[i]));
                batch.distorted_views.push(x);
                batch.reference_views.push(y);
            }
            let lr = cfg.schedule.lr(cfg.lr, step, total);
            let stats = pretrain_step(&model, &mut store, &mut adam, &batch, cfg, lr)?;
            step += 1;
            let rec = LossRecord {
                step,
                epoch,
                loss: stats.loss,
                loss_x: stats.loss_x,
                loss_y: stats.loss_y,
                lr,
            };
            if let Some((f, path)) = log_file.as_mut() {
                writeln!(
                    f,
                    "{},{},{},{},{},{}",
                    rec.step, rec.epoch, rec.loss, rec.loss_x, rec.loss_y, rec.lr
                )
                .map_err(|e| Error::io(&*path, e))?;
            }
            log::info!(
                "pretrain step {step} epoch {epoch}: loss {:.6} (x {:.6}, y {:.6})",
                rec.loss,
                rec.loss_x,
                rec.loss_y
            );
            log.push(rec);
        }
        epochs_done = epoch + 1;
        save(&store, &adam, epochs_done, "pretrain_last.ckpt")?;
    }
    save(&store, &adam, epochs_done, "pretrain_last.ckpt")?;
    Ok(PretrainOutcome {
        model,
        store,
        adam,
        log,
        epochs_done,
    })
}

/// Mean squared error over the masked pixels only, per branch.
pub fn masked_patch_mse<F: Real>(
    pred: &[Vec<F>],
    target: &PatchGrid,
    plan: &MaskPlan,
) -> Result<f64> {
    if plan.masked_idx.is_empty() || pred.len() != target.len() {
        return Err(Error::InvalidArgument("no masked patches to score".into()));
    }
    let mut s = 0.0;
    let mut n = 0usize;
    for &i in &plan.masked_idx {
        for (p, t) in pred[i].iter().zip(&target.patches[i]) {
            let d = p.as_f64() - *t as f64;
            s += d * d;
            n += 1;
        }
    }
    Ok(s / n as f64)
}

/// The same error for a predictor that outputs one constant color.
pub fn constant_color_mse(target: &PatchGrid, plan: &MaskPlan, color: [f64; 3]) -> Result<f64> {
    let pred: Vec<Vec<f64>> = target
        .patches
        .iter()
        .map(|p| (0..p.len()).map(|k| color[k % 3]).collect())
        .collect();
    masked_patch_mse(&pred, target, plan)
}

/// Copies externally produced encoder weights into the content encoder.
/// Tensors named `enc_content.*` or `encoder.*` are accepted; every content
/// encoder tensor must be present with a matching shape.
pub fn load_content_init(store: &mut ParamStore<f32>, ck: &Checkpoint) -> Result<()> {
    let expected = store
        .iter()
        .filter(|(_, n, _)| n.starts_with("enc_content."))
        .count();
    let mut copied = ck.load_prefix(store, "enc_content.", "enc_content.")?;
    if copied == 0 {
        copied = ck.load_prefix(store, "encoder.", "enc_content.")?;
    }
    if copied != expected {
        return Err(Error::Checkpoint(format!(
            "content encoder init provides {copied} of {expected} tensors"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{DecoderConfig, EncoderConfig};

    fn toy() -> BackboneConfig {
        BackboneConfig {
            encoder: EncoderConfig {
                depth: 1,
                width: 16,
                heads: 2,
                mlp_ratio: 2,
            },
            decoder: DecoderConfig {
                depth: 1,
                width: 8,
                heads: 2,
                mlp_ratio: 2,
            },
        }
    }

    fn image(seed: u64, side: usize) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_raw(side, side, (0..side * side * 3).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn combine_matches_hand_arithmetic() {
        assert!((combine(0.7, 0.2, 0.1) - 0.17).abs() < 1e-15);
        assert_eq!(combine(1.0, 0.3, 0.9), 0.3);
    }

    #[test]
    fn in_graph_loss_equals_assembled_image_loss() {
        let (model, store) = MaskedAutoencoder::init(toy(), 3).unwrap();
        let (x, y) = (image(1, 32), image(2, 32));
        let (gx, gy) = (patchify(&x).unwrap(), patchify(&y).unwrap());
        let plan = sample_mask(4, 0.5, 9).unwrap();
        let (px, py) = model.reconstruct(&store, &gx, &gy, &plan).unwrap();
        let ax = assemble(&px, &gx, &plan).unwrap();
        let ay = assemble(&py, &gy, &plan).unwrap();
        let r = recon_loss(&ax, &x, &ay, &y, 0.7).unwrap();
        let pe = PeTables::new(&model.cfg, 2, 2).unwrap();
        let mut g = Graph::new(&store);
        let n = model.sample_forward(&mut g, &gx, &gy, &plan, &pe, 0.7).unwrap();
        let lx = g.value(n.loss_x).get(0, 0) as f64;
        let ly = g.value(n.loss_y).get(0, 0) as f64;
        assert!((lx - r.loss_x).abs() < 1e-5 * r.loss_x.max(1e-3));
        assert!((ly - r.loss_y).abs() < 1e-5 * r.loss_y.max(1e-3));
        assert_eq!(r.loss, combine(0.7, r.loss_x, r.loss_y));
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let (model, mut store) = MaskedAutoencoder::init(toy(), 3).unwrap();
        let before = store.clone();
        let mut adam = AdamState::new(&store);
        let batch = PretrainBatch {
            ids: vec!["a".into(), "b".into()],
            distorted_views: vec![image(1, 32), image(2, 32)],
            reference_views: vec![image(3, 32), image(4, 32)],
            plans: vec![sample_mask(4, 0.5, 1).unwrap(), sample_mask(4, 0.5, 2).unwrap()],
        };
        let cfg = PretrainConfig {
            weight_decay: 0.0,
            ..PretrainConfig::default()
        };
        let s = pretrain_step(&model, &mut store, &mut adam, &batch, &cfg, 0.0).unwrap();
        assert!(s.loss > 0.0);
        for (id, _, t) in store.iter() {
            assert_eq!(t, before.get(id));
        }
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Cosine.lr(1.0, 0, 10), 1.0);
        assert!(LrSchedule::Cosine.lr(1.0, 10, 10).abs() < 1e-12);
        assert_eq!(LrSchedule::Constant.lr(0.5, 7, 10), 0.5);
    }
}
