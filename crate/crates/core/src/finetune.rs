//! Supervised quality regression on six perpendicular views.
//!
//! Each view is encoded by both encoders and mean-pooled over tokens. The
//! element-wise maximum of the six content vectors queries the six
//! distortion vectors through multi-head cross-attention; two affine layers
//! with a GELU in between map the fused vector to a score. Training
//! minimizes `β·mse + (1 − β)·rank` on labels scaled to `[0, 1]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::backbone::checkpoint::Checkpoint;
use crate::backbone::{Attention, BackboneConfig, Encoder};
use crate::error::{Error, Result};
use crate::eval::{evaluate, srocc, MetricReport};
use crate::geometry::{rig_perpendicular, PointCloud};
use crate::nn::{Linear, WeightInit};
use crate::params::{adam_step, AdamConfig, AdamState, Initializer, ParamGrads, ParamStore};
use crate::patches::{positional_embedding_2d, PatchEmbed, PatchGrid};
use crate::pretrain::LrSchedule;
use crate::real::Real;
use crate::seed::derive;
use crate::tensor::Tensor;
use crate::views::{patch_grids, render_self_rig, ViewConfig};

pub const CHECKPOINT_KIND: &str = "finetune";
pub const VIEW_COUNT: usize = 6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    #[default]
    Mca,
    MaxpoolConcat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    #[default]
    #[serde(rename = "mse+rank")]
    MseRank,
    #[serde(rename = "mse")]
    Mse,
}

/// Which encoders take their weights from the pre-training checkpoint.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branches {
    #[default]
    Both,
    Content,
    Distortion,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub heads: usize,
    /// Output width of the cross-attention.
    pub fused_width: usize,
    pub hidden: usize,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps; 0 means no limit.
    pub max_steps: usize,
    pub grad_clip: f64,
    pub schedule: LrSchedule,
    pub fusion: Fusion,
    pub loss: LossKind,
    pub branches: Branches,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            fused_width: 1024,
            hidden: 128,
            beta: 0.5,
            lr: 3e-3,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 150,
            max_steps: 0,
            grad_clip: 1.0,
            schedule: LrSchedule::Constant,
            fusion: Fusion::Mca,
            loss: LossKind::MseRank,
            branches: Branches::Both,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self, field: &str, encoder_width: usize) -> Result<()> {
        let f = |name: &str| format!("{field}.{name}");
        if self.heads == 0 || encoder_width % self.heads != 0 {
            return Err(Error::config(
                f("heads"),
                format!("must divide the encoder width {encoder_width}"),
            ));
        }
        if self.fused_width == 0 {
            return Err(Error::config(f("fused_width"), "must be positive"));
        }
        if self.hidden == 0 {
            return Err(Error::config(f("hidden"), "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config(f("beta"), "must be in [0, 1]"));
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

    /// Effective β: the rank term is dropped under the MSE-only ablation.
    pub fn effective_beta(&self) -> f64 {
        match self.loss {
            LossKind::MseRank => self.beta,
            LossKind::Mse => 1.0,
        }
    }
}

/// Per-view pooled features, one row per view in rig order.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures<F> {
    pub content: Tensor<F>,
    pub distortion: Tensor<F>,
}

impl<F: Real> ViewFeatures<F> {
    pub fn width(&self) -> usize {
        self.content.cols()
    }
}

#[derive(Clone, Debug)]
pub struct QualityModel {
    pub backbone: BackboneConfig,
    pub head: FinetuneConfig,
    pub embed: PatchEmbed,
    pub enc_dist: Encoder,
    pub enc_content: Encoder,
    /// Present under MCA fusion.
    pub mca: Option<Attention>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl QualityModel {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        backbone: BackboneConfig,
        head: FinetuneConfig,
    ) -> Self {
        let d = backbone.encoder.width;
        let embed = PatchEmbed::new(store, init, "embed", d);
        let enc_dist = Encoder::new(store, init, "enc_dist", backbone.encoder);
        let enc_content = Encoder::new(store, init, "enc_content", backbone.encoder);
        let (mca, fc_in) = match head.fusion {
            Fusion::Mca => (
                Some(Attention::new_with(
                    store,
                    init,
                    "head.mca",
                    d,
                    d,
                    d,
                    head.fused_width,
                    head.heads,
                    WeightInit::FanIn,
                )),
                head.fused_width,
            ),
            Fusion::MaxpoolConcat => (None, 2 * d),
        };
        let fc1 = Linear::new_with(store, init, "head.fc1", fc_in, head.hidden, WeightInit::FanIn);
        let fc2 = Linear::new_with(store, init, "head.fc2", head.hidden, 1, WeightInit::FanIn);
        Self {
            backbone,
            head,
            embed,
            enc_dist,
            enc_content,
            mca,
            fc1,
            fc2,
        }
    }

    pub fn init(
        backbone: BackboneConfig,
        head: FinetuneConfig,
        seed: u64,
    ) -> Result<(Self, ParamStore<f32>)> {
        backbone.validate("backbone")?;
        head.validate("finetune", backbone.encoder.width)?;
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed);
        let model = Self::new(&mut store, &mut init, backbone, head);
        Ok((model, store))
    }

    /// In-graph pooled features for every view: `(content, distortion)`,
    /// each `views × d`.
    pub fn encode_graph<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        grids: &[PatchGrid],
        pe: &Tensor<F>,
    ) -> Result<(NodeId, NodeId)> {
        if grids.is_empty() {
            return Err(Error::shape("no views to encode"));
        }
        let positions: Vec<usize> = (0..grids[0].len()).collect();
        if pe.rows() != positions.len() {
            return Err(Error::shape("positional table does not match the patch grid"));
        }
        let mut content = Vec::with_capacity(grids.len());
        let mut distortion = Vec::with_capacity(grids.len());
        for grid in grids {
            if grid.len() != positions.len() {
                return Err(Error::shape("views have different patch counts"));
            }
            let x = g.input(grid.full_matrix());
            let emb = self.embed.forward(g, x, &positions, pe);
            let tf = self.enc_dist.forward(g, emb)?;
            let tg = self.enc_content.forward(g, emb)?;
            distortion.push(g.mean_rows(tf));
            content.push(g.mean_rows(tg));
        }
        Ok((g.concat_rows(&content), g.concat_rows(&distortion)))
    }

    /// In-graph fusion of pooled features into one row.
    pub fn fuse_graph<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        content: NodeId,
        distortion: NodeId,
    ) -> Result<NodeId> {
        let (kc, dc) = g.shape(content);
        let (kd, dd) = g.shape(distortion);
        let d = self.backbone.encoder.width;
        if kc == 0 || kc != kd || dc != d || dd != d {
            return Err(Error::shape(format!(
                "fusion expects matching k×{d} features, got {kc}x{dc} and {kd}x{dd}"
            )));
        }
        let query = g.max_rows(content);
        Ok(match &self.mca {
            Some(attn) => attn.forward(g, query, distortion, distortion).output,
            None => {
                let dmax = g.max_rows(distortion);
                g.concat_cols(&[query, dmax])
            }
        })
    }

    pub fn regress_graph<F: Real>(&self, g: &mut Graph<'_, F>, fused: NodeId) -> NodeId {
        let h = self.fc1.forward(g, fused);
        let h = g.gelu(h);
        self.fc2.forward(g, h)
    }

    /// Score node (1×1) for one sample's view grids.
    pub fn score_graph<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        grids: &[PatchGrid],
        pe: &Tensor<F>,
    ) -> Result<NodeId> {
        let (c, d) = self.encode_graph(g, grids, pe)?;
        let f = self.fuse_graph(g, c, d)?;
        Ok(self.regress_graph(g, f))
    }

    pub fn positional_table<F: Real>(&self, grid: &PatchGrid) -> Result<Tensor<F>> {
        positional_embedding_2d(grid.rows, grid.cols, self.backbone.encoder.width)
    }
}

/// Renders the six perpendicular views of a cloud normalized by itself and
/// center-cropped.
pub fn render_quality_views(pc: &PointCloud, view_cfg: &ViewConfig) -> Result<Vec<PatchGrid>> {
    let cams = rig_perpendicular(view_cfg.distance)?;
    patch_grids(&render_self_rig(pc, &cams, view_cfg)?)
}

pub fn encode_views<F: Real>(
    pc: &PointCloud,
    model: &QualityModel,
    store: &ParamStore<F>,
    view_cfg: &ViewConfig,
) -> Result<ViewFeatures<F>> {
    let grids = render_quality_views(pc, view_cfg)?;
    encode_grids(&grids, model, store)
}

pub fn encode_grids<F: Real>(
    grids: &[PatchGrid],
    model: &QualityModel,
    store: &ParamStore<F>,
) -> Result<ViewFeatures<F>> {
    let pe = model.positional_table(&grids[0])?;
    let mut g = Graph::new(store);
    let (c, d) = model.encode_graph(&mut g, grids, &pe)?;
    Ok(ViewFeatures {
        content: g.value(c).clone(),
        distortion: g.value(d).clone(),
    })
}

pub fn fuse<F: Real>(
    vf: &ViewFeatures<F>,
    model: &QualityModel,
    store: &ParamStore<F>,
) -> Result<Tensor<F>> {
    let mut g = Graph::new(store);
    let c = g.input(vf.content.clone());
    let d = g.input(vf.distortion.clone());
    let f = model.fuse_graph(&mut g, c, d)?;
    Ok(g.value(f).clone())
}

pub fn regress<F: Real>(fused: &Tensor<F>, model: &QualityModel, store: &ParamStore<F>) -> Result<F> {
    if fused.shape() != (1, model.fc1.in_dim) {
        return Err(Error::shape(format!(
            "regression expects 1x{}, got {:?}",
            model.fc1.in_dim,
            fused.shape()
        )));
    }
    if !fused.is_finite() {
        return Err(Error::NonFinite {
            context: "fused feature".into(),
        });
    }
    let mut g = Graph::new(store);
    let x = g.input(fused.clone());
    let q = model.regress_graph(&mut g, x);
    Ok(g.value(q).get(0, 0))
}

fn check_labels(pred: &[f64], q: &[f64]) -> Result<()> {
    if pred.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions but {} labels",
            pred.len(),
            q.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

pub fn loss_mse(pred: &[f64], q: &[f64]) -> Result<f64> {
    check_labels(pred, q)?;
    let s: f64 = pred.iter().zip(q).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(s / pred.len() as f64)
}

fn rank_sign(qi: f64, qj: f64) -> f64 {
    if qi >= qj {
        1.0
    } else {
        -1.0
    }
}

/// Pairwise ranking loss
/// `(1/B²)·Σᵢ Σⱼ max(0, |qᵢ − qⱼ| − e(qᵢ, qⱼ)·(q̂ᵢ − q̂ⱼ))`.
pub fn loss_rank(pred: &[f64], q: &[f64]) -> Result<f64> {
    check_labels(pred, q)?;
    let b = pred.len();
    let mut s = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let e = rank_sign(q[i], q[j]);
            s += ((q[i] - q[j]).abs() - e * (pred[i] - pred[j])).max(0.0);
        }
    }
    Ok(s / (b * b) as f64)
}

pub fn loss_fine(pred: &[f64], q: &[f64], beta: f64) -> Result<f64> {
    Ok(beta * loss_mse(pred, q)? + (1.0 - beta) * loss_rank(pred, q)?)
}

/// Loss components and `∂loss/∂q̂ᵢ` for the combined loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FineLoss {
    pub loss: f64,
    pub mse: f64,
    pub rank: f64,
    pub grad: Vec<f64>,
}

pub fn loss_fine_with_grad(pred: &[f64], q: &[f64], beta: f64) -> Result<FineLoss> {
    let mse = loss_mse(pred, q)?;
    let rank = loss_rank(pred, q)?;
    let b = pred.len();
    let bf = b as f64;
    let mut grad: Vec<f64> = pred
        .iter()
        .zip(q)
        .map(|(p, t)| beta * 2.0 * (p - t) / bf)
        .collect();
    let w = (1.0 - beta) / (bf * bf);
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let e = rank_sign(q[i], q[j]);
            if (q[i] - q[j]).abs() - e * (pred[i] - pred[j]) > 0.0 {
                grad[i] -= w * e;
                grad[j] += w * e;
            }
        }
    }
    Ok(FineLoss {
        loss: beta * mse + (1.0 - beta) * rank,
        mse,
        rank,
        grad,
    })
}

/// Linear map of labels onto `[0, 1]` fitted on the training set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelScale {
    pub min: f64,
    pub max: f64,
}

impl LabelScale {
    pub fn fit(labels: &[f64]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::EmptyDataset("no labels".into()));
        }
        let min = labels.iter().copied().fold(f64::INFINITY, f64::min);
        let max = labels.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min) {
            return Err(Error::InvalidArgument(
                "all training labels are equal; nothing to regress".into(),
            ));
        }
        Ok(Self { min, max })
    }

    pub fn forward(&self, mos: f64) -> f64 {
        (mos - self.min) / (self.max - self.min)
    }

    pub fn inverse(&self, scaled: f64) -> f64 {
        scaled * (self.max - self.min) + self.min
    }
}

/// Rendered views and native-scale label of one sample.
#[derive(Clone, Debug)]
pub struct LabeledViews {
    pub id: String,
    pub grids: Vec<PatchGrid>,
    pub mos: f64,
}

/// Renders the quality views of each `(id, cloud, mos)` in parallel.
pub fn prepare_labeled(
    samples: &[(String, PointCloud, f64)],
    view_cfg: &ViewConfig,
) -> Result<Vec<LabeledViews>> {
    samples
        .par_iter()
        .map(|(id, pc, mos)| {
            Ok(LabeledViews {
                id: id.clone(),
                grids: render_quality_views(pc, view_cfg)?,
                mos: *mos,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FineStepStats {
    pub loss: f64,
    pub mse: f64,
    pub rank: f64,
    pub grad_norm: f64,
}

/// One optimizer step. Scores are computed per sample in parallel, the
/// batch-coupled loss outside the graphs, then each graph is differentiated
/// with its sample's `∂loss/∂q̂ᵢ` as seed.
pub fn finetune_step(
    model: &QualityModel,
    store: &mut ParamStore<f32>,
    adam: &mut AdamState<f32>,
    batch: &[&LabeledViews],
    targets: &[f64],
    cfg: &FinetuneConfig,
    lr: f64,
) -> Result<FineStepStats> {
    if batch.is_empty() || batch.len() != targets.len() {
        return Err(Error::InvalidArgument("malformed fine-tuning batch".into()));
    }
    let pe: Tensor<f32> = model.positional_table(&batch[0].grids[0])?;
    let shared: &ParamStore<f32> = store;
    let graphs: Vec<(Graph<'_, f32>, NodeId)> = batch
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(shared);
            let q = model.score_graph(&mut g, &s.grids, &pe)?;
            Ok((g, q))
        })
        .collect::<Result<_>>()?;
    let pred: Vec<f64> = graphs.iter().map(|(g, q)| g.value(*q).get(0, 0) as f64).collect();
    let fl = loss_fine_with_grad(&pred, targets, cfg.effective_beta())?;
    if !fl.loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|s| s.id.as_str()).collect();
        return Err(Error::NonFinite {
            context: format!(
                "fine-tuning loss {} (mse {}, rank {}) on batch [{}]",
                fl.loss,
                fl.mse,
                fl.rank,
                ids.join(", ")
            ),
        });
    }
    let parts: Vec<ParamGrads<f32>> = graphs
        .into_par_iter()
        .zip(fl.grad.par_iter())
        .map(|((g, q), &d)| g.backward(q, Tensor::filled(1, 1, d as f32)).params)
        .collect();
    let mut grads = ParamGrads::new(store.len());
    for p in parts {
        grads.merge(p);
    }
    if !grads.is_finite() {
        return Err(Error::NonFinite {
            context: "fine-tuning gradients".into(),
        });
    }
    let pre = grads.clip_global_norm(cfg.grad_clip);
    if let Some(n) = pre {
        log::debug!("gradient norm {n:.4} clipped to {}", cfg.grad_clip);
    }
    let grad_norm = pre.unwrap_or_else(|| grads.global_norm());
    let adam_cfg = AdamConfig {
        weight_decay: cfg.weight_decay,
        ..AdamConfig::default()
    };
    adam_step(store, &grads, adam, &adam_cfg, lr);
    Ok(FineStepStats {
        loss: fl.loss,
        mse: fl.mse,
        rank: fl.rank,
        grad_norm,
    })
}

/// Scaled-space scores for many samples, in input order.
pub fn predict_scaled(
    model: &QualityModel,
    store: &ParamStore<f32>,
    samples: &[LabeledViews],
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let pe: Tensor<f32> = model.positional_table(&samples[0].grids[0])?;
    samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new(store);
            let q = model.score_graph(&mut g, &s.grids, &pe)?;
            let v = g.value(q).get(0, 0) as f64;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("score of {}", s.id),
                });
            }
            Ok(v)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_loss: f64,
    pub train_srocc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<MetricReport>,
}

/// Everything identifying a fine-tuning run, echoed into checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneEcho {
    pub backbone: BackboneConfig,
    pub view: ViewConfig,
    pub finetune: FinetuneConfig,
    pub seed: u64,
}

pub struct FinetuneOutcome {
    pub model: QualityModel,
    pub store: ParamStore<f32>,
    pub scale: LabelScale,
    pub history: Vec<EpochRecord>,
    /// Epoch (1-based; 0 = before training) with the lowest training loss.
    pub best_epoch: usize,
    /// Test metrics at `best_epoch`, when a test set was given.
    pub best_test: Option<MetricReport>,
    /// Native-scale test predictions at `best_epoch`.
    pub best_test_predictions: Vec<f64>,
    pub steps: usize,
}

/// Copies the pre-trained weights selected by `branches`. The patch
/// embedding comes along with any loaded encoder.
pub fn load_pretrained(
    store: &mut ParamStore<f32>,
    ck: &Checkpoint,
    branches: Branches,
) -> Result<usize> {
    if ck.kind != crate::pretrain::CHECKPOINT_KIND {
        return Err(Error::Checkpoint(format!(
            "expected a pre-training checkpoint, got kind {:?}",
            ck.kind
        )));
    }
    let prefixes: &[&str] = match branches {
        Branches::Both => &["embed.", "enc_dist.", "enc_content."],
        Branches::Content => &["embed.", "enc_content."],
        Branches::Distortion => &["embed.", "enc_dist."],
        Branches::None => &[],
    };
    let mut copied = 0;
    for p in prefixes {
        let expected = store.iter().filter(|(_, n, _)| n.starts_with(p)).count();
        let n = ck.load_prefix(store, p, p)?;
        if n != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint provides {n} of {expected} tensors under {p}"
            )));
        }
        copied += n;
    }
    Ok(copied)
}

fn evaluate_native(
    model: &QualityModel,
    store: &ParamStore<f32>,
    scale: &LabelScale,
    samples: &[LabeledViews],
) -> Result<(Vec<f64>, Option<MetricReport>)> {
    let pred: Vec<f64> = predict_scaled(model, store, samples)?
        .into_iter()
        .map(|v| scale.inverse(v))
        .collect();
    let mos: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    let report = if samples.len() >= 3 {
        match evaluate(&pred, &mos) {
            Ok(r) => Some(r),
            Err(e) => {
                log::warn!("test metrics undefined: {e}");
                None
            }
        }
    } else {
        None
    };
    Ok((pred, report))
}

/// Trains the quality model. With a test set, test metrics are computed
/// every epoch and those of the epoch with the lowest training loss are
/// reported.
pub fn finetune(
    echo: &FinetuneEcho,
    train: &[LabeledViews],
    test: Option<&[LabeledViews]>,
    init: Option<&Checkpoint>,
    out: Option<&Path>,
) -> Result<FinetuneOutcome> {
    let cfg = &echo.finetune;
    echo.view.validate("view")?;
    if train.is_empty() {
        return Err(Error::EmptyDataset("no labeled training samples".into()));
    }
    let (model, mut store) = QualityModel::init(echo.backbone, cfg.clone(), derive(echo.seed, 1))?;
    if let Some(ck) = init {
        let n = load_pretrained(&mut store, ck, cfg.branches)?;
        log::info!("loaded {n} pre-trained tensors ({:?})", cfg.branches);
    }
    let scale = LabelScale::fit(&train.iter().map(|s| s.mos).collect::<Vec<_>>())?;
    let targets: Vec<f64> = train.iter().map(|s| scale.forward(s.mos)).collect();
    let mut adam = AdamState::new(&store);

    let per_epoch = train.len().div_ceil(cfg.batch_size);
    let mut total = per_epoch * cfg.epochs;
    if cfg.max_steps > 0 {
        total = total.min(cfg.max_steps);
    }
    let (mut best_pred, mut best_test) = match test {
        Some(t) => evaluate_native(&model, &store, &scale, t)?,
        None => (Vec::new(), None),
    };
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        if cfg.max_steps > 0 && step >= cfg.max_steps {
            break;
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive(echo.seed, 0xF1E0 + epoch as u64)));
        let mut loss_sum = 0.0;
        let mut steps_in_epoch = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps > 0 && step >= cfg.max_steps {
                break;
            }
            let batch: Vec<&LabeledViews> = chunk.iter().map(|&i| &train[i]).collect();
            let tg: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
            let lr = cfg.schedule.lr(cfg.lr, step, total);
            let st = finetune_step(&model, &mut store, &mut adam, &batch, &tg, cfg, lr)?;
            step += 1;
            steps_in_epoch += 1;
            loss_sum += st.loss;
            log::debug!("finetune step {step}: loss {:.6}", st.loss);
        }
        let train_loss = loss_sum / steps_in_epoch.max(1) as f64;
        let train_pred = predict_scaled(&model, &store, train)?;
        let train_srocc = srocc(&train_pred, &targets).ok();
        let (pred, report) = match test {
            Some(t) => evaluate_native(&model, &store, &scale, t)?,
            None => (Vec::new(), None),
        };
        log::info!(
            "finetune epoch {} loss {train_loss:.6} train srocc {:?} test srocc {:?}",
            epoch + 1,
            train_srocc,
            report.as_ref().map(|r| r.srocc)
        );
        if train_loss < best_loss {
            best_loss = train_loss;
            best_epoch = epoch + 1;
            best_test = report.clone();
            best_pred = pred;
        }
        history.push(EpochRecord {
            epoch: epoch + 1,
            steps: step,
            train_loss,
            train_srocc,
            test: report,
        });
    }
    if let Some(o) = out {
        let dir = o.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        quality_checkpoint(echo, &store, &scale).save(&dir.join("finetune_last.ckpt"))?;
    }
    Ok(FinetuneOutcome {
        model,
        store,
        scale,
        history,
        best_epoch,
        best_test,
        best_test_predictions: best_pred,
        steps: step,
    })
}

pub fn quality_checkpoint(echo: &FinetuneEcho, store: &ParamStore<f32>, scale: &LabelScale) -> Checkpoint {
    let mut ck = Checkpoint::from_store(
        CHECKPOINT_KIND,
        serde_json::to_value(echo).expect("config serializes"),
        store,
        None,
    );
    if let serde_json::Value::Object(m) = &mut ck.extra {
        m.insert(
            "label_scale".into(),
            serde_json::to_value(scale).expect("scale serializes"),
        );
    }
    ck
}

/// A trained model restored from its checkpoint.
pub struct Predictor {
    pub echo: FinetuneEcho,
    pub model: QualityModel,
    pub store: ParamStore<f32>,
    pub scale: LabelScale,
}

impl Predictor {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != CHECKPOINT_KIND {
            return Err(Error::Checkpoint(format!(
                "expected a fine-tuned checkpoint, got kind {:?}",
                ck.kind
            )));
        }
        let echo: FinetuneEcho = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Checkpoint(format!("config echo: {e}")))?;
        let scale: LabelScale = ck
            .extra
            .get("label_scale")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("missing label scale".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| Error::Checkpoint(e.to_string())))?;
        let (model, mut store) = QualityModel::init(echo.backbone, echo.finetune.clone(), 0)?;
        ck.load_into(&mut store)?;
        Ok(Self {
            echo,
            model,
            store,
            scale,
        })
    }

    /// Native-scale score of one cloud.
    pub fn predict(&self, pc: &PointCloud) -> Result<f64> {
        let grids = render_quality_views(pc, &self.echo.view)?;
        let s = LabeledViews {
            id: String::new(),
            grids,
            mos: f64::NAN,
        };
        let v = predict_scaled(&self.model, &self.store, std::slice::from_ref(&s))?[0];
        Ok(self.scale.inverse(v))
    }
}
