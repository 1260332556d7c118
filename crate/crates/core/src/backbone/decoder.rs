use super::block::TransformerBlock;
use super::DecoderConfig;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Linear, INIT_STD};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::patches::{positional_embedding_2d, MaskPlan, PATCH_DIM};
use crate::real::Real;
use crate::tensor::Tensor;

/// Shallow decoder: projects latent tokens to the decoder width, fills every
/// masked position with one shared learnable token, adds positional
/// embeddings for all positions and runs its own transformer blocks. The
/// `pred` head maps each decoded token to a flattened patch.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: Linear,
    pub mask_token: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub pred: Linear,
}

impl Decoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        encoder_width: usize,
        cfg: DecoderConfig,
    ) -> Self {
        let embed = Linear::new(store, init, &format!("{name}.embed"), encoder_width, cfg.width);
        let mask_token = store.add(
            format!("{name}.mask_token"),
            init.trunc_normal(1, cfg.width, INIT_STD),
        );
        let blocks = (0..cfg.depth)
            .map(|i| {
                TransformerBlock::new(
                    store,
                    init,
                    &format!("{name}.blocks.{i}"),
                    cfg.width,
                    cfg.heads,
                    cfg.mlp_ratio,
                )
            })
            .collect();
        let pred = Linear::new(store, init, &format!("{name}.pred"), cfg.width, PATCH_DIM);
        Self {
            cfg,
            embed,
            mask_token,
            blocks,
            pred,
        }
    }

    /// Decodes `latent` (one row per `plan.visible_idx` entry, in that order)
    /// into `plan.total` tokens in canonical position order. `pe` is the
    /// positional table at decoder width for all positions.
    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        latent: NodeId,
        plan: &MaskPlan,
        pe: &Tensor<F>,
    ) -> Result<NodeId> {
        let (rows, width) = g.shape(latent);
        if rows != plan.visible_idx.len() || width != self.embed.in_dim {
            return Err(Error::shape(format!(
                "latent {rows}x{width} does not match {} visible tokens of width {}",
                plan.visible_idx.len(),
                self.embed.in_dim
            )));
        }
        if pe.shape() != (plan.total, self.cfg.width) {
            return Err(Error::shape(format!(
                "decoder positional table {:?}, expected {:?}",
                pe.shape(),
                (plan.total, self.cfg.width)
            )));
        }
        let projected = self.embed.forward(g, latent);
        let token = g.param(self.mask_token);
        let pool = g.concat_rows(&[projected, token]);
        let layout: Vec<usize> = plan
            .layout()
            .into_iter()
            .map(|slot| slot.unwrap_or(rows))
            .collect();
        let full = g.gather_rows(pool, &layout);
        let pos = g.input(pe.clone());
        let mut x = g.add(full, pos);
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }

    pub fn project<F: Real>(&self, g: &mut Graph<'_, F>, decoded: NodeId) -> NodeId {
        self.pred.forward(g, decoded)
    }

    /// Standalone decode for a `grid_rows × grid_cols` patch grid.
    pub fn decode<F: Real>(
        &self,
        latent: &Tensor<F>,
        plan: &MaskPlan,
        grid: (usize, usize),
        store: &ParamStore<F>,
    ) -> Result<Tensor<F>> {
        if grid.0 * grid.1 != plan.total {
            return Err(Error::shape("grid size does not match mask plan"));
        }
        plan.validate()?;
        let pe = positional_embedding_2d(grid.0, grid.1, self.cfg.width)?;
        let mut g = Graph::new(store);
        let x = g.input(latent.clone());
        let out = self.forward(&mut g, x, plan, &pe)?;
        Ok(g.value(out).clone())
    }
}

/// Per-token affine projection to flattened 16×16×3 patches.
pub fn project_patches<F: Real>(
    decoded: &Tensor<F>,
    decoder: &Decoder,
    store: &ParamStore<F>,
) -> Result<Vec<Vec<F>>> {
    if decoded.cols() != decoder.pred.in_dim {
        return Err(Error::shape(format!(
            "decoded width {} does not match projection input {}",
            decoded.cols(),
            decoder.pred.in_dim
        )));
    }
    let mut g = Graph::new(store);
    let x = g.input(decoded.clone());
    let y = decoder.project(&mut g, x);
    let y = g.value(y);
    Ok((0..y.rows()).map(|r| y.row(r).to_vec()).collect())
}
