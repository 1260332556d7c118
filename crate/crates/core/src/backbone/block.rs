use super::attention::Attention;
use super::EncoderConfig;
use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};
use crate::params::{Initializer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Pre-norm transformer block:
/// `h = MSA(LN(x)) + x`, `out = MLP(LN(h)) + h`, GELU inside the MLP.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerBlock {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        width: usize,
        heads: usize,
        mlp_ratio: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), width),
            attn: Attention::new(
                store,
                init,
                &format!("{name}.attn"),
                width,
                width,
                width,
                width,
                heads,
            ),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), width),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), width, width * mlp_ratio),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), width * mlp_ratio, width),
        }
    }

    pub fn width(&self) -> usize {
        self.fc2.out_dim
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> Result<NodeId> {
        let normed = self.ln1.forward(g, x);
        let att = self.attn.forward(g, normed, normed, normed).output;
        let h = g.add(att, x);
        let normed = self.ln2.forward(g, h);
        let hidden = self.fc1.forward(g, normed);
        let hidden = g.gelu(hidden);
        let mlp = self.fc2.forward(g, hidden);
        let out = g.add(mlp, h);
        if !g.value(out).is_finite() {
            return Err(Error::NonFinite {
                context: format!(
                    "transformer block output (input finite: {}, attention finite: {})",
                    g.value(x).is_finite(),
                    g.value(att).is_finite()
                ),
            });
        }
        Ok(out)
    }
}

/// Applies one block to a token sequence outside of a training graph.
pub fn transformer_block<F: Real>(
    x: &Tensor<F>,
    block: &TransformerBlock,
    store: &ParamStore<F>,
) -> Result<Tensor<F>> {
    if x.cols() != block.width() || x.rows() == 0 {
        return Err(Error::shape(format!(
            "block of width {} given {:?} tokens",
            block.width(),
            x.shape()
        )));
    }
    let mut g = Graph::new(store);
    let n = g.input(x.clone());
    let out = block.forward(&mut g, n)?;
    Ok(g.value(out).clone())
}

/// `depth` stacked transformer blocks, no final norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<TransformerBlock>,
}

impl Encoder {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        cfg: EncoderConfig,
    ) -> Self {
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
        Self { cfg, blocks }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, mut x: NodeId) -> Result<NodeId> {
        let (_, w) = g.shape(x);
        if w != self.cfg.width {
            return Err(Error::shape(format!(
                "encoder of width {} given tokens of width {w}",
                self.cfg.width
            )));
        }
        for b in &self.blocks {
            x = b.forward(g, x)?;
        }
        Ok(x)
    }

    /// Encodes an embedded token sequence outside of a training graph.
    pub fn encode<F: Real>(&self, x: &Tensor<F>, store: &ParamStore<F>) -> Result<Tensor<F>> {
        let mut g = Graph::new(store);
        let n = g.input(x.clone());
        let out = self.forward(&mut g, n)?;
        Ok(g.value(out).clone())
    }
}
