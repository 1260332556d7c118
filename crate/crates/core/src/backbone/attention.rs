use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::nn::{Linear, WeightInit};
use crate::params::{Initializer, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Multi-head scaled dot-product attention. Queries, keys and values are
/// projected to `inner` channels split evenly across heads; the concatenated
/// head outputs go through an `inner → out_dim` projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    pub heads: usize,
}

pub struct MultiHeadOutput {
    pub output: NodeId,
    /// Per-head `T_q × T_k` attention matrices (rows sum to one).
    pub weights: Vec<NodeId>,
}

impl Attention {
    #[allow(clippy::too_many_arguments)]
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
    ) -> Self {
        Self::new_with(store, init, name, query_dim, kv_dim, inner, out_dim, heads, WeightInit::TruncNormal)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn new_with<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        query_dim: usize,
        kv_dim: usize,
        inner: usize,
        out_dim: usize,
        heads: usize,
        scheme: WeightInit,
    ) -> Self {
        assert!(heads > 0 && inner % heads == 0, "inner width must split across heads");
        let mut lin = |suffix: &str, i: usize, o: usize| {
            Linear::new_with(store, init, &format!("{name}.{suffix}"), i, o, scheme)
        };
        Self {
            q: lin("q", query_dim, inner),
            k: lin("k", kv_dim, inner),
            v: lin("v", kv_dim, inner),
            out: lin("out", inner, out_dim),
            heads,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.q.out_dim / self.heads
    }

    pub fn forward<F: Real>(
        &self,
        g: &mut Graph<'_, F>,
        xq: NodeId,
        xk: NodeId,
        xv: NodeId,
    ) -> MultiHeadOutput {
        let q = self.q.forward(g, xq);
        let k = self.k.forward(g, xk);
        let v = self.v.forward(g, xv);
        let hd = self.head_dim();
        let scale = F::from_f64(1.0 / (hd as f64).sqrt());
        let mut heads = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.slice_cols(q, h * hd, hd);
            let kh = g.slice_cols(k, h * hd, hd);
            let vh = g.slice_cols(v, h * hd, hd);
            let kt = g.transpose(kh);
            let scores = g.matmul(qh, kt);
            let scores = g.scale(scores, scale);
            let att = g.softmax_rows(scores);
            weights.push(att);
            heads.push(g.matmul(att, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        MultiHeadOutput {
            output: self.out.forward(g, merged),
            weights,
        }
    }
}

/// Cross-attention of `query` rows over `keys`/`values` rows. Returns the
/// fused output and the per-head attention matrices.
pub fn mca<F: Real>(
    query: &Tensor<F>,
    keys: &Tensor<F>,
    values: &Tensor<F>,
    attn: &Attention,
    store: &ParamStore<F>,
) -> Result<(Tensor<F>, Vec<Tensor<F>>)> {
    if keys.rows() == 0 || keys.rows() != values.rows() {
        return Err(Error::shape(format!(
            "cross-attention needs k >= 1 matching keys and values, got {} and {}",
            keys.rows(),
            values.rows()
        )));
    }
    if query.cols() != attn.q.in_dim || keys.cols() != attn.k.in_dim || values.cols() != attn.v.in_dim {
        return Err(Error::shape(format!(
            "cross-attention widths: query {}, keys {}, values {}; expected {}, {}, {}",
            query.cols(),
            keys.cols(),
            values.cols(),
            attn.q.in_dim,
            attn.k.in_dim,
            attn.v.in_dim
        )));
    }
    let mut g = Graph::new(store);
    let q = g.input(query.clone());
    let k = g.input(keys.clone());
    let v = g.input(values.clone());
    let out = attn.forward(&mut g, q, k, v);
    let weights = out.weights.iter().map(|&w| g.value(w).clone()).collect();
    Ok((g.value(out.output).clone(), weights))
}
