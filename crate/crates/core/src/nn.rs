//! Parameterized layers shared by the encoders, decoders and the quality head.

use crate::autograd::{Graph, NodeId};
use crate::params::{Initializer, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightInit {
    /// Truncated normal with σ = [`INIT_STD`], used inside the transformer.
    #[default]
    TruncNormal,
    /// Uniform on ±1/√fan_in, used for the freshly added quality head so a
    /// stack of linear maps does not start out collapsed to zero.
    FanIn,
}

/// Affine map `x·W + b` with `W: in×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
    ) -> Self {
        Self::new_with(store, init, name, in_dim, out_dim, WeightInit::TruncNormal)
    }

    pub fn new_with<F: Real>(
        store: &mut ParamStore<F>,
        init: &mut Initializer,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        scheme: WeightInit,
    ) -> Self {
        let weights = match scheme {
            WeightInit::TruncNormal => init.trunc_normal(in_dim, out_dim, INIT_STD),
            WeightInit::FanIn => init.uniform(in_dim, out_dim, 1.0 / (in_dim as f64).sqrt()),
        };
        let w = store.add(format!("{name}.w"), weights);
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        g.linear(x, self.w, self.b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::filled(1, dim, F::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<F: Real>(&self, g: &mut Graph<'_, F>, x: NodeId) -> NodeId {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta)
    }
}
