//! Parameterised building blocks shared by the latent stage and the
//! transformer.

use rand::Rng;

use crate::numerics::{xavier_std, Graph, NumericsError, ParamId, ParamStore, Scalar, Var};

/// `y = x·W + b` with `W: [in, out]`, Xavier-normal `W` and zero `b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = store.insert_normal(&format!("{name}.w"), &[in_dim, out_dim], xavier_std(in_dim, out_dim), rng);
        let b = store.insert_zeros(&format!("{name}.b"), &[out_dim]);
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NumericsError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gain = store.insert_ones(&format!("{name}.g"), &[dim]);
        let bias = store.insert_zeros(&format!("{name}.b"), &[dim]);
        Self { gain, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var, NumericsError> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, Self::EPS)
    }
}
