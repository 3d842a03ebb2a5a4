//! Latent Gaussian stage: prior and recognition networks, reparametrised
//! sampling, closed-form KL, and the two combination networks that fuse the
//! sample with its variance into the uncertainty-aware latent `z_u`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layers::Linear;
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Scalar, Tensor, Var, xavier_std};

/// Bounds applied to every predicted log-variance.
pub const LOG_VAR_MIN: f64 = -8.0;
pub const LOG_VAR_MAX: f64 = 8.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatentError {
    #[error("invalid combination config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Mean and clamped log-variance of a diagonal Gaussian, as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct GaussianParams {
    pub mean: Var,
    pub log_var: Var,
}

/// Reparametrised draw `z` and the variance routed to the combination stage.
#[derive(Clone, Copy, Debug)]
pub struct LatentDraw {
    pub z: Var,
    pub sigma2: Var,
}

/// Single affine map from concatenated embeddings to `(μ, log σ²)`.
#[derive(Clone, Debug)]
pub struct GaussianNet {
    pub proj: Linear,
    pub latent_dim: usize,
    name: &'static str,
}

impl GaussianNet {
    fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &'static str,
        in_dim: usize,
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self { proj: Linear::new(store, name, in_dim, 2 * latent_dim, rng), latent_dim, name }
    }

    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        inputs: &[Var],
    ) -> Result<GaussianParams, NumericsError> {
        let width: usize = inputs.iter().map(|&v| g.value(v).len()).sum();
        if width != self.proj.in_dim || inputs.iter().any(|&v| g.value(v).rows() != 1) {
            return Err(NumericsError::Shape {
                op: self.name,
                detail: format!("expected {} input features, got {width}", self.proj.in_dim),
            });
        }
        let x = g.concat_cols(inputs)?;
        let out = self.proj.forward(g, store, x)?;
        let mean = g.slice_cols(out, 0, self.latent_dim)?;
        let raw = g.slice_cols(out, self.latent_dim, self.latent_dim)?;
        let log_var = g.clamp(raw, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(GaussianParams { mean, log_var })
    }
}

/// p(z | X, c): affine map of `[c'; X']`.
#[derive(Clone, Debug)]
pub struct PriorNet(pub GaussianNet);

impl PriorNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, embed_dim: usize, latent_dim: usize, rng: &mut R) -> Self {
        Self(GaussianNet::new(store, "prior", 2 * embed_dim, latent_dim, rng))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_emb: Var,
        c_emb: Var,
    ) -> Result<GaussianParams, NumericsError> {
        self.0.forward(g, store, &[c_emb, x_emb])
    }
}

/// q(z | X, c, Ȳ): affine map of `[c'; X'; Ȳ']`.
#[derive(Clone, Debug)]
pub struct RecognitionNet(pub GaussianNet);

impl RecognitionNet {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, embed_dim: usize, latent_dim: usize, rng: &mut R) -> Self {
        Self(GaussianNet::new(store, "recognition", 3 * embed_dim, latent_dim, rng))
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x_emb: Var,
        c_emb: Var,
        y_emb: Var,
    ) -> Result<GaussianParams, NumericsError> {
        self.0.forward(g, store, &[c_emb, x_emb, y_emb])
    }
}

/// `z = μ + exp(½ log σ²) ⊙ ε`, plus `σ² = exp(log σ²)` of the same
/// distribution.
pub fn sample_z<T: Scalar>(g: &mut Graph<T>, dist: GaussianParams, epsilon: &[T]) -> Result<LatentDraw, NumericsError> {
    let dim = g.value(dist.mean).len();
    if epsilon.len() != dim {
        return Err(NumericsError::Shape { op: "sample_z", detail: format!("noise of {} for latent {dim}", epsilon.len()) });
    }
    let eps = g.leaf(Tensor::row(epsilon.to_vec()))?;
    let half = g.scale(dist.log_var, 0.5)?;
    let std = g.exp(half)?;
    let noise = g.mul(std, eps)?;
    let z = g.add(dist.mean, noise)?;
    let sigma2 = g.exp(dist.log_var)?;
    Ok(LatentDraw { z, sigma2 })
}

/// Closed-form KL(q ‖ p) between diagonal Gaussians, in nats.
pub fn gaussian_kl<T: Scalar>(g: &mut Graph<T>, q: GaussianParams, p: GaussianParams) -> Result<Var, NumericsError> {
    let diff = g.sub(q.mean, p.mean)?;
    let diff2 = g.mul(diff, diff)?;
    let var_q = g.exp(q.log_var)?;
    let num = g.add(var_q, diff2)?;
    let neg_lvp = g.scale(p.log_var, -1.0)?;
    let inv_var_p = g.exp(neg_lvp)?;
    let ratio = g.mul(num, inv_var_p)?;
    let log_ratio = g.sub(p.log_var, q.log_var)?;
    let terms = g.add(log_ratio, ratio)?;
    let terms = g.add_scalar(terms, -1.0)?;
    let total = g.sum(terms)?;
    g.scale(total, 0.5)
}

/// Plain-value version of [`gaussian_kl`].
pub fn gaussian_kl_values(q_mean: &[f64], q_log_var: &[f64], p_mean: &[f64], p_log_var: &[f64]) -> f64 {
    let mut kl = 0.0;
    for i in 0..q_mean.len() {
        let d = q_mean[i] - p_mean[i];
        kl += p_log_var[i] - q_log_var[i] + (q_log_var[i].exp() + d * d) / p_log_var[i].exp() - 1.0;
    }
    0.5 * kl
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CombineVariant {
    /// Parallel linear branches joined by element-wise addition.
    M,
    /// Two-channel 1D convolution.
    C,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    /// Bypasses the nonlinearity; used by linear-test setups.
    Identity,
}

impl Activation {
    fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var, NumericsError> {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Identity => Ok(x),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombineConfig {
    pub variant: CombineVariant,
    pub embed_dim: usize,
    pub inter_dim: usize,
    pub latent_dim: usize,
    pub kernel_size: usize,
    pub activation: Activation,
}

impl CombineConfig {
    /// Dimensions in the 768:384:256 ratio for a given embedding width.
    pub fn with_embed(variant: CombineVariant, embed_dim: usize) -> Self {
        Self {
            variant,
            embed_dim,
            inter_dim: embed_dim / 2,
            latent_dim: embed_dim / 3,
            kernel_size: 3,
            activation: Activation::Tanh,
        }
    }

    pub fn validate(&self) -> Result<(), LatentError> {
        if self.latent_dim == 0 || self.inter_dim == 0 {
            return Err(LatentError::Config("dimensions must be positive".into()));
        }
        if self.variant == CombineVariant::C && self.kernel_size % 2 == 0 {
            return Err(LatentError::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        Ok(())
    }
}

/// M-variant: `z_u = act(W_o·(act(W_z z) + act(W_s σ²)))`.
#[derive(Clone, Debug)]
pub struct CombineM {
    pub z_branch: Linear,
    pub var_branch: Linear,
    pub out: Linear,
    pub activation: Activation,
}

/// C-variant: `z_u = act(W·act(conv1d([z; σ²])))`, length-preserving
/// convolution from two channels to one.
#[derive(Clone, Debug)]
pub struct CombineC {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub out: Linear,
    pub pad: usize,
    pub latent_dim: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug)]
pub enum Combiner {
    M(CombineM),
    C(CombineC),
}

impl Combiner {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        cfg: &CombineConfig,
        rng: &mut R,
    ) -> Result<Self, LatentError> {
        cfg.validate()?;
        Ok(match cfg.variant {
            CombineVariant::M => Combiner::M(CombineM {
                z_branch: Linear::new(store, "combine_m.z", cfg.latent_dim, cfg.inter_dim, rng),
                var_branch: Linear::new(store, "combine_m.var", cfg.latent_dim, cfg.inter_dim, rng),
                out: Linear::new(store, "combine_m.out", cfg.inter_dim, cfg.latent_dim, rng),
                activation: cfg.activation,
            }),
            CombineVariant::C => Combiner::C(CombineC {
                kernel: store.insert_normal(
                    "combine_c.conv.w",
                    &[1, 2, cfg.kernel_size],
                    xavier_std(2 * cfg.kernel_size, cfg.kernel_size),
                    rng,
                ),
                bias: store.insert_zeros("combine_c.conv.b", &[1]),
                out: Linear::new(store, "combine_c.out", cfg.latent_dim, cfg.latent_dim, rng),
                pad: cfg.kernel_size / 2,
                latent_dim: cfg.latent_dim,
                activation: cfg.activation,
            }),
        })
    }

    pub fn variant(&self) -> CombineVariant {
        match self {
            Combiner::M(_) => CombineVariant::M,
            Combiner::C(_) => CombineVariant::C,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        z: Var,
        sigma2: Var,
    ) -> Result<Var, NumericsError> {
        if g.shape(z) != g.shape(sigma2) {
            return Err(NumericsError::Shape {
                op: "combine",
                detail: format!("z {:?} vs sigma2 {:?}", g.shape(z), g.shape(sigma2)),
            });
        }
        match self {
            Combiner::M(m) => {
                let a = m.z_branch.forward(g, store, z)?;
                let a = m.activation.apply(g, a)?;
                let b = m.var_branch.forward(g, store, sigma2)?;
                let b = m.activation.apply(g, b)?;
                let joined = g.add(a, b)?;
                let out = m.out.forward(g, store, joined)?;
                m.activation.apply(g, out)
            }
            Combiner::C(c) => {
                if g.value(z).len() != c.latent_dim {
                    return Err(NumericsError::Shape {
                        op: "combine",
                        detail: format!("latent of {} for combiner of {}", g.value(z).len(), c.latent_dim),
                    });
                }
                let signal = g.concat_rows(&[z, sigma2])?;
                let w = g.param(store, c.kernel);
                let b = g.param(store, c.bias);
                let conv = g.conv1d(signal, w, b, c.pad)?;
                let conv = c.activation.apply(g, conv)?;
                let out = c.out.forward(g, store, conv)?;
                c.activation.apply(g, out)
            }
        }
    }
}
