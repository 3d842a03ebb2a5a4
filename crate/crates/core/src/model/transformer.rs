//! Small pre-LN transformer used as the sequence encoder and the causal
//! response decoder.

use rand::Rng;

use crate::layers::{LayerNorm, Linear};
use crate::numerics::{Graph, NumericsError, ParamId, ParamStore, Scalar, Tensor, Var, INIT_STD};

/// Sinusoidal position table, `[positions, dim]` row-major.
#[derive(Clone, Debug)]
pub struct PositionTable {
    dim: usize,
    values: Vec<f64>,
}

impl PositionTable {
    pub fn new(positions: usize, dim: usize) -> Self {
        let mut values = vec![0.0; positions * dim];
        for pos in 0..positions {
            for i in 0..dim {
                let pair = (i / 2) as f64;
                let angle = pos as f64 / 10000f64.powf(2.0 * pair / dim as f64);
                values[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        Self { dim, values }
    }

    pub fn positions(&self) -> usize {
        self.values.len() / self.dim
    }

    fn leaf<T: Scalar>(&self, g: &mut Graph<T>, len: usize) -> Result<Var, NumericsError> {
        if len > self.positions() {
            return Err(NumericsError::Shape {
                op: "positional_encoding",
                detail: format!("sequence of {len} exceeds {} positions", self.positions()),
            });
        }
        let data = self.values[..len * self.dim].iter().map(|&v| T::of(v)).collect();
        g.leaf(Tensor::new(vec![len, self.dim], data)?)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    out: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Stack of self-attention blocks.
#[derive(Clone, Debug)]
pub struct Stack {
    blocks: Vec<Block>,
    final_ln: LayerNorm,
    heads: usize,
    dim: usize,
    causal: bool,
}

impl Stack {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        layers: usize,
        dim: usize,
        heads: usize,
        ffn_dim: usize,
        causal: bool,
        rng: &mut R,
    ) -> Self {
        let blocks = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{p}.ln1"), dim),
                    qkv: Linear::new(store, &format!("{p}.attn.qkv"), dim, 3 * dim, rng),
                    out: Linear::new(store, &format!("{p}.attn.out"), dim, dim, rng),
                    ln2: LayerNorm::new(store, &format!("{p}.ln2"), dim),
                    ff1: Linear::new(store, &format!("{p}.ff1"), dim, ffn_dim, rng),
                    ff2: Linear::new(store, &format!("{p}.ff2"), ffn_dim, dim, rng),
                }
            })
            .collect();
        let final_ln = LayerNorm::new(store, &format!("{name}.ln_f"), dim);
        Self { blocks, final_ln, heads, dim, causal }
    }

    fn attention<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        block: &Block,
        x: Var,
    ) -> Result<Var, NumericsError> {
        let head_dim = self.dim / self.heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let qkv = block.qkv.forward(g, store, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let q = g.slice_cols(qkv, h * head_dim, head_dim)?;
            let k = g.slice_cols(qkv, self.dim + h * head_dim, head_dim)?;
            let v = g.slice_cols(qkv, 2 * self.dim + h * head_dim, head_dim)?;
            let scores = g.matmul_nt(q, k)?;
            let scores = g.scale(scores, scale)?;
            let probs = if self.causal { g.causal_softmax(scores)? } else { g.softmax(scores)? };
            outs.push(g.matmul(probs, v)?);
        }
        let joined = if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs)? };
        block.out.forward(g, store, joined)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, mut x: Var) -> Result<Var, NumericsError> {
        for block in &self.blocks {
            let h = block.ln1.forward(g, store, x)?;
            let a = self.attention(g, store, block, h)?;
            x = g.add(x, a)?;
            let h = block.ln2.forward(g, store, x)?;
            let f = block.ff1.forward(g, store, h)?;
            let f = g.relu(f)?;
            let f = block.ff2.forward(g, store, f)?;
            x = g.add(x, f)?;
        }
        self.final_ln.forward(g, store, x)
    }
}

/// Token embedding (scaled by √dim) + positions + bidirectional stack, mean-pooled over
/// non-PAD positions.
#[derive(Clone, Debug)]
pub struct SequenceEncoder {
    pub embedding: ParamId,
    stack: Stack,
}

impl SequenceEncoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        rng: &mut R,
    ) -> Self {
        let embedding = store.insert_normal("encoder.embedding", &[vocab, dim], INIT_STD, rng);
        let stack = Stack::new(store, "encoder", layers, dim, heads, ffn_dim, false, rng);
        Self { embedding, stack }
    }

    /// Encodes `ids` into a `[1, dim]` vector; PAD positions are excluded
    /// from the pooled mean.
    pub fn encode<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        positions: &PositionTable,
        ids: &[usize],
    ) -> Result<Var, NumericsError> {
        let table = g.param(store, self.embedding);
        let tok = g.embedding(table, ids)?;
        let tok = g.scale(tok, (positions.dim as f64).sqrt())?;
        let pos = positions.leaf(g, ids.len())?;
        let x = g.add(tok, pos)?;
        let h = self.stack.forward(g, store, x)?;
        let mask: Vec<bool> = ids.iter().map(|&i| i != crate::corpus::PAD).collect();
        g.mean_pool(h, &mask)
    }
}

/// Causal decoder; `z_u` enters through a learned projection added at every
/// position.
#[derive(Clone, Debug)]
pub struct ResponseDecoder {
    pub embedding: ParamId,
    stack: Stack,
    pub head: Linear,
    pub latent_proj: Option<Linear>,
}

impl ResponseDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        vocab: usize,
        dim: usize,
        layers: usize,
        heads: usize,
        ffn_dim: usize,
        latent_dim: Option<usize>,
        rng: &mut R,
    ) -> Self {
        let embedding = store.insert_normal("decoder.embedding", &[vocab, dim], INIT_STD, rng);
        let stack = Stack::new(store, "decoder", layers, dim, heads, ffn_dim, true, rng);
        let head = Linear::new(store, "decoder.head", dim, vocab, rng);
        let latent_proj = latent_dim.map(|l| Linear::new(store, "decoder.latent_proj", l, dim, rng));
        Self { embedding, stack, head, latent_proj }
    }

    /// Logits `[prefix_len, vocab]`. Without `z_u` the latent contributes
    /// nothing.
    pub fn logits<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        positions: &PositionTable,
        prefix: &[usize],
        z_u: Option<Var>,
    ) -> Result<Var, NumericsError> {
        let table = g.param(store, self.embedding);
        let tok = g.embedding(table, prefix)?;
        let tok = g.scale(tok, (positions.dim as f64).sqrt())?;
        let pos = positions.leaf(g, prefix.len())?;
        let mut x = g.add(tok, pos)?;
        if let (Some(z), Some(proj)) = (z_u, &self.latent_proj) {
            let shift = proj.forward(g, store, z)?;
            x = g.add_bias(x, shift)?;
        }
        let h = self.stack.forward(g, store, x)?;
        self.head.forward(g, store, h)
    }
}
