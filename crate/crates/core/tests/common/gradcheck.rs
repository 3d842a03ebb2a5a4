//! Central finite-difference gradient checker and the case registry shared
//! by the gradient suite and the acceptance target.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use uacvae_core::corpus::{generate_synthetic, build_vocab, EncodedExample, SyntheticSpec, PAD};
use uacvae_core::latent::{
    gaussian_kl, sample_z, Activation, CombineConfig, CombineVariant, Combiner, GaussianParams, PriorNet, RecognitionNet,
};
use uacvae_core::layers::{LayerNorm, Linear};
use uacvae_core::model::{
    draw_noise, ForwardOptions, Model, ModelConfig, ModelMode, PositionTable, ResponseDecoder, RouteTrace, SequenceEncoder,
};
use uacvae_core::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

pub const TOL_64: f64 = 1e-4;
pub const TOL_32: f64 = 1e-2;
pub const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

/// Central-difference step, taken in 64-bit.
pub const STEP: f64 = 1e-6;
/// Denominator floor per precision.
pub const FLOOR_64: f64 = 1e-8;
pub const FLOOR_32: f64 = 1e-6;

/// Rounds to the nearest 32-bit value. Every random input and parameter
/// passes through this, so a case builds the same point in both precisions.
pub fn grid(v: f64) -> f64 {
    v as f32 as f64
}

/// Analytic gradient of one tensor and, in 64-bit, its central differences.
#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    pub analytic: Vec<f64>,
    pub numeric: Option<Vec<f64>>,
}

pub type Checked = Vec<TensorCheck>;

#[derive(Clone, Debug)]
pub struct Worst {
    pub error: f64,
    pub tensor: String,
}

impl Worst {
    fn none() -> Self {
        Self { error: 0.0, tensor: String::new() }
    }

    fn merge(self, other: Worst) -> Worst {
        if other.error > self.error { other } else { self }
    }
}

/// `max|a − n| / max(max|a|, max|n|, floor)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff = analytic.iter().zip(numeric).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = analytic.iter().chain(numeric).map(|v| v.abs()).fold(floor, f64::max);
    diff / scale
}

/// Analytic gradients of every parameter in `store_of(subject)`, plus
/// central differences of `loss` when running in 64-bit.
pub fn check<T: Scalar, S>(
    subject: &mut S,
    store_of: fn(&mut S) -> &mut ParamStore<T>,
    loss: &dyn Fn(&S) -> (Graph<T>, Var),
) -> Checked {
    let (g, l) = loss(subject);
    let grads = g.backward(l).expect("backward");
    let store = store_of(subject).clone();
    let analytic = grads.params(&g, &store);
    let mut out = Vec::new();
    for id in store.ids() {
        let a: Vec<f64> = analytic.dense(&store, id).iter().map(|v| v.as_f64()).collect();
        let numeric = (T::NAME == "f64").then(|| {
            (0..a.len())
                .map(|j| {
                    let orig = store.get(id).data()[j];
                    let mut eval = |v: f64| {
                        store_of(subject).get_mut(id).data_mut()[j] = T::of(v);
                        let (g, l) = loss(subject);
                        g.value(l).item().as_f64()
                    };
                    let d = (eval(orig.as_f64() + STEP) - eval(orig.as_f64() - STEP)) / (2.0 * STEP);
                    store_of(subject).get_mut(id).data_mut()[j] = orig;
                    d
                })
                .collect()
        });
        out.push(TensorCheck { name: store.name(id).to_string(), analytic: a, numeric });
    }
    out
}

fn store_itself<T>(s: &mut ParamStore<T>) -> &mut ParamStore<T> {
    s
}

fn model_store<T: Scalar>(m: &mut Model<T>) -> &mut ParamStore<T> {
    m.params_mut()
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| grid(scale * rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values with `|x| ≥ margin`, for checks near kinks.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    let mut t = randn(rng, shape, 1.0);
    for v in t.data_mut() {
        *v = grid(v.signum() * (v.abs() + margin));
    }
    t
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn weighted_sum<T: Scalar>(g: &mut Graph<T>, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w = randn(&mut rng, &shape, 1.0).cast::<T>();
    let w = g.leaf(w).unwrap();
    let prod = g.mul(out, w).unwrap();
    g.sum(prod).unwrap()
}

/// Gradient check of an op whose inputs are all registered as parameters.
pub fn op_case<T: Scalar>(
    seed: u64,
    inputs: Vec<(&str, Tensor<f64>)>,
    build: impl Fn(&mut Graph<T>, &[Var]) -> Var,
) -> Checked {
    let mut store = ParamStore::<T>::new();
    for (name, t) in inputs {
        store.insert(name, t.cast::<T>());
    }
    let loss = |s: &ParamStore<T>| {
        let mut g = Graph::new();
        let vars: Vec<Var> = s.ids().map(|id| g.param(s, id)).collect();
        let out = build(&mut g, &vars);
        let l = if g.value(out).len() == 1 { out } else { weighted_sum(&mut g, out, seed) };
        (g, l)
    };
    check(&mut store, store_itself, &loss)
}

/// Moves every parameter of a freshly initialised store to a random point.
fn perturb<T: Scalar>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.get_mut(id).data_mut() {
            *v = T::of(grid(grid(v.as_f64()) + scale * rng.sample::<f64, _>(StandardNormal)));
        }
    }
}

/// Gradient check of a layer: its own parameters plus inputs registered as
/// `input.*` parameters.
pub fn layer_case<T: Scalar>(
    seed: u64,
    setup: impl FnOnce(&mut ParamStore<T>, &mut ChaCha8Rng),
    build: impl Fn(&mut Graph<T>, &ParamStore<T>) -> Var,
) -> Checked {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::<T>::new();
    setup(&mut store, &mut rng);
    perturb(&mut store, &mut rng, 0.1);
    let loss = |s: &ParamStore<T>| {
        let mut g = Graph::new();
        let out = build(&mut g, s);
        let l = if g.value(out).len() == 1 { out } else { weighted_sum(&mut g, out, seed) };
        (g, l)
    };
    check(&mut store, store_itself, &loss)
}

fn input<T: Scalar>(g: &mut Graph<T>, s: &ParamStore<T>, name: &str) -> Var {
    g.param(s, s.id(name).unwrap_or_else(|| panic!("no input {name}")))
}

fn insert<T: Scalar>(store: &mut ParamStore<T>, name: &str, t: Tensor<f64>) {
    store.insert(name, t.cast::<T>());
}

// ---- graph ops ----

pub fn op_matmul<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("a", randn(&mut r, &[3, 4], 1.0)), ("b", randn(&mut r, &[4, 2], 1.0))], |g, v| {
        g.matmul(v[0], v[1]).unwrap()
    })
}

pub fn op_matmul_nt<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("a", randn(&mut r, &[3, 4], 1.0)), ("b", randn(&mut r, &[5, 4], 1.0))], |g, v| {
        g.matmul_nt(v[0], v[1]).unwrap()
    })
}

pub fn op_elementwise<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("a", randn(&mut r, &[2, 3], 1.0)), ("b", randn(&mut r, &[2, 3], 1.0))], |g, v| {
        let s = g.add(v[0], v[1]).unwrap();
        let d = g.sub(v[0], v[1]).unwrap();
        let p = g.mul(s, d).unwrap();
        let p = g.scale(p, 0.7).unwrap();
        g.add_scalar(p, 0.3).unwrap()
    })
}

pub fn op_add_bias<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("x", randn(&mut r, &[3, 4], 1.0)), ("b", randn(&mut r, &[4], 1.0))], |g, v| {
        g.add_bias(v[0], v[1]).unwrap()
    })
}

pub fn op_tanh_exp<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("x", randn(&mut r, &[2, 5], 1.0))], |g, v| {
        let t = g.tanh(v[0]).unwrap();
        let e = g.exp(v[0]).unwrap();
        g.concat_cols(&[t, e]).unwrap()
    })
}

pub fn op_relu<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("x", away_from_zero(&mut r, &[3, 4], 0.05))], |g, v| g.relu(v[0]).unwrap())
}

pub fn op_clamp<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let mut x = randn(&mut r, &[3, 4], 2.0);
    for v in x.data_mut() {
        // keep clear of the bounds at ±1.5
        if (v.abs() - 1.5).abs() < 0.05 {
            *v = grid(*v + 0.2);
        }
    }
    op_case::<T>(seed, vec![("x", x)], |g, v| g.clamp(v[0], -1.5, 1.5).unwrap())
}

pub fn op_softmax<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("x", randn(&mut r, &[3, 5], 1.0))], |g, v| g.softmax(v[0]).unwrap())
}

pub fn op_causal_softmax<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("x", randn(&mut r, &[4, 4], 1.0))], |g, v| g.causal_softmax(v[0]).unwrap())
}

pub fn op_log_softmax<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("x", randn(&mut r, &[3, 5], 1.0))], |g, v| g.log_softmax(v[0]).unwrap())
}

pub fn op_layer_norm<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(
        seed,
        vec![
            ("x", randn(&mut r, &[3, 6], 1.0)),
            ("gain", randn(&mut r, &[6], 1.0)),
            ("bias", randn(&mut r, &[6], 1.0)),
        ],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5).unwrap(),
    )
}

pub fn op_embedding<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("table", randn(&mut r, &[6, 3], 1.0))], |g, v| g.embedding(v[0], &[1, 4, 1, 0, 5]).unwrap())
}

pub fn op_mean_pool<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("x", randn(&mut r, &[4, 3], 1.0))], |g, v| {
        g.mean_pool(v[0], &[true, false, true, true]).unwrap()
    })
}

pub fn op_concat_slice_reshape<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("a", randn(&mut r, &[2, 3], 1.0)), ("b", randn(&mut r, &[2, 2], 1.0))], |g, v| {
        let c = g.concat_cols(&[v[0], v[1]]).unwrap();
        let s = g.slice_cols(c, 1, 3).unwrap();
        let rows = g.concat_rows(&[s, v[0]]).unwrap();
        let t = g.tanh(rows).unwrap();
        g.reshape(t, &[2, 6]).unwrap()
    })
}

pub fn op_conv1d<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(
        seed,
        vec![
            ("x", randn(&mut r, &[2, 7], 1.0)),
            ("w", randn(&mut r, &[3, 2, 3], 1.0)),
            ("b", randn(&mut r, &[3], 1.0)),
        ],
        |g, v| g.conv1d(v[0], v[1], v[2], 1).unwrap(),
    )
}

pub fn op_cross_entropy<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    op_case::<T>(seed, vec![("logits", randn(&mut r, &[4, 6], 1.0))], |g, v| {
        g.cross_entropy(v[0], &[2, 0, 5, 3], Some(0)).unwrap()
    })
}

// ---- layers and latent stage ----

pub fn layer_linear<T: Scalar>(seed: u64) -> Checked {
    let lin = std::cell::OnceCell::new();
    layer_case::<T>(
        seed,
        |s, r| {
            lin.set(Linear::new(s, "lin", 5, 4, r)).unwrap();
            insert(s, "input.x", randn(r, &[3, 5], 1.0));
        },
        |g, s| {
            let x = input(g, s, "input.x");
            lin.get().unwrap().forward(g, s, x).unwrap()
        },
    )
}

pub fn layer_layer_norm<T: Scalar>(seed: u64) -> Checked {
    let ln = std::cell::OnceCell::new();
    layer_case::<T>(
        seed,
        |s, r| {
            ln.set(LayerNorm::new(s, "ln", 5)).unwrap();
            insert(s, "input.x", randn(r, &[3, 5], 1.0));
        },
        |g, s| {
            let x = input(g, s, "input.x");
            ln.get().unwrap().forward(g, s, x).unwrap()
        },
    )
}

pub fn layer_encoder<T: Scalar>(seed: u64) -> Checked {
    let enc = std::cell::OnceCell::new();
    let positions = PositionTable::new(8, 4);
    layer_case::<T>(
        seed,
        |s, r| {
            enc.set(SequenceEncoder::new(s, 9, 4, 1, 2, 8, r)).unwrap();
        },
        |g, s| enc.get().unwrap().encode(g, s, &positions, &[5, 7, 4, 6, PAD]).unwrap(),
    )
}

pub fn layer_decoder<T: Scalar>(seed: u64) -> Checked {
    let dec = std::cell::OnceCell::new();
    let positions = PositionTable::new(8, 4);
    layer_case::<T>(
        seed,
        |s, r| {
            dec.set(ResponseDecoder::new(s, 9, 4, 1, 2, 8, Some(3), r)).unwrap();
            insert(s, "input.z", randn(r, &[1, 3], 1.0));
        },
        |g, s| {
            let z = input(g, s, "input.z");
            dec.get().unwrap().logits(g, s, &positions, &[1, 5, 8, 6], Some(z)).unwrap()
        },
    )
}

fn gaussian_out<T: Scalar>(g: &mut Graph<T>, p: GaussianParams) -> Var {
    g.concat_cols(&[p.mean, p.log_var]).unwrap()
}

pub fn layer_prior<T: Scalar>(seed: u64) -> Checked {
    let net = std::cell::OnceCell::new();
    layer_case::<T>(
        seed,
        |s, r| {
            net.set(PriorNet::new(s, 4, 3, r)).unwrap();
            insert(s, "input.x", randn(r, &[1, 4], 1.0));
            insert(s, "input.c", randn(r, &[1, 4], 1.0));
        },
        |g, s| {
            let x = input(g, s, "input.x");
            let c = input(g, s, "input.c");
            let p = net.get().unwrap().forward(g, s, x, c).unwrap();
            gaussian_out(g, p)
        },
    )
}

pub fn layer_recognition<T: Scalar>(seed: u64) -> Checked {
    let net = std::cell::OnceCell::new();
    layer_case::<T>(
        seed,
        |s, r| {
            net.set(RecognitionNet::new(s, 4, 3, r)).unwrap();
            insert(s, "input.x", randn(r, &[1, 4], 1.0));
            insert(s, "input.c", randn(r, &[1, 4], 1.0));
            insert(s, "input.y", randn(r, &[1, 4], 1.0));
        },
        |g, s| {
            let x = input(g, s, "input.x");
            let c = input(g, s, "input.c");
            let y = input(g, s, "input.y");
            let p = net.get().unwrap().forward(g, s, x, c, y).unwrap();
            gaussian_out(g, p)
        },
    )
}

fn gaussian_inputs<T: Scalar>(s: &mut ParamStore<T>, r: &mut ChaCha8Rng, prefix: &str, dim: usize) {
    insert(s, &format!("{prefix}.mean"), randn(r, &[1, dim], 1.0));
    insert(s, &format!("{prefix}.log_var"), randn(r, &[1, dim], 0.7));
}

fn gaussian_param<T: Scalar>(g: &mut Graph<T>, s: &ParamStore<T>, prefix: &str) -> GaussianParams {
    GaussianParams { mean: input(g, s, &format!("{prefix}.mean")), log_var: input(g, s, &format!("{prefix}.log_var")) }
}

pub fn latent_kl<T: Scalar>(seed: u64) -> Checked {
    layer_case::<T>(
        seed,
        |s, r| {
            gaussian_inputs(s, r, "q", 5);
            gaussian_inputs(s, r, "p", 5);
        },
        |g, s| {
            let q = gaussian_param(g, s, "q");
            let p = gaussian_param(g, s, "p");
            gaussian_kl(g, q, p).unwrap()
        },
    )
}

pub fn latent_sample<T: Scalar>(seed: u64) -> Checked {
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(77));
    let eps: Vec<T> = (0..5).map(|_| T::of(grid(r.sample(StandardNormal)))).collect();
    layer_case::<T>(seed, |s, r| gaussian_inputs(s, r, "q", 5), |g, s| {
        let q = gaussian_param(g, s, "q");
        let d = sample_z(g, q, &eps).unwrap();
        g.concat_cols(&[d.z, d.sigma2]).unwrap()
    })
}

fn combiner_case<T: Scalar>(seed: u64, variant: CombineVariant) -> Checked {
    let comb = std::cell::OnceCell::new();
    layer_case::<T>(
        seed,
        |s, r| {
            let cfg = CombineConfig { variant, embed_dim: 4, inter_dim: 3, latent_dim: 5, kernel_size: 3, activation: Activation::Tanh };
            comb.set(Combiner::new(s, &cfg, r).unwrap()).unwrap();
            insert(s, "input.z", randn(r, &[1, 5], 1.0));
            let mut var = randn(r, &[1, 5], 0.5);
            for v in var.data_mut() {
                *v = grid(v.exp());
            }
            insert(s, "input.sigma2", var);
        },
        |g, s| {
            let z = input(g, s, "input.z");
            let v = input(g, s, "input.sigma2");
            comb.get().unwrap().forward(g, s, z, v).unwrap()
        },
    )
}

pub fn latent_combine_m<T: Scalar>(seed: u64) -> Checked {
    combiner_case::<T>(seed, CombineVariant::M)
}

pub fn latent_combine_c<T: Scalar>(seed: u64) -> Checked {
    combiner_case::<T>(seed, CombineVariant::C)
}

// ---- end-to-end loss ----

pub fn tiny_model_config(mode: ModelMode, vocab_size: usize, seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size,
        embed_dim: 4,
        inter_dim: 2,
        latent_dim: 3,
        encoder_layers: 1,
        decoder_layers: 1,
        heads: 2,
        ffn_dim: 8,
        mode,
        seed,
        ..ModelConfig::default()
    }
}

pub fn tiny_batch(seed: u64) -> (usize, Vec<EncodedExample>) {
    let spec = SyntheticSpec { count: 2, max_turns: 2, seed, ..SyntheticSpec::default() };
    let data = generate_synthetic(&spec).unwrap();
    let vocab = build_vocab(&data, 1).unwrap();
    (vocab.len(), data.iter().map(|e| vocab.encode_example(e)).collect())
}

fn loss_case<T: Scalar>(seed: u64, mode: ModelMode) -> Checked {
    let (vocab_size, batch) = tiny_batch(seed);
    let mut model = Model::<T>::new(tiny_model_config(mode, vocab_size, seed)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb(model.params_mut(), &mut rng, 0.1);
    let noise: Vec<Vec<T>> = draw_noise::<f64, _>(&mut rng, batch.len(), 3)
        .into_iter()
        .map(|row| row.into_iter().map(|v| T::of(grid(v))).collect())
        .collect();
    let opts = ForwardOptions { kl_weight: 0.7, ..Default::default() };
    let loss = |m: &Model<T>| {
        let lg = m.loss(&batch, &noise, &opts, &mut RouteTrace::default()).unwrap();
        (lg.graph, lg.total)
    };
    check(&mut model, model_store, &loss)
}

pub fn loss_ua_m<T: Scalar>(seed: u64) -> Checked {
    loss_case::<T>(seed, ModelMode::UaM)
}

pub fn loss_ua_c<T: Scalar>(seed: u64) -> Checked {
    loss_case::<T>(seed, ModelMode::UaC)
}

pub fn loss_cvae<T: Scalar>(seed: u64) -> Checked {
    loss_case::<T>(seed, ModelMode::Cvae)
}

pub fn loss_decoder_only<T: Scalar>(seed: u64) -> Checked {
    loss_case::<T>(seed, ModelMode::DecoderOnly)
}

pub type CaseFn = fn(u64) -> Checked;

macro_rules! registry {
    ($($f:ident),* $(,)?) => {
        vec![$((stringify!($f), $f::<f64> as CaseFn, $f::<f32> as CaseFn)),*]
    };
}

/// Every case as `(name, 64-bit check, 32-bit check)`.
pub fn cases() -> Vec<(&'static str, CaseFn, CaseFn)> {
    registry![
        op_matmul,
        op_matmul_nt,
        op_elementwise,
        op_add_bias,
        op_tanh_exp,
        op_relu,
        op_clamp,
        op_softmax,
        op_causal_softmax,
        op_log_softmax,
        op_layer_norm,
        op_embedding,
        op_mean_pool,
        op_concat_slice_reshape,
        op_conv1d,
        op_cross_entropy,
        layer_linear,
        layer_layer_norm,
        layer_encoder,
        layer_decoder,
        layer_prior,
        layer_recognition,
        latent_kl,
        latent_sample,
        latent_combine_m,
        latent_combine_c,
        loss_ua_m,
        loss_ua_c,
        loss_cvae,
        loss_decoder_only,
    ]
}

/// Worst error of one case over all seeds, per precision.
/// Worst 64-bit and 32-bit errors over [`SEEDS`]. Both precisions are
/// measured against the 64-bit central differences at the same point.
pub fn run_case(f64_case: CaseFn, f32_case: CaseFn) -> (Worst, Worst) {
    let mut w64 = Worst::none();
    let mut w32 = Worst::none();
    for seed in SEEDS {
        let wide = f64_case(seed);
        let narrow = f32_case(seed);
        assert_eq!(wide.len(), narrow.len(), "precisions disagree on the parameter set");
        for (a, b) in wide.iter().zip(&narrow) {
            assert_eq!(a.name, b.name);
            let numeric = a.numeric.as_ref().expect("64-bit case has central differences");
            w64 = w64.merge(Worst { error: relative_error(&a.analytic, numeric, FLOOR_64), tensor: a.name.clone() });
            w32 = w32.merge(Worst { error: relative_error(&b.analytic, numeric, FLOOR_32), tensor: b.name.clone() });
        }
    }
    (w64, w32)
}
