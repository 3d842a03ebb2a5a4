//! UA-CVAE assembly: sequence encoder, prior/recognition networks,
//! combination stage, conditioned decoder and bag-of-words head.
//!
//! Training draws `z` from the recognition Gaussian and routes its variance
//! to the combination network; inference uses the prior for both. The plain
//! CVAE mode feeds `z` to the decoder directly, and the decoder-only mode
//! drops the latent path altogether.

mod decoding;
mod transformer;

pub use decoding::{decode_loop, select, DecodeStrategy};
pub use transformer::{PositionTable, ResponseDecoder, SequenceEncoder};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EncodedExample, EOS, SEP};
use crate::latent::{
    gaussian_kl, sample_z, Activation, CombineConfig, CombineVariant, Combiner, GaussianParams, LatentError, PriorNet,
    RecognitionNet,
};
use crate::layers::Linear;
use crate::numerics::{Graph, NumericsError, ParamStore, Scalar, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite value in the {term} term ({source})")]
    NonFinite { term: &'static str, source: NumericsError },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Latent(#[from] LatentError),
    #[error("example has an empty {0}")]
    Empty(&'static str),
    #[error("decoder prefix of {len} tokens exceeds BOS + {max} tokens")]
    PrefixTooLong { len: usize, max: usize },
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("batch of {examples} examples with {noise} noise vectors")]
    NoiseMismatch { examples: usize, noise: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelMode {
    #[serde(rename = "ua-m")]
    UaM,
    #[serde(rename = "ua-c")]
    UaC,
    #[serde(rename = "cvae")]
    Cvae,
    #[serde(rename = "decoder")]
    DecoderOnly,
}

impl ModelMode {
    pub const ALL: [ModelMode; 4] = [ModelMode::UaM, ModelMode::UaC, ModelMode::Cvae, ModelMode::DecoderOnly];

    pub fn has_latent(self) -> bool {
        self != ModelMode::DecoderOnly
    }

    pub fn combine_variant(self) -> Option<CombineVariant> {
        match self {
            ModelMode::UaM => Some(CombineVariant::M),
            ModelMode::UaC => Some(CombineVariant::C),
            _ => None,
        }
    }
}

impl FromStr for ModelMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "ua-m" => Ok(ModelMode::UaM),
            "ua-c" => Ok(ModelMode::UaC),
            "cvae" => Ok(ModelMode::Cvae),
            "decoder" => Ok(ModelMode::DecoderOnly),
            _ => Err(format!("unknown mode {s:?}; expected ua-m, ua-c, cvae or decoder")),
        }
    }
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::UaM => "ua-m",
            ModelMode::UaC => "ua-c",
            ModelMode::Cvae => "cvae",
            ModelMode::DecoderOnly => "decoder",
        })
    }
}

/// KL weight as a function of training progress.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KlSchedule {
    Off,
    /// Linear ramp 0 → 1 over the first `warmup_fraction` of all steps.
    Linear { warmup_fraction: f64 },
}

impl Default for KlSchedule {
    fn default() -> Self {
        KlSchedule::Linear { warmup_fraction: 0.2 }
    }
}

impl KlSchedule {
    pub fn weight(&self, step: usize, total_steps: usize) -> f64 {
        match *self {
            KlSchedule::Off => 1.0,
            KlSchedule::Linear { warmup_fraction } => {
                let warm = warmup_fraction * total_steps as f64;
                if warm <= 0.0 {
                    1.0
                } else {
                    (step as f64 / warm).min(1.0)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub inter_dim: usize,
    pub latent_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_utterance_len: usize,
    pub max_turns: usize,
    pub mode: ModelMode,
    pub kernel_size: usize,
    pub kl_schedule: KlSchedule,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 0,
            embed_dim: 96,
            inter_dim: 48,
            latent_dim: 32,
            encoder_layers: 2,
            decoder_layers: 2,
            heads: 2,
            ffn_dim: 192,
            max_utterance_len: crate::corpus::MAX_UTTERANCE_LEN,
            max_turns: crate::corpus::MAX_TURNS,
            mode: ModelMode::UaC,
            kernel_size: 3,
            kl_schedule: KlSchedule::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.vocab_size <= SEP {
            return err(format!("vocab_size {} leaves no room for ordinary tokens", self.vocab_size));
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return err(format!("embed_dim {} is not divisible by {} heads", self.embed_dim, self.heads));
        }
        if self.latent_dim == 0 || self.inter_dim == 0 || self.ffn_dim == 0 {
            return err("dimensions must be positive".into());
        }
        if self.max_utterance_len == 0 || self.max_turns == 0 {
            return err("window limits must be positive".into());
        }
        if self.mode.has_latent() {
            self.combine_config(CombineVariant::C).validate()?;
        }
        Ok(())
    }

    pub fn combine_config(&self, variant: CombineVariant) -> CombineConfig {
        CombineConfig {
            variant,
            embed_dim: self.embed_dim,
            inter_dim: self.inter_dim,
            latent_dim: self.latent_dim,
            kernel_size: self.kernel_size,
            activation: Activation::Tanh,
        }
    }

    /// Longest encoder input: `max_turns` utterances joined by SEP.
    fn encoder_positions(&self) -> usize {
        self.max_turns * (self.max_utterance_len + 1)
    }
}

/// The three sequence embeddings `X'`, `c'` and (training only) `Ȳ'`.
#[derive(Clone, Copy, Debug)]
pub struct SequenceEmbedding {
    pub context: Var,
    pub condition: Var,
    pub response: Option<Var>,
}

/// Batch-mean loss terms; `total = kl_weight·kl + reconstruction_nll + bow_nll`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub reconstruction_nll: f64,
    pub bow_nll: f64,
    pub kl_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(kl: f64, reconstruction_nll: f64, bow_nll: f64, kl_weight: f64) -> Self {
        Self { kl, reconstruction_nll, bow_nll, kl_weight, total: kl_weight * kl + reconstruction_nll + bow_nll }
    }
}

/// Where the latent sample and the routed variance came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentSource {
    Prior,
    Recognition,
}

/// Call instrumentation for the routing invariants.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RouteTrace {
    pub prior_calls: usize,
    pub recognition_calls: usize,
    pub sampled_from: Vec<LatentSource>,
    pub variance_from: Vec<LatentSource>,
    pub combine_calls: usize,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions {
    pub kl_weight: f64,
    /// Feeds `z` straight to the decoder even when a combiner exists.
    pub bypass_combination: bool,
}

/// A batch loss recorded on a graph, ready for `backward`.
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub target_tokens: usize,
}

#[derive(Clone, Debug)]
struct LatentPath {
    encoder: SequenceEncoder,
    prior: PriorNet,
    recognition: RecognitionNet,
    bow_hidden: Linear,
    bow_out: Linear,
    combiner: Option<Combiner>,
}

/// Model parameters plus the layout that reads them.
#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    positions: PositionTable,
    decoder: ResponseDecoder,
    latent: Option<LatentPath>,
}

fn term<T>(name: &'static str, r: Result<T, NumericsError>) -> Result<T, ModelError> {
    r.map_err(|e| match e {
        NumericsError::NonFinite { .. } => ModelError::NonFinite { term: name, source: e },
        other => ModelError::Numerics(other),
    })
}

/// Decoder input `[BOS, y…]` and targets `[y…, EOS]`.
pub fn teacher_forcing(response: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(response.len() + 1);
    input.push(crate::corpus::BOS);
    input.extend_from_slice(response);
    let mut target = response.to_vec();
    target.push(EOS);
    (input, target)
}

/// Response tokens with specials removed.
pub fn bow_target(response: &[usize]) -> Vec<usize> {
    response.iter().copied().filter(|&t| t > SEP).collect()
}

impl<T: Scalar> Model<T> {
    /// Freshly initialised model; identical configs give identical weights.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::new();
        let c = &config;
        let positions = PositionTable::new(c.encoder_positions().max(c.max_utterance_len + 1), c.embed_dim);
        let latent_dim = c.mode.has_latent().then_some(c.latent_dim);
        let decoder = ResponseDecoder::new(
            &mut params,
            c.vocab_size,
            c.embed_dim,
            c.decoder_layers,
            c.heads,
            c.ffn_dim,
            latent_dim,
            &mut rng,
        );
        let latent = if c.mode.has_latent() {
            let encoder =
                SequenceEncoder::new(&mut params, c.vocab_size, c.embed_dim, c.encoder_layers, c.heads, c.ffn_dim, &mut rng);
            let prior = PriorNet::new(&mut params, c.embed_dim, c.latent_dim, &mut rng);
            let recognition = RecognitionNet::new(&mut params, c.embed_dim, c.latent_dim, &mut rng);
            let bow_hidden = Linear::new(&mut params, "bow.hidden", c.latent_dim + 2 * c.embed_dim, c.embed_dim, &mut rng);
            let bow_out = Linear::new(&mut params, "bow.out", c.embed_dim, c.vocab_size, &mut rng);
            // last, so UA and plain CVAE models share every other initial weight
            let combiner = match c.mode.combine_variant() {
                Some(v) => Some(Combiner::new(&mut params, &c.combine_config(v), &mut rng)?),
                None => None,
            };
            Some(LatentPath { encoder, prior, recognition, bow_hidden, bow_out, combiner })
        } else {
            None
        };
        Ok(Self { config, params, positions, decoder, latent })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn mode(&self) -> ModelMode {
        self.config.mode
    }

    /// Copies every parameter of `self`'s layout from `source` by name.
    pub fn load_params_from<U: Scalar>(&mut self, source: &ParamStore<U>) -> Result<(), ModelError> {
        for id in self.params.ids().collect::<Vec<_>>() {
            let name = self.params.name(id).to_string();
            let src = source
                .id(&name)
                .ok_or_else(|| ModelError::Config(format!("parameter {name} missing from source")))?;
            let value = source.get(src).cast::<T>();
            if value.shape() != self.params.get(id).shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    value.shape(),
                    self.params.get(id).shape()
                )));
            }
            *self.params.get_mut(id) = value;
        }
        Ok(())
    }

    /// Same weights viewed under another mode (e.g. a UA model as plain CVAE).
    pub fn with_mode(&self, mode: ModelMode) -> Result<Self, ModelError> {
        let mut other = Model::new(ModelConfig { mode, ..self.config.clone() })?;
        other.load_params_from(&self.params)?;
        Ok(other)
    }

    /// At double precision, for gradient checks.
    pub fn to_f64(&self) -> Model<f64> {
        let mut m = Model::<f64>::new(self.config.clone()).expect("config already validated");
        m.load_params_from(&self.params).expect("identical layout");
        m
    }

    fn latent(&self) -> Result<&LatentPath, ModelError> {
        self.latent.as_ref().ok_or_else(|| ModelError::Config("decoder-only model has no latent path".into()))
    }

    fn encode_ids(&self, g: &mut Graph<T>, ids: &[usize], what: &'static str) -> Result<Var, ModelError> {
        if ids.is_empty() {
            return Err(ModelError::Empty(what));
        }
        Ok(self.latent()?.encoder.encode(g, &self.params, &self.positions, ids)?)
    }

    /// Encodes context, condition and (when `with_response`) the reference.
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        ex: &EncodedExample,
        with_response: bool,
    ) -> Result<SequenceEmbedding, ModelError> {
        let context = self.encode_ids(g, &ex.context, "context")?;
        let condition = self.encode_ids(g, &ex.condition, "condition")?;
        let response = if with_response {
            let ids: &[usize] = if ex.response.is_empty() { &[EOS] } else { &ex.response };
            Some(self.encode_ids(g, ids, "response")?)
        } else {
            None
        };
        Ok(SequenceEmbedding { context, condition, response })
    }

    /// Decoder logits `[prefix_len, vocab]` for a prefix starting with BOS.
    pub fn decode_logits(&self, g: &mut Graph<T>, prefix: &[usize], z_u: Option<Var>) -> Result<Var, ModelError> {
        if prefix.len() > self.config.max_utterance_len + 1 {
            return Err(ModelError::PrefixTooLong { len: prefix.len(), max: self.config.max_utterance_len });
        }
        let z_u = if self.config.mode.has_latent() { z_u } else { None };
        Ok(self.decoder.logits(g, &self.params, &self.positions, prefix, z_u)?)
    }

    /// Bag-of-words logits over `[z_u; X'; c']`.
    pub fn bow_logits(&self, g: &mut Graph<T>, z_u: Var, x_emb: Var, c_emb: Var) -> Result<Var, ModelError> {
        let lat = self.latent()?;
        let input = g.concat_cols(&[z_u, x_emb, c_emb])?;
        let h = lat.bow_hidden.forward(g, &self.params, input)?;
        let h = g.tanh(h)?;
        Ok(lat.bow_out.forward(g, &self.params, h)?)
    }

    /// `−Σ_{t ∈ bag} log softmax(logits)[t]`; zero for an empty bag.
    pub fn bow_nll(g: &mut Graph<T>, logits: Var, bag: &[usize]) -> Result<Var, NumericsError> {
        if bag.is_empty() {
            return g.leaf(Tensor::scalar(T::zero()));
        }
        let rows = vec![logits; bag.len()];
        let stacked = g.concat_rows(&rows)?;
        g.cross_entropy(stacked, bag, None)
    }

    /// Summed teacher-forced NLL of `response` (+EOS) given `z_u`.
    pub fn teacher_forced_nll(&self, g: &mut Graph<T>, response: &[usize], z_u: Option<Var>) -> Result<Var, ModelError> {
        let (input, target) = teacher_forcing(response);
        let logits = self.decode_logits(g, &input, z_u)?;
        term("reconstruction", g.cross_entropy(logits, &target, Some(crate::corpus::PAD)))
    }

    /// Uncertainty-aware latent from a draw, honouring the mode.
    fn combine(
        &self,
        g: &mut Graph<T>,
        z: Var,
        sigma2: Var,
        opts: &ForwardOptions,
        trace: &mut RouteTrace,
    ) -> Result<Var, ModelError> {
        match &self.latent()?.combiner {
            Some(c) if !opts.bypass_combination => {
                trace.combine_calls += 1;
                Ok(c.forward(g, &self.params, z, sigma2)?)
            }
            _ => Ok(z),
        }
    }

    /// Prior Gaussian for a context/condition pair.
    pub fn prior(&self, g: &mut Graph<T>, emb: &SequenceEmbedding, trace: &mut RouteTrace) -> Result<GaussianParams, ModelError> {
        trace.prior_calls += 1;
        Ok(self.latent()?.prior.forward(g, &self.params, emb.context, emb.condition)?)
    }

    fn example_terms(
        &self,
        g: &mut Graph<T>,
        ex: &EncodedExample,
        noise: &[T],
        opts: &ForwardOptions,
        trace: &mut RouteTrace,
    ) -> Result<(Var, Var, Var), ModelError> {
        if !self.config.mode.has_latent() {
            let zero = g.leaf(Tensor::scalar(T::zero()))?;
            let rec = self.teacher_forced_nll(g, &ex.response, None)?;
            return Ok((zero, rec, zero));
        }
        let lat = self.latent()?;
        let emb = self.encode(g, ex, true)?;
        let y_emb = emb.response.expect("encoded with response");
        trace.recognition_calls += 1;
        let q = lat.recognition.forward(g, &self.params, emb.context, emb.condition, y_emb)?;
        let p = self.prior(g, &emb, trace)?;
        let kl = term("kl", gaussian_kl(g, q, p))?;
        let draw = term("kl", sample_z(g, q, noise))?;
        trace.sampled_from.push(LatentSource::Recognition);
        trace.variance_from.push(LatentSource::Recognition);
        let z_u = self.combine(g, draw.z, draw.sigma2, opts, trace)?;
        let rec = self.teacher_forced_nll(g, &ex.response, Some(z_u))?;
        let bow_logits = self.bow_logits(g, z_u, emb.context, emb.condition)?;
        let bow = term("bow", Self::bow_nll(g, bow_logits, &bow_target(&ex.response)))?;
        Ok((kl, rec, bow))
    }

    /// Training-mode batch loss (recognition path). `noise[i]` is the
    /// standard-normal vector used for example `i`.
    pub fn loss(
        &self,
        batch: &[EncodedExample],
        noise: &[Vec<T>],
        opts: &ForwardOptions,
        trace: &mut RouteTrace,
    ) -> Result<LossGraph<T>, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Empty("batch"));
        }
        if self.config.mode.has_latent() && noise.len() != batch.len() {
            return Err(ModelError::NoiseMismatch { examples: batch.len(), noise: noise.len() });
        }
        let mut g = Graph::new();
        let mut kls = Vec::with_capacity(batch.len());
        let mut recs = Vec::with_capacity(batch.len());
        let mut bows = Vec::with_capacity(batch.len());
        let mut target_tokens = 0;
        for (i, ex) in batch.iter().enumerate() {
            let eps: &[T] = noise.get(i).map(Vec::as_slice).unwrap_or(&[]);
            let (kl, rec, bow) = self.example_terms(&mut g, ex, eps, opts, trace)?;
            kls.push(kl);
            recs.push(rec);
            bows.push(bow);
            target_tokens += ex.response.len() + 1;
        }
        let inv = 1.0 / batch.len() as f64;
        let mean = |g: &mut Graph<T>, parts: &[Var], name: &'static str| -> Result<Var, ModelError> {
            let stacked = term(name, g.concat_cols(parts))?;
            let s = term(name, g.sum(stacked))?;
            term(name, g.scale(s, inv))
        };
        let kl = mean(&mut g, &kls, "kl")?;
        let rec = mean(&mut g, &recs, "reconstruction")?;
        let bow = mean(&mut g, &bows, "bow")?;
        let weighted = term("kl", g.scale(kl, opts.kl_weight))?;
        let partial = term("total", g.add(weighted, rec))?;
        let total = term("total", g.add(partial, bow))?;
        let breakdown = LossBreakdown {
            kl: g.value(kl).item().as_f64(),
            reconstruction_nll: g.value(rec).item().as_f64(),
            bow_nll: g.value(bow).item().as_f64(),
            kl_weight: opts.kl_weight,
            total: g.value(total).item().as_f64(),
        };
        Ok(LossGraph { graph: g, total, breakdown, target_tokens })
    }

    /// Prior-path forward for one example: returns the uncertainty-aware
    /// latent (or `None` for decoder-only), plus the prior Gaussian.
    fn prior_latent(
        &self,
        g: &mut Graph<T>,
        ex: &EncodedExample,
        noise: Option<&[T]>,
        opts: &ForwardOptions,
        trace: &mut RouteTrace,
    ) -> Result<Option<(Var, GaussianParams)>, ModelError> {
        if !self.config.mode.has_latent() {
            return Ok(None);
        }
        let emb = self.encode(g, ex, false)?;
        let p = self.prior(g, &emb, trace)?;
        let (z, sigma2) = match noise {
            Some(eps) => {
                let d = sample_z(g, p, eps)?;
                (d.z, d.sigma2)
            }
            None => (p.mean, g.exp(p.log_var)?),
        };
        trace.sampled_from.push(LatentSource::Prior);
        trace.variance_from.push(LatentSource::Prior);
        let z_u = self.combine(g, z, sigma2, opts, trace)?;
        Ok(Some((z_u, p)))
    }

    /// Mean of the prior log-variance for one example.
    pub fn prior_log_variance(&self, ex: &EncodedExample) -> Result<Option<f64>, ModelError> {
        if !self.config.mode.has_latent() {
            return Ok(None);
        }
        let mut g = Graph::new();
        let emb = self.encode(&mut g, ex, false)?;
        let p = self.prior(&mut g, &emb, &mut RouteTrace::default())?;
        let lv = g.value(p.log_var);
        Ok(Some(lv.data().iter().map(|v| v.as_f64()).sum::<f64>() / lv.len() as f64))
    }

    /// Summed reference NLL and target count on the inference path, with
    /// `z` at the prior mean.
    pub fn reference_nll(&self, ex: &EncodedExample) -> Result<(f64, usize), ModelError> {
        let mut g = Graph::new();
        let mut trace = RouteTrace::default();
        let z_u = self.prior_latent(&mut g, ex, None, &ForwardOptions::default(), &mut trace)?.map(|(z, _)| z);
        let nll = self.teacher_forced_nll(&mut g, &ex.response, z_u)?;
        Ok((g.value(nll).item().as_f64(), ex.response.len() + 1))
    }

    /// Generates a response on the inference path: `z` is drawn from the
    /// prior with noise from `rng`, then tokens are decoded until EOS or
    /// `max_utterance_len`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        ex: &EncodedExample,
        strategy: &DecodeStrategy,
        rng: &mut R,
    ) -> Result<Vec<usize>, ModelError> {
        self.generate_with(ex, strategy, rng, &ForwardOptions::default(), &mut RouteTrace::default())
    }

    /// [`Model::generate`] with explicit forward options and instrumentation.
    pub fn generate_with<R: Rng + ?Sized>(
        &self,
        ex: &EncodedExample,
        strategy: &DecodeStrategy,
        rng: &mut R,
        opts: &ForwardOptions,
        trace: &mut RouteTrace,
    ) -> Result<Vec<usize>, ModelError> {
        let noise: Vec<T> = (0..self.config.latent_dim).map(|_| T::of(rng.sample(StandardNormal))).collect();
        let mut g = Graph::new();
        let latent = self.prior_latent(&mut g, ex, Some(&noise), opts, trace)?;
        // the latent part of the graph is reused by every decoding step
        let base = g;
        let z_value = latent.map(|(z, _)| base.value(z).clone());
        decode_loop(
            |prefix| {
                let mut g = Graph::new();
                let z_u = match &z_value {
                    Some(v) => Some(g.leaf(v.clone())?),
                    None => None,
                };
                let logits = self.decode_logits(&mut g, prefix, z_u)?;
                let t = g.value(logits);
                let cols = t.cols();
                let last = &t.data()[t.len() - cols..];
                Ok::<_, ModelError>(last.iter().map(|v| v.as_f64()).collect())
            },
            strategy,
            self.config.max_utterance_len,
            rng,
        )
    }
}

/// Standard-normal noise vectors for a batch.
pub fn draw_noise<T: Scalar, R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Vec<Vec<T>> {
    (0..count).map(|_| (0..dim).map(|_| T::of(rng.sample(StandardNormal))).collect()).collect()
}
