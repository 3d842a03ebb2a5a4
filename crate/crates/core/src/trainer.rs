//! Training loop, checkpoint format and evaluation.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{build_vocab, CorpusError, DialogueExample, EncodedExample, Vocab};
use crate::metrics::{perplexity_from_nll, ExampleRow, MetricError, MetricReport};
use crate::model::{draw_noise, DecodeStrategy, ForwardOptions, LossBreakdown, Model, ModelConfig, ModelError, ModelMode, RouteTrace};
use crate::numerics::{AdamConfig, NumericsError, Tensor};
use crate::ue::{ue_corpus, Judge, JudgeError};

pub const CHECKPOINT_FORMAT: &str = "uacvae-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";
const PARAMS_FILE: &str = "params.bin";
const VOCAB_FILE: &str = "vocab.json";
pub const LOG_FILE: &str = "train_log.jsonl";
const VALIDATION_NOISE_SEED: u64 = 0x5eed_7a11;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("io error at {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid train config: {0}")]
    Config(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("non-finite loss at step {step}: {source}")]
    NonFinite { step: usize, source: ModelError },
    #[error("non-finite gradient at step {step}: {source}")]
    NanGradient { step: usize, source: NumericsError },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint holds a {found} model, which cannot be loaded as {wanted}")]
    Incompatible { found: ModelMode, wanted: ModelMode },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Judge(#[from] JudgeError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io { path: path.to_path_buf(), source }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Validation + checkpoint interval in steps; 0 evaluates once per epoch.
    pub eval_every: usize,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub grad_clip: f64,
    pub validation_fraction: f64,
    pub min_freq: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            lr: 1e-4,
            batch_size: 16,
            epochs: 10,
            eval_every: 0,
            seed: 0,
            out_dir: None,
            grad_clip: 1.0,
            validation_fraction: 0.1,
            min_freq: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.grad_clip > 0.0) {
            return Err(TrainError::Config("grad_clip must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config("validation_fraction must lie in [0, 1)".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let cfg: Self = toml::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, ..AdamConfig::default() }
    }
}

/// Seeded 90/10-style split: returns `(train, validation)` indices.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = if n >= 2 { ((n as f64 * fraction).round() as usize).min(n - 1) } else { 0 };
    let validation = idx.split_off(n - val);
    (idx, validation)
}

/// Shuffled batches for one epoch; the last batch may be short.
pub fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub batch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    pub grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_total: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub config: ModelConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    pub vocab: String,
    pub step: usize,
    pub params: Vec<ParamEntry>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub metrics: Option<serde_json::Value>,
}

pub struct Checkpoint {
    pub manifest: Manifest,
    pub model: Model<f32>,
    pub vocab: Vocab,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), TrainError> {
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes a checkpoint directory. The directory is assembled beside `dir`
/// and renamed into place, so an existing checkpoint survives a failed write.
pub fn save_checkpoint(
    dir: &Path,
    model: &Model<f32>,
    vocab: &Vocab,
    step: usize,
    train: Option<&TrainConfig>,
    metrics: Option<serde_json::Value>,
) -> Result<(), TrainError> {
    let store = model.params();
    let mut params = Vec::with_capacity(store.len());
    let mut blob = Vec::with_capacity(store.total_len() * 4);
    let mut offset = 0;
    for id in store.ids() {
        let t = store.get(id);
        params.push(ParamEntry { name: store.name(id).to_string(), shape: t.shape().to_vec(), offset });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += t.len();
    }
    let manifest = Manifest {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: model.config().clone(),
        // the manifest describes the model, not where it was written
        train: train.map(|t| TrainConfig { out_dir: None, ..t.clone() }),
        vocab: VOCAB_FILE.into(),
        step,
        params,
        metrics,
    };
    let staging = dir.with_extension("partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(io_err(&staging))?;
    }
    fs::create_dir_all(&staging).map_err(io_err(&staging))?;
    let json = serde_json::to_string_pretty(&manifest).expect("manifest is serialisable");
    write_file(&staging.join(MANIFEST_FILE), json.as_bytes())?;
    write_file(&staging.join(PARAMS_FILE), &blob)?;
    write_file(&staging.join(VOCAB_FILE), vocab.to_json().as_bytes())?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::rename(&staging, dir).map_err(io_err(dir))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, TrainError> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| TrainError::Corrupt(format!("manifest: {e}")))?;
    if manifest.format != CHECKPOINT_FORMAT {
        return Err(TrainError::Corrupt(format!("unknown format {:?}", manifest.format)));
    }
    if manifest.version != CHECKPOINT_VERSION {
        return Err(TrainError::Corrupt(format!("unsupported version {}", manifest.version)));
    }
    Ok(manifest)
}

/// Loads a checkpoint in the mode it was saved with.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint, TrainError> {
    load_checkpoint_as(dir, None)
}

/// Loads a checkpoint, optionally viewed in another mode. A UA model may be
/// read as plain CVAE or decoder-only; switching between the two UA
/// variants is refused.
pub fn load_checkpoint_as(dir: &Path, mode: Option<ModelMode>) -> Result<Checkpoint, TrainError> {
    let manifest = read_manifest(dir)?;
    let found = manifest.config.mode;
    let wanted = mode.unwrap_or(found);
    let compatible = match (found.combine_variant(), wanted.combine_variant()) {
        (_, None) => found.has_latent() || !wanted.has_latent(),
        (Some(a), Some(b)) => a == b,
        (None, Some(_)) => false,
    };
    if !compatible {
        return Err(TrainError::Incompatible { found, wanted });
    }
    let blob_path = dir.join(PARAMS_FILE);
    let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if blob.len() != expected * 4 {
        return Err(TrainError::Corrupt(format!("params.bin has {} bytes, manifest needs {}", blob.len(), expected * 4)));
    }
    let floats: Vec<f32> = blob.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();

    let saved = Model::<f32>::new(manifest.config.clone())?;
    let mut store = saved.params().clone();
    if store.len() != manifest.params.len() {
        return Err(TrainError::Corrupt(format!(
            "manifest lists {} parameters, the {found} layout has {}",
            manifest.params.len(),
            store.len()
        )));
    }
    let mut next = 0;
    for entry in &manifest.params {
        let id = store.id(&entry.name).ok_or_else(|| TrainError::Corrupt(format!("unknown parameter {}", entry.name)))?;
        let len: usize = entry.shape.iter().product();
        if entry.offset != next || entry.shape != store.get(id).shape() {
            return Err(TrainError::Corrupt(format!("parameter {}: shape or offset mismatch", entry.name)));
        }
        *store.get_mut(id) = Tensor::new(entry.shape.clone(), floats[next..next + len].to_vec())
            .map_err(|e| TrainError::Corrupt(e.to_string()))?;
        next += len;
    }
    let mut model = Model::<f32>::new(ModelConfig { mode: wanted, ..manifest.config.clone() })?;
    model.load_params_from(&store)?;

    let vocab_path = dir.join(&manifest.vocab);
    let vocab = Vocab::from_json(&fs::read_to_string(&vocab_path).map_err(io_err(&vocab_path))?)?;
    if vocab.len() != manifest.config.vocab_size {
        return Err(TrainError::Corrupt(format!(
            "vocab has {} entries, config expects {}",
            vocab.len(),
            manifest.config.vocab_size
        )));
    }
    Ok(Checkpoint { manifest, model, vocab })
}

pub struct TrainOutcome {
    pub model: Model<f32>,
    pub vocab: Vocab,
    pub log: Vec<StepRecord>,
    pub best_validation: Option<f64>,
    pub steps: usize,
}

/// Mean validation loss on the recognition path with fixed noise.
pub fn validation_loss(model: &Model<f32>, examples: &[EncodedExample], batch_size: usize) -> Result<f64, ModelError> {
    let mut rng = ChaCha8Rng::seed_from_u64(VALIDATION_NOISE_SEED);
    let mut total = 0.0;
    for chunk in examples.chunks(batch_size) {
        let noise = draw_noise::<f32, _>(&mut rng, chunk.len(), model.config().latent_dim);
        let opts = ForwardOptions { kl_weight: 1.0, ..Default::default() };
        let lg = model.loss(chunk, &noise, &opts, &mut RouteTrace::default())?;
        total += lg.breakdown.total * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

struct Outputs {
    dir: PathBuf,
    log: BufWriter<File>,
}

impl Outputs {
    fn open(dir: &Path) -> Result<Self, TrainError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new().create(true).write(true).truncate(true).open(&path).map_err(io_err(&path))?;
        Ok(Self { dir: dir.to_path_buf(), log: BufWriter::new(file) })
    }

    fn append(&mut self, rec: &StepRecord) -> Result<(), TrainError> {
        let line = serde_json::to_string(rec).expect("record is serialisable");
        writeln!(self.log, "{line}").and_then(|_| self.log.flush()).map_err(io_err(&self.dir))
    }
}

/// Trains on `corpus` (split internally into train/validation).
pub fn train(config: &TrainConfig, corpus: &[DialogueExample]) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if corpus.is_empty() {
        return Err(TrainError::Corpus(CorpusError::Empty));
    }
    let vocab = build_vocab(corpus, config.min_freq)?;
    let encoded: Vec<EncodedExample> = corpus.iter().map(|e| vocab.encode_example(e)).collect();
    let (train_idx, val_idx) = split_indices(encoded.len(), config.validation_fraction, config.seed);
    let train_set: Vec<EncodedExample> = train_idx.iter().map(|&i| encoded[i].clone()).collect();
    let val_set: Vec<EncodedExample> = val_idx.iter().map(|&i| encoded[i].clone()).collect();

    let model_config = ModelConfig { vocab_size: vocab.len(), ..config.model.clone() };
    let mut model = Model::<f32>::new(model_config)?;
    let mut outputs = config.out_dir.as_deref().map(Outputs::open).transpose()?;
    let adam = config.adam();
    let latent_dim = model.config().latent_dim;
    let steps_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;
    let eval_every = if config.eval_every == 0 { steps_per_epoch } else { config.eval_every };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut log = Vec::with_capacity(total_steps);
    let mut best: Option<f64> = None;
    let mut step = 0;
    for epoch in 0..config.epochs {
        for (b, batch_idx) in epoch_batches(train_set.len(), config.batch_size, &mut rng).into_iter().enumerate() {
            let batch: Vec<EncodedExample> = batch_idx.iter().map(|&i| train_set[i].clone()).collect();
            let noise = draw_noise::<f32, _>(&mut rng, batch.len(), latent_dim);
            let kl_weight = model.config().kl_schedule.weight(step, total_steps);
            let opts = ForwardOptions { kl_weight, ..Default::default() };
            let lg = model
                .loss(&batch, &noise, &opts, &mut RouteTrace::default())
                .map_err(|source| TrainError::NonFinite { step, source })?;
            let grads = lg.graph.backward(lg.total).map_err(|source| TrainError::NanGradient { step, source })?;
            let mut pg = grads.params(&lg.graph, model.params());
            let grad_norm = pg.clip_global_norm(config.grad_clip);
            model.params_mut().adam_step(&pg, &adam).map_err(|source| TrainError::NanGradient { step, source })?;
            step += 1;

            let mut rec =
                StepRecord { step, epoch, batch: b, loss: lg.breakdown, grad_norm, validation_total: None };
            if step % eval_every == 0 || step == total_steps {
                let val = if val_set.is_empty() {
                    lg.breakdown.total
                } else {
                    validation_loss(&model, &val_set, config.batch_size)
                        .map_err(|source| TrainError::NonFinite { step, source })?
                };
                rec.validation_total = Some(val);
                if let Some(out) = &outputs {
                    let metrics = serde_json::json!({ "validation_total": val });
                    save_checkpoint(&out.dir.join("last"), &model, &vocab, step, Some(config), Some(metrics.clone()))?;
                    if best.is_none_or(|b| val < b) {
                        save_checkpoint(&out.dir.join("best"), &model, &vocab, step, Some(config), Some(metrics))?;
                    }
                }
                if best.is_none_or(|b| val < b) {
                    best = Some(val);
                }
            }
            if let Some(out) = outputs.as_mut() {
                out.append(&rec)?;
            }
            log.push(rec);
        }
    }
    Ok(TrainOutcome { model, vocab, log, best_validation: best, steps: step })
}

#[derive(Clone, Debug)]
pub struct EvalOptions {
    pub strategy: DecodeStrategy,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self { strategy: DecodeStrategy::Greedy, seed: 0 }
    }
}

/// Corpus perplexity of the references on the inference path.
pub fn perplexity(model: &Model<f32>, examples: &[EncodedExample]) -> Result<f64, TrainError> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for ex in examples {
        let (n, t) = model.reference_nll(ex)?;
        nll += n;
        tokens += t;
    }
    Ok(perplexity_from_nll(nll, tokens)?)
}

/// Generates one response per example (prior path) and scores it.
pub fn evaluate(
    model: &Model<f32>,
    vocab: &Vocab,
    test: &[DialogueExample],
    judge: Option<&dyn Judge>,
    options: &EvalOptions,
) -> Result<MetricReport, TrainError> {
    if test.is_empty() {
        return Err(MetricError::EmptyTestSet.into());
    }
    let encoded: Vec<EncodedExample> = test.iter().map(|e| vocab.encode_example(e)).collect();
    let ppl = perplexity(model, &encoded)?;
    let mut rows = Vec::with_capacity(test.len());
    let mut responses = Vec::with_capacity(test.len());
    for (i, (ex, enc)) in test.iter().zip(&encoded).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(i as u64));
        let ids = model.generate(enc, &options.strategy, &mut rng)?;
        let text = vocab.decode_text(&ids);
        let mut row = ExampleRow::score(&text, &ex.reference.text);
        row.corrupted = ex.is_corrupted();
        row.prior_log_variance = model.prior_log_variance(enc)?;
        rows.push(row);
        responses.push(text);
    }
    if let Some(judge) = judge {
        let ue = ue_corpus(test, &responses, judge)?;
        for (row, s) in rows.iter_mut().zip(ue.example_scores) {
            row.ue = Some(s);
        }
    }
    Ok(MetricReport::from_rows(ppl, rows)?)
}
