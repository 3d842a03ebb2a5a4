use std::collections::VecDeque;
use std::fs;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use uacvae_core::corpus::{
    generate_synthetic, load_jsonl_with, write_jsonl, Condition, DialogueExample, SyntheticSpec, Templates, Utterance,
    WindowLimits,
};
use uacvae_core::model::{DecodeStrategy, ModelConfig};
use uacvae_core::trainer::{evaluate, load_checkpoint_as, train as run_training, Checkpoint, EvalOptions, TrainConfig, LOG_FILE};
use uacvae_core::ue::{ue_corpus, GoldJudge, JudgeBackend, RemoteJudge, RuleJudge};

use crate::manifest::{beside, resolve_seed, RunManifest, SeedSource, RUN_FILE};
use crate::{ChatArgs, CliError, EvalArgs, GenCorpusArgs, JudgeArg, TrainArgs, UeArgs};

fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

fn say(out: &mut dyn Write, line: &str) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::Data(format!("cannot write output: {e}")))
}

fn limits(config: &ModelConfig) -> WindowLimits {
    WindowLimits { max_turns: config.max_turns, max_len: config.max_utterance_len }
}

fn judge_backend(arg: &JudgeArg, test: &[DialogueExample]) -> JudgeBackend {
    match arg {
        JudgeArg::Rule => JudgeBackend::Rule(RuleJudge::default()),
        JudgeArg::Gold => JudgeBackend::Gold(GoldJudge::from_corpus(test, Some(Templates::default()))),
        JudgeArg::Remote(url) => JudgeBackend::Remote(RemoteJudge::new(url)),
    }
}

fn judge_name(arg: &JudgeArg) -> String {
    match arg {
        JudgeArg::Rule => "rule".into(),
        JudgeArg::Gold => "gold".into(),
        JudgeArg::Remote(url) => url.clone(),
    }
}

/// Writes `value` as JSON to `path` plus its manifest, or to `out`.
fn emit<V: Serialize>(
    value: &V,
    path: Option<&PathBuf>,
    manifest: RunManifest,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    match path {
        Some(p) => {
            fs::write(p, text + "\n").map_err(|e| CliError::Data(format!("cannot write {}: {e}", p.display())))?;
            manifest.output(p).write(&beside(p))?;
            say(out, &format!("wrote {}", p.display()))
        }
        None => say(out, &text),
    }
}

fn load_model(ckpt: &Path, mode: Option<uacvae_core::model::ModelMode>) -> Result<Checkpoint, CliError> {
    if !ckpt.join("manifest.json").is_file() {
        return Err(CliError::Data(format!("no checkpoint at {}", ckpt.display())));
    }
    Ok(load_checkpoint_as(ckpt, mode)?)
}

/// One response per example, each from its own RNG stream `seed + i`.
fn generate_all(
    ckpt: &Checkpoint,
    test: &[DialogueExample],
    strategy: &DecodeStrategy,
    seed: u64,
) -> Result<Vec<String>, CliError> {
    test.iter()
        .enumerate()
        .map(|(i, ex)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let ids = ckpt.model.generate(&ckpt.vocab.encode_example(ex), strategy, &mut rng)?;
            Ok(ckpt.vocab.decode_text(&ids))
        })
        .collect()
}

pub fn gen_corpus(a: &GenCorpusArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (mut spec, configured) = match &a.spec {
        Some(p) => {
            let value: serde_json::Value = serde_json::from_str(&read_text(p)?)
                .map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let configured = value.get("seed").and_then(serde_json::Value::as_u64);
            let spec: SyntheticSpec =
                serde_json::from_value(value).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            (spec, configured)
        }
        None => (SyntheticSpec::default(), None),
    };
    if let Some(c) = a.count {
        spec.count = c;
    }
    if let Some(r) = a.corruption {
        spec.corruption_rate = r;
    }
    let seed = resolve_seed(a.seed, configured);
    spec.seed = seed.0;
    let examples = generate_synthetic(&spec)?;
    write_jsonl(&a.out, &examples)?;
    let mut manifest = RunManifest::new("gen-corpus", seed, serde_json::to_value(&spec).expect("spec serializes"));
    if let Some(p) = &a.spec {
        manifest = manifest.input("spec", p);
    }
    manifest.output(&a.out).write(&beside(&a.out))?;
    say(out, &format!("wrote {} examples to {} (seed {})", examples.len(), a.out.display(), seed.0))
}

pub fn train(a: &TrainArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let (mut config, configured) = match &a.config {
        Some(p) => {
            let text = read_text(p)?;
            let table: toml::Table = text.parse().map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?;
            let configured = table.get("seed").and_then(toml::Value::as_integer).map(|s| s as u64);
            (TrainConfig::from_toml(&text)?, configured)
        }
        None => (TrainConfig::default(), None),
    };
    if let Some(mode) = a.mode {
        config.model.mode = mode;
    }
    let seed = resolve_seed(a.seed, configured);
    config.seed = seed.0;
    if seed.1 != SeedSource::Config {
        config.model.seed = seed.0;
    }
    let dir = a.out.clone().or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("checkpoints"));
    config.out_dir = Some(dir.clone());
    let corpus = load_jsonl_with(&a.data, limits(&config.model))?;
    let outcome = run_training(&config, &corpus)?;

    let mut manifest = RunManifest::new("train", seed, serde_json::to_value(&config).expect("config serializes"))
        .input("data", &a.data);
    if let Some(p) = &a.config {
        manifest = manifest.input("config", p);
    }
    manifest
        .output(&dir.join("last"))
        .output(&dir.join("best"))
        .output(&dir.join(LOG_FILE))
        .write(&dir.join(RUN_FILE))?;
    let best = outcome.best_validation.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    say(
        out,
        &format!("trained {} steps, best validation loss {best}, checkpoints in {}", outcome.steps, dir.display()),
    )
}

pub fn eval(a: &EvalArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_model(&a.ckpt, a.mode)?;
    let test = load_jsonl_with(&a.data, limits(ckpt.model.config()))?;
    let judge = judge_backend(&a.judge, &test);
    let seed = resolve_seed(a.seed, None);
    let options = EvalOptions { strategy: a.strategy.clone(), seed: seed.0 };
    let report = evaluate(&ckpt.model, &ckpt.vocab, &test, Some(&judge), &options)?;
    let config = serde_json::json!({
        "model": ckpt.model.config(),
        "strategy": a.strategy.to_string(),
        "judge": judge_name(&a.judge),
    });
    let manifest = RunManifest::new("eval", seed, config).input("ckpt", &a.ckpt).input("data", &a.data);
    emit(&report, a.out.as_ref(), manifest, out)
}

pub fn ue(a: &UeArgs, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = a.ckpt.as_deref().map(|p| load_model(p, a.mode)).transpose()?;
    let window = ckpt.as_ref().map_or_else(WindowLimits::default, |c| limits(c.model.config()));
    let test = load_jsonl_with(&a.data, window)?;
    let seed = resolve_seed(a.seed, None);
    let (responses, source) = match (&a.responses, &ckpt) {
        (Some(p), _) => (read_text(p)?.lines().map(str::to_string).collect::<Vec<_>>(), "file"),
        (None, Some(c)) => (generate_all(c, &test, &a.strategy, seed.0)?, "model"),
        (None, None) => (test.iter().map(|e| e.reference.text.clone()).collect(), "references"),
    };
    let judge = judge_backend(&a.judge, &test);
    let result = ue_corpus(&test, &responses, &judge)?;
    let config = serde_json::json!({
        "judge": judge_name(&a.judge),
        "responses": source,
        "strategy": a.strategy.to_string(),
    });
    let mut manifest = RunManifest::new("ue", seed, config).input("data", &a.data);
    if let Some(p) = a.responses.as_ref().or(a.ckpt.as_ref()) {
        manifest = manifest.input(source, p);
    }
    emit(&result, a.out.as_ref(), manifest, out)
}

/// The most recent `max_turns` utterances, each cut to `max_len` tokens.
pub struct TurnWindow {
    turns: VecDeque<Utterance>,
    max_turns: usize,
    max_len: usize,
}

impl TurnWindow {
    pub fn new(max_turns: usize, max_len: usize) -> Self {
        Self { turns: VecDeque::with_capacity(max_turns + 1), max_turns, max_len }
    }

    pub fn push(&mut self, text: &str) {
        self.turns.push_back(Utterance::new(text).truncated(self.max_len));
        while self.turns.len() > self.max_turns {
            self.turns.pop_front();
        }
    }

    pub fn turns(&self) -> Vec<Utterance> {
        self.turns.iter().cloned().collect()
    }
}

pub fn chat(a: &ChatArgs, input: impl BufRead, out: &mut dyn Write) -> Result<(), CliError> {
    let ckpt = load_model(&a.ckpt, a.mode)?;
    let config = ckpt.model.config().clone();
    let condition = if a.persona.is_empty() {
        Condition::Emotion(a.emotion.clone())
    } else {
        Condition::Persona(a.persona.clone())
    };
    let mut rng = ChaCha8Rng::seed_from_u64(resolve_seed(a.seed, None).0);
    let interactive = std::io::stdin().is_terminal();
    let mut window = TurnWindow::new(config.max_turns, config.max_utterance_len);
    if interactive {
        eprint!("> ");
    }
    for line in input.lines() {
        let line = line.map_err(|e| CliError::Data(format!("cannot read input: {e}")))?;
        if line.trim().is_empty() {
            continue;
        }
        window.push(&line);
        let example = DialogueExample {
            context: window.turns(),
            condition: condition.clone(),
            reference: Utterance::new(""),
            gold_nli: None,
            corrupted: None,
        };
        let ids = ckpt.model.generate(&ckpt.vocab.encode_example(&example), &a.strategy, &mut rng)?;
        let reply = ckpt.vocab.decode_text(&ids);
        say(out, &reply)?;
        out.flush().map_err(|e| CliError::Data(format!("cannot write output: {e}")))?;
        window.push(&reply);
        if interactive {
            eprint!("> ");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_keeps_the_latest_turns() {
        let mut w = TurnWindow::new(4, 3);
        for i in 0..10 {
            w.push(&format!("turn {i} a b c d"));
            assert!(w.turns().len() <= 4);
        }
        let texts: Vec<String> = w.turns().into_iter().map(|u| u.text).collect();
        assert_eq!(texts, ["turn 6 a", "turn 7 a", "turn 8 a", "turn 9 a"]);
    }

    #[test]
    fn judge_names() {
        assert_eq!("rule".parse::<JudgeArg>().unwrap(), JudgeArg::Rule);
        assert_eq!("http://x:1".parse::<JudgeArg>().unwrap(), JudgeArg::Remote("http://x:1".into()));
        assert!("nli".parse::<JudgeArg>().is_err());
        assert_eq!(judge_name(&JudgeArg::Gold), "gold");
    }
}
