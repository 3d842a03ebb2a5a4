//! Dialogue examples, JSONL I/O, vocabulary, context windowing and the
//! synthetic corpus generator.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ue::NliLabel;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SEP: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<sep>"];

pub const MAX_UTTERANCE_LEN: usize = 40;
pub const MAX_TURNS: usize = 4;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: malformed record: {detail}")]
    Malformed { line: usize, detail: String },
    #[error("line {line}: schema violation: {detail}")]
    Schema { line: usize, detail: String },
    #[error("empty corpus")]
    Empty,
    #[error("invalid vocabulary: {0}")]
    Vocab(String),
    #[error("invalid synthetic spec: {0}")]
    Spec(String),
}

/// Lowercase whitespace tokenization.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub text: String,
    pub tokens: Vec<String>,
}

impl Utterance {
    pub fn new(text: &str) -> Self {
        let tokens = tokenize(text);
        Self { text: tokens.join(" "), tokens }
    }

    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Self { text: tokens.join(" "), tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps the first `max_len` tokens.
    pub fn truncated(&self, max_len: usize) -> Self {
        if self.tokens.len() <= max_len {
            self.clone()
        } else {
            Self::from_tokens(self.tokens[..max_len].to_vec())
        }
    }
}

/// External conditioning information.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Condition {
    Persona(Vec<String>),
    Emotion(String),
}

impl Condition {
    /// Persona statements joined with SEP, or the emotion label as a single
    /// token.
    pub fn tokens(&self) -> Vec<String> {
        match self {
            Condition::Persona(statements) => {
                let mut out = Vec::new();
                for (i, s) in statements.iter().enumerate() {
                    if i > 0 {
                        out.push(SPECIAL_TOKENS[SEP].to_string());
                    }
                    out.extend(tokenize(s));
                }
                out
            }
            Condition::Emotion(label) => vec![emotion_token(label)],
        }
    }
}

fn emotion_token(label: &str) -> String {
    tokenize(label).join("_")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueExample {
    pub context: Vec<Utterance>,
    pub condition: Condition,
    pub reference: Utterance,
    pub gold_nli: Option<Vec<NliLabel>>,
    pub corrupted: Option<bool>,
}

impl DialogueExample {
    pub fn is_corrupted(&self) -> bool {
        self.corrupted.unwrap_or(false)
    }

    /// Context tokens with SEP between turns.
    pub fn context_tokens(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, u) in self.context.iter().enumerate() {
            if i > 0 {
                out.push(SPECIAL_TOKENS[SEP].to_string());
            }
            out.extend(u.tokens.iter().cloned());
        }
        out
    }
}

/// Keeps the most recent `max_turns` utterances, each cut to its first
/// `max_len` tokens.
pub fn window(context: &[Utterance], max_turns: usize, max_len: usize) -> Vec<Utterance> {
    let start = context.len().saturating_sub(max_turns);
    context[start..].iter().map(|u| u.truncated(max_len)).collect()
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    context: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    persona: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    emotion: Option<String>,
    response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold_nli: Option<Vec<i8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    corrupted: Option<bool>,
}

/// Window limits applied while loading.
#[derive(Clone, Copy, Debug)]
pub struct WindowLimits {
    pub max_turns: usize,
    pub max_len: usize,
}

impl Default for WindowLimits {
    fn default() -> Self {
        Self { max_turns: MAX_TURNS, max_len: MAX_UTTERANCE_LEN }
    }
}

fn record_to_example(rec: Record, line: usize, limits: WindowLimits) -> Result<DialogueExample, CorpusError> {
    let schema = |detail: &str| CorpusError::Schema { line, detail: detail.to_string() };
    if rec.context.is_empty() {
        return Err(schema("context must hold at least one utterance"));
    }
    let condition = match (rec.persona, rec.emotion) {
        (Some(p), None) => {
            if p.is_empty() || p.iter().any(|s| tokenize(s).is_empty()) {
                return Err(schema("persona must be a non-empty list of non-empty statements"));
            }
            Condition::Persona(p)
        }
        (None, Some(e)) => {
            if tokenize(&e).is_empty() {
                return Err(schema("emotion label is empty"));
            }
            Condition::Emotion(e)
        }
        _ => return Err(schema("exactly one of \"persona\" or \"emotion\" is required")),
    };
    let context: Vec<Utterance> = rec.context.iter().map(|t| Utterance::new(t)).collect();
    let gold_nli = match rec.gold_nli {
        None => None,
        Some(values) => {
            if values.len() != context.len() {
                return Err(schema("gold_nli needs one label per context utterance"));
            }
            let labels = values
                .iter()
                .map(|&v| NliLabel::from_rating(v).ok_or_else(|| schema("gold_nli values must be -1, 0 or 1")))
                .collect::<Result<Vec<_>, _>>()?;
            // windowing drops the oldest turns, so drop their labels too
            let start = labels.len().saturating_sub(limits.max_turns);
            Some(labels[start..].to_vec())
        }
    };
    Ok(DialogueExample {
        context: window(&context, limits.max_turns, limits.max_len),
        condition,
        reference: Utterance::new(&rec.response).truncated(limits.max_len),
        gold_nli,
        corrupted: rec.corrupted,
    })
}

fn example_to_record(ex: &DialogueExample) -> Record {
    let (persona, emotion) = match &ex.condition {
        Condition::Persona(p) => (Some(p.clone()), None),
        Condition::Emotion(e) => (None, Some(e.clone())),
    };
    Record {
        context: ex.context.iter().map(|u| u.text.clone()).collect(),
        persona,
        emotion,
        response: ex.reference.text.clone(),
        gold_nli: ex.gold_nli.as_ref().map(|g| g.iter().map(|l| l.rating() as i8).collect()),
        corrupted: ex.corrupted,
    }
}

/// Parses JSONL text; fails on the first bad line and returns nothing.
pub fn parse_jsonl(text: &str, limits: WindowLimits) -> Result<Vec<DialogueExample>, CorpusError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| CorpusError::Malformed { line, detail: e.to_string() })?;
        if !value.is_object() {
            return Err(CorpusError::Malformed { line, detail: "expected a JSON object".into() });
        }
        let rec: Record =
            serde_json::from_value(value).map_err(|e| CorpusError::Schema { line, detail: e.to_string() })?;
        out.push(record_to_example(rec, line, limits)?);
    }
    Ok(out)
}

pub fn load_jsonl(path: &Path) -> Result<Vec<DialogueExample>, CorpusError> {
    load_jsonl_with(path, WindowLimits::default())
}

pub fn load_jsonl_with(path: &Path, limits: WindowLimits) -> Result<Vec<DialogueExample>, CorpusError> {
    let mut text = String::new();
    for line in BufReader::new(File::open(path)?).lines() {
        text.push_str(&line?);
        text.push('\n');
    }
    parse_jsonl(&text, limits)
}

pub fn to_jsonl(examples: &[DialogueExample]) -> String {
    let mut out = String::new();
    for ex in examples {
        out.push_str(&serde_json::to_string(&example_to_record(ex)).expect("records serialize"));
        out.push('\n');
    }
    out
}

pub fn write_jsonl(path: &Path, examples: &[DialogueExample]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(to_jsonl(examples).as_bytes())?;
    w.flush()?;
    Ok(())
}

/// Token ↔ id bijection with the five special tokens at ids 0–4.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self, CorpusError> {
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(CorpusError::Vocab(format!("id {i} must be {s}")));
            }
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(CorpusError::Vocab(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, ids })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or(SPECIAL_TOKENS[UNK])
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    /// Decodes up to the first EOS, dropping other special tokens.
    pub fn decode_text(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i > SEP)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// JSON array ordered by id.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.tokens).expect("strings serialize")
    }

    pub fn from_json(text: &str) -> Result<Self, CorpusError> {
        let tokens: Vec<String> = serde_json::from_str(text).map_err(|e| CorpusError::Vocab(e.to_string()))?;
        Self::from_tokens(tokens)
    }

    pub fn encode_example(&self, ex: &DialogueExample) -> EncodedExample {
        EncodedExample {
            context: self.encode(&ex.context_tokens()),
            condition: self.encode(&ex.condition.tokens()),
            response: self.encode(&ex.reference.tokens),
            corrupted: ex.is_corrupted(),
        }
    }
}

/// Tokens with corpus frequency ≥ `min_freq`, ordered by frequency
/// (descending) then lexicographically.
pub fn build_vocab(examples: &[DialogueExample], min_freq: usize) -> Result<Vocab, CorpusError> {
    if examples.is_empty() {
        return Err(CorpusError::Empty);
    }
    let min_freq = min_freq.max(1);
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut bump = |t: &str| {
        if !SPECIAL_TOKENS.contains(&t) {
            *counts.entry(t.to_string()).or_default() += 1;
        }
    };
    for ex in examples {
        for u in &ex.context {
            u.tokens.iter().for_each(|t| bump(t));
        }
        ex.condition.tokens().iter().for_each(|t| bump(t));
        ex.reference.tokens.iter().for_each(|t| bump(t));
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_freq).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let tokens = SPECIAL_TOKENS.iter().map(|s| s.to_string()).chain(kept.into_iter().map(|(t, _)| t)).collect();
    Vocab::from_tokens(tokens)
}

/// An example mapped to vocabulary ids, ready for the model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedExample {
    pub context: Vec<usize>,
    pub condition: Vec<usize>,
    pub response: Vec<usize>,
    pub corrupted: bool,
}

/// Slot templates of the synthetic dialogue world. `{}` marks the item slot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Templates {
    pub filler: Vec<String>,
    pub stance_pos: String,
    pub stance_neg: String,
    pub question: String,
    pub answer_pos: String,
    pub answer_neg: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            filler: ["hello there", "hi how are you", "good to meet you", "nice weather today", "tell me about yourself"]
                .map(String::from)
                .to_vec(),
            stance_pos: "i like {}".into(),
            stance_neg: "i do not like {}".into(),
            question: "do you like {} ?".into(),
            answer_pos: "yes i like {}".into(),
            answer_neg: "no i do not like {}".into(),
        }
    }
}

/// Meaning of a template-generated utterance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Semantics {
    /// A first-person claim about an item (stances and answers alike).
    Claim { item: String, positive: bool },
    Question { item: String },
    Filler,
}

impl Templates {
    fn slots(&self) -> [&String; 5] {
        [&self.stance_pos, &self.stance_neg, &self.question, &self.answer_pos, &self.answer_neg]
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.filler.is_empty() || self.filler.iter().any(|f| tokenize(f).is_empty()) {
            return Err(CorpusError::Spec("template inventory has no filler utterances".into()));
        }
        if let Some(bad) = self.slots().into_iter().find(|t| t.matches("{}").count() != 1) {
            return Err(CorpusError::Spec(format!("template {bad:?} needs exactly one {{}} slot")));
        }
        Ok(())
    }

    fn fill(template: &str, item: &str) -> String {
        template.replace("{}", item)
    }

    fn match_slot(template: &str, text: &str) -> Option<String> {
        let (prefix, suffix) = template.split_once("{}")?;
        let middle = text.strip_prefix(prefix)?.strip_suffix(suffix)?;
        (!middle.is_empty() && !middle.contains(' ')).then(|| middle.to_string())
    }

    /// Recovers the meaning of an utterance produced by these templates.
    pub fn parse(&self, text: &str) -> Option<Semantics> {
        let text = tokenize(text).join(" ");
        if self.filler.iter().any(|f| tokenize(f).join(" ") == text) {
            return Some(Semantics::Filler);
        }
        let claims = [
            (&self.stance_pos, true),
            (&self.stance_neg, false),
            (&self.answer_pos, true),
            (&self.answer_neg, false),
        ];
        for (template, positive) in claims {
            if let Some(item) = Self::match_slot(template, &text) {
                return Some(Semantics::Claim { item, positive });
            }
        }
        Self::match_slot(&self.question, &text).map(|item| Semantics::Question { item })
    }

    /// Entailment label of `premise` → `hypothesis` under template semantics:
    /// claims about the same item entail when polarities agree and
    /// contradict otherwise; everything else is neutral.
    pub fn label(&self, premise: &str, hypothesis: &str) -> NliLabel {
        match (self.parse(premise), self.parse(hypothesis)) {
            (
                Some(Semantics::Claim { item: a, positive: pa }),
                Some(Semantics::Claim { item: b, positive: pb }),
            ) if a == b => {
                if pa == pb {
                    NliLabel::Entail
                } else {
                    NliLabel::Contradict
                }
            }
            _ => NliLabel::Neutral,
        }
    }
}

/// Configuration of the synthetic corpus generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub templates: Templates,
    pub items: Vec<String>,
    pub positive_emotions: Vec<String>,
    pub negative_emotions: Vec<String>,
    /// Fraction of examples conditioned on a persona; the rest carry an
    /// emotion label.
    pub persona_fraction: f64,
    pub persona_size: usize,
    pub min_turns: usize,
    pub max_turns: usize,
    pub count: usize,
    pub corruption_rate: f64,
    /// Fraction of tokens replaced inside a corrupted utterance.
    pub replace_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            templates: Templates::default(),
            items: [
                "tea", "coffee", "dogs", "cats", "music", "movies", "pizza", "books", "hiking", "games", "soccer",
                "cooking", "jazz", "rain", "summer", "trains",
            ]
            .map(String::from)
            .to_vec(),
            positive_emotions: ["excited", "grateful", "proud", "joyful"].map(String::from).to_vec(),
            negative_emotions: ["sad", "angry", "afraid", "lonely"].map(String::from).to_vec(),
            persona_fraction: 0.5,
            persona_size: 2,
            min_turns: 1,
            max_turns: MAX_TURNS,
            count: 1000,
            corruption_rate: 0.0,
            replace_fraction: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        self.templates.validate()?;
        let err = |m: &str| Err(CorpusError::Spec(m.to_string()));
        if !(0.0..=1.0).contains(&self.corruption_rate) {
            return err("corruption_rate must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.replace_fraction) || !(0.0..=1.0).contains(&self.persona_fraction) {
            return err("fractions must lie in [0, 1]");
        }
        if self.items.len() < self.persona_size.max(1) + 1 {
            return err("item inventory too small for the persona size");
        }
        if self.items.iter().any(|i| tokenize(i).len() != 1) {
            return err("items must be single tokens");
        }
        if self.persona_fraction < 1.0 && (self.positive_emotions.is_empty() || self.negative_emotions.is_empty()) {
            return err("emotion inventories are empty");
        }
        if self.persona_size == 0 && self.persona_fraction > 0.0 {
            return err("persona_size must be at least 1");
        }
        if self.min_turns < 1 || self.min_turns > self.max_turns {
            return err("need 1 <= min_turns <= max_turns");
        }
        Ok(())
    }

    /// Every word the templates, items and labels can produce; corruption
    /// draws replacement tokens from here.
    pub fn lexicon(&self) -> Vec<String> {
        let mut words: Vec<String> = Vec::new();
        let mut seen = HashSet::new();
        let t = &self.templates;
        let sources = t.filler.iter().chain(t.slots()).chain(&self.items);
        for s in sources {
            for w in tokenize(&s.replace("{}", " ")) {
                if seen.insert(w.clone()) {
                    words.push(w);
                }
            }
        }
        words
    }
}

/// Deterministic synthetic corpus with gold entailment labels.
///
/// Each context ends with a question about an item; the reference answers
/// it with a polarity fixed by the condition (item in persona, or the
/// emotion's valence). A corrupted example has every context utterance
/// shuffled with a fraction of its tokens replaced, which hides the item
/// and makes the response unpredictable from the context.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DialogueExample>, CorpusError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lexicon = spec.lexicon();
    let t = &spec.templates;
    let mut out = Vec::with_capacity(spec.count);
    for _ in 0..spec.count {
        let turns = rng.random_range(spec.min_turns..=spec.max_turns);
        let item = spec.items.choose(&mut rng).expect("items validated").clone();
        let use_persona = rng.random_bool(spec.persona_fraction);
        let (condition, positive) = if use_persona {
            let others: Vec<&String> = spec.items.iter().filter(|i| **i != item).collect();
            let include = rng.random_bool(0.5);
            let take = if include { spec.persona_size - 1 } else { spec.persona_size };
            let mut liked: Vec<String> = others.choose_multiple(&mut rng, take).map(|s| (*s).clone()).collect();
            if include {
                let at = rng.random_range(0..=liked.len());
                liked.insert(at, item.clone());
            }
            let statements = liked.iter().map(|i| Templates::fill(&t.stance_pos, i)).collect();
            (Condition::Persona(statements), include)
        } else {
            let positive = rng.random_bool(0.5);
            let pool = if positive { &spec.positive_emotions } else { &spec.negative_emotions };
            (Condition::Emotion(pool.choose(&mut rng).expect("validated").clone()), positive)
        };

        let mut context = Vec::with_capacity(turns);
        for _ in 0..turns - 1 {
            let roll: f64 = rng.random();
            let text = if roll < 0.4 {
                t.filler.choose(&mut rng).expect("validated").clone()
            } else if roll < 0.8 {
                let about = if rng.random_bool(0.5) { item.clone() } else { spec.items.choose(&mut rng).unwrap().clone() };
                let template = if rng.random_bool(0.5) { &t.stance_pos } else { &t.stance_neg };
                Templates::fill(template, &about)
            } else {
                Templates::fill(&t.question, spec.items.choose(&mut rng).unwrap())
            };
            context.push(text);
        }
        context.push(Templates::fill(&t.question, &item));
        let response = Templates::fill(if positive { &t.answer_pos } else { &t.answer_neg }, &item);

        let corrupted = rng.random_bool(spec.corruption_rate);
        let (context, gold): (Vec<Utterance>, Vec<NliLabel>) = if corrupted {
            context
                .iter()
                .map(|text| {
                    let mut tokens = tokenize(text);
                    tokens.shuffle(&mut rng);
                    for tok in tokens.iter_mut() {
                        if rng.random_bool(spec.replace_fraction) {
                            *tok = lexicon.choose(&mut rng).expect("non-empty lexicon").clone();
                        }
                    }
                    (Utterance::from_tokens(tokens), NliLabel::Neutral)
                })
                .unzip()
        } else {
            context.iter().map(|text| (Utterance::new(text), t.label(text, &response))).unzip()
        };
        out.push(DialogueExample {
            context,
            condition,
            reference: Utterance::new(&response),
            gold_nli: Some(gold),
            corrupted: Some(corrupted),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn utt(n: usize) -> Utterance {
        Utterance::from_tokens((0..n).map(|i| format!("w{i}")).collect())
    }

    #[test]
    fn minimal_record_loads() {
        let ex = parse_jsonl(r#"{"context":["hi"],"persona":["i like tea"],"response":"hello"}"#, WindowLimits::default())
            .unwrap();
        assert_eq!(ex.len(), 1);
        assert_eq!(ex[0].context.len(), 1);
        assert_eq!(ex[0].condition, Condition::Persona(vec!["i like tea".into()]));
        assert_eq!(ex[0].reference.text, "hello");
    }

    #[test]
    fn six_turn_context_keeps_last_four() {
        let line = r#"{"context":["a","b","c","d","e","f"],"emotion":"sad","response":"ok","gold_nli":[1,0,0,-1,0,1]}"#;
        let ex = &parse_jsonl(line, WindowLimits::default()).unwrap()[0];
        let texts: Vec<_> = ex.context.iter().map(|u| u.text.as_str()).collect();
        assert_eq!(texts, ["c", "d", "e", "f"]);
        let gold: Vec<i32> = ex.gold_nli.as_ref().unwrap().iter().map(|l| l.rating()).collect();
        assert_eq!(gold, [0, -1, 0, 1]);
    }

    #[test]
    fn corrupt_line_fails_the_whole_file() {
        let good = r#"{"context":["hi"],"emotion":"sad","response":"hello"}"#;
        let mut lines: Vec<&str> = vec![good; 10];
        lines[6] = r#"{"context":["hi"], "emotion": "#;
        let err = parse_jsonl(&lines.join("\n"), WindowLimits::default()).unwrap_err();
        assert!(matches!(err, CorpusError::Malformed { line: 7, .. }), "{err}");
    }

    #[test]
    fn unknown_condition_kind_is_a_schema_error() {
        let cases = [
            r#"{"context":["hi"],"topic":"x","response":"hello"}"#,
            r#"{"context":["hi"],"persona":["a"],"emotion":"sad","response":"hello"}"#,
            r#"{"context":["hi"],"response":"hello"}"#,
            r#"{"context":[],"emotion":"sad","response":"hello"}"#,
            r#"{"context":["hi"],"persona":[],"response":"hello"}"#,
            r#"{"context":["hi"],"emotion":"sad","response":"hello","gold_nli":[2]}"#,
            r#"{"context":["hi"],"emotion":"sad","response":"hello","gold_nli":[1,1]}"#,
        ];
        for c in cases {
            assert!(matches!(parse_jsonl(c, WindowLimits::default()), Err(CorpusError::Schema { line: 1, .. })), "{c}");
        }
    }

    #[test]
    fn long_utterances_are_truncated_on_load() {
        let long = (0..45).map(|i| format!("t{i}")).collect::<Vec<_>>().join(" ");
        let line = format!(r#"{{"context":["{long}"],"emotion":"sad","response":"{long}"}}"#);
        let ex = &parse_jsonl(&line, WindowLimits::default()).unwrap()[0];
        assert_eq!(ex.context[0].len(), 40);
        assert_eq!(ex.reference.len(), 40);
        assert_eq!(ex.context[0].tokens[39], "t39");
    }

    #[test]
    fn window_rules() {
        let six: Vec<Utterance> = (1..=6).map(utt).collect();
        let w = window(&six, 4, 40);
        assert_eq!(w, six[2..].to_vec());

        let long = vec![utt(45)];
        let w = window(&long, 4, 40);
        assert_eq!(w[0].tokens, utt(45).tokens[..40].to_vec());

        let ok = vec![utt(3), utt(5)];
        assert_eq!(window(&ok, 4, 40), ok);
    }

    fn corpus(text: &str) -> Vec<DialogueExample> {
        vec![DialogueExample {
            context: vec![Utterance::new(text)],
            condition: Condition::Emotion("x".into()),
            reference: Utterance::new(""),
            gold_nli: None,
            corrupted: None,
        }]
    }

    #[test]
    fn vocab_counts_and_min_freq() {
        // the emotion label "x" is also a corpus token
        let v = build_vocab(&corpus("a a b"), 1).unwrap();
        assert_eq!(v.len(), 8);
        assert_eq!(&v.tokens()[5..], ["a", "b", "x"]);

        let v = build_vocab(&corpus("a a b"), 2).unwrap();
        assert_eq!(&v.tokens()[5..], ["a"]);
        assert_eq!(v.encode(&["b"]), vec![UNK]);
    }

    #[test]
    fn vocab_size_for_a_plain_corpus() {
        let mut ex = corpus("a a b");
        ex[0].condition = Condition::Persona(vec!["a".into()]);
        // "a" three times, "b" once: {a, b} plus 5 specials
        assert_eq!(build_vocab(&ex, 1).unwrap().len(), 7);
    }

    #[test]
    fn vocab_is_deterministic_and_round_trips() {
        let ex = generate_synthetic(&SyntheticSpec { count: 50, ..Default::default() }).unwrap();
        let a = build_vocab(&ex, 1).unwrap();
        let b = build_vocab(&ex, 1).unwrap();
        assert_eq!(a.to_json(), b.to_json());
        assert_eq!(Vocab::from_json(&a.to_json()).unwrap(), a);
        assert!(build_vocab(&[], 1).is_err());
    }

    #[test]
    fn vocab_json_rejects_bad_specials() {
        assert!(Vocab::from_json(r#"["a","<bos>","<eos>","<unk>","<sep>"]"#).is_err());
        assert!(Vocab::from_json(r#"["<pad>","<bos>","<eos>","<unk>","<sep>","a","a"]"#).is_err());
    }

    #[test]
    fn clean_synthetic_corpus_has_consistent_gold() {
        let spec = SyntheticSpec { count: 200, ..Default::default() };
        let ex = generate_synthetic(&spec).unwrap();
        assert!(ex.iter().all(|e| e.corrupted == Some(false)));
        for e in &ex {
            let gold = e.gold_nli.as_ref().unwrap();
            assert_eq!(gold.len(), e.context.len());
            for (u, g) in e.context.iter().zip(gold) {
                assert_eq!(*g, spec.templates.label(&u.text, &e.reference.text));
            }
            assert!(e.context.len() <= MAX_TURNS);
        }
        // the world produces all three labels
        let all: HashSet<NliLabel> = ex.iter().flat_map(|e| e.gold_nli.clone().unwrap()).collect();
        assert_eq!(all.len(), 3);
    }

    #[test]
    fn full_corruption_flags_everything() {
        let spec = SyntheticSpec { count: 100, corruption_rate: 1.0, ..Default::default() };
        let ex = generate_synthetic(&spec).unwrap();
        assert!(ex.iter().all(|e| e.corrupted == Some(true)));
    }

    #[test]
    fn same_seed_same_bytes() {
        let spec = SyntheticSpec { count: 100, corruption_rate: 0.3, seed: 9, ..Default::default() };
        let a = to_jsonl(&generate_synthetic(&spec).unwrap());
        let b = to_jsonl(&generate_synthetic(&spec).unwrap());
        assert_eq!(a, b);
        let c = to_jsonl(&generate_synthetic(&SyntheticSpec { seed: 10, ..spec }).unwrap());
        assert_ne!(a, c);
    }

    #[test]
    fn empty_templates_are_rejected() {
        let mut spec = SyntheticSpec::default();
        spec.templates.filler.clear();
        assert!(matches!(generate_synthetic(&spec), Err(CorpusError::Spec(_))));
        let spec = SyntheticSpec { corruption_rate: 1.5, ..Default::default() };
        assert!(generate_synthetic(&spec).is_err());
    }

    #[test]
    fn jsonl_round_trip_of_synthetic_corpus() {
        let spec = SyntheticSpec { count: 30, corruption_rate: 0.5, ..Default::default() };
        let ex = generate_synthetic(&spec).unwrap();
        let back = parse_jsonl(&to_jsonl(&ex), WindowLimits::default()).unwrap();
        assert_eq!(back, ex);
    }

    #[test]
    fn template_semantics() {
        let t = Templates::default();
        assert_eq!(t.label("i like tea", "yes i like tea"), NliLabel::Entail);
        assert_eq!(t.label("i do not like tea", "yes i like tea"), NliLabel::Contradict);
        assert_eq!(t.label("i like cats", "yes i like tea"), NliLabel::Neutral);
        assert_eq!(t.label("do you like tea ?", "yes i like tea"), NliLabel::Neutral);
        assert_eq!(t.label("hello there", "no i do not like tea"), NliLabel::Neutral);
    }
}
