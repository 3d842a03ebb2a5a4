//! Utterance Entailment (UE) coherence score.
//!
//! Every context utterance is used as an NLI premise against the response
//! as hypothesis. Entailment rates +1, contradiction −1 and neutral 0; an
//! example's score is the sum over its context and a corpus score is the
//! mean over examples.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{tokenize, DialogueExample, Templates};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entail,
    Neutral,
    Contradict,
}

impl NliLabel {
    pub fn rating(self) -> i32 {
        match self {
            NliLabel::Entail => 1,
            NliLabel::Neutral => 0,
            NliLabel::Contradict => -1,
        }
    }

    pub fn from_rating(r: i8) -> Option<Self> {
        match r {
            1 => Some(NliLabel::Entail),
            0 => Some(NliLabel::Neutral),
            -1 => Some(NliLabel::Contradict),
            _ => None,
        }
    }

    /// Label names used on the NLI service wire.
    pub fn from_wire(name: &str) -> Option<Self> {
        match name {
            "entailment" => Some(NliLabel::Entail),
            "neutral" => Some(NliLabel::Neutral),
            "contradiction" => Some(NliLabel::Contradict),
            _ => None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum JudgeError {
    #[error("remote judge failed after {attempts} attempts: {detail}")]
    Remote { attempts: usize, detail: String },
    #[error("remote judge returned an invalid response: {0}")]
    Protocol(String),
    #[error("{responses} responses for {examples} examples")]
    LengthMismatch { examples: usize, responses: usize },
    #[error("example {0} has an empty context")]
    EmptyContext(usize),
}

/// A total function premise × hypothesis → label.
pub trait Judge: Sync {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, JudgeError>;

    /// Judges many pairs, preserving input order.
    fn judge_all(&self, pairs: &[(String, String)]) -> Result<Vec<NliLabel>, JudgeError> {
        pairs.iter().map(|(p, h)| self.judge(p, h)).collect()
    }
}

const STOPWORDS: &[&str] = &[
    "i", "you", "me", "my", "your", "we", "a", "an", "the", "is", "are", "am", "be", "do", "does", "did", "to", "of",
    "and", "or", "it", "that", "this", "yes", "so", "too", "very", "?", ".", "!", ",",
];

/// Lexical-overlap NLI heuristic.
///
/// Entail when at least `threshold` of the hypothesis content words occur
/// in the premise and both sides agree on negation; Contradict on the same
/// overlap with a negation mismatch; Neutral otherwise. Questions assert
/// nothing and are always Neutral premises.
#[derive(Clone, Debug)]
pub struct RuleJudge {
    pub threshold: f64,
    pub negations: HashSet<String>,
}

impl Default for RuleJudge {
    fn default() -> Self {
        let negations = ["no", "not", "never", "nobody", "nothing", "none", "don't", "doesn't", "didn't", "isn't", "can't", "won't", "n't"];
        Self { threshold: 0.6, negations: negations.iter().map(|s| s.to_string()).collect() }
    }
}

impl RuleJudge {
    fn content<'a>(&self, tokens: &'a [String]) -> HashSet<&'a str> {
        tokens
            .iter()
            .map(String::as_str)
            .filter(|t| !STOPWORDS.contains(t) && !self.negations.contains(*t))
            .collect()
    }

    fn negated(&self, tokens: &[String]) -> bool {
        tokens.iter().any(|t| self.negations.contains(t))
    }
}

impl Judge for RuleJudge {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, JudgeError> {
        let p = tokenize(premise);
        let h = tokenize(hypothesis);
        if p.last().is_some_and(|t| t == "?" || t.ends_with('?')) {
            return Ok(NliLabel::Neutral);
        }
        let pc = self.content(&p);
        let hc = self.content(&h);
        if hc.is_empty() || pc.is_empty() {
            return Ok(NliLabel::Neutral);
        }
        let overlap = hc.iter().filter(|w| pc.contains(*w)).count() as f64 / hc.len() as f64;
        if overlap < self.threshold {
            return Ok(NliLabel::Neutral);
        }
        Ok(if self.negated(&p) == self.negated(&h) { NliLabel::Entail } else { NliLabel::Contradict })
    }
}

/// Looks up stored gold labels.
///
/// Pairs recorded in a corpus (context utterance, reference) resolve to
/// their annotation. Other pairs resolve through the synthetic template
/// semantics when templates are supplied, and to Neutral otherwise.
#[derive(Clone, Debug, Default)]
pub struct GoldJudge {
    table: HashMap<(String, String), NliLabel>,
    templates: Option<Templates>,
}

impl GoldJudge {
    pub fn from_corpus(examples: &[DialogueExample], templates: Option<Templates>) -> Self {
        let mut table = HashMap::new();
        for ex in examples {
            let Some(gold) = &ex.gold_nli else { continue };
            for (u, &label) in ex.context.iter().zip(gold) {
                table.insert((u.text.clone(), ex.reference.text.clone()), label);
            }
        }
        Self { table, templates }
    }

    pub fn insert(&mut self, premise: &str, hypothesis: &str, label: NliLabel) {
        self.table.insert((norm(premise), norm(hypothesis)), label);
    }
}

fn norm(text: &str) -> String {
    tokenize(text).join(" ")
}

impl Judge for GoldJudge {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, JudgeError> {
        if let Some(&label) = self.table.get(&(norm(premise), norm(hypothesis))) {
            return Ok(label);
        }
        Ok(match &self.templates {
            Some(t) => t.label(premise, hypothesis),
            None => NliLabel::Neutral,
        })
    }
}

#[derive(Serialize)]
struct ClassifyRequest<'a> {
    premise: &'a str,
    hypothesis: &'a str,
}

#[derive(Deserialize)]
struct ClassifyResponse {
    label: String,
    #[allow(dead_code)]
    probs: Vec<f64>,
}

/// Client of the NLI classification service (`POST {endpoint}/classify`).
#[derive(Clone, Debug)]
pub struct RemoteJudge {
    pub endpoint: String,
    pub timeout: Duration,
    pub max_concurrent: usize,
    pub attempts: usize,
}

impl RemoteJudge {
    pub fn new(endpoint: &str) -> Self {
        Self {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            timeout: Duration::from_secs(10),
            max_concurrent: 4,
            attempts: 2,
        }
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder().timeout_global(Some(self.timeout)).build().into()
    }

    fn call(&self, agent: &ureq::Agent, premise: &str, hypothesis: &str) -> Result<NliLabel, JudgeError> {
        let url = format!("{}/classify", self.endpoint);
        let mut last = String::new();
        for _ in 0..self.attempts.max(1) {
            let sent = agent.post(&url).send_json(ClassifyRequest { premise, hypothesis });
            match sent {
                Ok(mut resp) => {
                    let body: ClassifyResponse =
                        resp.body_mut().read_json().map_err(|e| JudgeError::Protocol(e.to_string()))?;
                    return NliLabel::from_wire(&body.label)
                        .ok_or_else(|| JudgeError::Protocol(format!("unknown label {:?}", body.label)));
                }
                Err(e) => last = e.to_string(),
            }
        }
        Err(JudgeError::Remote { attempts: self.attempts.max(1), detail: last })
    }
}

impl Judge for RemoteJudge {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, JudgeError> {
        self.call(&self.agent(), premise, hypothesis)
    }

    /// At most `max_concurrent` requests in flight; results keep input order.
    fn judge_all(&self, pairs: &[(String, String)]) -> Result<Vec<NliLabel>, JudgeError> {
        let next = AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<NliLabel, JudgeError>>>> = Mutex::new(vec![None; pairs.len()]);
        let workers = self.max_concurrent.clamp(1, pairs.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| {
                    let agent = self.agent();
                    loop {
                        let i = next.fetch_add(1, Ordering::SeqCst);
                        if i >= pairs.len() {
                            break;
                        }
                        let r = self.call(&agent, &pairs[i].0, &pairs[i].1);
                        results.lock().expect("no poisoned workers")[i] = Some(r);
                    }
                });
            }
        });
        results.into_inner().expect("no poisoned workers").into_iter().map(|r| r.expect("every pair judged")).collect()
    }
}

/// Judge backend selected at run time.
#[derive(Clone, Debug)]
pub enum JudgeBackend {
    Rule(RuleJudge),
    Gold(GoldJudge),
    Remote(RemoteJudge),
}

impl Judge for JudgeBackend {
    fn judge(&self, premise: &str, hypothesis: &str) -> Result<NliLabel, JudgeError> {
        match self {
            JudgeBackend::Rule(j) => j.judge(premise, hypothesis),
            JudgeBackend::Gold(j) => j.judge(premise, hypothesis),
            JudgeBackend::Remote(j) => j.judge(premise, hypothesis),
        }
    }

    fn judge_all(&self, pairs: &[(String, String)]) -> Result<Vec<NliLabel>, JudgeError> {
        match self {
            JudgeBackend::Rule(j) => j.judge_all(pairs),
            JudgeBackend::Gold(j) => j.judge_all(pairs),
            JudgeBackend::Remote(j) => j.judge_all(pairs),
        }
    }
}

/// Sum of ratings of an already judged context.
pub fn ue_from_labels(labels: &[NliLabel]) -> i32 {
    labels.iter().map(|l| l.rating()).sum()
}

/// UE score of one response against its context utterances.
pub fn ue_example<S: AsRef<str>>(context: &[S], response: &str, judge: &dyn Judge) -> Result<i32, JudgeError> {
    if context.is_empty() {
        return Err(JudgeError::EmptyContext(0));
    }
    let pairs: Vec<(String, String)> =
        context.iter().map(|x| (x.as_ref().to_string(), response.to_string())).collect();
    Ok(ue_from_labels(&judge.judge_all(&pairs)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceJudgment {
    pub premise: String,
    pub label: NliLabel,
    pub rating: i32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExampleTrace {
    pub response: String,
    pub score: i32,
    pub judgments: Vec<UtteranceJudgment>,
}

/// Corpus-level UE result with the full judgment trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UeResult {
    pub example_scores: Vec<i32>,
    pub mean: f64,
    pub trace: Vec<ExampleTrace>,
}

/// UE over a test set; `responses[i]` answers `testset[i]`.
pub fn ue_corpus<S: AsRef<str>>(
    testset: &[DialogueExample],
    responses: &[S],
    judge: &dyn Judge,
) -> Result<UeResult, JudgeError> {
    if testset.len() != responses.len() {
        return Err(JudgeError::LengthMismatch { examples: testset.len(), responses: responses.len() });
    }
    let mut pairs = Vec::new();
    for (i, (ex, resp)) in testset.iter().zip(responses).enumerate() {
        if ex.context.is_empty() {
            return Err(JudgeError::EmptyContext(i));
        }
        pairs.extend(ex.context.iter().map(|u| (u.text.clone(), resp.as_ref().to_string())));
    }
    let labels = judge.judge_all(&pairs)?;
    let mut labels = labels.into_iter();
    let mut trace = Vec::with_capacity(testset.len());
    for (ex, resp) in testset.iter().zip(responses) {
        let judgments: Vec<UtteranceJudgment> = ex
            .context
            .iter()
            .map(|u| {
                let label = labels.next().expect("one label per pair");
                UtteranceJudgment { premise: u.text.clone(), label, rating: label.rating() }
            })
            .collect();
        let score = judgments.iter().map(|j| j.rating).sum();
        trace.push(ExampleTrace { response: resp.as_ref().to_string(), score, judgments });
    }
    let example_scores: Vec<i32> = trace.iter().map(|t| t.score).collect();
    let mean = if example_scores.is_empty() {
        0.0
    } else {
        example_scores.iter().map(|&s| s as f64).sum::<f64>() / example_scores.len() as f64
    };
    Ok(UeResult { example_scores, mean, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Condition, Utterance};

    struct Fixed(Vec<NliLabel>);

    impl Judge for Fixed {
        fn judge(&self, premise: &str, _: &str) -> Result<NliLabel, JudgeError> {
            let i: usize = premise.parse().unwrap();
            Ok(self.0[i])
        }
    }

    fn example(context: &[&str]) -> DialogueExample {
        DialogueExample {
            context: context.iter().map(|c| Utterance::new(c)).collect(),
            condition: Condition::Emotion("sad".into()),
            reference: Utterance::new("ref"),
            gold_nli: None,
            corrupted: None,
        }
    }

    #[test]
    fn rating_map() {
        assert_eq!(NliLabel::Entail.rating(), 1);
        assert_eq!(NliLabel::Contradict.rating(), -1);
        assert_eq!(NliLabel::Neutral.rating(), 0);
    }

    #[test]
    fn rule_judge_cases() {
        let j = RuleJudge::default();
        assert_eq!(j.judge("i like tea", "i like tea").unwrap(), NliLabel::Entail);
        assert_eq!(j.judge("i like tea", "i do not like tea").unwrap(), NliLabel::Contradict);
        assert_eq!(j.judge("i like tea", "the sky is blue").unwrap(), NliLabel::Neutral);
        assert_eq!(j.judge("do you like tea ?", "yes i like tea").unwrap(), NliLabel::Neutral);
    }

    #[test]
    fn rule_judge_agrees_with_template_semantics_on_clean_data() {
        let spec = crate::corpus::SyntheticSpec { count: 300, ..Default::default() };
        let corpus = crate::corpus::generate_synthetic(&spec).unwrap();
        let j = RuleJudge::default();
        for ex in &corpus {
            for (u, gold) in ex.context.iter().zip(ex.gold_nli.as_ref().unwrap()) {
                assert_eq!(j.judge(&u.text, &ex.reference.text).unwrap(), *gold, "{} / {}", u.text, ex.reference.text);
            }
        }
    }

    #[test]
    fn example_sums() {
        use NliLabel::*;
        let j = Fixed(vec![Entail, Entail, Neutral, Contradict]);
        assert_eq!(ue_example(&["0", "1", "2"], "y", &j).unwrap(), 2);
        assert_eq!(ue_example(&["0", "2", "3"], "y", &j).unwrap(), 0);
        let all_contra = Fixed(vec![Contradict]);
        assert_eq!(ue_example(&["0", "0", "0", "0"], "y", &all_contra).unwrap(), -4);
    }

    #[test]
    fn corpus_mean_and_length_check() {
        use NliLabel::*;
        let j = Fixed(vec![Entail, Neutral]);
        let set = vec![example(&["0", "0"]), example(&["1", "1"])];
        let r = ue_corpus(&set, &["a", "b"], &j).unwrap();
        assert_eq!(r.example_scores, vec![2, 0]);
        assert_eq!(r.mean, 1.0);
        assert_eq!(r.trace[0].judgments.len(), 2);
        assert!(matches!(ue_corpus(&set, &["a"], &j), Err(JudgeError::LengthMismatch { .. })));
    }

    #[test]
    fn gold_judge_prefers_table_then_templates() {
        let mut g = GoldJudge::from_corpus(&[], Some(Templates::default()));
        g.insert("hello there", "yes i like tea", NliLabel::Contradict);
        assert_eq!(g.judge("hello there", "yes i like tea").unwrap(), NliLabel::Contradict);
        assert_eq!(g.judge("i like tea", "yes i like tea").unwrap(), NliLabel::Entail);
        let bare = GoldJudge::default();
        assert_eq!(bare.judge("i like tea", "yes i like tea").unwrap(), NliLabel::Neutral);
    }

    #[test]
    fn unreachable_remote_judge_is_an_error() {
        // a port from a listener we immediately drop refuses connections
        let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let mut j = RemoteJudge::new(&format!("http://127.0.0.1:{port}"));
        j.timeout = Duration::from_millis(500);
        let err = j.judge("a", "b").unwrap_err();
        assert!(matches!(err, JudgeError::Remote { attempts: 2, .. }), "{err}");
    }
}
