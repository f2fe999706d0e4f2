//! Table-driven backends for tests and fixture recording.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use sha2::{Digest, Sha256};

use super::{
    BackendError, ChatBackend, ChatTurn, DecodeParams, EmbedBackend, GroundBackend, GroundingKind,
    VqaBackend,
};
use crate::env_model::ObsRef;

type ChatRule = Box<dyn Fn(&[ChatTurn]) -> Option<String> + Send + Sync>;

/// Chat backend answering from ordered rules, then a FIFO queue, then a default.
#[derive(Default)]
pub struct ScriptedChat {
    rules: Vec<ChatRule>,
    queue: Mutex<VecDeque<String>>,
    default: Option<String>,
    calls: AtomicUsize,
    log: Mutex<Vec<Vec<ChatTurn>>>,
}

fn last_user(turns: &[ChatTurn]) -> &str {
    turns
        .iter()
        .rev()
        .find(|t| t.role == super::Role::User)
        .map_or("", |t| t.content.as_str())
}

impl ScriptedChat {
    pub fn new() -> Self {
        Self::default()
    }

    /// Responds with `response` when the last user turn equals `prompt`.
    pub fn exact(self, prompt: impl Into<String>, response: impl Into<String>) -> Self {
        let (prompt, response) = (prompt.into(), response.into());
        self.rule(move |turns| (last_user(turns) == prompt).then(|| response.clone()))
    }

    /// Responds with `response` when the last user turn contains every needle.
    pub fn contains_all(self, needles: &[&str], response: impl Into<String>) -> Self {
        let needles: Vec<String> = needles.iter().map(|s| s.to_string()).collect();
        let response = response.into();
        self.rule(move |turns| {
            let text = last_user(turns);
            needles
                .iter()
                .all(|n| text.contains(n.as_str()))
                .then(|| response.clone())
        })
    }

    pub fn contains(self, needle: &str, response: impl Into<String>) -> Self {
        self.contains_all(&[needle], response)
    }

    pub fn rule(
        mut self,
        f: impl Fn(&[ChatTurn]) -> Option<String> + Send + Sync + 'static,
    ) -> Self {
        self.rules.push(Box::new(f));
        self
    }

    /// Queues a response used when no rule matches.
    pub fn then(self, response: impl Into<String>) -> Self {
        self.queue.lock().unwrap().push_back(response.into());
        self
    }

    pub fn with_default(mut self, response: impl Into<String>) -> Self {
        self.default = Some(response.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    /// Every conversation received so far.
    pub fn requests(&self) -> Vec<Vec<ChatTurn>> {
        self.log.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedChat {
    fn complete(&self, turns: &[ChatTurn], _params: &DecodeParams) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(turns.to_vec());
        if let Some(out) = self.rules.iter().find_map(|r| r(turns)) {
            return Ok(out);
        }
        if let Some(out) = self.queue.lock().unwrap().pop_front() {
            return Ok(out);
        }
        self.default
            .clone()
            .ok_or_else(|| BackendError::Unscripted(format!("chat prompt {:?}", last_user(turns))))
    }
}

/// VQA backend keyed by `(observation, question)`.
///
/// Observations that appear in no table entry are unresolvable unless a
/// default answer is configured.
#[derive(Default)]
pub struct ScriptedVqa {
    answers: HashMap<(ObsRef, String), String>,
    per_observation: HashMap<ObsRef, String>,
    known: HashSet<ObsRef>,
    default: Option<String>,
    calls: AtomicUsize,
}

impl ScriptedVqa {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn answer(
        mut self,
        obs: impl Into<String>,
        question: impl Into<String>,
        answer: impl Into<String>,
    ) -> Self {
        let obs = ObsRef::new(obs);
        self.known.insert(obs.clone());
        self.answers.insert((obs, question.into()), answer.into());
        self
    }

    /// Fallback answer for any question about `obs`.
    pub fn otherwise(mut self, obs: impl Into<String>, answer: impl Into<String>) -> Self {
        let obs = ObsRef::new(obs);
        self.known.insert(obs.clone());
        self.per_observation.insert(obs, answer.into());
        self
    }

    pub fn with_default(mut self, answer: impl Into<String>) -> Self {
        self.default = Some(answer.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl VqaBackend for ScriptedVqa {
    fn answer(&self, observation: &ObsRef, question: &str) -> Result<String, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if let Some(a) = self
            .answers
            .get(&(observation.clone(), question.to_string()))
        {
            return Ok(a.clone());
        }
        if let Some(a) = self.per_observation.get(observation) {
            return Ok(a.clone());
        }
        match &self.default {
            Some(a) => Ok(a.clone()),
            None if self.known.contains(observation) => Err(BackendError::Unscripted(format!(
                "VQA question {question:?} about {observation}"
            ))),
            None => Err(BackendError::Unresolvable(observation.clone())),
        }
    }
}

type ScoreFn = Box<dyn Fn(&str, &ObsRef) -> f64 + Send + Sync>;

/// Grounding backend scoring each observation independently with a closure.
pub struct FnGround {
    score: ScoreFn,
    kind: GroundingKind,
    calls: AtomicUsize,
}

impl FnGround {
    pub fn new(score: impl Fn(&str, &ObsRef) -> f64 + Send + Sync + 'static) -> Self {
        FnGround {
            score: Box::new(score),
            kind: GroundingKind::Similarity,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn uniform(value: f64) -> Self {
        Self::new(move |_, _| value)
    }

    pub fn with_kind(mut self, kind: GroundingKind) -> Self {
        self.kind = kind;
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl GroundBackend for FnGround {
    fn scores(&self, phrase: &str, observations: &[ObsRef]) -> Result<Vec<f64>, BackendError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(observations
            .iter()
            .map(|o| (self.score)(phrase, o))
            .collect())
    }

    fn kind(&self) -> GroundingKind {
        self.kind
    }
}

/// Deterministic bag-of-words embedding via signed feature hashing.
pub struct HashEmbed {
    dim: usize,
}

impl HashEmbed {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "embedding dimension must be positive");
        HashEmbed { dim }
    }
}

impl EmbedBackend for HashEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        let mut v = vec![0.0; self.dim];
        for token in text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(str::to_lowercase)
        {
            let h = Sha256::digest(token.as_bytes());
            let bucket = u64::from_le_bytes(h[..8].try_into().unwrap()) as usize % self.dim;
            let sign = if h[8] & 1 == 0 { 1.0 } else { -1.0 };
            v[bucket] += sign;
        }
        Ok(v)
    }
}

/// Embedding backend returning fixed vectors from a table.
#[derive(Default)]
pub struct TableEmbed {
    table: HashMap<String, Vec<f64>>,
}

impl TableEmbed {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, text: impl Into<String>, v: Vec<f64>) -> Self {
        self.table.insert(text.into(), v);
        self
    }
}

impl EmbedBackend for TableEmbed {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.table
            .get(text)
            .cloned()
            .ok_or_else(|| BackendError::Unscripted(format!("embedding for {text:?}")))
    }
}
