//! Zero-shot navigation over environment graphs.
//!
//! An instruction is split into navigation phrases and a trailing activity.
//! The agent grounds the current phrase against the four views at its node,
//! advances to the next phrase once the best score clears a threshold, and
//! otherwise hops toward the best-scoring direction. The sequential variants
//! return to the most promising visited node when progress stalls.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    chat_complete, ground_score, BackendError, ChatBackend, ChatTurn, DecodeParams, GroundBackend,
    GroundingKind,
};
use crate::env_model::{
    angular_difference, bearing, EnvError, EnvGraph, Episode, Heading, ObsRef, ViewSet,
};
use crate::prompts;

#[derive(Debug, Error)]
pub enum NavError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("invalid policy config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub navigation_phrases: Vec<String>,
    #[serde(default)]
    pub activity: String,
}

/// How navigation phrases are pulled out of the navigation component.
#[derive(Clone, Copy)]
pub enum PhraseExtractor<'a> {
    RuleBased,
    Chat {
        chat: &'a dyn ChatBackend,
        params: &'a DecodeParams,
    },
}

impl fmt::Debug for PhraseExtractor<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhraseExtractor::RuleBased => f.write_str("RuleBased"),
            PhraseExtractor::Chat { params, .. } => write!(f, "Chat({})", params.model),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum WordClass {
    Det,
    Adj,
    Noun,
    Conn,
}

static LEXICON: LazyLock<HashMap<String, WordClass>> = LazyLock::new(|| {
    let mut map = HashMap::new();
    for line in include_str!("../assets/lexicon.txt").lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((class, words)) = line.split_once(':') else {
            continue;
        };
        let class = match class.trim() {
            "det" => WordClass::Det,
            "adj" => WordClass::Adj,
            "noun" => WordClass::Noun,
            "conn" => WordClass::Conn,
            other => panic!("unknown lexicon class {other:?}"),
        };
        for w in words.split_whitespace() {
            // Nouns win over adjectives for words listed twice.
            let entry = map.entry(w.to_string()).or_insert(class);
            if class == WordClass::Noun {
                *entry = class;
            }
        }
    }
    map
});

fn classify(word: &str) -> Option<WordClass> {
    LEXICON.get(&word.to_lowercase()).copied()
}

/// Longest runs of determiner/adjective/noun tokens that contain a noun.
/// A connector ("with", "of") may join two runs; punctuation closes a run.
pub fn chunk_noun_phrases(text: &str) -> Vec<String> {
    let mut phrases = Vec::new();
    let mut run: Vec<(&str, WordClass)> = Vec::new();

    fn flush(run: &mut Vec<(&str, WordClass)>, out: &mut Vec<String>) {
        while run.last().is_some_and(|(_, c)| *c != WordClass::Noun) {
            run.pop();
        }
        if !run.is_empty() {
            out.push(run.iter().map(|(w, _)| *w).collect::<Vec<_>>().join(" "));
        }
        run.clear();
    }

    let tokens: Vec<&str> = text.split_whitespace().collect();
    for (i, raw) in tokens.iter().enumerate() {
        let word = raw.trim_matches(|c: char| c.is_ascii_punctuation());
        let closes = raw.ends_with(|c: char| c.is_ascii_punctuation());
        let class = if word.is_empty() {
            None
        } else {
            classify(word)
        };
        match class {
            Some(WordClass::Conn) => {
                let has_noun = run.iter().any(|(_, c)| *c == WordClass::Noun);
                let next_fits = tokens
                    .get(i + 1)
                    .map(|t| t.trim_matches(|c: char| c.is_ascii_punctuation()))
                    .and_then(classify)
                    .is_some_and(|c| c != WordClass::Conn);
                if has_noun && next_fits && !closes {
                    run.push((word, WordClass::Conn));
                } else {
                    flush(&mut run, &mut phrases);
                }
            }
            Some(c) => {
                // A determiner after a noun starts a new phrase.
                if c == WordClass::Det && run.last().is_some_and(|(_, p)| *p == WordClass::Noun) {
                    flush(&mut run, &mut phrases);
                }
                run.push((word, c));
                if closes {
                    flush(&mut run, &mut phrases);
                }
            }
            None => flush(&mut run, &mut phrases),
        }
    }
    flush(&mut run, &mut phrases);
    phrases
}

fn strip_edges(s: &str) -> &str {
    s.trim()
        .trim_end_matches(|c: char| c.is_ascii_punctuation())
        .trim()
}

/// Splits at the last " and " into navigation and activity components.
pub fn split_components(instruction: &str) -> (String, String) {
    let text = instruction.trim();
    if let Some(pos) = text.rfind(" and ") {
        let nc = strip_edges(&text[..pos]);
        let ac = strip_edges(&text[pos + " and ".len()..]);
        if !nc.is_empty() {
            return (nc.to_string(), ac.to_string());
        }
    }
    (strip_edges(text).to_string(), String::new())
}

fn clean_listed_phrase(line: &str) -> &str {
    let line = line.trim();
    let line = line.trim_start_matches(|c: char| {
        c.is_ascii_digit() || matches!(c, '-' | '*' | '.' | ')' | '•')
    });
    strip_edges(line)
        .trim_matches(|c| c == '"' || c == '\'')
        .trim()
}

fn extract_phrases(nc: &str, extractor: PhraseExtractor<'_>) -> Result<Vec<String>, NavError> {
    match extractor {
        PhraseExtractor::RuleBased => Ok(chunk_noun_phrases(nc)),
        PhraseExtractor::Chat { chat, params } => {
            let turns = [
                ChatTurn::system(prompts::PHRASES_SYSTEM),
                ChatTurn::user(prompts::render(prompts::PHRASES_USER, &[("text", nc)])),
            ];
            let out = chat_complete(chat, &turns, params)?;
            let lower = nc.to_lowercase();
            let mut phrases = Vec::new();
            for line in out.lines() {
                let p = clean_listed_phrase(line);
                if p.is_empty() {
                    continue;
                }
                if !lower.contains(&p.to_lowercase()) {
                    log::warn!("dropping extracted phrase not found in directions: {p:?}");
                    continue;
                }
                phrases.push(p.to_string());
            }
            Ok(phrases)
        }
    }
}

pub fn decompose_instruction(
    instruction: &str,
    extractor: PhraseExtractor<'_>,
) -> Result<Decomposition, NavError> {
    if instruction.trim().is_empty() {
        return Err(NavError::Precondition("instruction is empty".into()));
    }
    let (nc, activity) = split_components(instruction);
    let mut phrases = extract_phrases(&nc, extractor)?;
    if phrases.is_empty() {
        let whole = if nc.is_empty() {
            instruction.trim().to_string()
        } else {
            nc
        };
        phrases.push(whole);
    }
    Ok(Decomposition {
        navigation_phrases: phrases,
        activity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    ClipNav,
    SeqClipNav,
    GlipNav,
}

impl Policy {
    pub const ALL: [Policy; 3] = [Policy::ClipNav, Policy::SeqClipNav, Policy::GlipNav];

    pub fn as_str(self) -> &'static str {
        match self {
            Policy::ClipNav => "clip_nav",
            Policy::SeqClipNav => "seq_clip_nav",
            Policy::GlipNav => "glip_nav",
        }
    }

    pub fn backtracks(self) -> bool {
        self != Policy::ClipNav
    }

    /// Grounding backend kind the policy expects.
    pub fn grounding_kind(self) -> GroundingKind {
        match self {
            Policy::GlipNav => GroundingKind::Detection,
            _ => GroundingKind::Similarity,
        }
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Policy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                format!("unknown policy {s:?} (expected clip_nav, seq_clip_nav or glip_nav)")
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub policy: Policy,
    pub advance_threshold: f64,
    pub backtrack_patience: usize,
    pub backtrack_margin: f64,
    pub step_budget: usize,
    pub success_radius: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            policy: Policy::ClipNav,
            advance_threshold: 0.6,
            backtrack_patience: 3,
            backtrack_margin: 0.1,
            step_budget: 20,
            success_radius: 3.0,
        }
    }
}

impl PolicyConfig {
    pub fn with_policy(policy: Policy) -> Self {
        PolicyConfig {
            policy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), NavError> {
        if !(0.0..=1.0).contains(&self.advance_threshold) {
            return Err(NavError::Config(format!(
                "advance_threshold {} outside [0, 1]",
                self.advance_threshold
            )));
        }
        if self.backtrack_patience < 1 {
            return Err(NavError::Config(
                "backtrack_patience must be at least 1".into(),
            ));
        }
        if !self.backtrack_margin.is_finite() || self.backtrack_margin < 0.0 {
            return Err(NavError::Config(format!(
                "backtrack_margin {} must be non-negative",
                self.backtrack_margin
            )));
        }
        if self.step_budget < 1 {
            return Err(NavError::Config("step_budget must be at least 1".into()));
        }
        if !self.success_radius.is_finite() || self.success_radius < 0.0 {
            return Err(NavError::Config(format!(
                "success_radius {} must be non-negative",
                self.success_radius
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepAction {
    Move,
    AdvancePhrase,
    Backtrack,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    PhrasesExhausted,
    Budget,
    NoMove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phrase_index: usize,
    /// Node where grounding happened.
    pub node: String,
    /// Scores for 0°, 90°, 180°, 270°.
    pub scores: [f64; 4],
    pub heading: Option<Heading>,
    pub action: StepAction,
    /// Node entered by a move or backtrack.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NavTrace {
    pub episode_id: String,
    pub policy: Policy,
    pub instruction: String,
    pub decomposition: Decomposition,
    pub visited: Vec<String>,
    pub steps: Vec<StepRecord>,
    pub stop_node: String,
    pub stop_reason: StopReason,
}

impl NavTrace {
    pub fn backtrack_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.action == StepAction::Backtrack)
            .count()
    }

    pub fn move_count(&self) -> usize {
        self.steps
            .iter()
            .filter(|s| s.action == StepAction::Move)
            .count()
    }

    /// Grounding calls made; one per recorded step.
    pub fn grounding_calls(&self) -> usize {
        self.steps.len()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("trace starts at {found:?}, episode starts at {expected:?}")]
    WrongStart { expected: String, found: String },
    #[error(
        "step {step}: {from:?} -> {to:?} is neither an edge nor a backtrack to a visited node"
    )]
    BadTransition {
        step: usize,
        from: String,
        to: String,
    },
    #[error("visited list does not match recorded moves")]
    VisitedMismatch,
    #[error("stop node {0:?} is not the last visited node")]
    StopNode(String),
    #[error("{moves} moves exceed the step budget {budget}")]
    OverBudget { moves: usize, budget: usize },
    #[error("clip_nav trace contains a backtrack")]
    UnexpectedBacktrack,
    #[error("unknown node {0:?}")]
    UnknownNode(String),
}

/// Checks the structural invariants of a trace against its environment.
pub fn validate_trace(
    env: &EnvGraph,
    episode: &Episode,
    trace: &NavTrace,
    config: &PolicyConfig,
) -> Result<(), TraceError> {
    let first = trace.visited.first().ok_or(TraceError::VisitedMismatch)?;
    if first != episode.start() {
        return Err(TraceError::WrongStart {
            expected: episode.start().to_string(),
            found: first.clone(),
        });
    }
    if let Some(unknown) = trace.visited.iter().find(|n| !env.contains(n)) {
        return Err(TraceError::UnknownNode(unknown.clone()));
    }
    let mut cursor = 0;
    for (i, step) in trace.steps.iter().enumerate() {
        if !matches!(step.action, StepAction::Move | StepAction::Backtrack) {
            continue;
        }
        let from = &trace.visited[cursor];
        let to = trace
            .visited
            .get(cursor + 1)
            .ok_or(TraceError::VisitedMismatch)?;
        if step.target.as_ref() != Some(to) || &step.node != from {
            return Err(TraceError::VisitedMismatch);
        }
        let ok = match step.action {
            StepAction::Move => env.are_adjacent(from, to),
            _ => trace.visited[..=cursor].contains(to),
        };
        if !ok {
            return Err(TraceError::BadTransition {
                step: i,
                from: from.clone(),
                to: to.clone(),
            });
        }
        cursor += 1;
    }
    if cursor + 1 != trace.visited.len() {
        return Err(TraceError::VisitedMismatch);
    }
    if trace.visited.last() != Some(&trace.stop_node) {
        return Err(TraceError::StopNode(trace.stop_node.clone()));
    }
    let moves = trace.move_count();
    if moves > config.step_budget {
        return Err(TraceError::OverBudget {
            moves,
            budget: config.step_budget,
        });
    }
    if !trace.policy.backtracks() && trace.backtrack_count() > 0 {
        return Err(TraceError::UnexpectedBacktrack);
    }
    Ok(())
}

/// Heading with the highest score; ties go to the smallest angle.
fn argmax(scores: &[f64; 4]) -> Heading {
    let mut best = 0;
    for i in 1..4 {
        if scores[i] > scores[best] {
            best = i;
        }
    }
    Heading::ALL[best]
}

/// Headings ordered by descending score, ties by ascending angle.
fn ranked(scores: &[f64; 4]) -> [Heading; 4] {
    let mut order = Heading::ALL;
    order.sort_by(|a, b| {
        scores[b.index()]
            .total_cmp(&scores[a.index()])
            .then(a.index().cmp(&b.index()))
    });
    order
}

/// Grounds `phrase` against the four views; absent views score 0.
pub fn ground_step(
    phrase: &str,
    views: &ViewSet,
    grounder: &dyn GroundBackend,
) -> Result<([f64; 4], Heading), NavError> {
    let present: Vec<(Heading, ObsRef)> = views
        .iter()
        .filter_map(|(h, v)| v.map(|o| (h, o.clone())))
        .collect();
    let mut scores = [0.0; 4];
    if !present.is_empty() {
        let refs: Vec<ObsRef> = present.iter().map(|(_, o)| o.clone()).collect();
        let values = ground_score(grounder, phrase, &refs)?;
        for ((h, _), v) in present.iter().zip(values) {
            scores[h.index()] = v;
        }
    }
    Ok((scores, argmax(&scores)))
}

/// Neighbor whose bearing from `at` is nearest `heading` within ±45°; ties
/// go to the smaller node id.
pub fn move_target(env: &EnvGraph, at: &str, heading: Heading) -> Result<Option<String>, NavError> {
    let origin = env.node(at)?.position;
    let target = f64::from(heading.degrees());
    let mut best: Option<(f64, &str)> = None;
    for (nb, _) in env.neighbors(at)? {
        let diff = angular_difference(bearing(&origin, &nb.position), target);
        if diff > 45.0 + 1e-9 {
            continue;
        }
        // Neighbors arrive in ascending id order, so strict comparison keeps the smaller id on ties.
        if best.is_none_or(|(d, _)| diff < d - 1e-9) {
            best = Some((diff, nb.id.as_str()));
        }
    }
    Ok(best.map(|(_, id)| id.to_string()))
}

/// Per-phrase progress used by the backtracking policies.
#[derive(Debug, Clone, Default)]
pub struct BacktrackState {
    running_max: Option<f64>,
    stall: usize,
    /// Best score recorded at each node, in first-visit order.
    best_at: Vec<(String, f64)>,
}

impl BacktrackState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the best grounding score observed at `node`.
    pub fn observe(&mut self, node: &str, score: f64, margin: f64) {
        match self.running_max {
            Some(m) if score <= m - margin => self.stall += 1,
            _ => self.stall = 0,
        }
        self.running_max = Some(self.running_max.map_or(score, |m| m.max(score)));
        match self.best_at.iter_mut().find(|(n, _)| n == node) {
            Some((_, s)) => *s = s.max(score),
            None => self.best_at.push((node.to_string(), score)),
        }
    }

    pub fn stalled_steps(&self) -> usize {
        self.stall
    }

    /// Visited node with the highest recorded score, earliest on ties.
    pub fn best_node(&self) -> Option<&str> {
        let mut best: Option<&(String, f64)> = None;
        for entry in &self.best_at {
            if best.is_none_or(|b| entry.1 > b.1) {
                best = Some(entry);
            }
        }
        best.map(|(n, _)| n.as_str())
    }

    pub fn reset_stall(&mut self) {
        self.stall = 0;
    }
}

/// Backtrack target, if the policy backtracks and progress has stalled for
/// `backtrack_patience` steps. Never returns the current node.
pub fn should_backtrack(
    state: &BacktrackState,
    config: &PolicyConfig,
    current: &str,
) -> Option<String> {
    if !config.policy.backtracks() || state.stall < config.backtrack_patience {
        return None;
    }
    state
        .best_node()
        .filter(|n| *n != current)
        .map(str::to_string)
}

/// Runs one episode, decomposing `instruction` first.
pub fn run_episode(
    env: &EnvGraph,
    episode: &Episode,
    instruction: &str,
    config: &PolicyConfig,
    grounder: &dyn GroundBackend,
    extractor: PhraseExtractor<'_>,
) -> Result<NavTrace, NavError> {
    let decomposition = decompose_instruction(instruction, extractor)?;
    run_decomposed(env, episode, instruction, decomposition, config, grounder)
}

pub fn run_decomposed(
    env: &EnvGraph,
    episode: &Episode,
    instruction: &str,
    decomposition: Decomposition,
    config: &PolicyConfig,
    grounder: &dyn GroundBackend,
) -> Result<NavTrace, NavError> {
    config.validate()?;
    if decomposition.navigation_phrases.is_empty() {
        return Err(NavError::Precondition(
            "decomposition has no navigation phrases".into(),
        ));
    }
    if episode.path.is_empty() {
        return Err(NavError::Precondition(format!(
            "episode {} has an empty path",
            episode.episode_id
        )));
    }
    let start = episode.start().to_string();
    env.node(&start)?;

    let phrases = &decomposition.navigation_phrases;
    let mut at = start.clone();
    let mut visited = vec![start];
    let mut steps = Vec::new();
    let mut phrase = 0;
    let mut moves = 0;
    let mut state = BacktrackState::new();
    // Heading chosen when last leaving each node, for the post-backtrack mask.
    let mut left_by: HashMap<String, Heading> = HashMap::new();
    let mut masked: HashSet<(String, Heading)> = HashSet::new();

    let stop_reason = loop {
        if moves >= config.step_budget {
            break StopReason::Budget;
        }
        let (scores, best) = ground_step(&phrases[phrase], &env.node(&at)?.views, grounder)?;
        let best_score = scores[best.index()];
        let mut step = StepRecord {
            phrase_index: phrase,
            node: at.clone(),
            scores,
            heading: Some(best),
            action: StepAction::Stop,
            target: None,
        };

        if best_score >= config.advance_threshold {
            step.action = StepAction::AdvancePhrase;
            steps.push(step);
            phrase += 1;
            state = BacktrackState::new();
            if phrase == phrases.len() {
                break StopReason::PhrasesExhausted;
            }
            continue;
        }

        state.observe(&at, best_score, config.backtrack_margin);
        if let Some(target) = should_backtrack(&state, config, &at) {
            if let Some(&h) = left_by.get(&target) {
                masked.insert((target.clone(), h));
            }
            state.reset_stall();
            step.heading = None;
            step.action = StepAction::Backtrack;
            step.target = Some(target.clone());
            steps.push(step);
            visited.push(target.clone());
            at = target;
            continue;
        }

        let mut moved = None;
        let mut tried = 0;
        for h in ranked(&scores) {
            if masked.remove(&(at.clone(), h)) {
                continue;
            }
            if let Some(next) = move_target(env, &at, h)? {
                moved = Some((h, next));
                break;
            }
            tried += 1;
            if tried == 2 {
                break;
            }
        }
        match moved {
            Some((h, next)) => {
                step.heading = Some(h);
                step.action = StepAction::Move;
                step.target = Some(next.clone());
                steps.push(step);
                left_by.insert(at.clone(), h);
                visited.push(next.clone());
                at = next;
                moves += 1;
            }
            None => {
                steps.push(step);
                break StopReason::NoMove;
            }
        }
    };

    Ok(NavTrace {
        episode_id: episode.episode_id.clone(),
        policy: config.policy,
        instruction: instruction.to_string(),
        decomposition,
        stop_node: at,
        visited,
        steps,
        stop_reason,
    })
}

/// Grounder with privileged access to the episode goal.
///
/// Every view at the goal scores 1.0. Elsewhere the view facing the next
/// node on the shortest path to the goal scores `direction_score`, which
/// should sit below the advance threshold, and all other views score 0.
pub struct OracleGrounder {
    scores: HashMap<ObsRef, f64>,
    kind: GroundingKind,
}

pub const ORACLE_DIRECTION_SCORE: f64 = 0.5;

impl OracleGrounder {
    pub fn new(env: &EnvGraph, goal: &str) -> Result<Self, NavError> {
        Self::with_direction_score(env, goal, ORACLE_DIRECTION_SCORE)
    }

    pub fn with_direction_score(
        env: &EnvGraph,
        goal: &str,
        direction_score: f64,
    ) -> Result<Self, NavError> {
        env.node(goal)?;
        let mut scores = HashMap::new();
        for node in env.nodes() {
            for (h, obs) in node.views.iter() {
                let Some(obs) = obs else { continue };
                let score = if node.id == goal {
                    1.0
                } else {
                    let route = env.shortest_path(&node.id, goal)?;
                    let toward = move_target(env, &node.id, h)?;
                    if toward.as_deref() == Some(route.nodes[1].as_str()) {
                        direction_score
                    } else {
                        0.0
                    }
                };
                // A ref shared by several views keeps its highest score.
                let e = scores.entry(obs.clone()).or_insert(score);
                *e = f64::max(*e, score);
            }
        }
        Ok(OracleGrounder {
            scores,
            kind: GroundingKind::Similarity,
        })
    }

    pub fn with_kind(mut self, kind: GroundingKind) -> Self {
        self.kind = kind;
        self
    }
}

impl GroundBackend for OracleGrounder {
    fn scores(&self, _phrase: &str, observations: &[ObsRef]) -> Result<Vec<f64>, BackendError> {
        Ok(observations
            .iter()
            .map(|o| self.scores.get(o).copied().unwrap_or(0.0))
            .collect())
    }

    fn kind(&self) -> GroundingKind {
        self.kind
    }
}
