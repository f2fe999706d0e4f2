//! Instruction synthesis from ordered frame captions.
//!
//! Frames along an episode path are captioned (one heading-facing view per
//! node, or all four views summarized into one line), rendered into an
//! in-context prompt together with reference texts of the target style, and
//! completed by the instruction model.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backends::{chat_complete, BackendError, ChatBackend, ChatTurn, DecodeParams};
use crate::env_model::{EnvError, EnvGraph, Episode, Heading, ObsRef, SimulatorKind};
use crate::vqa_chat::{CaptionError, CaptionRecord, Captioner};

pub const PROMPT_HEADER: &str =
    "A robot agent at home sees a sequence of egocentric images with the following frame descriptions.";

pub const REVERIE_CONSTRAINT: &str = "The instruction must be a single sentence long, ending with a task related to an object in the final frame, and must be less than 20 words.";

pub const R2R_CONSTRAINT: &str = "Write directions so a smart robot can find the final frame after starting from the same starting frame. You do not have to use information in the frames, and just need to reach the goal location.";

/// Appended when `guard_reference_leak` is set.
pub const REFERENCE_LEAK_GUARD: &str =
    "Use only the frame descriptions, not the Reference Texts, as the source of objects and rooms.";

pub const PANORAMA_HEADER: &str = "I see a panoramic view with the following descriptions.";
pub const PANORAMA_FOOTER: &str =
    "Summarize these descriptions into a single description using less than 20 words.";
pub const PANORAMA_RETRY: &str = "Use fewer than 20 words.";
pub const PANORAMA_MAX_WORDS: usize = 20;

pub const DEFAULT_REFERENCE_COUNT: usize = 3;

#[derive(Debug, Error)]
pub enum SynthesisError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("empty generation")]
    EmptyGeneration,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("node {node:?} has no view toward {heading}")]
    AbsentView { node: String, heading: Heading },
    #[error("unknown style {0:?}")]
    UnknownStyle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameStrategy {
    Central,
    Panoramic,
}

impl FrameStrategy {
    pub fn as_str(self) -> &'static str {
        match self {
            FrameStrategy::Central => "central",
            FrameStrategy::Panoramic => "panoramic",
        }
    }
}

impl fmt::Display for FrameStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FrameStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "central" => Ok(FrameStrategy::Central),
            "panoramic" => Ok(FrameStrategy::Panoramic),
            other => Err(format!(
                "unknown frame strategy {other:?} (expected central or panoramic)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleProfile {
    pub name: String,
    pub reference_texts: Vec<String>,
    #[serde(default)]
    pub constraint_text: String,
    #[serde(default)]
    pub max_words: Option<usize>,
    #[serde(default)]
    pub max_sentences: Option<usize>,
    /// Advisory lower bound; violations are reported, never enforced.
    #[serde(default)]
    pub min_sentences: Option<usize>,
}

const REVERIE_REFERENCES: &[&str] = &[
    "Go to the bedroom on level 2 and open the window blinds",
    "Enter the laundry room and bring me the towel from the dryer",
    "Go to the dining room and push in the chair nearest the window",
    "Walk into the office and turn on the lamp on the desk",
    "Find the bathroom next to the hallway and clean the mirror",
    "Go to the living room and straighten the pillows on the sofa",
    "Head to the kitchen and close the refrigerator door",
    "Go up to the family room and pick up the remote control",
];

const R2R_REFERENCES: &[&str] = &[
    "Walk out of the bedroom and turn left into the hallway. Go past the painting and stop at the top of the stairs.",
    "Exit the kitchen through the doorway on your right. Walk along the counter, then turn left at the dining table. Wait by the glass doors.",
    "Go straight through the living room past the two armchairs. Turn right at the fireplace and enter the hallway. Stop in front of the closet.",
    "Leave the bathroom and turn right. Walk down the corridor until you reach the plant, then go into the office on the left.",
    "Climb the stairs and turn left at the landing. Continue past the bookshelf and stop just inside the bedroom doorway.",
    "Walk around the kitchen island and exit toward the patio doors. Turn right and wait next to the grill.",
];

impl StyleProfile {
    /// Coarse goal-plus-task style.
    pub fn reverie() -> Self {
        StyleProfile {
            name: "reverie".into(),
            reference_texts: REVERIE_REFERENCES.iter().map(|s| s.to_string()).collect(),
            constraint_text: REVERIE_CONSTRAINT.into(),
            max_words: Some(20),
            max_sentences: Some(1),
            min_sentences: None,
        }
    }

    /// Fine-grained step-by-step style.
    pub fn r2r() -> Self {
        StyleProfile {
            name: "r2r".into(),
            reference_texts: R2R_REFERENCES.iter().map(|s| s.to_string()).collect(),
            constraint_text: R2R_CONSTRAINT.into(),
            max_words: None,
            max_sentences: None,
            min_sentences: Some(2),
        }
    }

    pub fn builtin(name: &str) -> Result<Self, SynthesisError> {
        match name {
            "reverie" => Ok(Self::reverie()),
            "r2r" => Ok(Self::r2r()),
            other => Err(SynthesisError::UnknownStyle(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), SynthesisError> {
        if self.reference_texts.is_empty() {
            return Err(SynthesisError::Precondition(format!(
                "style {:?} has no reference texts",
                self.name
            )));
        }
        Ok(())
    }

    /// A copy holding `count` references drawn without replacement, kept in
    /// pool order. Deterministic in `seed`.
    pub fn select_references(&self, count: usize, seed: u64) -> StyleProfile {
        let n = self.reference_texts.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked = rand::seq::index::sample(&mut rng, n, count.min(n)).into_vec();
        picked.sort_unstable();
        StyleProfile {
            reference_texts: picked
                .into_iter()
                .map(|i| self.reference_texts[i].clone())
                .collect(),
            ..self.clone()
        }
    }
}

/// Per-episode seed for reference selection.
pub fn episode_seed(seed: u64, episode_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(episode_id.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstructionSource {
    Generated,
    Human,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    pub style: String,
    pub episode_id: String,
    pub frame_strategy: FrameStrategy,
    pub source: InstructionSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub frames: Vec<(usize, String)>,
    pub style: StyleProfile,
    pub rendered: String,
}

impl PromptBundle {
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.rendered.as_bytes()))
    }
}

/// Quotes `s` the way a Python list literal prints a string.
fn py_quote(s: &str) -> String {
    let quote = if s.contains('\'') && !s.contains('"') {
        '"'
    } else {
        '\''
    };
    let mut out = String::with_capacity(s.len() + 2);
    out.push(quote);
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            c if c == quote => {
                out.push('\\');
                out.push(c);
            }
            c => out.push(c),
        }
    }
    out.push(quote);
    out
}

pub fn build_prompt(
    captions: &[String],
    style: &StyleProfile,
) -> Result<PromptBundle, SynthesisError> {
    build_prompt_with(captions, style, false)
}

/// Renders the in-context synthesis prompt; `guard_reference_leak` appends a
/// line steering the model away from copying the reference texts.
pub fn build_prompt_with(
    captions: &[String],
    style: &StyleProfile,
    guard_reference_leak: bool,
) -> Result<PromptBundle, SynthesisError> {
    if captions.is_empty() {
        return Err(SynthesisError::Precondition(
            "prompt needs at least one caption".into(),
        ));
    }
    let last = captions.len() - 1;
    let mut lines = Vec::with_capacity(captions.len() + 5);
    lines.push(PROMPT_HEADER.to_string());
    for (i, caption) in captions.iter().enumerate() {
        lines.push(format!("Frame {i}: {caption}"));
    }
    let refs: Vec<String> = style.reference_texts.iter().map(|r| py_quote(r)).collect();
    lines.push(format!("Reference Texts: [{}]", refs.join(", ")));
    lines.push(format!(
        "Write an concise instruction in the style of the Reference Texts that would get the robot from Frame 0 to Frame {last}."
    ));
    if !style.constraint_text.is_empty() {
        lines.push(style.constraint_text.clone());
    }
    if guard_reference_leak {
        lines.push(REFERENCE_LEAK_GUARD.to_string());
    }
    Ok(PromptBundle {
        frames: captions.iter().cloned().enumerate().collect(),
        style: style.clone(),
        rendered: lines.join("\n"),
    })
}

pub fn render_panorama_prompt(captions: &[String]) -> Result<String, SynthesisError> {
    let [north, east, south, west] = captions else {
        return Err(SynthesisError::Precondition(format!(
            "panorama summary needs exactly 4 captions, got {}",
            captions.len()
        )));
    };
    Ok(format!(
        "{PANORAMA_HEADER}\nNorth: {north}\nEast: {east}\nSouth: {south}\nWest: {west}\n{PANORAMA_FOOTER}"
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanoramaSummary {
    pub text: String,
    /// Still longer than the word limit after the single retry.
    pub over_length: bool,
}

/// Summarizes four captions ordered North, East, South, West.
pub fn summarize_panorama(
    captions: &[String],
    chat: &dyn ChatBackend,
    params: &DecodeParams,
) -> Result<PanoramaSummary, SynthesisError> {
    let prompt = render_panorama_prompt(captions)?;
    let mut turns = vec![ChatTurn::user(prompt)];
    let first = chat_complete(chat, &turns, params)?.trim().to_string();
    if first.is_empty() {
        return Err(SynthesisError::EmptyGeneration);
    }
    if word_count(&first) <= PANORAMA_MAX_WORDS {
        return Ok(PanoramaSummary {
            text: first,
            over_length: false,
        });
    }
    turns.push(ChatTurn::assistant(first.clone()));
    turns.push(ChatTurn::user(PANORAMA_RETRY));
    let second = chat_complete(chat, &turns, params)?.trim().to_string();
    let text = if second.is_empty() { first } else { second };
    let over_length = word_count(&text) > PANORAMA_MAX_WORDS;
    if over_length {
        log::warn!("panorama summary still exceeds {PANORAMA_MAX_WORDS} words after retry");
    }
    Ok(PanoramaSummary { text, over_length })
}

/// Caption for one path node.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameCaption {
    pub frame_index: usize,
    pub node: String,
    pub strategy: FrameStrategy,
    /// Heading of the captioned view (central strategy only).
    pub heading: Option<Heading>,
    pub caption: String,
    /// One record for central frames, four (N, E, S, W) for panoramic ones.
    pub records: Vec<CaptionRecord>,
    /// The heading-facing view was absent and another view was used.
    #[serde(default)]
    pub fallback_view: bool,
    #[serde(default)]
    pub summary_over_length: bool,
}

/// Heading the agent faces at path position `i`: toward the successor, or
/// along the incoming edge at the final node.
fn travel_heading(env: &EnvGraph, path: &[String], i: usize) -> Result<Heading, EnvError> {
    if i + 1 < path.len() {
        env.heading_between(&path[i], &path[i + 1])
    } else {
        env.heading_between(&path[i - 1], &path[i])
    }
}

/// Resolves the view for a central frame, falling back to the node's first
/// present view on continuous graphs.
fn central_observation(
    env: &EnvGraph,
    node: &str,
    heading: Heading,
) -> Result<(ObsRef, Heading, bool), SynthesisError> {
    let views = &env.node(node)?.views;
    if let Some(obs) = views.get(heading) {
        return Ok((obs.clone(), heading, false));
    }
    if env.kind() == SimulatorKind::Continuous {
        if let Some((h, Some(obs))) = views.iter().find(|(_, v)| v.is_some()) {
            log::warn!("{node}: no {heading} view, falling back to {h}");
            return Ok((obs.clone(), h, true));
        }
    }
    Err(SynthesisError::AbsentView {
        node: node.to_string(),
        heading,
    })
}

/// Captions one frame per path node, in path order.
pub fn select_frames(
    env: &EnvGraph,
    episode: &Episode,
    strategy: FrameStrategy,
    captioner: &Captioner<'_>,
) -> Result<Vec<FrameCaption>, SynthesisError> {
    if episode.path.len() < 2 {
        return Err(SynthesisError::Precondition(format!(
            "episode {} has {} path node(s); at least 2 required",
            episode.episode_id,
            episode.path.len()
        )));
    }
    env.path_length(&episode.path)?;
    (0..episode.path.len())
        .map(|i| caption_node(env, &episode.path, i, strategy, captioner))
        .collect()
}

/// Captions path position `i` under `strategy`.
pub fn caption_node(
    env: &EnvGraph,
    path: &[String],
    i: usize,
    strategy: FrameStrategy,
    captioner: &Captioner<'_>,
) -> Result<FrameCaption, SynthesisError> {
    let node = &path[i];
    match strategy {
        FrameStrategy::Central => {
            let (obs, heading, fallback_view) =
                central_observation(env, node, travel_heading(env, path, i)?)?;
            let record = captioner.describe(i, &obs)?;
            Ok(FrameCaption {
                frame_index: i,
                node: node.clone(),
                strategy,
                heading: Some(heading),
                caption: record.caption.clone(),
                records: vec![record],
                fallback_view,
                summary_over_length: false,
            })
        }
        FrameStrategy::Panoramic => {
            let views = &env.node(node)?.views;
            let records = Heading::ALL
                .iter()
                .map(|&h| {
                    let obs = views.get(h).ok_or_else(|| SynthesisError::AbsentView {
                        node: node.clone(),
                        heading: h,
                    })?;
                    Ok(captioner.describe(i, obs)?)
                })
                .collect::<Result<Vec<_>, SynthesisError>>()?;
            let captions: Vec<String> = records.iter().map(|r| r.caption.clone()).collect();
            let summary = summarize_panorama(&captions, captioner.chat, captioner.params)?;
            Ok(FrameCaption {
                frame_index: i,
                node: node.clone(),
                strategy,
                heading: None,
                caption: summary.text,
                records,
                fallback_view: false,
                summary_over_length: summary.over_length,
            })
        }
    }
}

/// Conversation sent to the instruction model for `bundle`.
pub fn synthesis_turns(bundle: &PromptBundle) -> Vec<ChatTurn> {
    vec![ChatTurn::user(bundle.rendered.clone())]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Synthesis {
    pub instruction: Instruction,
    pub bundle: PromptBundle,
}

/// Generates an instruction from already-captioned frames.
pub fn synthesize_from_frames(
    episode_id: &str,
    frames: &[FrameCaption],
    style: &StyleProfile,
    strategy: FrameStrategy,
    guard_reference_leak: bool,
    synth: &dyn ChatBackend,
    params: &DecodeParams,
) -> Result<Synthesis, SynthesisError> {
    style.validate()?;
    let captions: Vec<String> = frames.iter().map(|f| f.caption.clone()).collect();
    let bundle = build_prompt_with(&captions, style, guard_reference_leak)?;
    let text = chat_complete(synth, &synthesis_turns(&bundle), params)?
        .trim()
        .to_string();
    if text.is_empty() {
        return Err(SynthesisError::EmptyGeneration);
    }
    Ok(Synthesis {
        instruction: Instruction {
            text,
            style: style.name.clone(),
            episode_id: episode_id.to_string(),
            frame_strategy: strategy,
            source: InstructionSource::Generated,
        },
        bundle,
    })
}

/// Captions the episode and generates one instruction in `style`.
#[allow(clippy::too_many_arguments)]
pub fn synthesize_instruction(
    env: &EnvGraph,
    episode: &Episode,
    style: &StyleProfile,
    strategy: FrameStrategy,
    captioner: &Captioner<'_>,
    guard_reference_leak: bool,
    synth: &dyn ChatBackend,
    params: &DecodeParams,
) -> Result<Synthesis, SynthesisError> {
    let frames = select_frames(env, episode, strategy, captioner)?;
    synthesize_from_frames(
        &episode.episode_id,
        &frames,
        style,
        strategy,
        guard_reference_leak,
        synth,
        params,
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StyleViolation {
    Empty,
    TooManyWords { count: usize, max: usize },
    TooManySentences { count: usize, max: usize },
    TooFewSentences { count: usize, min: usize },
}

impl fmt::Display for StyleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StyleViolation::Empty => f.write_str("empty"),
            StyleViolation::TooManyWords { count, max } => write!(f, "word_count={count} > {max}"),
            StyleViolation::TooManySentences { count, max } => {
                write!(f, "sentence_count={count} > {max}")
            }
            StyleViolation::TooFewSentences { count, min } => {
                write!(f, "sentence_count={count} < {min}")
            }
        }
    }
}

/// Whitespace tokens left after stripping punctuation.
pub fn word_count(text: &str) -> usize {
    text.split_whitespace()
        .filter(|tok| tok.chars().any(|c| !c.is_ascii_punctuation()))
        .count()
}

/// Sentences delimited by terminal punctuation; an unterminated tail counts
/// as one more. Runs like "?!" or "..." end a single sentence, and a period
/// between digits ("1.5") does not end one.
pub fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    let mut count = 0;
    let mut open = false;
    for (i, &c) in chars.iter().enumerate() {
        let terminal = matches!(c, '.' | '!' | '?');
        let next = chars.get(i + 1).copied();
        let ends_here = terminal
            && match next {
                None => true,
                Some(n) => n.is_whitespace() || matches!(n, '"' | '\'' | ')'),
            };
        if ends_here && open {
            count += 1;
            open = false;
        } else if c.is_alphanumeric() {
            open = true;
        }
    }
    count + usize::from(open)
}

/// Checks an instruction against the style's limits without modifying it.
pub fn validate_style(instruction: &Instruction, style: &StyleProfile) -> Vec<StyleViolation> {
    let text = instruction.text.trim();
    if text.is_empty() {
        return vec![StyleViolation::Empty];
    }
    let mut violations = Vec::new();
    let words = word_count(text);
    if let Some(max) = style.max_words.filter(|&m| words > m) {
        violations.push(StyleViolation::TooManyWords { count: words, max });
    }
    let sentences = sentence_count(text);
    if let Some(max) = style.max_sentences.filter(|&m| sentences > m) {
        violations.push(StyleViolation::TooManySentences {
            count: sentences,
            max,
        });
    }
    if let Some(min) = style.min_sentences.filter(|&m| sentences < m) {
        violations.push(StyleViolation::TooFewSentences {
            count: sentences,
            min,
        });
    }
    violations
}
