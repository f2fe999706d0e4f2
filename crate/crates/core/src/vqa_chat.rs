//! Frame captioning through a question/answer conversation.
//!
//! A chat model interrogates a VQA model about one frame, one question at a
//! time, then rewrites the initial caption so it agrees with the answers.
//! VQA calls are stateless `(image, question)` pairs.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{
    chat_complete, vqa_answer, BackendError, ChatBackend, ChatTurn, DecodeParams, VqaBackend,
};
use crate::env_model::ObsRef;
use crate::prompts;

/// Question used to obtain the initial caption.
pub const INITIAL_QUESTION: &str = "Describe the image in detail.";

/// The chat model's stop word.
pub const STOP_SENTINEL: &str = "DONE";

pub const DEFAULT_ROUNDS: usize = 5;

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("VQA returned an empty initial caption for {0}")]
    EmptyInitialCaption(ObsRef),
    #[error("caption refinement produced no declarative text")]
    EmptyRefinement,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QaPair {
    pub question: String,
    pub answer: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub observation: ObsRef,
    pub initial_caption: String,
    pub qa_pairs: Vec<QaPair>,
}

impl Transcript {
    pub fn new(observation: ObsRef, initial_caption: impl Into<String>) -> Self {
        Transcript {
            observation,
            initial_caption: initial_caption.into(),
            qa_pairs: Vec::new(),
        }
    }

    pub fn has_question(&self, question: &str) -> bool {
        self.qa_pairs.iter().any(|qa| qa.question == question)
    }

    fn dialogue(&self) -> String {
        self.qa_pairs
            .iter()
            .map(|qa| format!("Q: {}\nA: {}", qa.question, qa.answer))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub frame_index: usize,
    pub observation: ObsRef,
    pub caption: String,
    pub transcript: Transcript,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Sentinel,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NextQuestion {
    Ask(String),
    Stop(StopReason),
}

/// Chat model, VQA model and decoding settings for one captioning run.
#[derive(Clone, Copy)]
pub struct Captioner<'a> {
    pub chat: &'a dyn ChatBackend,
    pub vqa: &'a dyn VqaBackend,
    pub params: &'a DecodeParams,
    pub rounds: usize,
}

impl Captioner<'_> {
    pub fn describe(
        &self,
        frame_index: usize,
        observation: &ObsRef,
    ) -> Result<CaptionRecord, CaptionError> {
        describe_frame(
            frame_index,
            observation,
            self.rounds,
            self.chat,
            self.vqa,
            self.params,
        )
    }
}

/// Captions one frame: an initial VQA description, up to `rounds` follow-up
/// questions, then refinement.
pub fn describe_frame(
    frame_index: usize,
    observation: &ObsRef,
    rounds: usize,
    chat: &dyn ChatBackend,
    vqa: &dyn VqaBackend,
    params: &DecodeParams,
) -> Result<CaptionRecord, CaptionError> {
    let initial = vqa_answer(vqa, observation, INITIAL_QUESTION)?
        .trim()
        .to_string();
    if initial.is_empty() {
        return Err(CaptionError::EmptyInitialCaption(observation.clone()));
    }
    let mut transcript = Transcript::new(observation.clone(), initial);
    for _ in 0..rounds {
        match next_question(&transcript, chat, params)? {
            NextQuestion::Stop(reason) => {
                log::debug!("{observation}: conversation stopped ({reason:?})");
                break;
            }
            NextQuestion::Ask(question) => {
                let answer = vqa_answer(vqa, observation, &question)?.trim().to_string();
                transcript.qa_pairs.push(QaPair { question, answer });
            }
        }
    }
    let caption = refine_caption(&transcript, chat, params)?;
    Ok(CaptionRecord {
        frame_index,
        observation: observation.clone(),
        caption,
        transcript,
    })
}

fn clean_question(raw: &str) -> String {
    let line = raw
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("");
    let mut q = line;
    for prefix in ["Question:", "Q:", "- ", "* "] {
        if let Some(rest) = q.strip_prefix(prefix) {
            q = rest.trim_start();
        }
    }
    q.trim_matches('"').trim().to_string()
}

/// Asks the chat model for the next question about the frame.
pub fn next_question(
    transcript: &Transcript,
    chat: &dyn ChatBackend,
    params: &DecodeParams,
) -> Result<NextQuestion, BackendError> {
    let dialogue = if transcript.qa_pairs.is_empty() {
        "No questions asked yet.".to_string()
    } else {
        transcript.dialogue()
    };
    let user = prompts::render(
        prompts::QUESTION_USER,
        &[
            ("caption", &transcript.initial_caption),
            ("dialogue", &dialogue),
        ],
    );
    let turns = [
        ChatTurn::system(prompts::QUESTION_SYSTEM),
        ChatTurn::user(user),
    ];
    let question = clean_question(&chat_complete(chat, &turns, params)?);
    if question.is_empty()
        || question
            .trim_end_matches('.')
            .eq_ignore_ascii_case(STOP_SENTINEL)
    {
        return Ok(NextQuestion::Stop(StopReason::Sentinel));
    }
    if transcript.has_question(&question) {
        return Ok(NextQuestion::Stop(StopReason::Duplicate));
    }
    Ok(NextQuestion::Ask(question))
}

/// Drops interrogative sentences so the caption is purely declarative.
fn declarative(text: &str) -> String {
    let mut out = String::new();
    let mut sentence = String::new();
    for c in text.chars() {
        sentence.push(c);
        if matches!(c, '.' | '!' | '?') {
            if c != '?' {
                out.push_str(&sentence);
            }
            sentence.clear();
        }
    }
    if !sentence.contains('?') {
        out.push_str(&sentence);
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Rewrites the initial caption to agree with every answer in the transcript.
/// With no answers the initial caption is returned unchanged.
pub fn refine_caption(
    transcript: &Transcript,
    chat: &dyn ChatBackend,
    params: &DecodeParams,
) -> Result<String, CaptionError> {
    let source = if transcript.qa_pairs.is_empty() {
        transcript.initial_caption.clone()
    } else {
        let user = prompts::render(
            prompts::REFINE_USER,
            &[
                ("caption", &transcript.initial_caption),
                ("dialogue", &transcript.dialogue()),
            ],
        );
        let turns = [
            ChatTurn::system(prompts::REFINE_SYSTEM),
            ChatTurn::user(user),
        ];
        chat_complete(chat, &turns, params)?
    };
    let caption = declarative(source.trim());
    if caption.is_empty() {
        return Err(CaptionError::EmptyRefinement);
    }
    Ok(caption)
}
