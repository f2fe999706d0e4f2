//! Client layer for the four model capabilities the pipeline consumes: chat
//! completion, visual question answering, phrase grounding and text embedding.
//!
//! Every capability has three kinds of implementation:
//!
//! * live HTTP clients ([`http`]),
//! * table-driven scripted backends for tests ([`scripted`]),
//! * a record/replay layer over a content-addressed directory ([`cache`]).
//!
//! The free functions in this module ([`chat_complete`], [`vqa_answer`],
//! [`ground_score`], [`embed_text`]) enforce the capability contracts on top
//! of whichever implementation is plugged in.

pub mod cache;
pub mod http;
pub mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::env_model::ObsRef;

pub use cache::{CacheEntry, CacheLayer, CacheMode, ReplayCache};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("replay miss: no cached response for {kind} request {digest}")]
    ReplayMiss { kind: RequestKind, digest: CacheKey },
    #[error("unresolvable observation {0}")]
    Unresolvable(ObsRef),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("conflicting cache content for {0}")]
    CacheConflict(CacheKey),
    #[error("cache io error: {0}")]
    CacheIo(String),
    #[error("no scripted response: {0}")]
    Unscripted(String),
}

impl BackendError {
    pub fn is_replay_miss(&self) -> bool {
        matches!(self, BackendError::ReplayMiss { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    pub content: String,
}

impl ChatTurn {
    pub fn system(content: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatTurn {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Decoding parameters; part of every cache key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeParams {
    pub max_tokens: u32,
    pub model: String,
    pub temperature: f64,
}

impl DecodeParams {
    /// Temperature-zero parameters for `model`.
    pub fn deterministic(model: impl Into<String>) -> Self {
        DecodeParams {
            max_tokens: 256,
            model: model.into(),
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    Chat,
    Vqa,
    Ground,
    Embed,
}

impl RequestKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RequestKind::Chat => "chat",
            RequestKind::Vqa => "vqa",
            RequestKind::Ground => "ground",
            RequestKind::Embed => "embed",
        }
    }
}

impl fmt::Display for RequestKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// 256-bit SHA-256 digest identifying a request.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(CacheKey(bytes.try_into().ok()?))
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", self.to_hex())
    }
}

// Payload structs list their fields alphabetically so serde emits sorted keys.
#[derive(Serialize)]
struct ChatPayload<'a> {
    turns: &'a [ChatTurn],
}

#[derive(Serialize)]
struct VqaPayload<'a> {
    observation: &'a ObsRef,
    question: &'a str,
}

#[derive(Serialize)]
struct GroundPayload<'a> {
    observations: &'a [ObsRef],
    phrase: &'a str,
}

#[derive(Serialize)]
struct EmbedPayload<'a> {
    text: &'a str,
}

/// A canonicalized request: equal logical requests have equal bytes.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendRequest {
    pub kind: RequestKind,
    pub payload: Vec<u8>,
    pub params: DecodeParams,
}

impl BackendRequest {
    fn build(kind: RequestKind, payload: &impl Serialize, params: &DecodeParams) -> Self {
        BackendRequest {
            kind,
            payload: serde_json::to_vec(payload).expect("payload serializes"),
            params: params.clone(),
        }
    }

    pub fn chat(turns: &[ChatTurn], params: &DecodeParams) -> Self {
        Self::build(RequestKind::Chat, &ChatPayload { turns }, params)
    }

    pub fn vqa(observation: &ObsRef, question: &str, params: &DecodeParams) -> Self {
        Self::build(
            RequestKind::Vqa,
            &VqaPayload {
                observation,
                question,
            },
            params,
        )
    }

    pub fn ground(phrase: &str, observations: &[ObsRef], params: &DecodeParams) -> Self {
        Self::build(
            RequestKind::Ground,
            &GroundPayload {
                observations,
                phrase,
            },
            params,
        )
    }

    pub fn embed(text: &str, params: &DecodeParams) -> Self {
        Self::build(RequestKind::Embed, &EmbedPayload { text }, params)
    }

    pub fn payload_str(&self) -> &str {
        std::str::from_utf8(&self.payload).expect("payload is json")
    }

    /// Bytes hashed into the cache key: kind, payload and parameters.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload.len() + 96);
        out.extend_from_slice(b"wayfind-request-v1\n");
        out.extend_from_slice(self.kind.as_str().as_bytes());
        out.push(b'\n');
        out.extend_from_slice(&self.payload);
        out.push(b'\n');
        out.extend_from_slice(&serde_json::to_vec(&self.params).expect("params serialize"));
        out
    }
}

pub fn cache_key(request: &BackendRequest) -> CacheKey {
    let digest = Sha256::digest(request.canonical_bytes());
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    CacheKey(key)
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, turns: &[ChatTurn], params: &DecodeParams) -> Result<String, BackendError>;
}

pub trait VqaBackend: Send + Sync {
    fn answer(&self, observation: &ObsRef, question: &str) -> Result<String, BackendError>;
}

/// How a grounding backend produces its scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroundingKind {
    /// Image-text similarity (CLIP style).
    #[default]
    Similarity,
    /// Maximum box confidence for the phrase (GLIP style).
    Detection,
}

pub trait GroundBackend: Send + Sync {
    fn scores(&self, phrase: &str, observations: &[ObsRef]) -> Result<Vec<f64>, BackendError>;

    fn kind(&self) -> GroundingKind {
        GroundingKind::Similarity
    }
}

pub trait EmbedBackend: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, turns: &[ChatTurn], params: &DecodeParams) -> Result<String, BackendError> {
        (**self).complete(turns, params)
    }
}

impl<T: VqaBackend + ?Sized> VqaBackend for Arc<T> {
    fn answer(&self, observation: &ObsRef, question: &str) -> Result<String, BackendError> {
        (**self).answer(observation, question)
    }
}

impl<T: GroundBackend + ?Sized> GroundBackend for Arc<T> {
    fn scores(&self, phrase: &str, observations: &[ObsRef]) -> Result<Vec<f64>, BackendError> {
        (**self).scores(phrase, observations)
    }

    fn kind(&self) -> GroundingKind {
        (**self).kind()
    }
}

impl<T: EmbedBackend + ?Sized> EmbedBackend for Arc<T> {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        (**self).embed(text)
    }
}

pub fn chat_complete(
    backend: &dyn ChatBackend,
    turns: &[ChatTurn],
    params: &DecodeParams,
) -> Result<String, BackendError> {
    if turns.is_empty() {
        return Err(BackendError::Precondition(
            "chat request needs at least one turn".into(),
        ));
    }
    if let Some(i) = turns.iter().position(|t| t.content.is_empty()) {
        return Err(BackendError::Precondition(format!(
            "chat turn {i} has empty content"
        )));
    }
    backend.complete(turns, params)
}

pub fn vqa_answer(
    backend: &dyn VqaBackend,
    observation: &ObsRef,
    question: &str,
) -> Result<String, BackendError> {
    if question.trim().is_empty() {
        return Err(BackendError::Precondition("empty VQA question".into()));
    }
    backend.answer(observation, question)
}

/// One score in `[0, 1]` per observation, in input order.
pub fn ground_score(
    backend: &dyn GroundBackend,
    phrase: &str,
    observations: &[ObsRef],
) -> Result<Vec<f64>, BackendError> {
    if observations.is_empty() {
        return Err(BackendError::Precondition(
            "grounding needs at least one observation".into(),
        ));
    }
    let scores = backend.scores(phrase, observations)?;
    if scores.len() != observations.len() {
        return Err(BackendError::Decode(format!(
            "expected {} grounding scores, got {}",
            observations.len(),
            scores.len()
        )));
    }
    scores
        .into_iter()
        .map(|s| {
            if s.is_finite() {
                Ok(s.clamp(0.0, 1.0))
            } else {
                Err(BackendError::Decode(format!(
                    "non-finite grounding score {s}"
                )))
            }
        })
        .collect()
}

/// Embedding of `text`, renormalized to unit L2 norm.
pub fn embed_text(backend: &dyn EmbedBackend, text: &str) -> Result<Vec<f64>, BackendError> {
    if text.is_empty() {
        return Err(BackendError::Precondition("cannot embed empty text".into()));
    }
    let mut v = backend.embed(text)?;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if v.is_empty() || !norm.is_finite() || norm == 0.0 {
        return Err(BackendError::Decode(format!(
            "degenerate embedding for {text:?}"
        )));
    }
    v.iter_mut().for_each(|x| *x /= norm);
    Ok(v)
}
