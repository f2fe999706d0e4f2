//! Content-addressed record/replay cache.
//!
//! Each response lives in `<dir>/<hex digest>.json` next to the canonical
//! request bytes that produced it. A [`CacheLayer`] wraps any capability
//! backend and, depending on [`CacheMode`], passes calls through, records
//! them, or serves them from disk only.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{
    cache_key, BackendError, BackendRequest, CacheKey, ChatBackend, ChatTurn, DecodeParams,
    EmbedBackend, GroundBackend, GroundingKind, RequestKind, VqaBackend,
};
use crate::env_model::ObsRef;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CacheMode {
    /// Always call the backend; the cache is untouched.
    Live,
    /// Serve hits from the cache, call the backend on misses and store the result.
    #[default]
    Record,
    /// Serve from the cache only; a miss is an error.
    Replay,
}

impl std::str::FromStr for CacheMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "live" => Ok(CacheMode::Live),
            "record" => Ok(CacheMode::Record),
            "replay" => Ok(CacheMode::Replay),
            other => Err(format!(
                "unknown mode {other:?} (expected live, record or replay)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub kind: RequestKind,
    /// Canonical request payload, verbatim.
    pub request: String,
    pub params: DecodeParams,
    pub response: serde_json::Value,
    pub created_at: DateTime<Utc>,
}

impl CacheEntry {
    pub fn new(
        request: &BackendRequest,
        response: serde_json::Value,
        created_at: DateTime<Utc>,
    ) -> Self {
        CacheEntry {
            key: cache_key(request).to_hex(),
            kind: request.kind,
            request: request.payload_str().to_string(),
            params: request.params.clone(),
            response,
            created_at,
        }
    }

    /// Recomputes the digest from the stored request and compares it to `key`.
    pub fn verify(&self) -> bool {
        let req = BackendRequest {
            kind: self.kind,
            payload: self.request.as_bytes().to_vec(),
            params: self.params.clone(),
        };
        cache_key(&req).to_hex() == self.key
    }
}

#[derive(Debug)]
pub struct ReplayCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> BackendError {
    BackendError::CacheIo(format!("{}: {e}", path.display()))
}

impl ReplayCache {
    /// Opens `dir`, creating it if needed.
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
        Ok(ReplayCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    /// Opens an existing cache directory without creating it.
    pub fn open_existing(dir: impl Into<PathBuf>) -> Result<Self, BackendError> {
        let dir = dir.into();
        if !dir.is_dir() {
            return Err(io_err(&dir, "replay cache directory does not exist"));
        }
        Ok(ReplayCache {
            dir,
            write_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.to_hex()))
    }

    pub fn load(&self, key: &CacheKey) -> Result<Option<CacheEntry>, BackendError> {
        let path = self.path_for(key);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_err(&path, e)),
        };
        let entry: CacheEntry = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        Ok(Some(entry))
    }

    /// Writes `entry` atomically. Storing identical content twice is a no-op
    /// that keeps the original entry; different content under one key fails.
    pub fn store(&self, entry: &CacheEntry) -> Result<(), BackendError> {
        let key = CacheKey::from_hex(&entry.key)
            .ok_or_else(|| BackendError::CacheIo(format!("malformed cache key {:?}", entry.key)))?;
        let _guard = self.write_lock.lock().expect("cache lock poisoned");
        if let Some(existing) = self.load(&key)? {
            if existing.response == entry.response && existing.request == entry.request {
                return Ok(());
            }
            return Err(BackendError::CacheConflict(key));
        }
        let path = self.path_for(&key);
        let mut tmp =
            tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| io_err(&self.dir, e))?;
        let mut text = serde_json::to_string_pretty(entry).expect("cache entry serializes");
        text.push('\n');
        tmp.write_all(text.as_bytes())
            .map_err(|e| io_err(&path, e))?;
        tmp.persist(&path).map_err(|e| io_err(&path, e.error))?;
        Ok(())
    }

    /// All entries, sorted by key.
    pub fn entries(&self) -> Result<Vec<CacheEntry>, BackendError> {
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)
            .map_err(|e| io_err(&self.dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        paths
            .iter()
            .map(|p| {
                let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
                serde_json::from_str(&text).map_err(|e| io_err(p, e))
            })
            .collect()
    }
}

/// Record/replay wrapper around a capability backend.
///
/// `params` supplies the model identity for the VQA, grounding and embedding
/// cache keys; chat requests carry their own parameters.
pub struct CacheLayer<B> {
    inner: Option<B>,
    cache: Option<std::sync::Arc<ReplayCache>>,
    mode: CacheMode,
    params: DecodeParams,
    ground_kind: GroundingKind,
}

impl<B> CacheLayer<B> {
    pub fn live(inner: B, params: DecodeParams) -> Self {
        CacheLayer {
            inner: Some(inner),
            cache: None,
            mode: CacheMode::Live,
            params,
            ground_kind: GroundingKind::default(),
        }
    }

    pub fn record(inner: B, cache: std::sync::Arc<ReplayCache>, params: DecodeParams) -> Self {
        CacheLayer {
            inner: Some(inner),
            cache: Some(cache),
            mode: CacheMode::Record,
            params,
            ground_kind: GroundingKind::default(),
        }
    }

    pub fn replay(cache: std::sync::Arc<ReplayCache>, params: DecodeParams) -> Self {
        CacheLayer {
            inner: None,
            cache: Some(cache),
            mode: CacheMode::Replay,
            params,
            ground_kind: GroundingKind::default(),
        }
    }

    /// Grounding kind reported in replay mode, where no inner backend exists.
    pub fn with_ground_kind(mut self, kind: GroundingKind) -> Self {
        self.ground_kind = kind;
        self
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    fn run<T, F>(&self, request: BackendRequest, call: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&B) -> Result<T, BackendError>,
    {
        let inner = || {
            self.inner.as_ref().ok_or_else(|| {
                BackendError::Precondition("no backend configured for live calls".into())
            })
        };
        let cache = match (self.mode, &self.cache) {
            (CacheMode::Live, _) | (_, None) => return call(inner()?),
            (_, Some(cache)) => cache,
        };
        let key = cache_key(&request);
        if let Some(entry) = cache.load(&key)? {
            return serde_json::from_value(entry.response)
                .map_err(|e| BackendError::Decode(format!("cached response {key}: {e}")));
        }
        if self.mode == CacheMode::Replay {
            return Err(BackendError::ReplayMiss {
                kind: request.kind,
                digest: key,
            });
        }
        let value = call(inner()?)?;
        let json = serde_json::to_value(&value).expect("response serializes");
        cache.store(&CacheEntry::new(&request, json, Utc::now()))?;
        Ok(value)
    }
}

impl<B: ChatBackend> ChatBackend for CacheLayer<B> {
    fn complete(&self, turns: &[ChatTurn], params: &DecodeParams) -> Result<String, BackendError> {
        self.run(BackendRequest::chat(turns, params), |b| {
            b.complete(turns, params)
        })
    }
}

impl<B: VqaBackend> VqaBackend for CacheLayer<B> {
    fn answer(&self, observation: &ObsRef, question: &str) -> Result<String, BackendError> {
        self.run(
            BackendRequest::vqa(observation, question, &self.params),
            |b| b.answer(observation, question),
        )
    }
}

impl<B: GroundBackend> GroundBackend for CacheLayer<B> {
    fn scores(&self, phrase: &str, observations: &[ObsRef]) -> Result<Vec<f64>, BackendError> {
        self.run(
            BackendRequest::ground(phrase, observations, &self.params),
            |b| b.scores(phrase, observations),
        )
    }

    fn kind(&self) -> GroundingKind {
        self.inner.as_ref().map_or(self.ground_kind, |b| b.kind())
    }
}

impl<B: EmbedBackend> EmbedBackend for CacheLayer<B> {
    fn embed(&self, text: &str) -> Result<Vec<f64>, BackendError> {
        self.run(BackendRequest::embed(text, &self.params), |b| b.embed(text))
    }
}
