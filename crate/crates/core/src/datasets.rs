//! Dataset import and run-directory persistence.
//!
//! Everything a pipeline stage produces lands under one run directory as
//! JSON, written atomically so readers never observe partial files.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env_model::{EnvError, EnvGraph, Episode};
use crate::synthesis::{FrameCaption, FrameStrategy};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{path}: duplicate manifest entry ({episode_id}, {style}, {strategy})")]
    DuplicateEntry {
        path: PathBuf,
        episode_id: String,
        style: String,
        strategy: FrameStrategy,
    },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error("{0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `bytes` to `path` through a temp file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(dir))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.as_file().sync_all().map_err(io_err(path))?;
    tmp.persist(path).map_err(|e| DataError::Io {
        path: path.to_path_buf(),
        source: e.error,
    })?;
    Ok(())
}

/// Pretty JSON with a trailing newline.
pub fn to_json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DataError> {
    write_atomic(path, &to_json_bytes(value))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, DataError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: String,
    pub env_id: String,
    pub path: Vec<String>,
    #[serde(default)]
    pub instructions: Vec<String>,
    #[serde(default)]
    pub split: String,
}

impl EpisodeRecord {
    pub fn to_episode(&self, env: &EnvGraph) -> Result<Episode, EnvError> {
        Episode::new(
            env,
            &self.episode_id,
            self.path.clone(),
            self.instructions.clone(),
        )
    }
}

/// Upstream record shape.
#[derive(Debug, Deserialize)]
struct UpstreamRecord {
    id: serde_json::Value,
    scan: String,
    path: Vec<String>,
    #[serde(default)]
    instructions: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ImportReport {
    pub records: Vec<EpisodeRecord>,
    /// One message per dropped record.
    pub warnings: Vec<String>,
}

/// Imports REVERIE-style records, dropping those whose scan or path does
/// not resolve against the known environments.
pub fn import_reverie<'a>(
    path: &Path,
    split: &str,
    resolve: impl Fn(&str) -> Option<&'a EnvGraph>,
) -> Result<ImportReport, DataError> {
    let raw: Vec<UpstreamRecord> = read_json(path)?;
    let mut report = ImportReport::default();
    for (i, rec) in raw.into_iter().enumerate() {
        let id = match &rec.id {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        let problem = match resolve(&rec.scan) {
            None => Some(format!("unknown environment {:?}", rec.scan)),
            Some(env) => match env.path_length(&rec.path) {
                _ if rec.path.is_empty() => Some("empty path".to_string()),
                Err(e) => Some(e.to_string()),
                Ok(_) => None,
            },
        };
        if let Some(problem) = problem {
            let msg = format!("record {i} ({id}): {problem}; dropped");
            log::warn!("{msg}");
            report.warnings.push(msg);
            continue;
        }
        report.records.push(EpisodeRecord {
            episode_id: id,
            env_id: rec.scan,
            path: rec.path,
            instructions: rec.instructions,
            split: split.to_string(),
        });
    }
    log::info!(
        "imported {} record(s), dropped {}",
        report.records.len(),
        report.warnings.len()
    );
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub episode_id: String,
    pub style: String,
    pub strategy: FrameStrategy,
    pub text: String,
    pub prompt_digest: String,
    #[serde(default)]
    pub models: BTreeMap<String, String>,
    #[serde(default)]
    pub created_at: String,
    #[serde(default)]
    pub style_violations: Vec<String>,
}

impl ManifestEntry {
    pub fn key(&self) -> (String, String, FrameStrategy) {
        (self.episode_id.clone(), self.style.clone(), self.strategy)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationManifest {
    pub run_id: String,
    pub config_digest: String,
    #[serde(default)]
    pub prompt_version: String,
    pub entries: Vec<ManifestEntry>,
}

impl GenerationManifest {
    pub fn new(run_id: impl Into<String>, config_digest: impl Into<String>) -> Self {
        GenerationManifest {
            run_id: run_id.into(),
            config_digest: config_digest.into(),
            prompt_version: crate::prompts::PROMPT_VERSION.to_string(),
            entries: Vec::new(),
        }
    }

    pub fn contains(&self, episode_id: &str, style: &str, strategy: FrameStrategy) -> bool {
        self.entries
            .iter()
            .any(|e| e.episode_id == episode_id && e.style == style && e.strategy == strategy)
    }

    /// Inserts or replaces the entry with the same key, keeping entries sorted.
    pub fn upsert(&mut self, entry: ManifestEntry) {
        self.entries.retain(|e| e.key() != entry.key());
        self.entries.push(entry);
        self.entries.sort_by_key(ManifestEntry::key);
    }

    fn first_duplicate(&self) -> Option<&ManifestEntry> {
        let mut seen = BTreeSet::new();
        self.entries.iter().find(|e| !seen.insert(e.key()))
    }
}

pub fn write_manifest(manifest: &GenerationManifest, path: &Path) -> Result<(), DataError> {
    if let Some(dup) = manifest.first_duplicate() {
        return Err(DataError::DuplicateEntry {
            path: path.to_path_buf(),
            episode_id: dup.episode_id.clone(),
            style: dup.style.clone(),
            strategy: dup.strategy,
        });
    }
    write_json(path, manifest)
}

pub fn read_manifest(path: &Path) -> Result<GenerationManifest, DataError> {
    let manifest: GenerationManifest = read_json(path)?;
    if let Some(dup) = manifest.first_duplicate() {
        return Err(DataError::DuplicateEntry {
            path: path.to_path_buf(),
            episode_id: dup.episode_id.clone(),
            style: dup.style.clone(),
            strategy: dup.strategy,
        });
    }
    Ok(manifest)
}

/// Layout of a run directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn envs(&self) -> PathBuf {
        self.root.join("envs")
    }

    pub fn episodes(&self) -> PathBuf {
        self.root.join("episodes")
    }

    pub fn episodes_file(&self) -> PathBuf {
        self.episodes().join("episodes.json")
    }

    pub fn captions(&self) -> PathBuf {
        self.root.join("captions")
    }

    pub fn caption_file(&self, episode_id: &str, strategy: FrameStrategy) -> PathBuf {
        self.captions()
            .join(strategy.as_str())
            .join(format!("{episode_id}.json"))
    }

    pub fn manifests(&self) -> PathBuf {
        self.root.join("manifests")
    }

    pub fn manifest_file(&self, run_id: &str) -> PathBuf {
        self.manifests().join(format!("{run_id}.json"))
    }

    pub fn traces(&self) -> PathBuf {
        self.root.join("traces")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn replay_cache(&self) -> PathBuf {
        self.root.join("replay_cache")
    }

    pub fn create_layout(&self) -> Result<(), DataError> {
        for dir in [
            self.envs(),
            self.episodes(),
            self.captions(),
            self.manifests(),
            self.traces(),
            self.reports(),
        ] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(())
    }

    /// Every `*.json` environment under `envs/`, keyed by env id.
    pub fn load_envs(&self) -> Result<BTreeMap<String, EnvGraph>, DataError> {
        let mut envs = BTreeMap::new();
        for path in json_files(&self.envs())? {
            let env = crate::env_model::load_env(&path)?;
            if envs.contains_key(env.env_id()) {
                return Err(DataError::Invalid(format!(
                    "{}: duplicate env id {:?}",
                    path.display(),
                    env.env_id()
                )));
            }
            envs.insert(env.env_id().to_string(), env);
        }
        Ok(envs)
    }
}

/// Sorted `*.json` files directly inside `dir`; a missing directory is empty.
pub fn json_files(dir: &Path) -> Result<Vec<PathBuf>, DataError> {
    let rd = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => {
            return Err(DataError::Io {
                path: dir.to_path_buf(),
                source: e,
            })
        }
    };
    let mut files = Vec::new();
    for entry in rd {
        let path = entry.map_err(io_err(dir))?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn write_episodes(path: &Path, episodes: &[Episode]) -> Result<(), DataError> {
    write_json(path, &episodes)
}

/// Loads episodes and revalidates each against its environment.
pub fn read_episodes(
    path: &Path,
    envs: &BTreeMap<String, EnvGraph>,
) -> Result<Vec<Episode>, DataError> {
    let episodes: Vec<Episode> = read_json(path)?;
    let mut seen = BTreeSet::new();
    episodes
        .into_iter()
        .map(|ep| {
            if !seen.insert(ep.episode_id.clone()) {
                return Err(DataError::Invalid(format!(
                    "duplicate episode id {:?}",
                    ep.episode_id
                )));
            }
            let env = envs.get(&ep.env_id).ok_or_else(|| {
                DataError::Invalid(format!(
                    "episode {}: unknown env {:?}",
                    ep.episode_id, ep.env_id
                ))
            })?;
            Ok(ep.revalidate(env)?)
        })
        .collect()
}

pub fn write_captions(path: &Path, frames: &[FrameCaption]) -> Result<(), DataError> {
    write_json(path, &frames)
}

pub fn read_captions(path: &Path) -> Result<Vec<FrameCaption>, DataError> {
    read_json(path)
}
