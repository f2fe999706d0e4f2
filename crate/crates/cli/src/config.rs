//! Run configuration: a TOML file, then `WAYFIND_*` environment variables,
//! then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use wayfind_core::backends::CacheMode;
use wayfind_core::navigation::{Policy, PolicyConfig};
use wayfind_core::synthesis::{FrameStrategy, StyleProfile, DEFAULT_REFERENCE_COUNT};
use wayfind_core::vqa_chat::DEFAULT_ROUNDS;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Http,
    /// Grounding only: privileged scores from the episode goal.
    Oracle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    #[serde(default = "default_kind")]
    pub kind: BackendKind,
    #[serde(default)]
    pub url: String,
    #[serde(default)]
    pub model: String,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_kind() -> BackendKind {
    BackendKind::Http
}

fn default_temperature() -> f64 {
    0.0
}

fn default_max_tokens() -> u32 {
    256
}

fn default_timeout() -> u64 {
    60
}

impl BackendConfig {
    pub fn http(url: &str, model: &str) -> Self {
        BackendConfig {
            kind: BackendKind::Http,
            url: url.into(),
            model: model.into(),
            api_key_env: None,
            temperature: default_temperature(),
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    /// Question asking and caption refinement; also phrase extraction.
    pub chat: Option<BackendConfig>,
    /// Instruction generation.
    pub synth: Option<BackendConfig>,
    pub vqa: Option<BackendConfig>,
    pub ground: Option<BackendConfig>,
    /// Detection-confidence grounding for glip_nav.
    pub detect: Option<BackendConfig>,
    pub embed: Option<BackendConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleConfig {
    pub min_hops: usize,
    pub max_hops: usize,
    pub count: usize,
}

impl Default for SampleConfig {
    fn default() -> Self {
        SampleConfig {
            min_hops: 2,
            max_hops: 4,
            count: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorKind {
    #[default]
    RuleBased,
    Chat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Not part of the digest; relative paths resolve against the config file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub run_dir: Option<PathBuf>,
    pub run_id: String,
    pub mode: CacheMode,
    pub seed: u64,
    pub styles: Vec<String>,
    pub strategies: Vec<FrameStrategy>,
    pub rounds: usize,
    pub reference_count: usize,
    pub guard_reference_leak: bool,
    pub phrase_extractor: ExtractorKind,
    /// Directory of frame media, relative to the run directory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub media_root: Option<PathBuf>,
    pub policy: PolicyConfig,
    pub sample: SampleConfig,
    pub backends: BackendsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_dir: None,
            run_id: "run".into(),
            mode: CacheMode::Record,
            seed: 0,
            styles: vec!["reverie".into()],
            strategies: vec![FrameStrategy::Central],
            rounds: DEFAULT_ROUNDS,
            reference_count: DEFAULT_REFERENCE_COUNT,
            guard_reference_leak: false,
            phrase_extractor: ExtractorKind::RuleBased,
            media_root: None,
            policy: PolicyConfig::default(),
            sample: SampleConfig::default(),
            backends: BackendsConfig::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub run_dir: Option<PathBuf>,
    pub mode: Option<CacheMode>,
    pub seed: Option<u64>,
    pub policy: Option<Policy>,
}

fn parse_env<T: std::str::FromStr>(name: &str, value: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value
        .parse()
        .map_err(|e| CliError::Usage(format!("{name}={value:?}: {e}")))
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Usage(format!("config: {e}")))
    }

    /// Reads `path`, then applies environment and flag overrides. A relative
    /// `run_dir` resolves against the config file's directory.
    pub fn load(
        path: &Path,
        env: &BTreeMap<String, String>,
        overrides: &Overrides,
    ) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.apply_env(env)?;
        cfg.apply(overrides);
        cfg.run_dir = Some(match cfg.run_dir.clone() {
            Some(d)
                if d.is_absolute()
                    || overrides.run_dir.is_some()
                    || env.contains_key("WAYFIND_RUN_DIR") =>
            {
                d
            }
            Some(d) if d != Path::new(".") => base.join(d),
            _ if base.as_os_str().is_empty() => PathBuf::from("."),
            _ => base,
        });
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self, env: &BTreeMap<String, String>) -> Result<(), CliError> {
        for (name, value) in env.iter().filter(|(k, _)| k.starts_with("WAYFIND_")) {
            match name.as_str() {
                "WAYFIND_RUN_DIR" => self.run_dir = Some(PathBuf::from(value)),
                "WAYFIND_RUN_ID" => self.run_id = value.clone(),
                "WAYFIND_MODE" => self.mode = parse_env(name, value)?,
                "WAYFIND_SEED" => self.seed = parse_env(name, value)?,
                "WAYFIND_POLICY" => self.policy.policy = parse_env(name, value)?,
                "WAYFIND_LOG" => {}
                other => {
                    let Some((backend, field)) = other["WAYFIND_".len()..].split_once('_') else {
                        log::warn!("ignoring unknown variable {other}");
                        continue;
                    };
                    let slot = match backend {
                        "CHAT" => &mut self.backends.chat,
                        "SYNTH" => &mut self.backends.synth,
                        "VQA" => &mut self.backends.vqa,
                        "GROUND" => &mut self.backends.ground,
                        "DETECT" => &mut self.backends.detect,
                        "EMBED" => &mut self.backends.embed,
                        _ => {
                            log::warn!("ignoring unknown variable {other}");
                            continue;
                        }
                    };
                    let b = slot.get_or_insert_with(|| BackendConfig::http("", ""));
                    match field {
                        "URL" => b.url = value.clone(),
                        "MODEL" => b.model = value.clone(),
                        _ => log::warn!("ignoring unknown variable {other}"),
                    }
                }
            }
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(d) = &o.run_dir {
            self.run_dir = Some(d.clone());
        }
        if let Some(m) = o.mode {
            self.mode = m;
        }
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(p) = o.policy {
            self.policy.policy = p;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) {
            return Err(CliError::Usage(format!("invalid run_id {:?}", self.run_id)));
        }
        for s in &self.styles {
            StyleProfile::builtin(s).map_err(|e| CliError::Usage(e.to_string()))?;
        }
        if self.styles.is_empty() || self.strategies.is_empty() {
            return Err(CliError::Usage(
                "styles and strategies must be non-empty".into(),
            ));
        }
        self.policy
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let named = [
            ("chat", &self.backends.chat),
            ("synth", &self.backends.synth),
            ("vqa", &self.backends.vqa),
            ("ground", &self.backends.ground),
            ("detect", &self.backends.detect),
            ("embed", &self.backends.embed),
        ];
        for (name, b) in named {
            let Some(b) = b else { continue };
            if b.kind == BackendKind::Oracle && !matches!(name, "ground" | "detect") {
                return Err(CliError::Usage(format!(
                    "backends.{name}: only grounding backends may be oracle"
                )));
            }
            if b.kind == BackendKind::Http && b.model.is_empty() {
                return Err(CliError::Usage(format!(
                    "backends.{name}: model is required"
                )));
            }
        }
        if self.mode == CacheMode::Replay && !self.run_path().join("replay_cache").is_dir() {
            return Err(CliError::Usage(format!(
                "replay mode requires an existing replay cache at {}",
                self.run_path().join("replay_cache").display()
            )));
        }
        Ok(())
    }

    pub fn run_path(&self) -> PathBuf {
        self.run_dir.clone().unwrap_or_else(|| PathBuf::from("."))
    }

    /// Digest of every setting that can change outputs. Location, cache mode
    /// and worker count are excluded.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.run_dir = None;
        c.mode = CacheMode::Record;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
