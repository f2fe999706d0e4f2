//! Builds the model backends for a run, wrapped in the record/replay cache.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use wayfind_core::backends::http::{
    Endpoint, HttpChat, HttpEmbed, HttpGround, HttpVqa, MediaResolver,
};
use wayfind_core::backends::{
    CacheLayer, CacheMode, ChatBackend, DecodeParams, EmbedBackend, GroundBackend, GroundingKind,
    ReplayCache, VqaBackend,
};

use crate::config::{BackendConfig, BackendKind, BackendsConfig, RunConfig};
use crate::error::CliError;

/// Unwrapped backends; any may be absent.
#[derive(Default, Clone)]
pub struct RawBackends {
    pub chat: Option<Arc<dyn ChatBackend>>,
    pub synth: Option<Arc<dyn ChatBackend>>,
    pub vqa: Option<Arc<dyn VqaBackend>>,
    pub ground: Option<Arc<dyn GroundBackend>>,
    pub detect: Option<Arc<dyn GroundBackend>>,
    pub embed: Option<Arc<dyn EmbedBackend>>,
}

#[derive(Clone)]
pub enum Grounder {
    Model(Arc<dyn GroundBackend>),
    /// Built per episode from its goal.
    Oracle(GroundingKind),
}

pub struct Role<T: ?Sized> {
    pub backend: Arc<T>,
    pub params: DecodeParams,
}

impl<T: ?Sized> Clone for Role<T> {
    fn clone(&self) -> Self {
        Role {
            backend: self.backend.clone(),
            params: self.params.clone(),
        }
    }
}

/// Backends as the pipeline stages see them.
#[derive(Clone, Default)]
pub struct Backends {
    pub chat: Option<Role<dyn ChatBackend>>,
    pub synth: Option<Role<dyn ChatBackend>>,
    pub vqa: Option<Role<dyn VqaBackend>>,
    pub ground: Option<Grounder>,
    pub detect: Option<Grounder>,
    pub embed: Option<Role<dyn EmbedBackend>>,
    pub cache: Option<Arc<ReplayCache>>,
}

fn params_of(b: &BackendConfig) -> DecodeParams {
    DecodeParams {
        max_tokens: b.max_tokens,
        model: b.model.clone(),
        temperature: b.temperature,
    }
}

fn wrap<B>(
    mode: CacheMode,
    inner: Option<B>,
    cache: &Option<Arc<ReplayCache>>,
    params: DecodeParams,
    name: &str,
) -> Result<CacheLayer<B>, CliError> {
    let missing = || {
        CliError::Usage(format!(
            "backends.{name}: no backend available in {mode:?} mode"
        ))
    };
    Ok(match (mode, cache) {
        (CacheMode::Replay, Some(c)) => CacheLayer::replay(c.clone(), params),
        (CacheMode::Record, Some(c)) => {
            CacheLayer::record(inner.ok_or_else(missing)?, c.clone(), params)
        }
        _ => CacheLayer::live(inner.ok_or_else(missing)?, params),
    })
}

impl Backends {
    /// Wraps `raw` according to `mode`; only roles present in `specs` are wired.
    pub fn assemble(
        mode: CacheMode,
        cache: Option<Arc<ReplayCache>>,
        raw: RawBackends,
        specs: &BackendsConfig,
    ) -> Result<Self, CliError> {
        let mut out = Backends {
            cache: cache.clone(),
            ..Default::default()
        };
        if let Some(spec) = &specs.chat {
            let p = params_of(spec);
            let layer = wrap(mode, raw.chat, &cache, p.clone(), "chat")?;
            out.chat = Some(Role {
                backend: Arc::new(layer),
                params: p,
            });
        }
        if let Some(spec) = &specs.synth {
            let p = params_of(spec);
            let layer = wrap(mode, raw.synth, &cache, p.clone(), "synth")?;
            out.synth = Some(Role {
                backend: Arc::new(layer),
                params: p,
            });
        }
        if let Some(spec) = &specs.vqa {
            let p = params_of(spec);
            let layer = wrap(mode, raw.vqa, &cache, p.clone(), "vqa")?;
            out.vqa = Some(Role {
                backend: Arc::new(layer),
                params: p,
            });
        }
        let grounder = |spec: &Option<BackendConfig>,
                        inner: Option<Arc<dyn GroundBackend>>,
                        kind,
                        name|
         -> Result<Option<Grounder>, CliError> {
            let Some(spec) = spec else { return Ok(None) };
            if spec.kind == BackendKind::Oracle {
                return Ok(Some(Grounder::Oracle(kind)));
            }
            let layer = wrap(mode, inner, &cache, params_of(spec), name)?.with_ground_kind(kind);
            Ok(Some(Grounder::Model(Arc::new(layer))))
        };
        out.ground = grounder(
            &specs.ground,
            raw.ground,
            GroundingKind::Similarity,
            "ground",
        )?;
        out.detect = grounder(
            &specs.detect,
            raw.detect,
            GroundingKind::Detection,
            "detect",
        )?;
        if let Some(spec) = &specs.embed {
            let p = params_of(spec);
            let layer = wrap(mode, raw.embed, &cache, p.clone(), "embed")?;
            out.embed = Some(Role {
                backend: Arc::new(layer),
                params: p,
            });
        }
        Ok(out)
    }

    /// HTTP backends for every configured role, cached per the run mode.
    pub fn from_config(
        cfg: &RunConfig,
        env: &std::collections::BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let run = cfg.run_path();
        let cache = open_cache(cfg.mode, &run.join("replay_cache"))?;
        let media = MediaResolver::new(cfg.media_root.as_ref().map(|m| run.join(m)));
        let mut raw = RawBackends::default();
        if cfg.mode != CacheMode::Replay {
            let endpoint = |b: &BackendConfig, name: &str| -> Result<Endpoint, CliError> {
                if b.url.is_empty() {
                    return Err(CliError::Usage(format!(
                        "backends.{name}: url is required in {:?} mode",
                        cfg.mode
                    )));
                }
                let key = match &b.api_key_env {
                    Some(var) => Some(env.get(var).cloned().ok_or_else(|| {
                        CliError::Usage(format!(
                            "backends.{name}: environment variable {var} is not set"
                        ))
                    })?),
                    None => None,
                };
                let mut ep = Endpoint::new(&b.url, &b.model).with_api_key(key);
                ep.timeout = Duration::from_secs(b.timeout_secs);
                Ok(ep)
            };
            let b = &cfg.backends;
            if let Some(s) = &b.chat {
                raw.chat = Some(Arc::new(HttpChat::new(endpoint(s, "chat")?)));
            }
            if let Some(s) = &b.synth {
                raw.synth = Some(Arc::new(HttpChat::new(endpoint(s, "synth")?)));
            }
            if let Some(s) = &b.vqa {
                raw.vqa = Some(Arc::new(HttpVqa::new(endpoint(s, "vqa")?, media.clone())));
            }
            if let Some(s) = b.ground.as_ref().filter(|s| s.kind == BackendKind::Http) {
                raw.ground = Some(Arc::new(HttpGround::new(
                    endpoint(s, "ground")?,
                    media.clone(),
                    GroundingKind::Similarity,
                )));
            }
            if let Some(s) = b.detect.as_ref().filter(|s| s.kind == BackendKind::Http) {
                raw.detect = Some(Arc::new(HttpGround::new(
                    endpoint(s, "detect")?,
                    media.clone(),
                    GroundingKind::Detection,
                )));
            }
            if let Some(s) = &b.embed {
                raw.embed = Some(Arc::new(HttpEmbed::new(endpoint(s, "embed")?)));
            }
        }
        Self::assemble(cfg.mode, cache, raw, &cfg.backends)
    }

    pub fn models(&self) -> std::collections::BTreeMap<String, String> {
        let mut m = std::collections::BTreeMap::new();
        for (name, role) in [("chat", &self.chat), ("synth", &self.synth)] {
            if let Some(r) = role {
                m.insert(name.to_string(), r.params.model.clone());
            }
        }
        if let Some(r) = &self.vqa {
            m.insert("vqa".to_string(), r.params.model.clone());
        }
        m
    }
}

pub fn open_cache(mode: CacheMode, dir: &Path) -> Result<Option<Arc<ReplayCache>>, CliError> {
    Ok(match mode {
        CacheMode::Live => None,
        CacheMode::Record => Some(Arc::new(ReplayCache::open(dir)?)),
        CacheMode::Replay => Some(Arc::new(ReplayCache::open_existing(dir)?)),
    })
}
