//! Pipeline stages over a run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use wayfind_core::backends::{cache_key, BackendRequest, CacheMode};
use wayfind_core::datasets::{
    import_reverie, read_episodes, read_json, read_manifest, write_episodes, write_json,
    write_manifest, GenerationManifest, ManifestEntry, RunDir,
};
use wayfind_core::env_model::{sample_episode, EnvGraph, Episode, PathSpec};
use wayfind_core::metrics::{
    evaluate_labeled, judge_against, mean_pairwise_cosine, Condition, EvalReport, LabeledOutcome,
};
use wayfind_core::navigation::{
    run_episode, validate_trace, NavTrace, OracleGrounder, PhraseExtractor, Policy, PolicyConfig,
};
use wayfind_core::synthesis::{
    caption_node, episode_seed, synthesis_turns, synthesize_from_frames, validate_style,
    FrameCaption, FrameStrategy, StyleProfile,
};
use wayfind_core::vqa_chat::Captioner;

use crate::config::{ExtractorKind, RunConfig};
use crate::error::CliError;
use crate::wiring::{Backends, Grounder};

pub struct Context<'a> {
    pub cfg: &'a RunConfig,
    pub run: RunDir,
    pub backends: &'a Backends,
    pub jobs: usize,
    pub resume: bool,
}

impl<'a> Context<'a> {
    pub fn new(cfg: &'a RunConfig, backends: &'a Backends, jobs: usize, resume: bool) -> Self {
        Context {
            cfg,
            run: RunDir::new(cfg.run_path()),
            backends,
            jobs: jobs.max(1),
            resume,
        }
    }

    fn envs(&self) -> Result<BTreeMap<String, EnvGraph>, CliError> {
        let envs = self.run.load_envs()?;
        if envs.is_empty() {
            return Err(CliError::Data(format!(
                "no environments under {}",
                self.run.envs().display()
            )));
        }
        Ok(envs)
    }

    fn episodes(&self, envs: &BTreeMap<String, EnvGraph>) -> Result<Vec<Episode>, CliError> {
        let path = self.run.episodes_file();
        if !path.exists() {
            return Err(CliError::Data(format!(
                "no episodes at {}; run sample-paths first",
                path.display()
            )));
        }
        Ok(read_episodes(&path, envs)?)
    }
}

/// Runs `f` over `items` on up to `jobs` threads, preserving input order.
pub fn run_pool<T: Sync, R: Send>(jobs: usize, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()).max(1) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                let r = f(item);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every item ran"))
        .collect()
}

/// Outcome of a stage that processes many episodes.
#[derive(Debug, Default)]
pub struct StageSummary {
    pub written: usize,
    pub skipped: usize,
    pub failures: Vec<(String, CliError)>,
}

impl StageSummary {
    pub fn finish(self, stage: &str) -> Result<StageSummary, CliError> {
        log::info!(
            "{stage}: {} written, {} skipped, {} failed",
            self.written,
            self.skipped,
            self.failures.len()
        );
        if self.failures.is_empty() {
            return Ok(self);
        }
        let mut msg = format!("{stage}: {} episode(s) failed", self.failures.len());
        for (id, e) in &self.failures {
            let _ = write!(msg, "\n  {id}: {e}");
        }
        let backend = self
            .failures
            .iter()
            .any(|(_, e)| matches!(e, CliError::Backend(_)));
        Err(if backend {
            CliError::Backend(msg)
        } else {
            CliError::Data(msg)
        })
    }
}

fn refuse_overwrite(paths: &[PathBuf]) -> Result<(), CliError> {
    match paths {
        [] => Ok(()),
        [one] => Err(CliError::Usage(format!(
            "{} exists; pass --resume to keep it",
            one.display()
        ))),
        [first, rest @ ..] => Err(CliError::Usage(format!(
            "{} and {} more output(s) exist; pass --resume to keep them",
            first.display(),
            rest.len()
        ))),
    }
}

pub fn sample_paths(ctx: &Context, count: Option<usize>) -> Result<PathBuf, CliError> {
    let path = ctx.run.episodes_file();
    if path.exists() {
        if ctx.resume {
            log::info!("{} exists; keeping it", path.display());
            return Ok(path);
        }
        refuse_overwrite(std::slice::from_ref(&path))?;
    }
    let envs = ctx.envs()?;
    let s = &ctx.cfg.sample;
    let count = count.unwrap_or(s.count);
    let mut episodes = Vec::new();
    for env in envs.values() {
        for i in 0..count as u64 {
            let spec = PathSpec::new(s.min_hops, s.max_hops, ctx.cfg.seed.wrapping_add(i))
                .map_err(|e| CliError::Usage(e.to_string()))?;
            episodes.push(sample_episode(env, &spec)?);
        }
    }
    write_episodes(&path, &episodes)?;
    log::info!("wrote {} episode(s) to {}", episodes.len(), path.display());
    Ok(path)
}

pub fn import_episodes(ctx: &Context, input: &Path, split: &str) -> Result<PathBuf, CliError> {
    let path = ctx.run.episodes_file();
    if path.exists() && !ctx.resume {
        refuse_overwrite(std::slice::from_ref(&path))?;
    }
    let envs = ctx.envs()?;
    let report = import_reverie(input, split, |scan| envs.get(scan))?;
    let episodes = report
        .records
        .iter()
        .map(|r| r.to_episode(&envs[&r.env_id]))
        .collect::<Result<Vec<_>, _>>()?;
    write_episodes(&path, &episodes)?;
    eprintln!(
        "imported {} episode(s); dropped {}",
        episodes.len(),
        report.warnings.len()
    );
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionFile {
    pub config_digest: String,
    pub episode_id: String,
    pub strategy: FrameStrategy,
    pub frames: Vec<FrameCaption>,
}

fn captioner<'b>(backends: &'b Backends, rounds: usize) -> Result<Captioner<'b>, CliError> {
    let chat = backends
        .chat
        .as_ref()
        .ok_or_else(|| CliError::Usage("backends.chat is not configured".into()))?;
    let vqa = backends
        .vqa
        .as_ref()
        .ok_or_else(|| CliError::Usage("backends.vqa is not configured".into()))?;
    Ok(Captioner {
        chat: chat.backend.as_ref(),
        vqa: vqa.backend.as_ref(),
        params: &chat.params,
        rounds,
    })
}

fn caption_episode(
    ctx: &Context,
    env: &EnvGraph,
    episode: &Episode,
    strategy: FrameStrategy,
) -> Result<Vec<FrameCaption>, CliError> {
    let cap = captioner(ctx.backends, ctx.cfg.rounds)?;
    if episode.path.len() < 2 {
        return Err(CliError::Data(format!(
            "episode {} has fewer than 2 nodes",
            episode.episode_id
        )));
    }
    // Frames are independent, so they share the worker budget of one episode.
    let indices: Vec<usize> = (0..episode.path.len()).collect();
    let frames = run_pool(ctx.jobs, &indices, |&i| {
        caption_node(env, &episode.path, i, strategy, &cap)
    });
    let frames = frames.into_iter().collect::<Result<Vec<_>, _>>()?;
    write_json(
        &ctx.run.caption_file(&episode.episode_id, strategy),
        &CaptionFile {
            config_digest: ctx.cfg.digest(),
            episode_id: episode.episode_id.clone(),
            strategy,
            frames: frames.clone(),
        },
    )?;
    Ok(frames)
}

/// Loads cached captions for an episode, captioning it when absent.
fn frames_for(
    ctx: &Context,
    env: &EnvGraph,
    episode: &Episode,
    strategy: FrameStrategy,
) -> Result<Vec<FrameCaption>, CliError> {
    let path = ctx.run.caption_file(&episode.episode_id, strategy);
    if path.exists() {
        let file: CaptionFile = read_json(&path)?;
        return Ok(file.frames);
    }
    caption_episode(ctx, env, episode, strategy)
}

pub fn caption(ctx: &Context) -> Result<StageSummary, CliError> {
    let envs = ctx.envs()?;
    let episodes = ctx.episodes(&envs)?;
    let mut work = Vec::new();
    let mut existing = Vec::new();
    let mut summary = StageSummary::default();
    for ep in &episodes {
        for &strategy in &ctx.cfg.strategies {
            let path = ctx.run.caption_file(&ep.episode_id, strategy);
            if path.exists() {
                existing.push(path);
                summary.skipped += 1;
            } else {
                work.push((ep, strategy));
            }
        }
    }
    if !ctx.resume {
        refuse_overwrite(&existing)?;
    }
    captioner(ctx.backends, ctx.cfg.rounds)?;
    let results = run_pool(ctx.jobs, &work, |(ep, strategy)| {
        caption_episode(ctx, &envs[&ep.env_id], ep, *strategy)
    });
    for ((ep, strategy), r) in work.iter().zip(results) {
        match r {
            Ok(_) => summary.written += 1,
            Err(e) => summary
                .failures
                .push((format!("{} [{strategy}]", ep.episode_id), e)),
        }
    }
    summary.finish("caption")
}

/// Timestamp of the cached synthesis response, so replayed manifests match the recording.
fn entry_timestamp(ctx: &Context, turns_key: BackendRequest) -> String {
    if let (Some(cache), true) = (&ctx.backends.cache, ctx.cfg.mode != CacheMode::Live) {
        if let Ok(Some(entry)) = cache.load(&cache_key(&turns_key)) {
            return entry.created_at.to_rfc3339();
        }
    }
    chrono::Utc::now().to_rfc3339()
}

fn generate_episode(
    ctx: &Context,
    env: &EnvGraph,
    episode: &Episode,
    todo: &[(FrameStrategy, String)],
) -> Result<Vec<ManifestEntry>, CliError> {
    let synth = ctx
        .backends
        .synth
        .as_ref()
        .ok_or_else(|| CliError::Usage("backends.synth is not configured".into()))?;
    let mut entries = Vec::new();
    let mut frames_by_strategy: BTreeMap<FrameStrategy, Vec<FrameCaption>> = BTreeMap::new();
    for (strategy, style_name) in todo {
        let frames = match frames_by_strategy.get(strategy) {
            Some(f) => f,
            None => {
                let f = frames_for(ctx, env, episode, *strategy)?;
                frames_by_strategy.entry(*strategy).or_insert(f)
            }
        };
        let style = StyleProfile::builtin(style_name)
            .map_err(|e| CliError::Usage(e.to_string()))?
            .select_references(
                ctx.cfg.reference_count,
                episode_seed(ctx.cfg.seed, &episode.episode_id),
            );
        let out = synthesize_from_frames(
            &episode.episode_id,
            frames,
            &style,
            *strategy,
            ctx.cfg.guard_reference_leak,
            synth.backend.as_ref(),
            &synth.params,
        )?;
        let violations = validate_style(&out.instruction, &style)
            .iter()
            .map(ToString::to_string)
            .collect();
        let request = BackendRequest::chat(&synthesis_turns(&out.bundle), &synth.params);
        entries.push(ManifestEntry {
            episode_id: episode.episode_id.clone(),
            style: style_name.clone(),
            strategy: *strategy,
            text: out.instruction.text,
            prompt_digest: out.bundle.digest(),
            models: ctx.backends.models(),
            created_at: entry_timestamp(ctx, request),
            style_violations: violations,
        });
    }
    Ok(entries)
}

pub fn generate(ctx: &Context) -> Result<(PathBuf, StageSummary), CliError> {
    let envs = ctx.envs()?;
    let episodes = ctx.episodes(&envs)?;
    let path = ctx.run.manifest_file(&ctx.cfg.run_id);
    let mut manifest = if path.exists() {
        if !ctx.resume {
            refuse_overwrite(std::slice::from_ref(&path))?;
        }
        let m = read_manifest(&path)?;
        if m.run_id != ctx.cfg.run_id {
            return Err(CliError::Data(format!(
                "{} belongs to run {:?}",
                path.display(),
                m.run_id
            )));
        }
        m
    } else {
        GenerationManifest::new(&ctx.cfg.run_id, ctx.cfg.digest())
    };

    let mut summary = StageSummary::default();
    let mut work: Vec<(&Episode, Vec<(FrameStrategy, String)>)> = Vec::new();
    for ep in &episodes {
        let mut todo = Vec::new();
        for &strategy in &ctx.cfg.strategies {
            for style in &ctx.cfg.styles {
                if manifest.contains(&ep.episode_id, style, strategy) {
                    summary.skipped += 1;
                } else {
                    todo.push((strategy, style.clone()));
                }
            }
        }
        if !todo.is_empty() {
            work.push((ep, todo));
        }
    }
    if !work.is_empty() {
        captioner(ctx.backends, ctx.cfg.rounds)?;
        if ctx.backends.synth.is_none() {
            return Err(CliError::Usage("backends.synth is not configured".into()));
        }
    }
    // Episodes run in parallel; frames within an episode stay sequential here.
    let inner = Context {
        jobs: 1,
        cfg: ctx.cfg,
        run: ctx.run.clone(),
        backends: ctx.backends,
        resume: ctx.resume,
    };
    let results = run_pool(ctx.jobs, &work, |(ep, todo)| {
        generate_episode(&inner, &envs[&ep.env_id], ep, todo)
    });
    for ((ep, _), r) in work.iter().zip(results) {
        match r {
            Ok(entries) => {
                summary.written += entries.len();
                entries.into_iter().for_each(|e| manifest.upsert(e));
            }
            Err(e) => summary.failures.push((ep.episode_id.clone(), e)),
        }
    }
    manifest.config_digest = ctx.cfg.digest();
    write_manifest(&manifest, &path)?;
    summary.finish("generate").map(|s| (path, s))
}

/// Instruction source for the navigate stage.
#[derive(Debug, Clone)]
pub enum InstructionSource {
    Human,
    Manifest(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub config_digest: String,
    pub condition: Condition,
    pub style: Option<String>,
    pub policy_config: PolicyConfig,
    pub trace: NavTrace,
}

fn condition_of(strategy: FrameStrategy) -> Condition {
    match strategy {
        FrameStrategy::Central => Condition::Central,
        FrameStrategy::Panoramic => Condition::Panoramic,
    }
}

pub fn trace_path(
    run: &RunDir,
    policy: Policy,
    condition: &Condition,
    style: Option<&str>,
    episode_id: &str,
) -> PathBuf {
    run.traces()
        .join(policy.as_str())
        .join(condition.as_str())
        .join(style.unwrap_or("human"))
        .join(format!("{episode_id}.json"))
}

struct NavItem<'e> {
    episode: &'e Episode,
    instruction: String,
    condition: Condition,
    style: Option<String>,
    path: PathBuf,
}

pub fn navigate(
    ctx: &Context,
    source: &InstructionSource,
) -> Result<(PathBuf, StageSummary), CliError> {
    let policy = ctx.cfg.policy.policy;
    let grounder = match policy {
        Policy::GlipNav => ctx.backends.detect.clone(),
        _ => ctx.backends.ground.clone(),
    }
    .ok_or_else(|| {
        let which = if policy == Policy::GlipNav {
            "detect"
        } else {
            "ground"
        };
        CliError::Usage(format!("{policy} needs backends.{which}"))
    })?;
    let envs = ctx.envs()?;
    let episodes = ctx.episodes(&envs)?;
    let by_id: BTreeMap<&str, &Episode> = episodes
        .iter()
        .map(|e| (e.episode_id.as_str(), e))
        .collect();

    let mut items = Vec::new();
    match source {
        InstructionSource::Human => {
            for ep in &episodes {
                match ep.reference_instructions.first() {
                    Some(text) => items.push(NavItem {
                        episode: ep,
                        instruction: text.clone(),
                        condition: Condition::Original,
                        style: None,
                        path: trace_path(
                            &ctx.run,
                            policy,
                            &Condition::Original,
                            None,
                            &ep.episode_id,
                        ),
                    }),
                    None => log::warn!(
                        "episode {} has no human instruction; skipped",
                        ep.episode_id
                    ),
                }
            }
        }
        InstructionSource::Manifest(path) => {
            if !path.exists() {
                return Err(CliError::Usage(format!(
                    "manifest {} not found; run generate first",
                    path.display()
                )));
            }
            let manifest = read_manifest(path)?;
            for e in &manifest.entries {
                let ep = by_id.get(e.episode_id.as_str()).ok_or_else(|| {
                    CliError::Data(format!("manifest names unknown episode {:?}", e.episode_id))
                })?;
                let condition = condition_of(e.strategy);
                items.push(NavItem {
                    episode: ep,
                    instruction: e.text.clone(),
                    path: trace_path(&ctx.run, policy, &condition, Some(&e.style), &e.episode_id),
                    condition,
                    style: Some(e.style.clone()),
                });
            }
        }
    }

    let mut summary = StageSummary::default();
    let existing: Vec<PathBuf> = items
        .iter()
        .filter(|i| i.path.exists())
        .map(|i| i.path.clone())
        .collect();
    if !ctx.resume {
        refuse_overwrite(&existing)?;
    }
    summary.skipped = existing.len();
    items.retain(|i| !i.path.exists());

    let extractor = match ctx.cfg.phrase_extractor {
        ExtractorKind::RuleBased => PhraseExtractor::RuleBased,
        ExtractorKind::Chat => {
            let chat = ctx.backends.chat.as_ref().ok_or_else(|| {
                CliError::Usage("chat phrase extraction needs backends.chat".into())
            })?;
            PhraseExtractor::Chat {
                chat: chat.backend.as_ref(),
                params: &chat.params,
            }
        }
    };
    let config = ctx.cfg.policy;
    let digest = ctx.cfg.digest();
    let results = run_pool(ctx.jobs, &items, |item| -> Result<(), CliError> {
        let env = &envs[&item.episode.env_id];
        let trace = match &grounder {
            Grounder::Model(g) => run_episode(
                env,
                item.episode,
                &item.instruction,
                &config,
                g.as_ref(),
                extractor,
            )?,
            Grounder::Oracle(kind) => {
                let oracle = OracleGrounder::new(env, item.episode.goal())?.with_kind(*kind);
                run_episode(
                    env,
                    item.episode,
                    &item.instruction,
                    &config,
                    &oracle,
                    extractor,
                )?
            }
        };
        validate_trace(env, item.episode, &trace, &config)
            .map_err(|e| CliError::Data(format!("invalid trace: {e}")))?;
        write_json(
            &item.path,
            &TraceFile {
                config_digest: digest.clone(),
                condition: item.condition.clone(),
                style: item.style.clone(),
                policy_config: config,
                trace,
            },
        )?;
        Ok(())
    });
    for (item, r) in items.iter().zip(results) {
        match r {
            Ok(()) => summary.written += 1,
            Err(e) => summary.failures.push((item.episode.episode_id.clone(), e)),
        }
    }
    let dir = ctx.run.traces().join(policy.as_str());
    summary.finish("navigate").map(|s| (dir, s))
}

fn trace_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in walkdir::WalkDir::new(dir).sort_by_file_name() {
        let entry = entry.map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        if entry.file_type().is_file() && entry.path().extension().is_some_and(|x| x == "json") {
            out.push(entry.into_path());
        }
    }
    Ok(out)
}

pub fn report(ctx: &Context) -> Result<(EvalReport, String), CliError> {
    let files = trace_files(&ctx.run.traces())?;
    if files.is_empty() {
        return Err(CliError::Data(format!(
            "nothing to report: no traces under {}",
            ctx.run.traces().display()
        )));
    }
    let envs = ctx.envs()?;
    let episodes = ctx.episodes(&envs)?;
    let by_id: BTreeMap<&str, &Episode> = episodes
        .iter()
        .map(|e| (e.episode_id.as_str(), e))
        .collect();
    let radius = ctx.cfg.policy.success_radius;

    let mut outcomes = Vec::new();
    for f in &files {
        let tf: TraceFile = read_json(f)?;
        let ep = by_id.get(tf.trace.episode_id.as_str()).ok_or_else(|| {
            CliError::Data(format!(
                "{}: unknown episode {:?}",
                f.display(),
                tf.trace.episode_id
            ))
        })?;
        let outcome = judge_against(&envs[&ep.env_id], ep, &tf.trace, radius)?;
        outcomes.push(LabeledOutcome {
            policy: tf.trace.policy,
            condition: tf.condition,
            style: tf.style,
            outcome,
        });
    }
    let mut report = evaluate_labeled(&outcomes, radius)?;
    report.config_digest = ctx.cfg.digest();

    let manifest_path = ctx.run.manifest_file(&ctx.cfg.run_id);
    if let (Some(embed), true) = (&ctx.backends.embed, manifest_path.exists()) {
        let manifest = read_manifest(&manifest_path)?;
        let mut pairs: BTreeMap<String, (Vec<String>, Vec<String>)> = BTreeMap::new();
        for e in &manifest.entries {
            let Some(human) = by_id
                .get(e.episode_id.as_str())
                .and_then(|ep| ep.reference_instructions.first())
            else {
                continue;
            };
            let slot = pairs
                .entry(format!("{}/{}", e.strategy, e.style))
                .or_default();
            slot.0.push(e.text.clone());
            slot.1.push(human.clone());
        }
        for (key, (generated, human)) in pairs {
            let v = mean_pairwise_cosine(&generated, &human, embed.backend.as_ref())?;
            report.mean_pairwise_cosine.insert(key, v);
        }
    }

    let table = report.render_table();
    write_json(&ctx.run.reports().join("report.json"), &report)?;
    wayfind_core::datasets::write_atomic(&ctx.run.reports().join("report.txt"), table.as_bytes())?;
    Ok((report, table))
}
