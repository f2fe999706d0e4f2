//! Command-line front end for the instruction synthesis and navigation pipeline.

pub mod config;
pub mod error;
pub mod pipeline;
pub mod wiring;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use wayfind_core::backends::{CacheKey, CacheMode, ReplayCache};
use wayfind_core::navigation::Policy;

use crate::config::{Overrides, RunConfig};
use crate::error::CliError;
use crate::pipeline::{Context, InstructionSource};
use crate::wiring::{Backends, RawBackends};

#[derive(Debug, Parser)]
#[command(
    name = "wayfind",
    version,
    about = "Synthesize navigation instructions and evaluate navigation policies"
)]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory; overrides the config file.
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    /// Cache mode: live, record or replay.
    #[arg(long, global = true)]
    pub mode: Option<CacheMode>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true, default_value_t = 4)]
    pub jobs: usize,
    /// Keep existing outputs and only fill in what is missing.
    #[arg(long, global = true)]
    pub resume: bool,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample start/goal paths from every environment in the run.
    SamplePaths {
        /// Episodes per environment.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Import episodes from a REVERIE-format annotation file.
    ImportReverie {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "val_unseen")]
        split: String,
    },
    /// Caption the frames of every episode.
    Caption,
    /// Generate instructions for every episode, style and frame strategy.
    Generate,
    /// Run a navigation policy on human or generated instructions.
    Navigate(NavigateArgs),
    /// Score every trace in the run and print the results table.
    Report,
    /// Inspect the replay cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
    /// Print the resolved configuration and its digest.
    ShowConfig,
}

#[derive(Debug, Args)]
pub struct NavigateArgs {
    #[arg(long)]
    pub policy: Option<Policy>,
    /// Use the episodes' human instructions.
    #[arg(long, conflicts_with = "manifest")]
    pub human: bool,
    /// Use the instructions in a generation manifest. Defaults to the run's manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    /// List cache entries.
    Ls {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
    /// Check that every entry's key matches its stored request.
    Verify {
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

fn overrides(cli: &Cli) -> Overrides {
    let policy = match &cli.command {
        Command::Navigate(n) => n.policy,
        _ => None,
    };
    Overrides {
        run_dir: cli.run_dir.clone(),
        mode: cli.mode,
        seed: cli.seed,
        policy,
    }
}

pub fn load_config(cli: &Cli, env: &BTreeMap<String, String>) -> Result<RunConfig, CliError> {
    let o = overrides(cli);
    match &cli.config {
        Some(path) => RunConfig::load(path, env, &o),
        None => {
            let mut cfg = RunConfig::default();
            cfg.apply_env(env)?;
            cfg.apply(&o);
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn cache_dir(cli_dir: &Option<PathBuf>, cfg: &RunConfig) -> PathBuf {
    cli_dir
        .clone()
        .unwrap_or_else(|| cfg.run_path().join("replay_cache"))
}

fn cache_command(action: &CacheAction, cfg: &RunConfig) -> Result<(), CliError> {
    match action {
        CacheAction::Ls { dir } => {
            let cache = ReplayCache::open_existing(cache_dir(dir, cfg))?;
            for e in cache.entries()? {
                println!(
                    "{}  {:<6} {}  {}",
                    e.key,
                    e.kind.as_str(),
                    e.params.model,
                    e.created_at.to_rfc3339()
                );
            }
            Ok(())
        }
        CacheAction::Verify { dir } => {
            let dir = cache_dir(dir, cfg);
            let files = wayfind_core::datasets::json_files(&dir)?;
            let mut bad = Vec::new();
            for path in &files {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let entry: Result<wayfind_core::backends::CacheEntry, _> =
                    wayfind_core::datasets::read_json(path);
                match entry {
                    Err(e) => bad.push(format!("{}: {e}", path.display())),
                    Ok(e) if !e.verify() => {
                        bad.push(format!("{}: key does not match request", path.display()))
                    }
                    Ok(e) if e.key != stem || CacheKey::from_hex(stem).is_none() => bad.push(
                        format!("{}: file name does not match key {}", path.display(), e.key),
                    ),
                    Ok(_) => {}
                }
            }
            println!("{} entries, {} bad", files.len(), bad.len());
            if bad.is_empty() {
                Ok(())
            } else {
                Err(CliError::Data(bad.join("\n")))
            }
        }
    }
}

/// Runs a parsed command. `raw` replaces the HTTP backends, mostly for tests.
pub fn execute(
    cli: &Cli,
    env: &BTreeMap<String, String>,
    raw: Option<RawBackends>,
) -> Result<(), CliError> {
    let cfg = load_config(cli, env)?;
    if let Command::Cache { action } = &cli.command {
        return cache_command(action, &cfg);
    }
    if let Command::ShowConfig = &cli.command {
        let text = toml::to_string_pretty(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
        println!("{text}\n# digest: {}", cfg.digest());
        return Ok(());
    }
    let backends = match raw {
        Some(raw) => {
            let cache = wiring::open_cache(cfg.mode, &cfg.run_path().join("replay_cache"))?;
            Backends::assemble(cfg.mode, cache, raw, &cfg.backends)?
        }
        None => Backends::from_config(&cfg, env)?,
    };
    let ctx = Context::new(&cfg, &backends, cli.jobs, cli.resume);
    match &cli.command {
        Command::SamplePaths { count } => {
            let path = pipeline::sample_paths(&ctx, *count)?;
            println!("{}", path.display());
        }
        Command::ImportReverie { input, split } => {
            let path = pipeline::import_episodes(&ctx, input, split)?;
            println!("{}", path.display());
        }
        Command::Caption => {
            let s = pipeline::caption(&ctx)?;
            println!("captioned {} (skipped {})", s.written, s.skipped);
        }
        Command::Generate => {
            let (path, s) = pipeline::generate(&ctx)?;
            println!(
                "{}: {} new entries (skipped {})",
                path.display(),
                s.written,
                s.skipped
            );
        }
        Command::Navigate(n) => {
            let source = if n.human {
                InstructionSource::Human
            } else {
                InstructionSource::Manifest(
                    n.manifest
                        .clone()
                        .unwrap_or_else(|| ctx.run.manifest_file(&cfg.run_id)),
                )
            };
            let (dir, s) = pipeline::navigate(&ctx, &source)?;
            println!(
                "{}: {} traces (skipped {})",
                dir.display(),
                s.written,
                s.skipped
            );
        }
        Command::Report => {
            let (_, table) = pipeline::report(&ctx)?;
            print!("{table}");
        }
        Command::Cache { .. } | Command::ShowConfig => unreachable!(),
    }
    Ok(())
}

fn init_logging(verbose: u8, env: &BTreeMap<String, String>) {
    let default = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let filter = env
        .get("WAYFIND_LOG")
        .map(String::as_str)
        .unwrap_or(default);
    let _ = env_logger::Builder::new()
        .parse_filters(filter)
        .target(env_logger::Target::Stderr)
        .try_init();
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I, env: &BTreeMap<String, String>) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(cli.verbose, env);
    match execute(&cli, env, None) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
