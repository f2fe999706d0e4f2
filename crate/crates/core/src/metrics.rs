//! Success metrics for navigation traces and instruction similarity.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{embed_text, BackendError, EmbedBackend};
use crate::env_model::{euclidean, EnvError, EnvGraph, Episode};
use crate::navigation::{NavTrace, Policy, StepAction};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("no outcomes to evaluate")]
    Empty,
    #[error("length mismatch: {generated} generated vs {references} references")]
    LengthMismatch { generated: usize, references: usize },
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub episode_id: String,
    pub success: bool,
    pub oracle_success: bool,
    pub taken_length: f64,
    pub geodesic_length: f64,
}

/// Scores a trace against the episode goal.
///
/// Backtracks are charged the shortest-path distance back to their target.
pub fn judge_episode(
    env: &EnvGraph,
    trace: &NavTrace,
    goal: &str,
    radius: f64,
) -> Result<EpisodeOutcome, MetricsError> {
    let goal_pos = env.node(goal)?.position;
    let start = trace
        .visited
        .first()
        .ok_or_else(|| MetricsError::InvalidTrace("empty visited list".into()))?;
    let within = |id: &str| -> Result<bool, MetricsError> {
        Ok(euclidean(&env.node(id)?.position, &goal_pos) <= radius)
    };

    let mut taken = 0.0;
    for step in &trace.steps {
        let Some(target) = &step.target else { continue };
        taken += match step.action {
            StepAction::Move => env.edge_length(&step.node, target).ok_or_else(|| {
                MetricsError::InvalidTrace(format!("{} -> {target} is not an edge", step.node))
            })?,
            StepAction::Backtrack => env.shortest_path(&step.node, target)?.length,
            _ => 0.0,
        };
    }
    let mut oracle_success = false;
    for id in &trace.visited {
        if within(id)? {
            oracle_success = true;
            break;
        }
    }
    Ok(EpisodeOutcome {
        episode_id: trace.episode_id.clone(),
        success: within(&trace.stop_node)?,
        oracle_success,
        taken_length: taken,
        geodesic_length: env.shortest_path(start, goal)?.length,
    })
}

/// Like [`judge_episode`], using the episode's goal and recorded geodesic.
pub fn judge_against(
    env: &EnvGraph,
    episode: &Episode,
    trace: &NavTrace,
    radius: f64,
) -> Result<EpisodeOutcome, MetricsError> {
    let mut outcome = judge_episode(env, trace, episode.goal(), radius)?;
    outcome.geodesic_length = episode.geodesic_length;
    Ok(outcome)
}

fn spl_term(o: &EpisodeOutcome) -> f64 {
    if !o.success {
        return 0.0;
    }
    let denom = o.taken_length.max(o.geodesic_length);
    if denom <= 0.0 {
        1.0
    } else {
        o.geodesic_length / denom
    }
}

pub fn spl(outcomes: &[EpisodeOutcome]) -> Result<f64, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(outcomes.iter().map(spl_term).sum::<f64>() / outcomes.len() as f64)
}

/// SR, OSR and SPL as fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub n: usize,
    pub sr: f64,
    pub osr: f64,
    pub spl: f64,
}

impl Scores {
    pub fn of(outcomes: &[EpisodeOutcome]) -> Result<Self, MetricsError> {
        let n = outcomes.len();
        if n == 0 {
            return Err(MetricsError::Empty);
        }
        let frac = |f: fn(&EpisodeOutcome) -> bool| {
            outcomes.iter().filter(|o| f(o)).count() as f64 / n as f64
        };
        Ok(Scores {
            n,
            sr: frac(|o| o.success),
            osr: frac(|o| o.oracle_success),
            spl: spl(outcomes)?,
        })
    }

    pub fn sr_percent(&self) -> String {
        format!("{:.2}", self.sr * 100.0)
    }

    pub fn osr_percent(&self) -> String {
        format!("{:.2}", self.osr * 100.0)
    }

    pub fn spl_fixed(&self) -> String {
        format!("{:.2}", self.spl)
    }

    pub fn is_ordered(&self) -> bool {
        self.spl <= self.sr + 1e-12 && self.sr <= self.osr + 1e-12
    }
}

/// Instruction source of an evaluated trace.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Original,
    Central,
    Panoramic,
}

impl Condition {
    pub const ALL: [Condition; 3] = [
        Condition::Original,
        Condition::Central,
        Condition::Panoramic,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Original => "original",
            Condition::Central => "central",
            Condition::Panoramic => "panoramic",
        }
    }

    pub fn title(&self) -> &'static str {
        match self {
            Condition::Original => "Original",
            Condition::Central => "Generated (Central)",
            Condition::Panoramic => "Generated (Panoramic)",
        }
    }
}

/// Outcome tagged with the policy, condition and instruction style that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledOutcome {
    pub policy: Policy,
    pub condition: Condition,
    /// Instruction style; `None` for human instructions.
    pub style: Option<String>,
    pub outcome: EpisodeOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Breakdown {
    pub policy: Policy,
    pub condition: Condition,
    pub style: Option<String>,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_episodes: usize,
    pub overall: Scores,
    pub breakdowns: Vec<Breakdown>,
    pub success_radius: f64,
    #[serde(default)]
    pub config_digest: String,
    #[serde(default)]
    pub mean_pairwise_cosine: BTreeMap<String, f64>,
}

pub fn evaluate(outcomes: &[EpisodeOutcome]) -> Result<Scores, MetricsError> {
    Scores::of(outcomes)
}

/// Aggregates labeled outcomes overall and per (policy, condition, style).
pub fn evaluate_labeled(
    outcomes: &[LabeledOutcome],
    success_radius: f64,
) -> Result<EvalReport, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::Empty);
    }
    let all: Vec<EpisodeOutcome> = outcomes.iter().map(|l| l.outcome.clone()).collect();
    let mut groups: BTreeMap<(Policy, Condition, Option<String>), Vec<EpisodeOutcome>> =
        BTreeMap::new();
    for l in outcomes {
        groups
            .entry((l.policy, l.condition.clone(), l.style.clone()))
            .or_default()
            .push(l.outcome.clone());
    }
    let breakdowns = groups
        .into_iter()
        .map(|((policy, condition, style), os)| {
            Ok(Breakdown {
                policy,
                condition,
                style,
                scores: Scores::of(&os)?,
            })
        })
        .collect::<Result<Vec<_>, MetricsError>>()?;
    Ok(EvalReport {
        n_episodes: all.len(),
        overall: Scores::of(&all)?,
        breakdowns,
        success_radius,
        config_digest: String::new(),
        mean_pairwise_cosine: BTreeMap::new(),
    })
}

fn policy_title(p: Policy) -> &'static str {
    match p {
        Policy::ClipNav => "CLIP-Nav",
        Policy::SeqClipNav => "Seq-CLIP-Nav",
        Policy::GlipNav => "GLIP-Nav",
    }
}

impl EvalReport {
    /// Aligned text table: one row per policy (and generated style), with
    /// SR/OSR/SPL under each instruction condition.
    pub fn render_table(&self) -> String {
        let mut rows: Vec<(Policy, Option<String>)> = Vec::new();
        let mut policies: Vec<Policy> = self.breakdowns.iter().map(|b| b.policy).collect();
        policies.dedup();
        for p in policies {
            let styles: Vec<Option<String>> = {
                let mut s: Vec<Option<String>> = self
                    .breakdowns
                    .iter()
                    .filter(|b| b.policy == p && b.condition != Condition::Original)
                    .map(|b| b.style.clone())
                    .collect();
                s.sort();
                s.dedup();
                s
            };
            if styles.is_empty() {
                rows.push((p, None));
            } else {
                rows.extend(styles.into_iter().map(|s| (p, s)));
            }
        }

        let cell = |p: Policy, c: &Condition, style: &Option<String>| -> [String; 3] {
            let found = self.breakdowns.iter().find(|b| {
                b.policy == p
                    && &b.condition == c
                    && (*c == Condition::Original || &b.style == style)
            });
            match found {
                Some(b) => [
                    b.scores.sr_percent(),
                    b.scores.osr_percent(),
                    b.scores.spl_fixed(),
                ],
                None => ["-".into(), "-".into(), "-".into()],
            }
        };

        let mut table: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["Approach".to_string()];
        let mut sub = vec![String::new()];
        for c in &Condition::ALL {
            header.extend([c.title().to_string(), String::new(), String::new()]);
            sub.extend(["SR".to_string(), "OSR".to_string(), "SPL".to_string()]);
        }
        for (p, style) in &rows {
            let label = match style {
                Some(s) => format!("{} [{s}]", policy_title(*p)),
                None => policy_title(*p).to_string(),
            };
            let mut line = vec![label];
            for c in &Condition::ALL {
                line.extend(cell(*p, c, style));
            }
            table.push(line);
        }

        let ncols = header.len();
        let mut widths = vec![0; ncols];
        for line in std::iter::once(&sub).chain(&table) {
            for (i, v) in line.iter().enumerate() {
                widths[i] = widths[i].max(v.chars().count());
            }
        }
        // Group titles span three columns.
        for g in 0..Condition::ALL.len() {
            let span: usize = widths[1 + 3 * g..4 + 3 * g].iter().sum::<usize>() + 6;
            let title = header[1 + 3 * g].chars().count();
            if title > span {
                widths[3 + 3 * g] += title - span;
            }
        }
        widths[0] = widths[0].max("Approach".len());

        let mut out = String::new();
        let _ = write!(out, "{:<w$}", "Approach", w = widths[0]);
        for g in 0..Condition::ALL.len() {
            let span: usize = widths[1 + 3 * g..4 + 3 * g].iter().sum::<usize>() + 6;
            let _ = write!(out, " | {:^w$}", header[1 + 3 * g], w = span - 2);
        }
        out.push('\n');
        let fmt_line = |line: &[String]| {
            let mut s = format!("{:<w$}", line[0], w = widths[0]);
            for (i, v) in line.iter().enumerate().skip(1) {
                let sep = if (i - 1) % 3 == 0 { " | " } else { "  " };
                let _ = write!(s, "{sep}{v:>w$}", w = widths[i]);
            }
            s.trim_end().to_string()
        };
        out.push_str(&fmt_line(&sub));
        out.push('\n');
        out.push_str(&"-".repeat(out.lines().map(|l| l.chars().count()).max().unwrap_or(0)));
        out.push('\n');
        for line in &table {
            out.push_str(&fmt_line(line));
            out.push('\n');
        }
        let _ = writeln!(
            out,
            "episodes: {}  success radius: {} m",
            self.n_episodes, self.success_radius
        );
        for (k, v) in &self.mean_pairwise_cosine {
            let _ = writeln!(out, "mean pairwise cosine [{k}]: {v:.3}");
        }
        if !self.config_digest.is_empty() {
            let _ = writeln!(out, "config: {}", self.config_digest);
        }
        out
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x * y)
        .sum::<f64>()
        .clamp(-1.0, 1.0)
}

/// Mean cosine similarity between each generated text and its paired reference.
pub fn mean_pairwise_cosine(
    generated: &[String],
    references: &[String],
    embed: &dyn EmbedBackend,
) -> Result<f64, MetricsError> {
    if generated.len() != references.len() {
        return Err(MetricsError::LengthMismatch {
            generated: generated.len(),
            references: references.len(),
        });
    }
    if generated.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut total = 0.0;
    for (g, r) in generated.iter().zip(references) {
        total += cosine(&embed_text(embed, g)?, &embed_text(embed, r)?);
    }
    Ok(total / generated.len() as f64)
}
