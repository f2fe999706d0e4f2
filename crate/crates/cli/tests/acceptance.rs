//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.
#![allow(clippy::needless_range_loop)]

mod common;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wayfind_core::backends::scripted::{FnGround, ScriptedChat, ScriptedVqa};
use wayfind_core::backends::{DecodeParams, GroundingKind};
use wayfind_core::env_model::{load_env, EnvGraph, Episode, Node, ObsRef, SimulatorKind, ViewSet};
use wayfind_core::metrics::{evaluate, judge_against, EpisodeOutcome};
use wayfind_core::navigation::{
    run_episode, validate_trace, OracleGrounder, PhraseExtractor, Policy, PolicyConfig, StepAction,
};
use wayfind_core::synthesis::{
    build_prompt, summarize_panorama, validate_style, FrameStrategy, Instruction,
    InstructionSource, StyleProfile, StyleViolation,
};
use wayfind_core::vqa_chat::describe_frame;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration, what: &str) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("{what} took {elapsed:.2?}, limit {limit:?}"),
    )
}

fn metric_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let start = Instant::now();
    let mut worst = 0.0f64;
    for set in 0..1000 {
        let outcomes: Vec<EpisodeOutcome> = (0..rng.random_range(1..=50))
            .map(|i| {
                let oracle_success = rng.random_bool(0.5);
                let success = oracle_success && rng.random_bool(0.6);
                let geodesic_length = rng.random_range(0.5..25.0);
                let taken_length = if rng.random_bool(0.3) {
                    geodesic_length
                } else {
                    rng.random_range(0.0..50.0)
                };
                EpisodeOutcome {
                    episode_id: i.to_string(),
                    success,
                    oracle_success,
                    taken_length,
                    geodesic_length,
                }
            })
            .collect();
        let got = evaluate(&outcomes).map_err(|e| e.to_string())?;
        // Brute force: SR = mean S_i, OSR = mean O_i, SPL = mean S_i * l_i / max(p_i, l_i).
        let n = outcomes.len() as f64;
        let mut sums = [0.0f64; 3];
        for o in &outcomes {
            let s = if o.success { 1.0 } else { 0.0 };
            sums[0] += s;
            sums[1] += if o.oracle_success { 1.0 } else { 0.0 };
            let longer = if o.taken_length >= o.geodesic_length {
                o.taken_length
            } else {
                o.geodesic_length
            };
            sums[2] += s * o.geodesic_length / longer;
        }
        for (g, b) in [got.sr, got.osr, got.spl].iter().zip(sums.map(|x| x / n)) {
            worst = worst.max((g - b).abs());
        }
        ensure(worst <= 1e-9, format!("set {set}: deviation {worst:e}"))?;
        ensure(
            got.spl <= got.sr && got.sr <= got.osr,
            format!("set {set}: SPL <= SR <= OSR violated"),
        )?;
    }
    within(start.elapsed(), Duration::from_secs(5), "1000 outcome sets")?;
    Ok(format!(
        "1000 sets, max deviation {worst:.1e}, {:.2?}",
        start.elapsed()
    ))
}

fn graph_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let start = Instant::now();
    let mut pairs = 0;
    for g in 0..200 {
        let n = rng.random_range(2..=12);
        let mut w = vec![vec![None::<f64>; n]; n];
        let integer = g % 2 == 0;
        for v in 1..n {
            let u = rng.random_range(0..v);
            let x = if integer {
                rng.random_range(1..=3) as f64
            } else {
                rng.random_range(0.5..4.0)
            };
            w[u][v] = Some(x);
            w[v][u] = Some(x);
        }
        for _ in 0..rng.random_range(0..=2 * n) {
            let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
            if u != v && w[u][v].is_none() {
                let x = if integer {
                    rng.random_range(1..=3) as f64
                } else {
                    rng.random_range(0.5..4.0)
                };
                w[u][v] = Some(x);
                w[v][u] = Some(x);
            }
        }
        let id = |i: usize| format!("v{i:02}");
        let nodes = (0..n)
            .map(|i| Node {
                id: id(i),
                position: [0.0; 3],
                views: ViewSet::default(),
            })
            .collect();
        let edges = (0..n)
            .flat_map(|u| (u + 1..n).map(move |v| (u, v)))
            .filter_map(|(u, v)| w[u][v].map(|x| (id(u), id(v), Some(x))))
            .collect();
        let env = EnvGraph::new(format!("r{g}"), SimulatorKind::Continuous, nodes, edges)
            .map_err(|e| e.to_string())?;
        for a in 0..n {
            // Enumerate every simple path out of `a` once.
            let mut found: Vec<(Vec<usize>, f64)> = Vec::new();
            let mut stack = vec![(vec![a], 0.0)];
            while let Some((path, len)) = stack.pop() {
                let u = *path.last().unwrap();
                for v in 0..n {
                    if let Some(x) = w[u][v] {
                        if !path.contains(&v) {
                            let mut next = path.clone();
                            next.push(v);
                            stack.push((next, len + x));
                        }
                    }
                }
                found.push((path, len));
            }
            for b in (0..n).filter(|&b| b != a) {
                let to_b: Vec<_> = found
                    .iter()
                    .filter(|(p, _)| *p.last().unwrap() == b)
                    .collect();
                let best = to_b.iter().map(|(_, l)| *l).fold(f64::INFINITY, f64::min);
                let expected = to_b
                    .iter()
                    .filter(|(_, l)| (l - best).abs() <= 1e-9 * best.max(1.0))
                    .map(|(p, _)| p.iter().map(|&i| id(i)).collect::<Vec<_>>())
                    .min()
                    .unwrap();
                let route = env
                    .shortest_path(&id(a), &id(b))
                    .map_err(|e| e.to_string())?;
                ensure(
                    (route.length - best).abs() <= 1e-9,
                    format!("graph {g} {a}->{b}: {} vs {best}", route.length),
                )?;
                ensure(
                    route.nodes == expected,
                    format!(
                        "graph {g} {a}->{b}: tie order {:?} vs {expected:?}",
                        route.nodes
                    ),
                )?;
                pairs += 1;
            }
        }
    }
    within(start.elapsed(), Duration::from_secs(30), "200 graphs")?;
    Ok(format!(
        "200 graphs, {pairs} pairs, {:.2?}",
        start.elapsed()
    ))
}

fn oracle_navigation() -> Check {
    let env = load_env(common::g6_path()).map_err(|e| e.to_string())?;
    let ids: Vec<String> = env.nodes().iter().map(|n| n.id.clone()).collect();
    let mut episodes = Vec::new();
    for a in &ids {
        for b in ids.iter().filter(|b| *b != a) {
            let path = env.shortest_path(a, b).map_err(|e| e.to_string())?.nodes;
            episodes.push(
                Episode::new(&env, format!("g6-{a}{b}"), path, vec![])
                    .map_err(|e| e.to_string())?,
            );
        }
    }
    ensure(episodes.len() >= 10, "fewer than 10 episodes")?;
    let mut summary = Vec::new();
    for policy in Policy::ALL {
        let config = PolicyConfig::with_policy(policy);
        let kind = if policy == Policy::GlipNav {
            GroundingKind::Detection
        } else {
            GroundingKind::Similarity
        };
        let mut outcomes = Vec::new();
        for ep in &episodes {
            let oracle = OracleGrounder::new(&env, ep.goal())
                .map_err(|e| e.to_string())?
                .with_kind(kind);
            let trace = run_episode(
                &env,
                ep,
                "Go to the study and water the fern",
                &config,
                &oracle,
                PhraseExtractor::RuleBased,
            )
            .map_err(|e| e.to_string())?;
            validate_trace(&env, ep, &trace, &config).map_err(|e| e.to_string())?;
            ensure(
                trace.visited == ep.path,
                format!("{policy} {}: visited {:?}", ep.episode_id, trace.visited),
            )?;
            outcomes.push(
                judge_against(&env, ep, &trace, config.success_radius)
                    .map_err(|e| e.to_string())?,
            );
        }
        let s = evaluate(&outcomes).map_err(|e| e.to_string())?;
        ensure(
            s.sr == 1.0 && s.spl == 1.0,
            format!("{policy}: SR {} SPL {}", s.sr, s.spl),
        )?;
        summary.push(format!("{policy} SR={} SPL={}", s.sr, s.spl));
    }
    Ok(format!(
        "{} episodes; {}",
        episodes.len(),
        summary.join(", ")
    ))
}

fn adversarial_env() -> (EnvGraph, Episode) {
    let pos = [
        ("S", 0.0, 0.0),
        ("A1", 0.0, 5.0),
        ("H", 0.0, 10.0),
        ("F1", 5.0, 10.0),
        ("F2", 10.0, 10.0),
        ("F3", 15.0, 10.0),
        ("N1", 0.0, 15.0),
        ("G", 0.0, 20.0),
    ];
    let nodes = pos
        .iter()
        .map(|(id, x, y)| {
            let v = |h: u16| Some(ObsRef::new(format!("{id}_{h}")));
            Node {
                id: id.to_string(),
                position: [*x, *y, 0.0],
                views: ViewSet::new(v(0), v(90), v(180), v(270)),
            }
        })
        .collect();
    let edges = [
        ("S", "A1"),
        ("A1", "H"),
        ("H", "F1"),
        ("F1", "F2"),
        ("F2", "F3"),
        ("H", "N1"),
        ("N1", "G"),
    ]
    .iter()
    .map(|(a, b)| (a.to_string(), b.to_string(), None))
    .collect();
    let env = EnvGraph::new("adv", SimulatorKind::DiscreteGraph, nodes, edges).unwrap();
    let path = ["S", "A1", "H", "N1", "G"].map(String::from).to_vec();
    let ep = Episode::new(&env, "adv-0", path, vec![]).unwrap();
    (env, ep)
}

/// Rewards the eastern branch off H for three steps, then flatlines.
fn adversarial_score(_: &str, o: &ObsRef) -> f64 {
    match o.as_str() {
        "S_0" => 0.7,
        "A1_0" => 0.8,
        "H_90" => 0.9,
        "H_0" => 0.5,
        "F1_90" | "F2_90" | "F3_270" => 0.3,
        "N1_0" => 0.6,
        o if o.starts_with("G_") => 1.0,
        _ => 0.0,
    }
}

fn backtracking() -> Check {
    let (env, ep) = adversarial_env();
    let mut counts = BTreeMap::new();
    for policy in Policy::ALL {
        let config = PolicyConfig {
            advance_threshold: 0.95,
            ..PolicyConfig::with_policy(policy)
        };
        let kind = if policy == Policy::GlipNav {
            GroundingKind::Detection
        } else {
            GroundingKind::Similarity
        };
        let g = FnGround::new(adversarial_score).with_kind(kind);
        let trace = run_episode(
            &env,
            &ep,
            "Go to the den",
            &config,
            &g,
            PhraseExtractor::RuleBased,
        )
        .map_err(|e| e.to_string())?;
        validate_trace(&env, &ep, &trace, &config).map_err(|e| e.to_string())?;
        let expected = if policy.backtracks() { 1 } else { 0 };
        ensure(
            trace.backtrack_count() == expected,
            format!("{policy}: {} backtracks", trace.backtrack_count()),
        )?;
        if let Some(i) = trace
            .steps
            .iter()
            .position(|s| s.action == StepAction::Backtrack)
        {
            // Best grounding score seen at each node before the backtrack; earliest wins ties.
            let mut best: Option<(&str, f64)> = None;
            for s in &trace.steps[..i] {
                let score = s.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                if best.is_none_or(|(_, b)| score > b) {
                    best = Some((&s.node, score));
                }
            }
            let target = trace.steps[i].target.as_deref();
            ensure(
                target == best.map(|b| b.0),
                format!("{policy}: backtracked to {target:?}, best was {best:?}"),
            )?;
            ensure(
                trace.visited.get(i + 1).map(String::as_str) == target,
                format!("{policy}: post-backtrack node mismatch"),
            )?;
        }
        counts.insert(policy.as_str(), trace.backtrack_count());
    }
    Ok(format!("backtracks {counts:?}"))
}

fn golden(name: &str) -> Result<String, String> {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))
}

fn prompt_goldens() -> Check {
    let captions: Vec<String> = common::CAPTIONS.iter().map(|s| s.to_string()).collect();
    let reverie = StyleProfile {
        reference_texts: vec![
            "Go to the bathroom on level 1 and wipe off the faucet".into(),
            "Walk into the kitchen and open the fridge".into(),
            "Go to the kid's bedroom and make the bed".into(),
        ],
        ..StyleProfile::reverie()
    };
    let r2r = StyleProfile {
        reference_texts: vec![
            "Walk past the sofa and turn left. Stop at the door.".into(),
            "Go up the stairs. Wait by the window.".into(),
        ],
        ..StyleProfile::r2r()
    };
    for (style, file) in [(reverie, "prompt_reverie.txt"), (r2r, "prompt_r2r.txt")] {
        let rendered = build_prompt(&captions, &style)
            .map_err(|e| e.to_string())?
            .rendered;
        ensure(
            rendered == golden(file)?,
            format!("{file} differs:\n{rendered}"),
        )?;
    }
    let chat = ScriptedChat::new()
        .with_default("A hallway with a door, a kitchen sink, stairs and a curtained window.");
    let views = [
        "A hallway with a wooden door.",
        "A kitchen counter with a sink.",
        "A staircase leading down.",
        "A window with white curtains.",
    ]
    .map(String::from);
    summarize_panorama(&views, &chat, &DecodeParams::deterministic("m"))
        .map_err(|e| e.to_string())?;
    let sent = chat.requests();
    ensure(
        sent.len() == 1 && sent[0].len() == 1,
        format!("expected one single-turn request, got {sent:?}"),
    )?;
    ensure(
        sent[0][0].content == golden("panorama.txt")?,
        format!("panorama prompt differs:\n{}", sent[0][0].content),
    )?;
    Ok("reverie, r2r and panorama prompts match byte-for-byte".into())
}

fn replay_determinism() -> Check {
    let runs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &runs {
        common::copy_fixture(dir.path());
        common::replay_pipeline(dir.path());
    }
    let mut files = 0;
    for stage in ["captions", "manifests", "traces", "reports"] {
        let a = common::snapshot(&runs[0].path().join(stage));
        let b = common::snapshot(&runs[1].path().join(stage));
        ensure(!a.is_empty(), format!("{stage}: no outputs"))?;
        ensure(a == b, format!("{stage}: runs differ"))?;
        files += a.len();
    }
    let manifest =
        wayfind_core::datasets::read_manifest(&runs[0].path().join("manifests/tdw.json"))
            .map_err(|e| e.to_string())?;
    let reverie = manifest
        .entries
        .iter()
        .find(|e| e.style == "reverie")
        .ok_or("no reverie entry")?;
    ensure(
        reverie.text == "Go to the living room, then move to the room with the gray couch and turn off the television mounted on the wall.",
        format!("reverie output {:?}", reverie.text),
    )?;
    Ok(format!(
        "{files} output files identical across two replays; reverie output verbatim"
    ))
}

enum Label {
    Clean,
    Words,
    Many,
    Few,
    Empty,
}

fn style_validation() -> Check {
    use Label::*;
    let long_reverie = "Go to the living room, then move to the room with the gray couch and turn off the television mounted on the wall.";
    let r2r_long = common::R2R_OUT;
    let suite: [(&str, &str, Label); 20] = [
        ("reverie", "Go to the kitchen and turn off the faucet.", Clean),
        ("reverie", long_reverie, Words),
        ("reverie", "Go to the bathroom on level 1 and wipe off the faucet", Clean),
        ("reverie", "Walk into the office and turn on the lamp on the desk.", Clean),
        ("reverie", "Go to the laundry room. Bring me the towel.", Many),
        ("reverie", "Head upstairs to the bedroom with the 2.5 m ceiling and open the window.", Clean),
        ("reverie", "Go to the living room, then move to the room with the gray couch and turn off the TV.", Clean),
        ("reverie", "", Empty),
        ("reverie", "Find the dining room and push in the chair nearest the window!", Clean),
        ("reverie", "Go to the hallway - then clean the mirror.", Clean),
        ("reverie", "Walk down the long hallway past the kitchen and the two bedrooms to the bathroom and wipe the mirror above the sink.", Words),
        ("reverie", "Go up the stairs to the second floor family room and pick up the remote control next to the sofa.", Clean),
        ("reverie", "Is the towel in the bathroom? Bring it to me.", Many),
        ("r2r", r2r_long, Clean),
        ("r2r", "Walk out of the bedroom and turn left. Stop at the top of the stairs.", Clean),
        ("r2r", "Exit the kitchen and wait by the glass doors.", Few),
        ("r2r", "Leave the bathroom and turn right. Walk down the corridor until you reach the plant, then go into the office on the left. Wait there.", Clean),
        ("r2r", "Go straight past the 1.5 m tall plant. Turn right at the fireplace.", Clean),
        ("r2r", "Climb the stairs! Turn left at the landing and stop inside the bedroom doorway", Clean),
        ("r2r", "   ", Empty),
    ];
    let (mut false_flags, mut misses) = (Vec::new(), Vec::new());
    for (i, (style, text, label)) in suite.iter().enumerate() {
        let profile = StyleProfile::builtin(style).map_err(|e| e.to_string())?;
        let instruction = Instruction {
            text: text.to_string(),
            style: style.to_string(),
            episode_id: format!("case-{i}"),
            frame_strategy: FrameStrategy::Central,
            source: InstructionSource::Human,
        };
        let got = validate_style(&instruction, &profile);
        let ok = match label {
            Clean => got.is_empty(),
            Words => matches!(got.as_slice(), [StyleViolation::TooManyWords { .. }]),
            Many => matches!(got.as_slice(), [StyleViolation::TooManySentences { .. }]),
            Few => matches!(got.as_slice(), [StyleViolation::TooFewSentences { .. }]),
            Empty => got == [StyleViolation::Empty],
        };
        if !ok {
            let list: Vec<String> = got.iter().map(ToString::to_string).collect();
            if matches!(label, Clean) {
                false_flags.push(format!("case {i} {list:?}"));
            } else {
                misses.push(format!("case {i} {list:?}"));
            }
        }
    }
    let sample_flags = validate_style(
        &Instruction {
            text: long_reverie.into(),
            style: "reverie".into(),
            episode_id: "a1".into(),
            frame_strategy: FrameStrategy::Central,
            source: InstructionSource::Generated,
        },
        &StyleProfile::reverie(),
    );
    ensure(
        sample_flags == [StyleViolation::TooManyWords { count: 23, max: 20 }],
        format!("sample output flags {sample_flags:?}"),
    )?;
    ensure(
        false_flags.is_empty(),
        format!("false flags: {false_flags:?}"),
    )?;
    ensure(misses.is_empty(), format!("missed violations: {misses:?}"))?;
    Ok("23-word output flagged (word_count=23 > 20); 9-word passes; 20 labeled cases, 0 false flags".into())
}

fn vqa_budget() -> Check {
    let params = DecodeParams::deterministic("m");
    let obs = ObsRef::new("frame.png");
    // A chat model that never stops asking new questions.
    let counter = std::sync::atomic::AtomicUsize::new(0);
    let chatty = ScriptedChat::new().rule(move |turns| {
        let user = &turns.last()?.content;
        if user.starts_with("Initial description:") {
            return Some("A kitchen with a table.".into());
        }
        let n = counter.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
        Some(format!("What is object number {n}?"))
    });
    let vqa = ScriptedVqa::new().with_default("a table");
    let record = describe_frame(0, &obs, 5, &chatty, &vqa, &params).map_err(|e| e.to_string())?;
    ensure(
        vqa.calls() <= 6,
        format!("{} VQA calls with rounds=5", vqa.calls()),
    )?;
    ensure(
        record.transcript.qa_pairs.len() == 5,
        "round budget not used",
    )?;
    let budget_calls = vqa.calls();

    let stopper = ScriptedChat::new()
        .then("What color is the table?")
        .then("DONE")
        .then("A brown table.");
    let vqa = ScriptedVqa::new().with_default("brown");
    describe_frame(0, &obs, 5, &stopper, &vqa, &params).map_err(|e| e.to_string())?;
    ensure(
        vqa.calls() == 2,
        format!("sentinel: {} VQA calls", vqa.calls()),
    )?;

    let repeater = ScriptedChat::new()
        .then("Is there a chair?")
        .then("Is there a chair?")
        .then("There is a chair.");
    let vqa = ScriptedVqa::new().with_default("yes");
    describe_frame(0, &obs, 5, &repeater, &vqa, &params).map_err(|e| e.to_string())?;
    ensure(
        vqa.calls() == 2,
        format!("duplicate: {} VQA calls", vqa.calls()),
    )?;
    Ok(format!(
        "rounds=5 used {budget_calls} VQA calls; sentinel and duplicate stop after 2"
    ))
}

fn main() {
    let checks: [Criterion; 8] = [
        ("metric oracle equivalence", metric_oracle),
        ("graph oracle equivalence", graph_oracle),
        ("oracle-navigation success", oracle_navigation),
        ("backtracking behavior", backtracking),
        ("prompt bit-exactness", prompt_goldens),
        ("replay determinism", replay_determinism),
        ("style validation", style_validation),
        ("VQA loop budget", vqa_budget),
    ];
    let mut failed = 0;
    for (name, check) in checks {
        let result = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or(p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match result {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        checks.len() - failed
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
