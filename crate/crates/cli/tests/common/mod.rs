//! Scripted backends and helpers for the bundled TDW replay fixture.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::Arc;

use clap::Parser;
use wayfind_cli::wiring::RawBackends;
use wayfind_cli::{execute, Cli};
use wayfind_core::backends::scripted::{FnGround, HashEmbed, ScriptedChat, ScriptedVqa};
use wayfind_core::backends::{ChatTurn, GroundingKind};
use wayfind_core::env_model::{EnvGraph, Episode, ObsRef};
use wayfind_core::synthesis::{R2R_CONSTRAINT, REVERIE_CONSTRAINT};
use wayfind_core::vqa_chat::INITIAL_QUESTION;

pub const ENV_ID: &str = "tdw_0";
pub const EPISODE_ID: &str = "tdw_0-0";
pub const HUMAN: &str =
    "Walk down the hallway to the living room and turn off the television by the gray couch.";

pub const REVERIE_OUT: &str =
    "Go to the living room, then move to the room with the gray couch and turn off the television mounted on the wall.";
pub const R2R_OUT: &str = "Go from the computer screen to the chair, then past the object in the background and into the living room. Walk past the blue furniture and turn right towards the gray couch. Finally, stop in front of the table with the plant and view the website on the computer screen.";

/// Refined captions for the five frames.
pub const CAPTIONS: [&str; 5] = [
    "The image depicts a computer screen showing a colorful video of a man that is being displayed on a television. There is also a chair visible in the image besides the television.",
    "The image contains a small chair made of fabric, in colors of red, white and gray. There is another object present in the image, but it is not clear what it is.",
    "The image is of a living room with brown furniture and no decorations on the walls. There are no people present in the living room.",
    "The image depicts a room with a gray couch located against a wall. There is a small television mounted on the wall.",
    "The image features a computer screen displaying a website, with a couch visible in the background. A plant is placed on a table next to the computer. No other objects are visible on the table.",
];

/// (initial caption, follow-up question, answer) per frame.
pub const DIALOGUE: [(&str, &str, &str); 5] = [
    (
        "a man on a television screen next to a chair",
        "Is there a chair next to the television?",
        "yes",
    ),
    (
        "a red and white chair",
        "What material is the chair made of?",
        "fabric",
    ),
    (
        "a living room with a television",
        "Is there a television in the room?",
        "no",
    ),
    (
        "a gray couch against a wall",
        "Is there a television on the wall?",
        "yes",
    ),
    (
        "a computer on a desk with a plant",
        "Is there a couch in the background?",
        "yes",
    ),
];

pub const POINTS: [[f64; 3]; 5] = [
    [0.0, 0.0, 0.0],
    [2.0, 0.0, 0.0],
    [4.0, 0.0, 0.0],
    [4.0, 2.0, 0.0],
    [4.0, 4.0, 0.0],
];

pub fn env() -> EnvGraph {
    EnvGraph::chain(ENV_ID, &POINTS, |i, h| {
        ObsRef::new(format!("{ENV_ID}/{i}_{}.png", h.degrees()))
    })
    .unwrap()
}

pub fn episode(env: &EnvGraph) -> Episode {
    let path = env.nodes().iter().map(|n| n.id.clone()).collect();
    Episode::new(env, EPISODE_ID, path, vec![HUMAN.to_string()]).unwrap()
}

fn frame_of(obs: &ObsRef) -> Option<usize> {
    obs.as_str()
        .strip_prefix(&format!("{ENV_ID}/"))?
        .split('_')
        .next()?
        .parse()
        .ok()
}

fn last_user(turns: &[ChatTurn]) -> &str {
    turns
        .iter()
        .rev()
        .find(|t| t.role == wayfind_core::backends::Role::User)
        .map_or("", |t| t.content.as_str())
}

pub fn chat() -> ScriptedChat {
    ScriptedChat::new().rule(|turns| {
        let user = last_user(turns);
        for (i, (initial, question, _)) in DIALOGUE.iter().enumerate() {
            if user.starts_with(&format!("Current description: {initial}\n")) {
                let fresh = user.contains("No questions asked yet.");
                return Some(if fresh {
                    question.to_string()
                } else {
                    "DONE".to_string()
                });
            }
            if user.starts_with(&format!("Initial description: {initial}\n")) {
                return Some(CAPTIONS[i].to_string());
            }
        }
        None
    })
}

pub fn synth() -> ScriptedChat {
    ScriptedChat::new()
        .contains(REVERIE_CONSTRAINT, REVERIE_OUT)
        .contains(R2R_CONSTRAINT, R2R_OUT)
}

pub fn vqa() -> ScriptedVqa {
    let env = env();
    let mut v = ScriptedVqa::new();
    for node in env.nodes() {
        let i: usize = node.id.parse().unwrap();
        for (_, obs) in node.views.iter() {
            let Some(obs) = obs else { continue };
            let (initial, question, answer) = DIALOGUE[i];
            v = v.answer(obs.as_str(), INITIAL_QUESTION, initial).answer(
                obs.as_str(),
                question,
                answer,
            );
        }
    }
    v
}

const STOP_WORDS: &[&str] = &[
    "a", "an", "the", "of", "to", "with", "on", "in", "by", "and",
];

/// Fraction of the phrase's content words that appear in the frame's caption.
pub fn keyword_score(phrase: &str, obs: &ObsRef) -> f64 {
    let Some(caption) = frame_of(obs).and_then(|i| CAPTIONS.get(i)) else {
        return 0.0;
    };
    let caption: Vec<String> = words(caption).collect();
    let content: Vec<String> = words(phrase)
        .filter(|w| !STOP_WORDS.contains(&w.as_str()))
        .collect();
    if content.is_empty() {
        return 0.0;
    }
    content.iter().filter(|w| caption.contains(w)).count() as f64 / content.len() as f64
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

pub fn raw_backends() -> RawBackends {
    RawBackends {
        chat: Some(Arc::new(chat())),
        synth: Some(Arc::new(synth())),
        vqa: Some(Arc::new(vqa())),
        ground: Some(Arc::new(FnGround::new(keyword_score))),
        detect: Some(Arc::new(
            FnGround::new(keyword_score).with_kind(GroundingKind::Detection),
        )),
        embed: Some(Arc::new(HashEmbed::new(64))),
    }
}

pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tdw")
}

pub const CONFIG: &str = r#"run_id = "tdw"
mode = "replay"
seed = 7
styles = ["reverie", "r2r"]
strategies = ["central"]
rounds = 2

[policy]
policy = "seq_clip_nav"

[backends.chat]
url = "http://127.0.0.1:8000/v1/chat/completions"
model = "gpt-3.5-turbo"

[backends.synth]
url = "http://127.0.0.1:8000/v1/chat/completions"
model = "gpt-3.5-turbo-instruct"

[backends.vqa]
url = "http://127.0.0.1:8001/vqa"
model = "blip2-flan-t5-xl"

[backends.ground]
url = "http://127.0.0.1:8002/ground"
model = "clip-vit-b-32"

[backends.detect]
url = "http://127.0.0.1:8002/ground"
model = "glip-t"

[backends.embed]
url = "http://127.0.0.1:8003/embed"
model = "all-MiniLM-L6-v2"
"#;

/// Writes the fixture inputs (config, env, episodes) into `dir`.
pub fn write_inputs(dir: &Path) {
    let env = env();
    std::fs::create_dir_all(dir.join("envs")).unwrap();
    std::fs::write(dir.join("config.toml"), CONFIG).unwrap();
    std::fs::write(dir.join(format!("envs/{ENV_ID}.json")), env.to_json()).unwrap();
    wayfind_core::datasets::write_episodes(&dir.join("episodes/episodes.json"), &[episode(&env)])
        .unwrap();
}

/// The full pipeline as argument lists, relative to a run directory.
pub fn pipeline_steps() -> Vec<Vec<String>> {
    let mut steps = vec![vec!["generate".to_string()]];
    for policy in ["clip_nav", "seq_clip_nav", "glip_nav"] {
        steps.push(vec![
            "navigate".into(),
            "--policy".into(),
            policy.into(),
            "--human".into(),
        ]);
        steps.push(vec!["navigate".into(), "--policy".into(), policy.into()]);
    }
    steps.push(vec!["report".to_string()]);
    steps
}

fn full_args(dir: &Path, mode: &str, step: &[String]) -> Vec<String> {
    let config = dir.join("config.toml").display().to_string();
    let mut args = vec![
        "wayfind".to_string(),
        "--config".into(),
        config,
        "--mode".into(),
        mode.into(),
        "--jobs".into(),
        "2".into(),
    ];
    args.extend(step.iter().cloned());
    args
}

/// Runs every pipeline step in record mode against the scripted backends.
pub fn record_into(dir: &Path) {
    let raw = raw_backends();
    for step in pipeline_steps() {
        let cli = Cli::parse_from(full_args(dir, "record", &step));
        execute(&cli, &BTreeMap::new(), Some(raw.clone()))
            .unwrap_or_else(|e| panic!("{step:?}: {e}"));
    }
}

/// Copies the bundled fixture inputs and cache into `dir`.
pub fn copy_fixture(dir: &Path) {
    copy_tree(&fixture_dir(), dir);
}

pub fn copy_tree(from: &Path, to: &Path) {
    for entry in walkdir::WalkDir::new(from) {
        let entry = entry.unwrap();
        let target = to.join(entry.path().strip_prefix(from).unwrap());
        if entry.file_type().is_dir() {
            std::fs::create_dir_all(target).unwrap();
        } else {
            std::fs::copy(entry.path(), target).unwrap();
        }
    }
}

/// All files under `dir`, relative path to contents, sorted.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    if !dir.exists() {
        return BTreeMap::new();
    }
    walkdir::WalkDir::new(dir)
        .into_iter()
        .map(Result::unwrap)
        .filter(|e| e.file_type().is_file())
        .map(|e| {
            (
                e.path().strip_prefix(dir).unwrap().display().to_string(),
                std::fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

pub fn wayfind(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_wayfind"))
        .args(args)
        .env_remove("WAYFIND_LOG")
        .output()
        .expect("binary runs")
}

/// Runs the bundled pipeline in replay mode through the binary.
pub fn replay_pipeline(dir: &Path) {
    for step in pipeline_steps() {
        let args = full_args(dir, "replay", &step);
        let out = wayfind(&args[1..].iter().map(String::as_str).collect::<Vec<_>>());
        assert!(
            out.status.success(),
            "{step:?} failed: {}\n{}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        );
    }
}

pub fn g6_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/g6.json")
}
