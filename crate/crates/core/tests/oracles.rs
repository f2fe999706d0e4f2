//! Independent oracles for shortest paths and SR/OSR/SPL.
#![allow(clippy::needless_range_loop)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wayfind_core::env_model::{EnvGraph, Node, SimulatorKind, ViewSet};
use wayfind_core::metrics::{evaluate, EpisodeOutcome};

fn random_graph(rng: &mut ChaCha8Rng, integer_weights: bool) -> (EnvGraph, Vec<Vec<Option<f64>>>) {
    let n = rng.random_range(2..=12);
    let mut w = vec![vec![None; n]; n];
    let weight = |rng: &mut ChaCha8Rng| {
        if integer_weights {
            rng.random_range(1..=4) as f64
        } else {
            rng.random_range(0.5..5.0)
        }
    };
    // Random spanning tree, then extra edges.
    for v in 1..n {
        let u = rng.random_range(0..v);
        let x = weight(rng);
        w[u][v] = Some(x);
        w[v][u] = Some(x);
    }
    for _ in 0..rng.random_range(0..=n * 2) {
        let (u, v) = (rng.random_range(0..n), rng.random_range(0..n));
        if u != v && w[u][v].is_none() {
            let x = weight(rng);
            w[u][v] = Some(x);
            w[v][u] = Some(x);
        }
    }
    let nodes = (0..n)
        .map(|i| Node {
            id: format!("n{i:02}"),
            position: [i as f64, 0.0, 0.0],
            views: ViewSet::default(),
        })
        .collect();
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if let Some(x) = w[u][v] {
                edges.push((format!("n{u:02}"), format!("n{v:02}"), Some(x)));
            }
        }
    }
    (
        EnvGraph::new("rand", SimulatorKind::Continuous, nodes, edges).unwrap(),
        w,
    )
}

/// Every simple path from `a` to `b` with its length.
fn simple_paths(w: &[Vec<Option<f64>>], a: usize, b: usize) -> Vec<(Vec<usize>, f64)> {
    fn go(
        w: &[Vec<Option<f64>>],
        path: &mut Vec<usize>,
        len: f64,
        b: usize,
        out: &mut Vec<(Vec<usize>, f64)>,
    ) {
        let u = *path.last().unwrap();
        if u == b {
            out.push((path.clone(), len));
            return;
        }
        for v in 0..w.len() {
            if let Some(x) = w[u][v] {
                if !path.contains(&v) {
                    path.push(v);
                    go(w, path, len + x, b, out);
                    path.pop();
                }
            }
        }
    }
    let mut out = Vec::new();
    go(w, &mut vec![a], 0.0, b, &mut out);
    out
}

#[test]
fn shortest_path_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for g in 0..200 {
        let (env, w) = random_graph(&mut rng, g % 2 == 0);
        let n = w.len();
        for a in 0..n {
            for b in 0..n {
                let (ia, ib) = (format!("n{a:02}"), format!("n{b:02}"));
                let route = env.shortest_path(&ia, &ib).unwrap();
                if a == b {
                    assert_eq!(route.nodes, std::slice::from_ref(&ia));
                    assert_eq!(route.length, 0.0);
                    continue;
                }
                let paths = simple_paths(&w, a, b);
                let best = paths.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
                assert!(
                    (route.length - best).abs() <= 1e-9,
                    "graph {g} {ia}->{ib}: {} vs {best}",
                    route.length
                );
                assert!((env.path_length(&route.nodes).unwrap() - route.length).abs() <= 1e-9);
                // Ties resolve to the lexicographically smallest id sequence.
                let expected = paths
                    .iter()
                    .filter(|p| (p.1 - best).abs() <= 1e-9 * best.max(1.0))
                    .map(|p| p.0.iter().map(|i| format!("n{i:02}")).collect::<Vec<_>>())
                    .min()
                    .unwrap();
                assert_eq!(route.nodes, expected, "graph {g} {ia}->{ib}");
                for (p, _) in &paths {
                    let ids: Vec<String> = p.iter().map(|i| format!("n{i:02}")).collect();
                    assert!(route.length <= env.path_length(&ids).unwrap() + 1e-9);
                }
            }
        }
    }
}

fn random_outcomes(rng: &mut ChaCha8Rng) -> Vec<EpisodeOutcome> {
    (0..rng.random_range(1..=40))
        .map(|i| {
            let oracle_success = rng.random_bool(0.6);
            let success = oracle_success && rng.random_bool(0.7);
            let geodesic_length = rng.random_range(0.5..30.0);
            let taken_length = match rng.random_range(0..4) {
                0 => geodesic_length,
                1 => 0.0,
                _ => rng.random_range(0.0..60.0),
            };
            EpisodeOutcome {
                episode_id: format!("e{i}"),
                success,
                oracle_success,
                taken_length,
                geodesic_length,
            }
        })
        .collect()
}

#[test]
fn metrics_match_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for _ in 0..1000 {
        let outcomes = random_outcomes(&mut rng);
        let scores = evaluate(&outcomes).unwrap();
        let n = outcomes.len() as f64;
        let (mut s, mut o, mut p) = (0.0, 0.0, 0.0);
        for e in &outcomes {
            if e.success {
                s += 1.0;
                let longer = if e.taken_length > e.geodesic_length {
                    e.taken_length
                } else {
                    e.geodesic_length
                };
                p += e.geodesic_length / longer;
            }
            if e.oracle_success {
                o += 1.0;
            }
        }
        assert!((scores.sr - s / n).abs() <= 1e-9);
        assert!((scores.osr - o / n).abs() <= 1e-9);
        assert!((scores.spl - p / n).abs() <= 1e-9);
        assert!(scores.spl <= scores.sr + 1e-12 && scores.sr <= scores.osr + 1e-12);
    }
}
