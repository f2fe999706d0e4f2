//! Navigation graphs, episodes and the geometry helpers built on them.
//!
//! Positions are `[x, y, z]` in meters with `z` up. Bearings are measured in
//! the horizontal plane clockwise from north (`+y`), so `+x` is east (90°).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet, VecDeque};
use std::fmt;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Upper bound on node-pair draws in [`sample_episode`].
pub const SAMPLE_ATTEMPT_CAP: usize = 10_000;

/// Relative tolerance used when comparing accumulated path lengths.
const LENGTH_EPS: f64 = 1e-9;

pub type Position = [f64; 3];

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
    #[error("empty graph: no nodes")]
    Empty,
    #[error("duplicate node id {0:?}")]
    DuplicateNode(String),
    #[error("dangling edge {from:?}-{to:?}: node {missing:?} does not exist")]
    DanglingEdge {
        from: String,
        to: String,
        missing: String,
    },
    #[error("duplicate edge {0:?}-{1:?}")]
    DuplicateEdge(String, String),
    #[error("self-loop edge on {0:?}")]
    SelfLoop(String),
    #[error("edge {from:?}-{to:?} has non-positive length {length}")]
    NonPositiveLength {
        from: String,
        to: String,
        length: f64,
    },
    #[error("graph is disconnected: {unreachable:?} unreachable from {root:?}")]
    Disconnected {
        root: String,
        unreachable: Vec<String>,
    },
    #[error("node {node:?} is missing its {heading} view (only continuous graphs may omit views)")]
    MissingView { node: String, heading: Heading },
    #[error("unknown node id {0:?}")]
    UnknownNode(String),
    #[error("nodes {0:?} and {1:?} are not adjacent")]
    NotAdjacent(String, String),
    #[error("path must contain at least {min} nodes, got {got}")]
    PathTooShort { min: usize, got: usize },
    #[error("central view needs two distinct nodes, got {0:?} twice")]
    SameNode(String),
    #[error(
        "no qualifying pair with hop count in [{min_hops}, {max_hops}] after {attempts} attempts"
    )]
    NoQualifyingPair {
        min_hops: usize,
        max_hops: usize,
        attempts: usize,
    },
    #[error("invalid path spec: {0}")]
    InvalidSpec(String),
    #[error("invalid polyline: {0}")]
    InvalidPolyline(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorKind {
    DiscreteGraph,
    Continuous,
}

/// One of the four north-referenced directional views held by every node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Heading {
    North,
    East,
    South,
    West,
}

impl Heading {
    /// All headings in ascending angle order, which is also the tie-break order.
    pub const ALL: [Heading; 4] = [Heading::North, Heading::East, Heading::South, Heading::West];

    pub fn degrees(self) -> u16 {
        match self {
            Heading::North => 0,
            Heading::East => 90,
            Heading::South => 180,
            Heading::West => 270,
        }
    }

    pub fn from_degrees(deg: u16) -> Option<Heading> {
        match deg {
            0 => Some(Heading::North),
            90 => Some(Heading::East),
            180 => Some(Heading::South),
            270 => Some(Heading::West),
            _ => None,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Nearest cardinal heading to `bearing` (degrees); exact ties go to the
    /// smaller heading angle, with 315° resolving to north.
    pub fn quantize(bearing: f64) -> Heading {
        let b = normalize_degrees(bearing);
        let mut best = Heading::North;
        let mut best_diff = f64::INFINITY;
        for h in Heading::ALL {
            let d = angular_difference(b, h.degrees() as f64);
            if d < best_diff {
                best = h;
                best_diff = d;
            }
        }
        best
    }
}

impl fmt::Display for Heading {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}°", self.degrees())
    }
}

impl Serialize for Heading {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u16(self.degrees())
    }
}

impl<'de> Deserialize<'de> for Heading {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let deg = u16::deserialize(d)?;
        Heading::from_degrees(deg)
            .ok_or_else(|| serde::de::Error::custom(format!("invalid heading {deg}")))
    }
}

pub fn normalize_degrees(deg: f64) -> f64 {
    let r = deg.rem_euclid(360.0);
    if r >= 360.0 {
        0.0
    } else {
        r
    }
}

/// Smallest absolute difference between two angles, in `[0, 180]`.
pub fn angular_difference(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(360.0);
    d.min(360.0 - d)
}

/// Bearing from `from` to `to` in the horizontal plane, degrees in `[0, 360)`.
pub fn bearing(from: &Position, to: &Position) -> f64 {
    let dx = to[0] - from[0];
    let dy = to[1] - from[1];
    normalize_degrees(dx.atan2(dy).to_degrees())
}

pub fn euclidean(a: &Position, b: &Position) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Observation reference: a relative media path or an opaque backend id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ObsRef(pub String);

impl ObsRef {
    pub fn new(s: impl Into<String>) -> Self {
        ObsRef(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ObsRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// The four directional views of a node, indexed by [`Heading::index`].
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ViewSet([Option<ObsRef>; 4]);

impl ViewSet {
    pub fn new(
        north: Option<ObsRef>,
        east: Option<ObsRef>,
        south: Option<ObsRef>,
        west: Option<ObsRef>,
    ) -> Self {
        ViewSet([north, east, south, west])
    }

    pub fn get(&self, heading: Heading) -> Option<&ObsRef> {
        self.0[heading.index()].as_ref()
    }

    pub fn set(&mut self, heading: Heading, obs: Option<ObsRef>) {
        self.0[heading.index()] = obs;
    }

    pub fn iter(&self) -> impl Iterator<Item = (Heading, Option<&ObsRef>)> {
        Heading::ALL.into_iter().map(move |h| (h, self.get(h)))
    }

    pub fn is_complete(&self) -> bool {
        self.0.iter().all(Option::is_some)
    }
}

impl Serialize for ViewSet {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let map: BTreeMap<String, Option<&ObsRef>> = Heading::ALL
            .iter()
            .map(|h| (h.degrees().to_string(), self.get(*h)))
            .collect();
        // BTreeMap orders "0","180","270","90"; emit in heading order instead.
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(4))?;
        for h in Heading::ALL {
            let key = h.degrees().to_string();
            m.serialize_entry(&key, &map[&key])?;
        }
        m.end()
    }
}

impl<'de> Deserialize<'de> for ViewSet {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw: BTreeMap<String, Option<ObsRef>> = BTreeMap::deserialize(d)?;
        let mut views = ViewSet::default();
        for (key, value) in raw {
            let heading = key
                .parse::<u16>()
                .ok()
                .and_then(Heading::from_degrees)
                .ok_or_else(|| serde::de::Error::custom(format!("invalid view heading {key:?}")))?;
            views.set(heading, value);
        }
        Ok(views)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: String,
    pub position: Position,
    pub views: ViewSet,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub a: String,
    pub b: String,
    pub length: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum EdgeRepr {
    Weighted(String, String, f64),
    Bare(String, String),
}

#[derive(Serialize, Deserialize)]
struct EnvFile {
    env_id: String,
    simulator_kind: SimulatorKind,
    nodes: Vec<Node>,
    edges: Vec<EdgeRepr>,
}

/// A validated, immutable navigation graph.
#[derive(Debug, Clone)]
pub struct EnvGraph {
    env_id: String,
    kind: SimulatorKind,
    nodes: Vec<Node>,
    edges: Vec<Edge>,
    index: HashMap<String, usize>,
    /// Per node: (neighbor index, edge length), sorted by neighbor id.
    adjacency: Vec<Vec<(usize, f64)>>,
}

impl PartialEq for EnvGraph {
    fn eq(&self, other: &Self) -> bool {
        self.env_id == other.env_id
            && self.kind == other.kind
            && self.nodes == other.nodes
            && self.edges == other.edges
    }
}

/// A node sequence with its summed edge length.
#[derive(Debug, Clone, PartialEq)]
pub struct Route {
    pub nodes: Vec<String>,
    pub length: f64,
}

impl Route {
    pub fn hops(&self) -> usize {
        self.nodes.len().saturating_sub(1)
    }
}

impl EnvGraph {
    /// Builds and validates a graph. Edges given as `(a, b, None)` take the
    /// Euclidean distance between their endpoints.
    pub fn new(
        env_id: impl Into<String>,
        kind: SimulatorKind,
        nodes: Vec<Node>,
        edges: Vec<(String, String, Option<f64>)>,
    ) -> Result<Self, EnvError> {
        if nodes.is_empty() {
            return Err(EnvError::Empty);
        }
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, node) in nodes.iter().enumerate() {
            if index.insert(node.id.clone(), i).is_some() {
                return Err(EnvError::DuplicateNode(node.id.clone()));
            }
            if kind == SimulatorKind::DiscreteGraph {
                if let Some((heading, _)) = node.views.iter().find(|(_, v)| v.is_none()) {
                    return Err(EnvError::MissingView {
                        node: node.id.clone(),
                        heading,
                    });
                }
            }
        }

        let mut seen = HashSet::new();
        let mut adjacency = vec![Vec::new(); nodes.len()];
        let mut resolved = Vec::with_capacity(edges.len());
        for (a, b, length) in edges {
            let ia = *index.get(&a).ok_or_else(|| EnvError::DanglingEdge {
                from: a.clone(),
                to: b.clone(),
                missing: a.clone(),
            })?;
            let ib = *index.get(&b).ok_or_else(|| EnvError::DanglingEdge {
                from: a.clone(),
                to: b.clone(),
                missing: b.clone(),
            })?;
            if ia == ib {
                return Err(EnvError::SelfLoop(a));
            }
            let key = (ia.min(ib), ia.max(ib));
            if !seen.insert(key) {
                return Err(EnvError::DuplicateEdge(a, b));
            }
            let length =
                length.unwrap_or_else(|| euclidean(&nodes[ia].position, &nodes[ib].position));
            if !(length > 0.0 && length.is_finite()) {
                return Err(EnvError::NonPositiveLength {
                    from: a,
                    to: b,
                    length,
                });
            }
            adjacency[ia].push((ib, length));
            adjacency[ib].push((ia, length));
            resolved.push(Edge { a, b, length });
        }
        for list in &mut adjacency {
            list.sort_by(|x, y| nodes[x.0].id.cmp(&nodes[y.0].id));
        }

        let graph = EnvGraph {
            env_id: env_id.into(),
            kind,
            nodes,
            edges: resolved,
            index,
            adjacency,
        };
        graph.check_connected()?;
        Ok(graph)
    }

    /// A chain graph through `points`, one node per point, as produced for
    /// continuous simulators. Each node's view for its travel heading is
    /// `view_of(i, heading)`; other headings are absent.
    pub fn chain(
        env_id: impl Into<String>,
        points: &[Position],
        mut view_of: impl FnMut(usize, Heading) -> ObsRef,
    ) -> Result<Self, EnvError> {
        if points.len() < 2 {
            return Err(EnvError::PathTooShort {
                min: 2,
                got: points.len(),
            });
        }
        let n = points.len();
        let nodes = (0..n)
            .map(|i| {
                let (from, to) = if i + 1 < n { (i, i + 1) } else { (i - 1, i) };
                let heading = Heading::quantize(bearing(&points[from], &points[to]));
                let mut views = ViewSet::default();
                views.set(heading, Some(view_of(i, heading)));
                Node {
                    id: format!("{i:04}"),
                    position: points[i],
                    views,
                }
            })
            .collect::<Vec<_>>();
        let edges = (1..n)
            .map(|i| (format!("{:04}", i - 1), format!("{i:04}"), None))
            .collect();
        EnvGraph::new(env_id, SimulatorKind::Continuous, nodes, edges)
    }

    fn check_connected(&self) -> Result<(), EnvError> {
        let mut reached = vec![false; self.nodes.len()];
        let mut queue = VecDeque::from([0usize]);
        reached[0] = true;
        while let Some(u) = queue.pop_front() {
            for &(v, _) in &self.adjacency[u] {
                if !reached[v] {
                    reached[v] = true;
                    queue.push_back(v);
                }
            }
        }
        let unreachable: Vec<String> = reached
            .iter()
            .zip(&self.nodes)
            .filter(|(r, _)| !**r)
            .map(|(_, n)| n.id.clone())
            .collect();
        if unreachable.is_empty() {
            Ok(())
        } else {
            Err(EnvError::Disconnected {
                root: self.nodes[0].id.clone(),
                unreachable,
            })
        }
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let file: EnvFile =
            serde_json::from_str(text).map_err(|e| EnvError::Parse(e.to_string()))?;
        let edges = file
            .edges
            .into_iter()
            .map(|e| match e {
                EdgeRepr::Weighted(a, b, l) => (a, b, Some(l)),
                EdgeRepr::Bare(a, b) => (a, b, None),
            })
            .collect();
        EnvGraph::new(file.env_id, file.simulator_kind, file.nodes, edges)
    }

    /// Serializes to the normalized env format with every edge length explicit.
    pub fn to_json(&self) -> String {
        let file = EnvFile {
            env_id: self.env_id.clone(),
            simulator_kind: self.kind,
            nodes: self.nodes.clone(),
            edges: self
                .edges
                .iter()
                .map(|e| EdgeRepr::Weighted(e.a.clone(), e.b.clone(), e.length))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("env graph serializes")
    }

    pub fn env_id(&self) -> &str {
        &self.env_id
    }

    pub fn kind(&self) -> SimulatorKind {
        self.kind
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node(&self, id: &str) -> Result<&Node, EnvError> {
        self.index
            .get(id)
            .map(|&i| &self.nodes[i])
            .ok_or_else(|| EnvError::UnknownNode(id.to_string()))
    }

    pub fn contains(&self, id: &str) -> bool {
        self.index.contains_key(id)
    }

    fn idx(&self, id: &str) -> Result<usize, EnvError> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| EnvError::UnknownNode(id.to_string()))
    }

    /// Neighbors of `id` with edge lengths, in ascending id order.
    pub fn neighbors(&self, id: &str) -> Result<impl Iterator<Item = (&Node, f64)>, EnvError> {
        let i = self.idx(id)?;
        Ok(self.adjacency[i]
            .iter()
            .map(move |&(j, l)| (&self.nodes[j], l)))
    }

    pub fn edge_length(&self, a: &str, b: &str) -> Option<f64> {
        let ia = *self.index.get(a)?;
        let ib = *self.index.get(b)?;
        self.adjacency[ia]
            .iter()
            .find(|(j, _)| *j == ib)
            .map(|(_, l)| *l)
    }

    pub fn are_adjacent(&self, a: &str, b: &str) -> bool {
        self.edge_length(a, b).is_some()
    }

    fn dijkstra(&self, source: usize) -> Vec<f64> {
        #[derive(PartialEq)]
        struct Item(f64, usize);
        impl Eq for Item {}
        impl Ord for Item {
            fn cmp(&self, other: &Self) -> Ordering {
                other
                    .0
                    .total_cmp(&self.0)
                    .then_with(|| other.1.cmp(&self.1))
            }
        }
        impl PartialOrd for Item {
            fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
                Some(self.cmp(other))
            }
        }

        let mut dist = vec![f64::INFINITY; self.nodes.len()];
        dist[source] = 0.0;
        let mut heap = BinaryHeap::from([Item(0.0, source)]);
        while let Some(Item(d, u)) = heap.pop() {
            if d > dist[u] {
                continue;
            }
            for &(v, w) in &self.adjacency[u] {
                let nd = d + w;
                if nd < dist[v] {
                    dist[v] = nd;
                    heap.push(Item(nd, v));
                }
            }
        }
        dist
    }

    /// Minimal-length route from `a` to `b`. Among routes whose lengths agree
    /// to within a relative 1e-9, the lexicographically smallest id sequence
    /// is returned.
    pub fn shortest_path(&self, a: &str, b: &str) -> Result<Route, EnvError> {
        let ia = self.idx(a)?;
        let ib = self.idx(b)?;
        if ia == ib {
            return Ok(Route {
                nodes: vec![a.to_string()],
                length: 0.0,
            });
        }
        let from_a = self.dijkstra(ia);
        let to_b = self.dijkstra(ib);
        let total = from_a[ib];
        let eps = LENGTH_EPS * total.max(1.0);

        // Walk the shortest-path DAG greedily; adjacency is id-sorted so the
        // first qualifying neighbor yields the lexicographically smallest route.
        let mut route = vec![ia];
        let mut length = 0.0;
        let mut u = ia;
        while u != ib {
            let (v, w) = self.adjacency[u]
                .iter()
                .copied()
                .find(|&(v, w)| {
                    from_a[v] > from_a[u] && (length + w + to_b[v] - total).abs() <= eps
                })
                .expect("shortest-path DAG always has a successor");
            length += w;
            route.push(v);
            u = v;
        }
        Ok(Route {
            nodes: route
                .into_iter()
                .map(|i| self.nodes[i].id.clone())
                .collect(),
            length,
        })
    }

    /// Sum of edge lengths along `nodes`.
    pub fn path_length<S: AsRef<str>>(&self, nodes: &[S]) -> Result<f64, EnvError> {
        if let Some(first) = nodes.first() {
            self.idx(first.as_ref())?;
        }
        nodes.windows(2).try_fold(0.0, |acc, pair| {
            let (a, b) = (pair[0].as_ref(), pair[1].as_ref());
            self.idx(b)?;
            self.edge_length(a, b)
                .map(|l| acc + l)
                .ok_or_else(|| EnvError::NotAdjacent(a.to_string(), b.to_string()))
        })
    }

    /// Cardinal heading from `at` toward `toward`.
    pub fn heading_between(&self, at: &str, toward: &str) -> Result<Heading, EnvError> {
        if at == toward {
            return Err(EnvError::SameNode(at.to_string()));
        }
        let from = self.node(at)?;
        let to = self.node(toward)?;
        Ok(Heading::quantize(bearing(&from.position, &to.position)))
    }

    /// The view of `at` facing `toward`, or `None` when that view is absent.
    pub fn central_view(&self, at: &str, toward: &str) -> Result<Option<&ObsRef>, EnvError> {
        let heading = self.heading_between(at, toward)?;
        Ok(self.node(at)?.views.get(heading))
    }
}

pub fn load_env(path: impl AsRef<Path>) -> Result<EnvGraph, EnvError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| EnvError::Io {
        path: path.display().to_string(),
        source,
    })?;
    EnvGraph::from_json(&text)
}

pub fn shortest_path(env: &EnvGraph, a: &str, b: &str) -> Result<Route, EnvError> {
    env.shortest_path(a, b)
}

pub fn path_length<S: AsRef<str>>(env: &EnvGraph, nodes: &[S]) -> Result<f64, EnvError> {
    env.path_length(nodes)
}

pub fn central_view<'a>(
    env: &'a EnvGraph,
    at: &str,
    toward: &str,
) -> Result<Option<&'a ObsRef>, EnvError> {
    env.central_view(at, toward)
}

/// A start-to-goal navigation task along a concrete node path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub env_id: String,
    pub path: Vec<String>,
    pub geodesic_length: f64,
    #[serde(default)]
    pub reference_instructions: Vec<String>,
}

impl Episode {
    /// Validates the path against `env` and computes the geodesic length.
    pub fn new(
        env: &EnvGraph,
        episode_id: impl Into<String>,
        path: Vec<String>,
        reference_instructions: Vec<String>,
    ) -> Result<Self, EnvError> {
        if path.len() < 2 {
            return Err(EnvError::PathTooShort {
                min: 2,
                got: path.len(),
            });
        }
        env.path_length(&path)?;
        let geodesic_length = env.shortest_path(&path[0], &path[path.len() - 1])?.length;
        Ok(Episode {
            episode_id: episode_id.into(),
            env_id: env.env_id().to_string(),
            path,
            geodesic_length,
            reference_instructions,
        })
    }

    /// Re-validates a deserialized episode, recomputing its geodesic length.
    pub fn revalidate(self, env: &EnvGraph) -> Result<Self, EnvError> {
        Episode::new(env, self.episode_id, self.path, self.reference_instructions)
    }

    pub fn start(&self) -> &str {
        &self.path[0]
    }

    pub fn goal(&self) -> &str {
        &self.path[self.path.len() - 1]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathSpec {
    pub min_hops: usize,
    pub max_hops: usize,
    pub seed: u64,
}

impl PathSpec {
    pub fn new(min_hops: usize, max_hops: usize, seed: u64) -> Result<Self, EnvError> {
        let spec = PathSpec {
            min_hops,
            max_hops,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.min_hops < 2 || self.min_hops > self.max_hops {
            return Err(EnvError::InvalidSpec(format!(
                "need 2 <= min_hops <= max_hops, got {}..{}",
                self.min_hops, self.max_hops
            )));
        }
        Ok(())
    }
}

/// Draws distinct node pairs until one's shortest path has a hop count inside
/// the spec bounds. Deterministic in `(env, spec)`.
pub fn sample_episode(env: &EnvGraph, spec: &PathSpec) -> Result<Episode, EnvError> {
    spec.validate()?;
    let n = env.nodes().len();
    let no_pair = EnvError::NoQualifyingPair {
        min_hops: spec.min_hops,
        max_hops: spec.max_hops,
        attempts: SAMPLE_ATTEMPT_CAP,
    };
    if n < 2 {
        return Err(no_pair);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for _ in 0..SAMPLE_ATTEMPT_CAP {
        let a = rng.random_range(0..n);
        let mut b = rng.random_range(0..n - 1);
        if b >= a {
            b += 1;
        }
        let start = &env.nodes()[a].id;
        let goal = &env.nodes()[b].id;
        let route = env.shortest_path(start, goal)?;
        if (spec.min_hops..=spec.max_hops).contains(&route.hops()) {
            return Ok(Episode {
                episode_id: format!("{}-{}", env.env_id(), spec.seed),
                env_id: env.env_id().to_string(),
                path: route.nodes,
                geodesic_length: route.length,
                reference_instructions: Vec::new(),
            });
        }
    }
    Err(no_pair)
}

/// Points at arc-length multiples of `interval` along the polyline, always
/// including both endpoints.
pub fn discretize_path(waypoints: &[Position], interval: f64) -> Result<Vec<Position>, EnvError> {
    if waypoints.len() < 2 {
        return Err(EnvError::InvalidPolyline(format!(
            "need at least 2 waypoints, got {}",
            waypoints.len()
        )));
    }
    if !(interval > 0.0 && interval.is_finite()) {
        return Err(EnvError::InvalidPolyline(format!(
            "interval must be positive, got {interval}"
        )));
    }
    let mut cumulative = Vec::with_capacity(waypoints.len());
    let mut total = 0.0;
    cumulative.push(0.0);
    for pair in waypoints.windows(2) {
        total += euclidean(&pair[0], &pair[1]);
        cumulative.push(total);
    }
    let eps = LENGTH_EPS * total.max(1.0);

    let mut points = vec![waypoints[0]];
    let mut segment = 0;
    let mut k = 1u64;
    loop {
        let s = k as f64 * interval;
        if s >= total - eps {
            break;
        }
        while cumulative[segment + 1] < s {
            segment += 1;
        }
        let seg_len = cumulative[segment + 1] - cumulative[segment];
        let t = if seg_len > 0.0 {
            (s - cumulative[segment]) / seg_len
        } else {
            0.0
        };
        let (p, q) = (waypoints[segment], waypoints[segment + 1]);
        points.push([
            p[0] + t * (q[0] - p[0]),
            p[1] + t * (q[1] - p[1]),
            p[2] + t * (q[2] - p[2]),
        ]);
        k += 1;
    }
    points.push(waypoints[waypoints.len() - 1]);
    Ok(points)
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn views_for(id: &str) -> ViewSet {
        ViewSet::new(
            Some(ObsRef::new(format!("{id}_0"))),
            Some(ObsRef::new(format!("{id}_90"))),
            Some(ObsRef::new(format!("{id}_180"))),
            Some(ObsRef::new(format!("{id}_270"))),
        )
    }

    /// Five-node fixture: A(0,0,0) B(5,0,0) C(10,0,0) D(10,5,0) E(5,6,0).
    pub fn g6() -> EnvGraph {
        let pos = [
            ("A", [0.0, 0.0, 0.0]),
            ("B", [5.0, 0.0, 0.0]),
            ("C", [10.0, 0.0, 0.0]),
            ("D", [10.0, 5.0, 0.0]),
            ("E", [5.0, 6.0, 0.0]),
        ];
        let nodes = pos
            .iter()
            .map(|(id, p)| Node {
                id: id.to_string(),
                position: *p,
                views: views_for(id),
            })
            .collect();
        let edges = [("A", "B"), ("B", "C"), ("C", "D"), ("D", "E"), ("B", "E")]
            .iter()
            .map(|(a, b)| (a.to_string(), b.to_string(), None))
            .collect();
        EnvGraph::new("g6", SimulatorKind::DiscreteGraph, nodes, edges).unwrap()
    }
}
