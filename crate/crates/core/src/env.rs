//! Discrete graph-world environment.
//!
//! A world is a set of viewpoints with 3D poses, undirected traversable edges
//! and one pre-annotated observation per directed edge. Poses are only used to
//! derive direction phrases and metric distances; they never reach a prompt.

use alloc::collections::{BTreeMap, BTreeSet, BinaryHeap};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Environment viewpoint identifier.
pub type NodeId = String;

/// Elevation change (meters) above which a move is "go up"/"go down".
pub const FLOOR_CHANGE_M: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WorldError {
    #[error("world has no nodes")]
    Empty,
    #[error("duplicate node id `{0}`")]
    DuplicateNode(NodeId),
    #[error("node `{0}` has a non-finite pose")]
    NonFinitePose(NodeId),
    #[error("nodes `{0}` and `{1}` share an identical pose")]
    DuplicatePose(NodeId, NodeId),
    #[error("edge ({0}, {1}) references unknown node `{2}`")]
    DanglingEdge(NodeId, NodeId, NodeId),
    #[error("self-loop edge on `{0}`")]
    SelfLoop(NodeId),
    #[error("missing observation ({0}, {1})")]
    MissingObservation(NodeId, NodeId),
    #[error("observation ({0}, {1}) does not belong to an edge")]
    ObservationWithoutEdge(NodeId, NodeId),
    #[error("duplicate observation ({0}, {1})")]
    DuplicateObservation(NodeId, NodeId),
    #[error("observation ({0}, {1}) has an empty caption")]
    EmptyCaption(NodeId, NodeId),
    #[error("observation ({0}, {1}) has an empty image_ref")]
    EmptyImageRef(NodeId, NodeId),
    #[error("node_objects references unknown node `{0}`")]
    UnknownObjectNode(NodeId),
    #[error("world is disconnected: `{0}` is unreachable from `{1}`")]
    Disconnected(NodeId, NodeId),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("`{0}` and `{1}` are not adjacent")]
    NotAdjacent(NodeId, NodeId),
}

/// Viewpoint position in meters; right-handed, `z` is elevation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Pose {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Pose { x, y, z }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn distance(&self, other: &Pose) -> f64 {
        let (dx, dy, dz) = (other.x - self.x, other.y - self.y, other.z - self.z);
        libm::sqrt(dx * dx + dy * dy + dz * dz)
    }

    /// Compass bearing towards `other` in degrees, (-180, 180].
    ///
    /// 0 points along +y and angles grow clockwise seen from above, so +x is
    /// 90. A purely vertical displacement has bearing 0.
    pub fn bearing_to(&self, other: &Pose) -> f64 {
        let (dx, dy) = (other.x - self.x, other.y - self.y);
        if dx == 0.0 && dy == 0.0 {
            return 0.0;
        }
        normalize_degrees(libm::atan2(dx, dy).to_degrees())
    }
}

impl From<[f64; 3]> for Pose {
    fn from([x, y, z]: [f64; 3]) -> Self {
        Pose { x, y, z }
    }
}

impl From<Pose> for [f64; 3] {
    fn from(p: Pose) -> Self {
        [p.x, p.y, p.z]
    }
}

/// Wraps an angle into (-180, 180].
pub fn normalize_degrees(deg: f64) -> f64 {
    let mut d = deg % 360.0;
    if d <= -180.0 {
        d += 360.0;
    } else if d > 180.0 {
        d -= 360.0;
    }
    d
}

/// Pre-computed description of what the agent sees towards one neighbor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationAnnotation {
    pub caption: String,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub image_ref: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DirectionLabel {
    #[serde(rename = "go forward to")]
    Forward,
    #[serde(rename = "turn left to")]
    Left,
    #[serde(rename = "turn right to")]
    Right,
    #[serde(rename = "turn around to")]
    Around,
    #[serde(rename = "go up to")]
    Up,
    #[serde(rename = "go down to")]
    Down,
}

impl DirectionLabel {
    pub const ALL: [DirectionLabel; 6] = [
        DirectionLabel::Forward,
        DirectionLabel::Left,
        DirectionLabel::Right,
        DirectionLabel::Around,
        DirectionLabel::Up,
        DirectionLabel::Down,
    ];

    pub fn phrase(self) -> &'static str {
        match self {
            DirectionLabel::Forward => "go forward to",
            DirectionLabel::Left => "turn left to",
            DirectionLabel::Right => "turn right to",
            DirectionLabel::Around => "turn around to",
            DirectionLabel::Up => "go up to",
            DirectionLabel::Down => "go down to",
        }
    }
}

impl fmt::Display for DirectionLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.phrase())
    }
}

/// Maps a relative heading (degrees, positive = clockwise/right) and an
/// elevation change (meters) onto one of the six direction phrases.
///
/// Elevation wins over heading: more than one meter up or down is a floor
/// change regardless of bearing.
pub fn classify_direction(rel_heading: f64, rel_elevation: f64) -> DirectionLabel {
    if rel_elevation > FLOOR_CHANGE_M {
        return DirectionLabel::Up;
    }
    if rel_elevation < -FLOOR_CHANGE_M {
        return DirectionLabel::Down;
    }
    let h = normalize_degrees(rel_heading);
    if (-45.0..=45.0).contains(&h) {
        DirectionLabel::Forward
    } else if h > 45.0 && h <= 135.0 {
        DirectionLabel::Right
    } else if (-135.0..-45.0).contains(&h) {
        DirectionLabel::Left
    } else {
        DirectionLabel::Around
    }
}

/// A navigable neighbor as seen from the agent's current viewpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub neighbor: NodeId,
    pub direction: DirectionLabel,
    /// Relative heading in [0, 360); the candidate sort key.
    pub rel_heading: f64,
    pub obs: ObservationAnnotation,
}

/// On-disk world layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldFile {
    pub world_id: String,
    pub nodes: Vec<NodeEntry>,
    #[serde(default)]
    pub edges: Vec<[NodeId; 2]>,
    #[serde(default)]
    pub observations: Vec<ObservationEntry>,
    #[serde(default)]
    pub node_objects: BTreeMap<NodeId, Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeEntry {
    pub id: NodeId,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationEntry {
    pub from: NodeId,
    pub to: NodeId,
    pub caption: String,
    #[serde(default)]
    pub objects: Vec<String>,
    #[serde(default)]
    pub image_ref: Option<String>,
}

/// Validated, immutable ground-truth environment.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldGraph {
    world_id: String,
    nodes: BTreeMap<NodeId, Pose>,
    adjacency: BTreeMap<NodeId, BTreeSet<NodeId>>,
    obs: BTreeMap<(NodeId, NodeId), ObservationAnnotation>,
    node_objects: BTreeMap<NodeId, Vec<String>>,
}

impl WorldGraph {
    /// Validates a parsed world file.
    pub fn from_file(file: WorldFile) -> Result<Self, WorldError> {
        if file.nodes.is_empty() {
            return Err(WorldError::Empty);
        }
        let mut nodes = BTreeMap::new();
        for n in &file.nodes {
            if !n.pose.is_finite() {
                return Err(WorldError::NonFinitePose(n.id.clone()));
            }
            if nodes.insert(n.id.clone(), n.pose).is_some() {
                return Err(WorldError::DuplicateNode(n.id.clone()));
            }
        }
        for (i, a) in file.nodes.iter().enumerate() {
            for b in &file.nodes[i + 1..] {
                if a.pose == b.pose {
                    return Err(WorldError::DuplicatePose(a.id.clone(), b.id.clone()));
                }
            }
        }

        let mut adjacency: BTreeMap<NodeId, BTreeSet<NodeId>> =
            nodes.keys().map(|k| (k.clone(), BTreeSet::new())).collect();
        for [a, b] in &file.edges {
            for end in [a, b] {
                if !nodes.contains_key(end) {
                    return Err(WorldError::DanglingEdge(a.clone(), b.clone(), end.clone()));
                }
            }
            if a == b {
                return Err(WorldError::SelfLoop(a.clone()));
            }
            adjacency.get_mut(a).unwrap().insert(b.clone());
            adjacency.get_mut(b).unwrap().insert(a.clone());
        }

        let mut obs = BTreeMap::new();
        for o in file.observations {
            if !adjacency.get(&o.from).is_some_and(|s| s.contains(&o.to)) {
                return Err(WorldError::ObservationWithoutEdge(o.from, o.to));
            }
            if o.caption.trim().is_empty() {
                return Err(WorldError::EmptyCaption(o.from, o.to));
            }
            if o.image_ref.as_deref().is_some_and(str::is_empty) {
                return Err(WorldError::EmptyImageRef(o.from, o.to));
            }
            let key = (o.from, o.to);
            if obs.contains_key(&key) {
                return Err(WorldError::DuplicateObservation(key.0, key.1));
            }
            let ann = ObservationAnnotation {
                caption: o.caption,
                objects: o.objects,
                image_ref: o.image_ref,
            };
            obs.insert(key, ann);
        }
        for (a, ns) in &adjacency {
            for b in ns {
                if !obs.contains_key(&(a.clone(), b.clone())) {
                    return Err(WorldError::MissingObservation(a.clone(), b.clone()));
                }
            }
        }

        for k in file.node_objects.keys() {
            if !nodes.contains_key(k) {
                return Err(WorldError::UnknownObjectNode(k.clone()));
            }
        }

        let world = WorldGraph {
            world_id: file.world_id,
            nodes,
            adjacency,
            obs,
            node_objects: file.node_objects,
        };
        world.check_connected()?;
        Ok(world)
    }

    fn check_connected(&self) -> Result<(), WorldError> {
        let root = self.nodes.keys().next().expect("non-empty");
        let mut seen = BTreeSet::new();
        let mut stack = alloc::vec![root.as_str()];
        while let Some(n) = stack.pop() {
            if seen.insert(n) {
                stack.extend(self.adjacency[n].iter().map(String::as_str));
            }
        }
        match self.nodes.keys().find(|k| !seen.contains(k.as_str())) {
            Some(missing) => Err(WorldError::Disconnected(missing.clone(), root.clone())),
            None => Ok(()),
        }
    }

    /// Serializable form, with observations in (from, to) order.
    pub fn to_file(&self) -> WorldFile {
        let mut edges = Vec::new();
        for (a, ns) in &self.adjacency {
            for b in ns.iter().filter(|b| a < *b) {
                edges.push([a.clone(), b.clone()]);
            }
        }
        WorldFile {
            world_id: self.world_id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|(id, pose)| NodeEntry { id: id.clone(), pose: *pose })
                .collect(),
            edges,
            observations: self
                .obs
                .iter()
                .map(|((from, to), o)| ObservationEntry {
                    from: from.clone(),
                    to: to.clone(),
                    caption: o.caption.clone(),
                    objects: o.objects.clone(),
                    image_ref: o.image_ref.clone(),
                })
                .collect(),
            node_objects: self.node_objects.clone(),
        }
    }

    pub fn world_id(&self) -> &str {
        &self.world_id
    }

    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains_key(node)
    }

    pub fn pose(&self, node: &str) -> Option<&Pose> {
        self.nodes.get(node)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = &str> {
        self.nodes.keys().map(String::as_str)
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.values().map(BTreeSet::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, node: &str) -> impl Iterator<Item = &str> {
        self.adjacency.get(node).into_iter().flatten().map(String::as_str)
    }

    pub fn is_adjacent(&self, a: &str, b: &str) -> bool {
        self.adjacency.get(a).is_some_and(|s| s.contains(b))
    }

    pub fn observation(&self, from: &str, to: &str) -> Option<&ObservationAnnotation> {
        self.obs.get(&(from.to_string(), to.to_string()))
    }

    /// Objects visible around `node` (the "Surroundings" pool).
    pub fn objects_at(&self, node: &str) -> &[String] {
        self.node_objects.get(node).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Straight-line length of the edge between `a` and `b`.
    pub fn edge_length(&self, a: &str, b: &str) -> Option<f64> {
        if !self.is_adjacent(a, b) {
            return None;
        }
        Some(self.nodes[a].distance(&self.nodes[b]))
    }

    /// Navigable neighbors of `at` seen while facing `heading`, sorted by
    /// relative heading in [0, 360) (forward first, sweeping right), ties by
    /// node id.
    pub fn candidates(&self, at: &str, heading: f64) -> Vec<Candidate> {
        let Some(here) = self.nodes.get(at) else {
            return Vec::new();
        };
        let mut out: Vec<Candidate> = self
            .neighbors(at)
            .map(|n| {
                let there = &self.nodes[n];
                let rel = normalize_degrees(here.bearing_to(there) - heading);
                Candidate {
                    neighbor: n.to_string(),
                    direction: classify_direction(rel, there.z - here.z),
                    rel_heading: sweep_key(rel),
                    obs: self.obs[&(at.to_string(), n.to_string())].clone(),
                }
            })
            .collect();
        out.sort_by(|a, b| {
            a.rel_heading
                .total_cmp(&b.rel_heading)
                .then_with(|| a.neighbor.cmp(&b.neighbor))
        });
        out
    }

    /// Moves along the edge `at -> to`; the agent ends up facing the edge's
    /// bearing.
    pub fn step(&self, at: &str, to: &str) -> Result<(NodeId, f64), WorldError> {
        for n in [at, to] {
            if !self.contains(n) {
                return Err(WorldError::UnknownNode(n.to_string()));
            }
        }
        if !self.is_adjacent(at, to) {
            return Err(WorldError::NotAdjacent(at.to_string(), to.to_string()));
        }
        let heading = self.nodes[at].bearing_to(&self.nodes[to]);
        Ok((to.to_string(), heading))
    }

    /// Single-source shortest path lengths with Euclidean edge weights.
    pub fn distances_from(&self, source: &str) -> BTreeMap<&str, f64> {
        let mut dist: BTreeMap<&str, f64> = BTreeMap::new();
        let Some((src, _)) = self.nodes.get_key_value(source) else {
            return dist;
        };
        let mut heap = BinaryHeap::new();
        dist.insert(src.as_str(), 0.0);
        heap.push(Frontier { cost: 0.0, node: src.as_str() });
        while let Some(Frontier { cost, node }) = heap.pop() {
            if cost > dist[node] {
                continue;
            }
            for next in &self.adjacency[node] {
                let c = cost + self.nodes[node].distance(&self.nodes[next]);
                let better = dist.get(next.as_str()).is_none_or(|&d| c < d);
                if better {
                    dist.insert(next.as_str(), c);
                    heap.push(Frontier { cost: c, node: next.as_str() });
                }
            }
        }
        dist
    }

    /// Shortest-path length between two nodes; infinite when either node is
    /// unknown.
    pub fn geodesic(&self, a: &str, b: &str) -> f64 {
        // Always search from the smaller id so float summation order, and
        // hence the result, is identical in both directions.
        let (src, dst) = if a <= b { (a, b) } else { (b, a) };
        if !self.contains(dst) {
            return f64::INFINITY;
        }
        self.distances_from(src).get(dst).copied().unwrap_or(f64::INFINITY)
    }

    /// One shortest path from `a` to `b`, endpoints included.
    pub fn shortest_path(&self, a: &str, b: &str) -> Option<Vec<NodeId>> {
        let dist = self.distances_from(b);
        let mut cur = a;
        let mut path = alloc::vec![cur.to_string()];
        dist.get(a)?;
        while cur != b {
            let here = dist[cur];
            // Next hop: the neighbor that lies on a shortest path, lowest id.
            let next = self
                .neighbors(cur)
                .find(|n| {
                    let via = self.nodes[cur].distance(&self.nodes[*n]) + dist[n];
                    (via - here).abs() <= 1e-9 * here.max(1.0) && dist[n] < here
                })?;
            path.push(next.to_string());
            cur = next;
        }
        Some(path)
    }
}

/// Maps (-180, 180] onto [0, 360), snapping float noise around zero.
fn sweep_key(rel: f64) -> f64 {
    if rel.abs() < 1e-9 {
        0.0
    } else if rel < 0.0 {
        rel + 360.0
    } else {
        rel
    }
}

#[derive(Debug, Clone, Copy)]
struct Frontier<'a> {
    cost: f64,
    node: &'a str,
}

impl PartialEq for Frontier<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Frontier<'_> {}

impl PartialOrd for Frontier<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Frontier<'_> {
    // Min-heap on cost.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .cost
            .total_cmp(&self.cost)
            .then_with(|| other.node.cmp(self.node))
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;
    use alloc::format;
    use alloc::vec;

    pub fn obs(from: &str, to: &str) -> ObservationEntry {
        ObservationEntry {
            from: from.into(),
            to: to.into(),
            caption: format!("view from {from} to {to}"),
            objects: vec![format!("{to}-thing")],
            image_ref: None,
        }
    }

    /// World with the given poses and edges and generated annotations.
    pub fn world(nodes: &[(&str, [f64; 3])], edges: &[(&str, &str)]) -> WorldGraph {
        let file = WorldFile {
            world_id: "w".into(),
            nodes: nodes
                .iter()
                .map(|(id, p)| NodeEntry { id: (*id).into(), pose: Pose::from(*p) })
                .collect(),
            edges: edges.iter().map(|(a, b)| [(*a).into(), (*b).into()]).collect(),
            observations: edges
                .iter()
                .flat_map(|(a, b)| [obs(a, b), obs(b, a)])
                .collect(),
            node_objects: BTreeMap::new(),
        };
        WorldGraph::from_file(file).unwrap()
    }

    /// a-b-c-d-e along +y with segments 2, 3, 1.5, 4 m.
    pub fn chain() -> WorldGraph {
        world(
            &[
                ("a", [0.0, 0.0, 0.0]),
                ("b", [0.0, 2.0, 0.0]),
                ("c", [0.0, 5.0, 0.0]),
                ("d", [0.0, 6.5, 0.0]),
                ("e", [0.0, 10.5, 0.0]),
            ],
            &[("a", "b"), ("b", "c"), ("c", "d"), ("d", "e")],
        )
    }

    pub fn triangle() -> WorldGraph {
        // |pq| = 3, |qr| = 4, |pr| = 5
        world(
            &[("p", [0.0, 0.0, 0.0]), ("q", [3.0, 0.0, 0.0]), ("r", [3.0, 4.0, 0.0])],
            &[("p", "q"), ("q", "r"), ("p", "r")],
        )
    }
}
