//! Deterministic synthetic worlds, episodes and scripted policies used by
//! the bundled fixtures and benchmarks.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use mapnav_core::agent::{nearest_goal_route, route_labels, run_episode, AgentConfig, EpisodeSpec};
use mapnav_core::env::{NodeEntry, NodeId, ObservationEntry, Pose, WorldFile, WorldGraph};
use mapnav_core::llm::{BackendError, FnBackend, LlmRequest, ScriptedBackend};
use mapnav_core::prompts::Dataset;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backends::script_lines;
use crate::io::{write_jsonl, write_world, IoError};

const ROOMS: &[&str] = &[
    "a narrow hallway",
    "a bright kitchen",
    "a living room with a fireplace",
    "a bedroom with a large bed",
    "a bathroom with white tiles",
    "a dining room",
    "a wooden staircase",
    "an office with a desk",
    "a laundry room",
    "an entryway with a coat rack",
];

const OBJECTS: &[&str] = &[
    "sofa", "lamp", "table", "chair", "plant", "painting", "mirror", "rug", "shelf", "piano", "sink",
    "towel", "clock", "vase",
];

/// Worlds plus the episodes that run in them.
#[derive(Debug, Clone, Default)]
pub struct Suite {
    pub worlds: BTreeMap<String, WorldGraph>,
    pub episodes: Vec<EpisodeSpec>,
}

impl Suite {
    /// Writes `<dir>/worlds/<world_id>.json` and `<dir>/episodes.jsonl`.
    pub fn write_to(&self, dir: &Path) -> Result<(), IoError> {
        let wdir = dir.join("worlds");
        std::fs::create_dir_all(&wdir).map_err(|e| IoError::io(&wdir, e))?;
        for (id, w) in &self.worlds {
            write_world(&wdir.join(format!("{id}.json")), w)?;
        }
        write_jsonl(&dir.join("episodes.jsonl"), &self.episodes)
    }
}

/// Connected world with `n` nodes on a jittered grid: a random spanning
/// tree plus a few shortcut edges between nearby nodes.
pub fn random_world(rng: &mut impl Rng, world_id: &str, n: usize) -> WorldGraph {
    assert!(n >= 1);
    let mut cells: Vec<(i32, i32)> = (0..4).flat_map(|x| (0..4).map(move |y| (x, y))).collect();
    cells.shuffle(rng);
    let ids: Vec<NodeId> = (0..n).map(|i| format!("n{i}")).collect();
    let nodes: Vec<NodeEntry> = ids
        .iter()
        .zip(&cells)
        .map(|(id, &(cx, cy))| NodeEntry {
            id: id.clone(),
            pose: Pose {
                x: f64::from(cx) * 3.0 + rng.gen_range(-0.8..0.8),
                y: f64::from(cy) * 3.0 + rng.gen_range(-0.8..0.8),
                z: 0.0,
            },
        })
        .collect();

    let dist = |a: usize, b: usize| nodes[a].pose.distance(&nodes[b].pose);
    let mut edges = BTreeSet::new();
    for i in 1..n {
        // Attach to one of the two nearest earlier nodes.
        let mut earlier: Vec<usize> = (0..i).collect();
        earlier.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        let j = earlier[rng.gen_range(0..earlier.len().min(2))];
        edges.insert((j.min(i), j.max(i)));
    }
    for a in 0..n {
        for b in a + 1..n {
            if dist(a, b) < 4.8 && rng.gen_bool(0.3) {
                edges.insert((a, b));
            }
        }
    }

    let rooms: Vec<&str> = (0..n).map(|_| *ROOMS.choose(rng).unwrap()).collect();
    let mut observations = Vec::new();
    for &(a, b) in &edges {
        for (from, to) in [(a, b), (b, a)] {
            let k = rng.gen_range(0..3);
            observations.push(ObservationEntry {
                from: ids[from].clone(),
                to: ids[to].clone(),
                caption: rooms[to].to_string(),
                objects: OBJECTS.choose_multiple(rng, k).map(|s| s.to_string()).collect(),
                image_ref: Some(format!("images/{world_id}/{}_{}.jpg", ids[from], ids[to])),
            });
        }
    }
    let node_objects = ids
        .iter()
        .map(|id| {
            let k = rng.gen_range(0..3);
            (id.clone(), OBJECTS.choose_multiple(rng, k).map(|s| s.to_string()).collect())
        })
        .collect();
    let file = WorldFile {
        world_id: world_id.to_string(),
        nodes,
        edges: edges.into_iter().map(|(a, b)| [ids[a].clone(), ids[b].clone()]).collect(),
        observations,
        node_objects,
    };
    WorldGraph::from_file(file).expect("generated world is valid")
}

fn instruction_for(world: &WorldGraph, goal: &str) -> String {
    let caption = world
        .neighbors(goal)
        .next()
        .and_then(|nb| world.observation(nb, goal))
        .map_or("the room", |o| o.caption.as_str());
    format!("Walk through the house and stop in {caption}.")
}

/// `count` worlds of 4 to 10 nodes, one episode each whose goal lies more
/// than 3 m (by path) from the start.
pub fn benchmark_suite(seed: u64, count: usize) -> Suite {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = Suite::default();
    for i in 0..count {
        let n = 4 + i % 7;
        let id = format!("synth-{i:03}");
        let world = random_world(&mut rng, &id, n);
        let nodes: Vec<&str> = world.node_ids().collect();
        let start = nodes[rng.gen_range(0..n)];
        let far: Vec<&str> = nodes.iter().copied().filter(|g| world.geodesic(start, g) > 3.0).collect();
        let pool = if far.is_empty() { nodes.iter().copied().filter(|g| *g != start).collect() } else { far };
        let goal = *pool.choose(&mut rng).unwrap();
        suite.episodes.push(EpisodeSpec {
            episode_id: format!("{id}-ep0"),
            world_id: id.clone(),
            instruction: instruction_for(&world, goal),
            start_node: start.into(),
            start_heading: f64::from(rng.gen_range(0..12) * 30),
            style: Dataset::R2R,
            goal_nodes: vec![goal.into()],
            target_object: None,
        });
        suite.worlds.insert(id, world);
    }
    suite
}

/// Replies that follow the shortest path to the nearest goal, then stop.
pub fn oracle_script(suite: &Suite) -> ScriptedBackend {
    let mut b = ScriptedBackend::new();
    for ep in &suite.episodes {
        let world = &suite.worlds[&ep.world_id];
        let route = nearest_goal_route(world, &ep.start_node, &ep.goal_nodes).expect("goal reachable");
        let labels = route_labels(world, ep.start_heading, &route).expect("route is a walk");
        b.push_labels(&ep.episode_id, &labels);
    }
    b
}

/// Episodes where the start has a neighbor `w1` farther from the goal and
/// `w1` has another neighbor `w2` farther still. The script walks
/// start, w1, w2, retraces to the start and then takes the shortest path.
pub fn wanderer_suite(seed: u64, count: usize, max_steps: usize) -> (Suite, ScriptedBackend) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut suite = Suite::default();
    let mut script = ScriptedBackend::new();
    let mut i = 0;
    while suite.episodes.len() < count {
        assert!(i < count * 50, "could not build enough wanderer episodes");
        let id = format!("wander-{i:03}");
        i += 1;
        let n = rng.gen_range(5..=10);
        let world = random_world(&mut rng, &id, n);
        let nodes: Vec<NodeId> = world.node_ids().map(String::from).collect();
        let goal = nodes.choose(&mut rng).unwrap().clone();
        let d = |n: &str| world.geodesic(n, &goal);
        let mut found = None;
        'outer: for s in &nodes {
            if *s == goal {
                continue;
            }
            for w1 in world.neighbors(s).filter(|w| d(w) > d(s)) {
                if let Some(w2) = world.neighbors(w1).find(|w| w != s && d(w) > d(w1)) {
                    found = Some((s.clone(), w1.to_string(), w2.to_string()));
                    break 'outer;
                }
            }
        }
        let Some((s, w1, w2)) = found else { continue };
        let mut route = vec![s.clone(), w1.clone(), w2, w1, s.clone()];
        route.extend(world.shortest_path(&s, &goal).unwrap().into_iter().skip(1));
        let heading = f64::from(rng.gen_range(0..12) * 30);
        let labels = route_labels(&world, heading, &route).unwrap();
        if labels.len() > max_steps {
            continue;
        }
        let ep_id = format!("{id}-ep0");
        script.push_labels(&ep_id, &labels);
        suite.episodes.push(EpisodeSpec {
            episode_id: ep_id,
            world_id: id.clone(),
            instruction: instruction_for(&world, &goal),
            start_node: s,
            start_heading: heading,
            style: Dataset::R2R,
            goal_nodes: vec![goal],
            target_object: None,
        });
        suite.worlds.insert(id, world);
    }
    (suite, script)
}

fn obs(from: &str, to: &str, caption: &str, objects: &[&str]) -> ObservationEntry {
    ObservationEntry {
        from: from.into(),
        to: to.into(),
        caption: caption.into(),
        objects: objects.iter().map(|s| s.to_string()).collect(),
        image_ref: Some(format!("images/{from}_{to}.jpg")),
    }
}

/// Four rooms: a-b, a-c, b-d.
pub fn golden_world() -> WorldGraph {
    let pose = |x, y| Pose { x, y, z: 0.0 };
    let file = WorldFile {
        world_id: "golden".into(),
        nodes: vec![
            NodeEntry { id: "a".into(), pose: pose(0.0, 0.0) },
            NodeEntry { id: "b".into(), pose: pose(0.0, 3.0) },
            NodeEntry { id: "c".into(), pose: pose(-3.0, 0.0) },
            NodeEntry { id: "d".into(), pose: pose(2.5, 5.5) },
        ],
        edges: vec![["a".into(), "b".into()], ["a".into(), "c".into()], ["b".into(), "d".into()]],
        observations: vec![
            obs("a", "b", "a hallway with a wooden floor", &["rug", "lamp"]),
            obs("a", "c", "a kitchen with a marble counter", &["sink", "stool"]),
            obs("b", "a", "an entryway with a coat rack", &["coat rack"]),
            obs("b", "d", "a bedroom with a large bed", &["bed", "painting"]),
            obs("d", "b", "a hallway with a wooden floor", &["rug"]),
            obs("c", "a", "an entryway with a coat rack", &[]),
        ],
        node_objects: BTreeMap::from([
            ("b".into(), vec!["rug".into(), "lamp".into()]),
            ("d".into(), vec!["bed".into(), "painting".into()]),
        ]),
    };
    WorldGraph::from_file(file).expect("golden world is valid")
}

pub fn golden_episode() -> EpisodeSpec {
    EpisodeSpec {
        episode_id: "golden-ep0".into(),
        world_id: "golden".into(),
        instruction: "Walk down the hallway and wait in the bedroom.".into(),
        start_node: "a".into(),
        start_heading: 0.0,
        style: Dataset::R2R,
        goal_nodes: vec!["d".into()],
        target_object: None,
    }
}

/// The fixed walk a, b, d, back to b, then stop.
pub fn golden_route() -> Vec<NodeId> {
    ["a", "b", "d", "b"].map(String::from).to_vec()
}

pub fn golden_script() -> ScriptedBackend {
    let labels = route_labels(&golden_world(), 0.0, &golden_route()).expect("golden walk is valid");
    ScriptedBackend::from_labels(&golden_episode().episode_id, &labels)
}

/// A corridor that turns right at `hall1`, with a dead-end den straight
/// ahead; the piano is only at `hall3`.
pub fn reverie_world() -> WorldGraph {
    let pose = |x, y| Pose { x, y, z: 0.0 };
    let file = WorldFile {
        world_id: "reverie".into(),
        nodes: vec![
            NodeEntry { id: "hall0".into(), pose: pose(0.0, 0.0) },
            NodeEntry { id: "hall1".into(), pose: pose(0.0, 3.0) },
            NodeEntry { id: "den".into(), pose: pose(0.0, 6.0) },
            NodeEntry { id: "hall2".into(), pose: pose(3.0, 3.0) },
            NodeEntry { id: "hall3".into(), pose: pose(6.0, 3.0) },
        ],
        edges: vec![
            ["hall0".into(), "hall1".into()],
            ["hall1".into(), "den".into()],
            ["hall1".into(), "hall2".into()],
            ["hall2".into(), "hall3".into()],
        ],
        observations: vec![
            obs("hall0", "hall1", "a long corridor", &["lamp"]),
            obs("hall1", "hall0", "a front door", &[]),
            obs("hall1", "den", "a small den", &["sofa"]),
            obs("den", "hall1", "a long corridor", &["lamp"]),
            obs("hall1", "hall2", "a corridor with paintings", &["painting"]),
            obs("hall2", "hall1", "a long corridor", &["lamp"]),
            obs("hall2", "hall3", "a music room", &[]),
            obs("hall3", "hall2", "a corridor with paintings", &["painting"]),
        ],
        node_objects: BTreeMap::from([
            ("hall0".into(), vec!["coat rack".into()]),
            ("hall1".into(), vec!["lamp".into()]),
            ("den".into(), vec!["sofa".into(), "tv".into()]),
            ("hall2".into(), vec!["painting".into()]),
            ("hall3".into(), vec!["piano".into(), "chair".into()]),
        ]),
    };
    WorldGraph::from_file(file).expect("reverie world is valid")
}

pub fn reverie_episode() -> EpisodeSpec {
    EpisodeSpec {
        episode_id: "reverie-ep0".into(),
        world_id: "reverie".into(),
        instruction: "Go to the music room and find the piano.".into(),
        start_node: "hall0".into(),
        start_heading: 0.0,
        style: Dataset::Reverie,
        goal_nodes: vec!["hall3".into()],
        target_object: Some("piano".into()),
    }
}

/// Policy that stops only once `target` appears in the prompt's
/// Surroundings line; otherwise it takes the first option leading to a
/// place not yet on the trajectory, or option B.
pub fn surroundings_explorer(
    target: String,
) -> FnBackend<impl Fn(&LlmRequest) -> Result<String, BackendError> + Send + Sync> {
    FnBackend(move |req: &LlmRequest| {
        let text = &req.user_text;
        let line = |prefix: &str| text.lines().find_map(|l| l.strip_prefix(prefix)).unwrap_or("");
        let seen: BTreeSet<&str> = line("Trajectory: Place ").split_whitespace().collect();
        let surroundings: Vec<&str> = line("Surroundings: ").split(", ").collect();
        if surroundings.contains(&target.as_str()) {
            return Ok(format!("Thought: the {target} is here.\nNew Planning: stop.\nAction: A"));
        }
        let options = text.split("Action options").nth(1).unwrap_or("");
        let label = options
            .lines()
            .filter_map(|l| {
                let (label, rest) = l.split_once(". ")?;
                let place = rest.split("Place ").nth(1)?.split([':', ' ']).next()?;
                Some((label, place))
            })
            .filter(|(label, _)| *label != "A")
            .find(|(_, place)| !seen.contains(place))
            .map_or("B", |(label, _)| label);
        Ok(format!(
            "Thought: no {target} in sight.\nNew Planning: keep exploring for the {target}.\nAction: {label}"
        ))
    })
}

/// Seed of the bundled benchmark suite.
pub const FIXTURE_SEED: u64 = 2024;
pub const FIXTURE_WORLDS: usize = 20;

/// The bundled suite: the benchmark worlds with oracle replies plus the
/// REVERIE corridor with the explorer's recorded replies.
pub fn fixture_suite() -> (Suite, ScriptedBackend) {
    let mut suite = benchmark_suite(FIXTURE_SEED, FIXTURE_WORLDS);
    let mut script = oracle_script(&suite);
    let world = reverie_world();
    let ep = reverie_episode();
    let explorer = surroundings_explorer(ep.target_object.clone().expect("target set"));
    let log = run_episode(&world, &ep, &explorer, &AgentConfig::default()).expect("reverie episode runs");
    for step in &log.steps {
        script.push(&ep.episode_id, step.step_index, step.raw_response.clone().expect("explorer always answers"));
    }
    suite.worlds.insert(world.world_id().into(), world);
    suite.episodes.push(ep);
    (suite, script)
}

/// Prompt dumps of the golden walk, one per step.
pub fn golden_dumps() -> Vec<String> {
    let log = run_episode(&golden_world(), &golden_episode(), &golden_script(), &AgentConfig::default())
        .expect("golden episode runs");
    log.steps.iter().map(|s| s.prompt.render_dump()).collect()
}

/// Writes `suite/` and `golden/` under `root`.
pub fn write_fixtures(root: &Path) -> Result<(), IoError> {
    let (suite, script) = fixture_suite();
    let sdir = root.join("suite");
    suite.write_to(&sdir)?;
    write_jsonl(&sdir.join("script.jsonl"), &script_lines(&script))?;

    let gdir = root.join("golden");
    std::fs::create_dir_all(&gdir).map_err(|e| IoError::io(&gdir, e))?;
    write_world(&gdir.join("world.json"), &golden_world())?;
    write_jsonl(&gdir.join("episodes.jsonl"), &[golden_episode()])?;
    write_jsonl(&gdir.join("script.jsonl"), &script_lines(&golden_script()))?;
    for (i, dump) in golden_dumps().iter().enumerate() {
        let p = gdir.join(format!("step{i}.txt"));
        std::fs::write(&p, dump).map_err(|e| IoError::io(&p, e))?;
    }
    Ok(())
}
