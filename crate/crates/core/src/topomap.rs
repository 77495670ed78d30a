//! Online topological map built from the agent's own observations.
//!
//! Places get dense integer ids in the order they are first observed, the
//! start node being place 0. Every known place is in exactly one category:
//! explored (stood on), accessible (adjacent to the current place) or
//! inaccessible (known but out of reach this step).

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::env::{NodeId, ObservationAnnotation, WorldGraph};

pub type PlaceId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Category {
    Explored,
    Accessible,
    Inaccessible,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TopoError {
    #[error("node `{0}` is not on the map")]
    UnknownNode(NodeId),
    #[error("illegal move to place {place}: {reason}")]
    IllegalMove { place: PlaceId, reason: &'static str },
}

/// One line of the connectivity prompt, frozen when its place was first
/// explored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectivityLine {
    pub place: PlaceId,
    pub neighbors: Vec<PlaceId>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopoMap {
    id_of: BTreeMap<NodeId, PlaceId>,
    /// Indexed by place id.
    env_nodes: Vec<NodeId>,
    /// Indexed by place id.
    categories: Vec<Category>,
    /// Environment node the place was first observed from; `None` for the
    /// start place.
    first_seen_from: Vec<Option<NodeId>>,
    edges: BTreeSet<(PlaceId, PlaceId)>,
    visit_seq: Vec<PlaceId>,
    connectivity: Vec<ConnectivityLine>,
}

impl TopoMap {
    pub fn new(start: &str) -> Self {
        let mut id_of = BTreeMap::new();
        id_of.insert(start.into(), 0);
        TopoMap {
            id_of,
            env_nodes: alloc::vec![start.into()],
            categories: alloc::vec![Category::Explored],
            first_seen_from: alloc::vec![None],
            edges: BTreeSet::new(),
            visit_seq: alloc::vec![0],
            connectivity: Vec::new(),
        }
    }

    /// Records the neighbors seen from `current`.
    ///
    /// Unseen neighbors get fresh ids in list order. `current` becomes
    /// explored and its connectivity line is written once, on first
    /// exploration. All other unexplored places are re-categorised by
    /// adjacency to `current`.
    pub fn observe<S: AsRef<str>>(&mut self, current: &str, neighbors: &[S]) -> Result<(), TopoError> {
        let cur = self.place_of(current).ok_or_else(|| TopoError::UnknownNode(current.into()))?;
        let mut line = Vec::with_capacity(neighbors.len());
        for n in neighbors {
            let n = n.as_ref();
            let id = match self.place_of(n) {
                Some(id) => id,
                None => {
                    let id = self.env_nodes.len() as PlaceId;
                    self.id_of.insert(n.into(), id);
                    self.env_nodes.push(n.into());
                    self.categories.push(Category::Accessible);
                    self.first_seen_from.push(Some(current.into()));
                    id
                }
            };
            if id != cur {
                self.edges.insert(ordered(cur, id));
                line.push(id);
            }
        }
        self.categories[cur as usize] = Category::Explored;
        if !self.connectivity.iter().any(|l| l.place == cur) {
            line.sort_unstable();
            line.dedup();
            self.connectivity.push(ConnectivityLine { place: cur, neighbors: line });
        }
        for id in 0..self.categories.len() as PlaceId {
            let cat = &mut self.categories[id as usize];
            if *cat == Category::Explored {
                continue;
            }
            *cat = if self.edges.contains(&ordered(cur, id)) {
                Category::Accessible
            } else {
                Category::Inaccessible
            };
        }
        Ok(())
    }

    /// Appends a move to `env_node` to the visit sequence.
    pub fn mark_visited(&mut self, env_node: &str) -> Result<PlaceId, TopoError> {
        let id = self.place_of(env_node).ok_or_else(|| TopoError::UnknownNode(env_node.into()))?;
        if self.categories[id as usize] == Category::Inaccessible {
            return Err(TopoError::IllegalMove { place: id, reason: "place is inaccessible" });
        }
        if !self.edges.contains(&ordered(self.current_place(), id)) {
            return Err(TopoError::IllegalMove {
                place: id,
                reason: "place is not adjacent to the current place",
            });
        }
        self.visit_seq.push(id);
        Ok(id)
    }

    pub fn place_of(&self, env_node: &str) -> Option<PlaceId> {
        self.id_of.get(env_node).copied()
    }

    pub fn env_node(&self, place: PlaceId) -> Option<&str> {
        self.env_nodes.get(place as usize).map(String::as_str)
    }

    pub fn category(&self, place: PlaceId) -> Option<Category> {
        self.categories.get(place as usize).copied()
    }

    /// Number of known places.
    pub fn len(&self) -> usize {
        self.env_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.env_nodes.is_empty()
    }

    pub fn current_place(&self) -> PlaceId {
        *self.visit_seq.last().expect("visit sequence starts with place 0")
    }

    pub fn visit_seq(&self) -> &[PlaceId] {
        &self.visit_seq
    }

    pub fn edges(&self) -> &BTreeSet<(PlaceId, PlaceId)> {
        &self.edges
    }

    pub fn connectivity_lines(&self) -> &[ConnectivityLine] {
        &self.connectivity
    }

    pub fn places_in(&self, category: Category) -> impl Iterator<Item = PlaceId> + '_ {
        (0..self.categories.len() as PlaceId).filter(move |&p| self.categories[p as usize] == category)
    }

    /// `Trajectory: Place 0 1 0 2`, revisits included.
    pub fn trajectory_prompt(&self) -> String {
        let mut s = String::from("Trajectory: Place");
        for p in &self.visit_seq {
            let _ = write!(s, " {p}");
        }
        s
    }

    /// `Map:` followed by one line per explored place in exploration order.
    pub fn connectivity_prompt(&self) -> String {
        let mut s = String::from("Map:");
        for line in &self.connectivity {
            let ids: Vec<String> = line.neighbors.iter().map(|n| format!("{n}")).collect();
            let _ = write!(s, "\nPlace {} is connected with Places {}", line.place, ids.join(", "));
        }
        s
    }

    /// Currently inaccessible places with the observation recorded when each
    /// was first seen, ascending by id.
    pub fn supplementary(&self, world: &WorldGraph) -> Vec<(PlaceId, ObservationAnnotation)> {
        self.places_in(Category::Inaccessible)
            .filter_map(|p| {
                let from = self.first_seen_from[p as usize].as_deref()?;
                let obs = world.observation(from, &self.env_nodes[p as usize])?;
                Some((p, obs.clone()))
            })
            .collect()
    }
}

fn ordered(a: PlaceId, b: PlaceId) -> (PlaceId, PlaceId) {
    if a <= b { (a, b) } else { (b, a) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::fixtures;
    use alloc::vec;
    use proptest::prelude::*;

    /// a-b, a-c, b-d
    fn four() -> WorldGraph {
        fixtures::world(
            &[
                ("a", [0.0, 0.0, 0.0]),
                ("b", [0.0, 2.0, 0.0]),
                ("c", [2.0, 0.0, 0.0]),
                ("d", [0.0, 4.0, 0.0]),
            ],
            &[("a", "b"), ("a", "c"), ("b", "d")],
        )
    }

    #[test]
    fn init_state() {
        let m = TopoMap::new("a");
        assert_eq!(m.place_of("a"), Some(0));
        assert_eq!(m.visit_seq(), &[0]);
        assert_eq!(m.trajectory_prompt(), "Trajectory: Place 0");
        assert_eq!(m.connectivity_prompt(), "Map:");
        assert!(m.supplementary(&four()).is_empty());
    }

    #[test]
    fn first_observation() {
        let mut m = TopoMap::new("a");
        m.observe("a", &["b", "c"]).unwrap();
        assert_eq!((m.place_of("b"), m.place_of("c")), (Some(1), Some(2)));
        assert_eq!(m.connectivity_prompt(), "Map:\nPlace 0 is connected with Places 1, 2");
        assert_eq!(m.category(1), Some(Category::Accessible));
    }

    #[test]
    fn moving_on_makes_old_frontier_inaccessible() {
        let w = four();
        let mut m = TopoMap::new("a");
        m.observe("a", &["b", "c"]).unwrap();
        m.mark_visited("b").unwrap();
        m.observe("b", &["a", "d"]).unwrap();
        assert_eq!(m.place_of("d"), Some(3));
        assert_eq!(m.category(2), Some(Category::Inaccessible));
        assert_eq!(m.category(3), Some(Category::Accessible));
        assert_eq!(m.category(0), Some(Category::Explored));
        assert_eq!(
            m.connectivity_prompt(),
            "Map:\nPlace 0 is connected with Places 1, 2\nPlace 1 is connected with Places 0, 3"
        );
        assert_eq!(m.supplementary(&w), vec![(2, w.observation("a", "c").unwrap().clone())]);

        // Back to a: c is reachable again and leaves the supplementary list.
        m.mark_visited("a").unwrap();
        m.observe("a", &["b", "c"]).unwrap();
        assert_eq!(m.category(2), Some(Category::Accessible));
        assert!(m.supplementary(&w).iter().all(|(p, _)| *p != 2));
        assert_eq!(m.trajectory_prompt(), "Trajectory: Place 0 1 0");
    }

    #[test]
    fn reobserving_keeps_connectivity() {
        let mut m = TopoMap::new("a");
        m.observe("a", &["b", "c"]).unwrap();
        let before = m.connectivity_lines().to_vec();
        m.observe("a", &["b", "c"]).unwrap();
        assert_eq!(m.connectivity_lines(), &before[..]);
    }

    #[test]
    fn visit_rules() {
        let mut m = TopoMap::new("a");
        assert_eq!(m.observe("zz", &["a"]), Err(TopoError::UnknownNode("zz".into())));
        m.observe("a", &["b", "c"]).unwrap();
        m.mark_visited("b").unwrap();
        assert_eq!(m.visit_seq(), &[0, 1]);
        m.observe("b", &["a", "d"]).unwrap();
        assert!(matches!(m.mark_visited("c"), Err(TopoError::IllegalMove { place: 2, .. })));
        assert!(matches!(m.mark_visited("nope"), Err(TopoError::UnknownNode(_))));
        m.mark_visited("a").unwrap();
        assert_eq!(m.visit_seq(), &[0, 1, 0]);
    }

    #[test]
    fn trajectory_keeps_repeats() {
        let mut m = TopoMap::new("a");
        m.observe("a", &["b", "c"]).unwrap();
        m.mark_visited("b").unwrap();
        m.observe("b", &["a", "d"]).unwrap();
        m.mark_visited("a").unwrap();
        m.observe("a", &["b", "c"]).unwrap();
        m.mark_visited("c").unwrap();
        assert_eq!(m.trajectory_prompt(), "Trajectory: Place 0 1 0 2");
    }

    proptest! {
        #[test]
        fn random_walk_keeps_invariants(choices in proptest::collection::vec(any::<usize>(), 0..30)) {
            let w = fixtures::chain();
            let mut m = TopoMap::new("c");
            let mut at = String::from("c");
            let ns: Vec<String> = w.neighbors(&at).map(String::from).collect();
            m.observe(&at, &ns).unwrap();
            for pick in choices {
                let prev = m.clone();
                let ns: Vec<String> = w.neighbors(&at).map(String::from).collect();
                at = ns[pick % ns.len()].clone();
                m.mark_visited(&at).unwrap();
                let ns: Vec<String> = w.neighbors(&at).map(String::from).collect();
                m.observe(&at, &ns).unwrap();
                for p in 0..prev.len() as PlaceId {
                    prop_assert_eq!(prev.env_node(p), m.env_node(p));
                    if prev.category(p) == Some(Category::Explored) {
                        prop_assert_eq!(m.category(p), Some(Category::Explored));
                    }
                }
                prop_assert_eq!(m.connectivity_lines().len(), m.places_in(Category::Explored).count());
                prop_assert_eq!(m.trajectory_prompt(), m.clone().trajectory_prompt());
            }
        }
    }
}
