//! Explore/exploit traversal over trusted paths of a weighted graph.
//!
//! Starting from the query as the only trusted vertex, every untrusted vertex
//! adjacent to the trusted set is keyed by its heaviest edge into that set.
//! The heaviest-keyed vertex is popped repeatedly:
//!
//! - key `>= t`: it becomes trusted (and is retrieved if retrievable), and its
//!   neighbors enter or improve in the frontier;
//! - key `< t`: it is retrieved if retrievable but not trusted or explored.
//!
//! Keys only change when a vertex is trusted, so once a sub-threshold vertex
//! is popped every remaining pop is sub-threshold too: retrieval emits all
//! trusted vertices first, then fills the budget with the frontier in key order.

mod semisup;

pub use semisup::{
    assign_label, augment, build_label_graph, semisup_egt, Anchor, AugmentedGraph, LabelAssignment,
    LabelGraph, MAX_WEIGHT,
};

use std::cmp::Ordering;
use std::collections::hash_map::Entry;
use std::collections::{BinaryHeap, HashMap};

use crate::error::{Error, Result};
use crate::graph::{VertexId, WeightedGraph};
use crate::store::ImageId;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EgtParams {
    /// Trust threshold on edge weights.
    pub t: f32,
    /// Result budget.
    pub p: usize,
    /// Cap on frontier pops per traversal.
    pub max_steps: usize,
}

impl EgtParams {
    /// Parameters with the default step cap of `10 * p * k`.
    pub fn new(t: f32, p: usize, k: usize) -> Self {
        EgtParams {
            t,
            p,
            max_steps: 10usize.saturating_mul(p).saturating_mul(k.max(1)),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.p == 0 {
            return Err(Error::validation("result budget p must be at least 1"));
        }
        if self.t.is_nan() {
            return Err(Error::validation("trust threshold t is NaN"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedItem {
    pub id: ImageId,
    /// Heaviest edge weight from the trusted set when the vertex was popped.
    pub key: f32,
    pub trusted: bool,
}

/// Retrieval result for one query, best first.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub query: ImageId,
    pub items: Vec<RankedItem>,
    /// The traversal stopped on `max_steps` rather than on budget or exhaustion.
    pub step_capped: bool,
}

impl RankedList {
    pub fn ids(&self) -> Vec<ImageId> {
        self.items.iter().map(|item| item.id.clone()).collect()
    }

    /// Strictly decreasing score for position `i` under budget `p`.
    pub fn rank_score(p: usize, i: usize) -> f64 {
        (p - i) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Frontier {
    key: f32,
    vertex: VertexId,
}

impl Eq for Frontier {}

impl Ord for Frontier {
    fn cmp(&self, other: &Self) -> Ordering {
        // Max-heap on key; smaller vertex id wins ties.
        self.key
            .total_cmp(&other.key)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for Frontier {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

enum State {
    /// In the frontier with its current best key.
    Open(f32),
    Done,
}

/// Runs the traversal from query `q` (by image id).
pub fn egt_traverse<F>(g: &WeightedGraph, q: &str, params: &EgtParams, retrievable: F) -> Result<RankedList>
where
    F: Fn(VertexId) -> bool,
{
    let v = g
        .find(q)
        .ok_or_else(|| Error::validation(format!("query {q} is not a vertex of the graph")))?;
    traverse_from(g, v, params, retrievable)
}

pub fn traverse_from<F>(g: &WeightedGraph, q: VertexId, params: &EgtParams, retrievable: F) -> Result<RankedList>
where
    F: Fn(VertexId) -> bool,
{
    params.validate()?;
    let mut state: HashMap<VertexId, State> = HashMap::new();
    let mut heap = BinaryHeap::new();
    state.insert(q, State::Done);

    let relax = |from: VertexId, state: &mut HashMap<VertexId, State>, heap: &mut BinaryHeap<Frontier>| {
        for e in g.neighbors(from) {
            match state.entry(e.target) {
                Entry::Vacant(slot) => {
                    slot.insert(State::Open(e.weight));
                    heap.push(Frontier {
                        key: e.weight,
                        vertex: e.target,
                    });
                }
                Entry::Occupied(mut slot) => {
                    if let State::Open(key) = slot.get_mut() {
                        if e.weight > *key {
                            *key = e.weight;
                            heap.push(Frontier {
                                key: e.weight,
                                vertex: e.target,
                            });
                        }
                    }
                }
            }
        }
    };
    relax(q, &mut state, &mut heap);

    let mut items = Vec::new();
    let mut pops = 0usize;
    let mut step_capped = false;
    while items.len() < params.p {
        if pops == params.max_steps {
            step_capped = !heap.is_empty();
            break;
        }
        let Some(Frontier { key, vertex }) = heap.pop() else {
            break;
        };
        match state.get(&vertex) {
            Some(State::Open(current)) if current.to_bits() == key.to_bits() => {}
            _ => continue, // stale entry
        }
        pops += 1;
        state.insert(vertex, State::Done);
        let trusted = key >= params.t;
        if retrievable(vertex) {
            items.push(RankedItem {
                id: g.id(vertex).clone(),
                key,
                trusted,
            });
        }
        if trusted {
            relax(vertex, &mut state, &mut heap);
        }
    }

    Ok(RankedList {
        query: g.id(q).clone(),
        items,
        step_capped,
    })
}
