//! Label-augmented traversal.
//!
//! Training images of each label hang off one synthetic hub vertex. Every
//! query and index image whose top-3 most similar training images agree on a
//! label (at least two votes) is anchored to the most similar of those
//! images. Spokes and anchors carry [`MAX_WEIGHT`], above any similarity, so
//! the traversal walks a label sub-graph before any descriptor edge.

use std::collections::BTreeMap;

use rayon::prelude::*;

use super::{traverse_from, EgtParams, RankedList};
use crate::error::{Error, Result};
use crate::graph::{Role, VertexId, WeightedGraph};
use crate::knn::{dot, KnnGraph};
use crate::store::{DescriptorSet, ImageId, Label, LabelTable};

/// Weight of spokes and anchors; strictly above any inner product of unit vectors.
pub const MAX_WEIGHT: f32 = 2.0;

const VOTERS: usize = 3;
const MIN_VOTES: usize = 2;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabelGraph {
    /// Training images per label, ids ascending.
    members: BTreeMap<Label, Vec<ImageId>>,
}

impl LabelGraph {
    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn hub_count(&self) -> usize {
        self.members.len()
    }

    pub fn hub_id(label: Label) -> ImageId {
        ImageId::hub(label)
    }

    pub fn members(&self, label: Label) -> Option<&[ImageId]> {
        self.members.get(&label).map(Vec::as_slice)
    }

    pub fn labels(&self) -> impl Iterator<Item = Label> + '_ {
        self.members.keys().copied()
    }

    /// `(train image, hub)` pairs; each carries [`MAX_WEIGHT`] in both directions.
    pub fn spokes(&self) -> impl Iterator<Item = (&ImageId, ImageId)> + '_ {
        self.members
            .iter()
            .flat_map(|(label, ids)| ids.iter().map(move |id| (id, ImageId::hub(*label))))
    }
}

pub fn build_label_graph(labels: &LabelTable) -> LabelGraph {
    let mut members: BTreeMap<Label, Vec<ImageId>> = BTreeMap::new();
    for (id, label) in labels.iter() {
        members.entry(label).or_default().push(id.clone());
    }
    for ids in members.values_mut() {
        ids.sort();
    }
    LabelGraph { members }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelAssignment {
    pub label: Label,
    /// Most similar training image carrying `label`.
    pub anchor: ImageId,
    pub votes: usize,
}

/// Majority vote over the labels of the three training images most similar
/// to `desc` (ties in similarity broken by id ascending). `None` when no
/// label gets two votes.
pub fn assign_label(desc: &[f32], train: &DescriptorSet, labels: &LabelTable) -> Result<Option<LabelAssignment>> {
    if desc.len() != train.dim() {
        return Err(Error::validation(format!(
            "descriptor has length {}, training set has dimension {}",
            desc.len(),
            train.dim()
        )));
    }
    // Kept sorted best-first: (similarity desc, id asc).
    let mut top: Vec<(f32, usize)> = Vec::with_capacity(VOTERS + 1);
    for (row, values) in train.values().chunks_exact(train.dim()).enumerate() {
        let s = dot(desc, values);
        let better = |other: &(f32, usize)| {
            s > other.0 || (s == other.0 && train.id(row) < train.id(other.1))
        };
        if top.len() < VOTERS || better(&top[top.len() - 1]) {
            let at = top.iter().position(better).unwrap_or(top.len());
            top.insert(at, (s, row));
            top.truncate(VOTERS);
        }
    }

    let mut voters = Vec::with_capacity(top.len());
    for &(_, row) in &top {
        let id = train.id(row);
        let label = labels
            .get(id.as_str())
            .ok_or_else(|| Error::validation(format!("training image {id} has no label")))?;
        voters.push((id, label));
    }
    for (i, &(anchor, label)) in voters.iter().enumerate() {
        let votes = voters.iter().filter(|(_, l)| *l == label).count();
        if votes >= MIN_VOTES {
            // The first voter with this label is the most similar one.
            debug_assert!(voters[..i].iter().all(|(_, l)| *l != label));
            return Ok(Some(LabelAssignment {
                label,
                anchor: anchor.clone(),
                votes,
            }));
        }
    }
    Ok(None)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub image: ImageId,
    pub train: ImageId,
    pub label: Label,
}

/// Base graph plus label hubs, spokes and anchor edges, materialized as one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedGraph {
    pub graph: WeightedGraph,
    pub label_graph: LabelGraph,
    pub anchors: Vec<Anchor>,
}

impl AugmentedGraph {
    /// Joins `base` (already symmetrized) with `label_graph` and explicit anchors.
    pub fn from_parts(base: &KnnGraph, label_graph: LabelGraph, anchors: Vec<Anchor>) -> Result<Self> {
        let mut builder = base.graph.to_builder();
        for (train, hub) in label_graph.spokes() {
            let t = builder.add_vertex(train.clone(), Role::Train)?;
            let h = builder.add_vertex(hub, Role::Hub)?;
            builder.add_edge(t, h, MAX_WEIGHT);
            builder.add_edge(h, t, MAX_WEIGHT);
        }
        for anchor in &anchors {
            let role = base.graph.find(anchor.image.as_str()).map(|v| base.graph.role(v));
            if !matches!(role, Some(Role::Query | Role::Index)) {
                return Err(Error::validation(format!(
                    "anchor source {} must be a query or index image of the base graph",
                    anchor.image
                )));
            }
            let image = builder.find(anchor.image.as_str()).expect("base vertices are in the builder");
            let train = builder.add_vertex(anchor.train.clone(), Role::Train)?;
            builder.add_edge(image, train, MAX_WEIGHT);
            builder.add_edge(train, image, MAX_WEIGHT);
        }
        Ok(AugmentedGraph {
            graph: builder.build(),
            label_graph,
            anchors,
        })
    }

    pub fn is_retrievable(&self, v: VertexId) -> bool {
        self.graph.role(v) == Role::Index
    }
}

/// Anchors every query and index image that wins a label vote, then joins
/// the label graph. `base` must be symmetrized.
pub fn augment(
    base: &KnnGraph,
    label_graph: &LabelGraph,
    train: &DescriptorSet,
    labels: &LabelTable,
    query: &DescriptorSet,
    index: &DescriptorSet,
) -> Result<AugmentedGraph> {
    let mut anchors = Vec::new();
    if !train.is_empty() {
        for set in [query, index] {
            let assigned: Vec<Option<LabelAssignment>> = (0..set.len())
                .into_par_iter()
                .map(|row| assign_label(set.row(row), train, labels))
                .collect::<Result<_>>()?;
            for (row, assignment) in assigned.into_iter().enumerate() {
                if let Some(a) = assignment {
                    anchors.push(Anchor {
                        image: set.id(row).clone(),
                        train: a.anchor,
                        label: a.label,
                    });
                }
            }
        }
    }
    AugmentedGraph::from_parts(base, label_graph.clone(), anchors)
}

/// Traversal over the augmented graph; only index images are ever retrieved.
pub fn semisup_egt(aug: &AugmentedGraph, q: &str, params: &EgtParams) -> Result<RankedList> {
    let v = aug
        .graph
        .find(q)
        .ok_or_else(|| Error::validation(format!("query {q} is not a vertex of the graph")))?;
    traverse_from(&aug.graph, v, params, |u| aug.is_retrievable(u))
}
