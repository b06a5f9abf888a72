//! Weighted directed graph over image ids, shared by the neighbor graph and
//! the label-augmented traversal graph.
//!
//! Vertices are numbered in canonical order (image ids ascending, label hubs
//! after every image), so a [`VertexId`] comparison is the traversal tie-break
//! and two graphs with the same vertex and edge sets are identical no matter
//! how they were inserted.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::store::ImageId;

pub type VertexId = u32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Query,
    Index,
    Train,
    /// Synthetic per-label vertex joining all training images of one label.
    Hub,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub target: VertexId,
    pub weight: f32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vertex {
    pub id: ImageId,
    pub role: Role,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WeightedGraph {
    vertices: Vec<Vertex>,
    lookup: HashMap<ImageId, VertexId>,
    adjacency: Vec<Vec<Edge>>,
}

impl WeightedGraph {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum()
    }

    pub fn vertex(&self, v: VertexId) -> &Vertex {
        &self.vertices[v as usize]
    }

    pub fn id(&self, v: VertexId) -> &ImageId {
        &self.vertices[v as usize].id
    }

    pub fn role(&self, v: VertexId) -> Role {
        self.vertices[v as usize].role
    }

    pub fn find(&self, id: &str) -> Option<VertexId> {
        self.lookup.get(id).copied()
    }

    /// Outgoing edges sorted by weight descending, then target ascending.
    pub fn neighbors(&self, v: VertexId) -> &[Edge] {
        &self.adjacency[v as usize]
    }

    pub fn vertices(&self) -> impl Iterator<Item = (VertexId, &Vertex)> + '_ {
        self.vertices.iter().enumerate().map(|(i, v)| (i as VertexId, v))
    }

    pub fn vertices_with_role(&self, role: Role) -> impl Iterator<Item = VertexId> + '_ {
        self.vertices()
            .filter(move |(_, v)| v.role == role)
            .map(|(i, _)| i)
    }

    pub fn edges(&self) -> impl Iterator<Item = (VertexId, Edge)> + '_ {
        self.adjacency
            .iter()
            .enumerate()
            .flat_map(|(u, list)| list.iter().map(move |e| (u as VertexId, *e)))
    }

    pub fn max_out_degree(&self) -> usize {
        self.adjacency.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Builder seeded with this graph's vertices and edges.
    pub fn to_builder(&self) -> GraphBuilder {
        let mut builder = GraphBuilder::new();
        for v in &self.vertices {
            builder
                .add_vertex(v.id.clone(), v.role)
                .expect("vertices of a built graph are consistent");
        }
        for (u, e) in self.edges() {
            builder.add_edge(u, e.target, e.weight);
        }
        builder
    }

    /// Adds the reverse of every edge; parallel edges collapse to their maximum weight.
    pub fn symmetrized(&self) -> WeightedGraph {
        let mut builder = self.to_builder();
        for (u, e) in self.edges() {
            builder.add_edge(e.target, u, e.weight);
        }
        builder.build()
    }
}

/// Collects vertices and directed edges, then canonicalizes them in [`GraphBuilder::build`].
///
/// Vertex handles returned while building are provisional and only valid for
/// [`GraphBuilder::add_edge`] on the same builder.
#[derive(Clone, Debug, Default)]
pub struct GraphBuilder {
    vertices: Vec<Vertex>,
    lookup: HashMap<ImageId, VertexId>,
    edges: Vec<(VertexId, VertexId, f32)>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a vertex, or returns the existing handle if `id` is already present
    /// with the same role.
    pub fn add_vertex(&mut self, id: ImageId, role: Role) -> Result<VertexId> {
        if let Some(&v) = self.lookup.get(&id) {
            let existing = self.vertices[v as usize].role;
            if existing != role {
                return Err(Error::validation(format!(
                    "image {id} appears both as {existing:?} and as {role:?}"
                )));
            }
            return Ok(v);
        }
        let v = self.vertices.len() as VertexId;
        self.lookup.insert(id.clone(), v);
        self.vertices.push(Vertex { id, role });
        Ok(v)
    }

    pub fn find(&self, id: &str) -> Option<VertexId> {
        self.lookup.get(id).copied()
    }

    pub fn add_edge(&mut self, source: VertexId, target: VertexId, weight: f32) {
        debug_assert!(weight.is_finite());
        self.edges.push((source, target, weight));
    }

    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn build(self) -> WeightedGraph {
        let GraphBuilder {
            vertices, edges, ..
        } = self;

        let mut order: Vec<usize> = (0..vertices.len()).collect();
        order.sort_by(|&a, &b| {
            let (va, vb) = (&vertices[a], &vertices[b]);
            (va.id.is_hub(), &va.id).cmp(&(vb.id.is_hub(), &vb.id))
        });
        let mut remap = vec![0 as VertexId; vertices.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new as VertexId;
        }

        let mut slots: Vec<Option<Vertex>> = vertices.into_iter().map(Some).collect();
        let vertices: Vec<Vertex> = order
            .iter()
            .map(|&old| slots[old].take().expect("each vertex moved once"))
            .collect();
        let lookup = vertices
            .iter()
            .enumerate()
            .map(|(i, v)| (v.id.clone(), i as VertexId))
            .collect();

        let mut adjacency: Vec<Vec<Edge>> = vec![Vec::new(); vertices.len()];
        for (u, v, w) in edges {
            let (u, v) = (remap[u as usize], remap[v as usize]);
            if u != v {
                adjacency[u as usize].push(Edge { target: v, weight: w });
            }
        }
        for list in &mut adjacency {
            // Keep the heaviest copy of each parallel edge.
            list.sort_by(|a, b| a.target.cmp(&b.target).then(b.weight.total_cmp(&a.weight)));
            list.dedup_by_key(|e| e.target);
            list.sort_by(|a, b| b.weight.total_cmp(&a.weight).then(a.target.cmp(&b.target)));
        }

        WeightedGraph {
            vertices,
            lookup,
            adjacency,
        }
    }
}
