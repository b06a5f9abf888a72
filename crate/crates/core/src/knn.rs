//! Descriptor blending and exact inner-product k-nearest-neighbor graphs.

use std::cmp::Ordering;
use std::io::{self, BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, Role, VertexId, WeightedGraph};
use crate::store::{normalize_in_place, DescriptorSet, ImageId};

/// Source rows scored together in one pass over the targets; a block of
/// 128-d rows stays resident in L1.
const SOURCE_BLOCK: usize = 16;

/// Neighbor graph: each source keeps at most `k` outgoing edges, heaviest first.
#[derive(Clone, Debug, PartialEq)]
pub struct KnnGraph {
    pub k: usize,
    pub graph: WeightedGraph,
}

impl KnnGraph {
    /// Both edge directions, parallel edges merged at their max weight.
    /// Out-degree may exceed `k` afterwards.
    pub fn symmetrize(&self) -> KnnGraph {
        KnnGraph {
            k: self.k,
            graph: self.graph.symmetrized(),
        }
    }

    /// Writes `source,target,weight` rows with 6-decimal weights.
    pub fn write_csv<W: Write>(&self, writer: &mut W) -> io::Result<()> {
        writeln!(writer, "source,target,weight")?;
        for (u, e) in self.graph.edges() {
            writeln!(
                writer,
                "{},{},{:.6}",
                self.graph.id(u),
                self.graph.id(e.target),
                e.weight
            )?;
        }
        Ok(())
    }

    /// Reads a graph CSV. Vertices and their roles come from `sets`; every
    /// edge endpoint must belong to one of them. `k` becomes the largest out-degree.
    pub fn read_csv<R: BufRead>(reader: R, sets: &[&DescriptorSet]) -> Result<KnnGraph> {
        let mut builder = GraphBuilder::new();
        for set in sets {
            for id in set.ids() {
                builder.add_vertex(id.clone(), set.role())?;
            }
        }
        let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = csv.headers().map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?;
        if header.iter().collect::<Vec<_>>() != ["source", "target", "weight"] {
            return Err(Error::Parse {
                line: 1,
                message: "expected header source,target,weight".into(),
            });
        }
        for record in csv.records() {
            let record = record.map_err(|e| Error::Parse {
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let endpoint = |name: &str| {
                builder.find(name).ok_or_else(|| Error::Parse {
                    line,
                    message: format!("vertex {name:?} is not in any loaded descriptor set"),
                })
            };
            let (u, v) = (endpoint(&record[0])?, endpoint(&record[1])?);
            let weight: f32 = record[2].trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("weight {:?} is not a number", &record[2]),
            })?;
            if !weight.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: "weight is not finite".into(),
                });
            }
            builder.add_edge(u, v, weight);
        }
        let graph = builder.build();
        Ok(KnnGraph {
            k: graph.max_out_degree().max(1),
            graph,
        })
    }
}

/// L2-normalized concatenation of `a`'s then `b`'s descriptor, per id in `a`'s order.
pub fn blend(a: &DescriptorSet, b: &DescriptorSet) -> Result<DescriptorSet> {
    if let Some(id) = b.ids().iter().find(|id| !a.contains(id.as_str())) {
        return Err(Error::validation(format!("image {id} is only in the second descriptor set")));
    }
    let mut out = DescriptorSet::new(a.dim() + b.dim(), a.role())?;
    let mut joined = Vec::with_capacity(out.dim());
    for (id, left) in a.iter() {
        let right = b
            .get(id.as_str())
            .ok_or_else(|| Error::validation(format!("image {id} is only in the first descriptor set")))?;
        joined.clear();
        joined.extend_from_slice(left);
        joined.extend_from_slice(right);
        normalize_in_place(&mut joined)
            .map_err(|_| Error::validation(format!("blended descriptor of {id} has zero norm")))?;
        out.push(id.clone(), &joined)?;
    }
    Ok(out)
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    // Eight independent lanes; the summation order is fixed so results do not
    // depend on how rows are blocked.
    let mut acc = [0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0f32;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    reduce(&acc, tail)
}

fn reduce(acc: &[f32; 8], tail: f32) -> f32 {
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Four [`dot`]s against one target, bit-identical to calling `dot` four times.
fn dot4(q: [&[f32]; 4], t: &[f32]) -> [f32; 4] {
    let n = t.len();
    let full = n / 8 * 8;
    let [a, b, c, d] = q;
    let (a, b, c, d) = (&a[..n], &b[..n], &c[..n], &d[..n]);
    let mut acc = [[0f32; 8]; 4];
    let mut base = 0;
    while base < full {
        for i in 0..8 {
            let y = t[base + i];
            acc[0][i] += a[base + i] * y;
            acc[1][i] += b[base + i] * y;
            acc[2][i] += c[base + i] * y;
            acc[3][i] += d[base + i] * y;
        }
        base += 8;
    }
    let mut out = [0f32; 4];
    for (r, row) in [a, b, c, d].into_iter().enumerate() {
        let mut tail = 0f32;
        for j in full..n {
            tail += row[j] * t[j];
        }
        out[r] = reduce(&acc[r], tail);
    }
    out
}

/// Exact top-`k` inner-product neighbors in `targets` for every row of every
/// source set. A source never links to the target sharing its id. Equal
/// weights are ordered by target id ascending.
pub fn knn_build(targets: &DescriptorSet, sources: &[&DescriptorSet], k: usize) -> Result<KnnGraph> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    for set in sources {
        if set.dim() != targets.dim() {
            return Err(Error::validation(format!(
                "source dimension {} does not match target dimension {}",
                set.dim(),
                targets.dim()
            )));
        }
    }

    let mut builder = GraphBuilder::new();
    let target_vertices: Vec<VertexId> = targets
        .ids()
        .iter()
        .map(|id| builder.add_vertex(id.clone(), targets.role()))
        .collect::<Result<_>>()?;

    // Rank of each target row by id, for tie-breaking without string compares.
    let mut by_id: Vec<usize> = (0..targets.len()).collect();
    by_id.sort_by(|&a, &b| targets.id(a).cmp(targets.id(b)));
    let mut id_rank = vec![0u32; targets.len()];
    for (rank, &row) in by_id.iter().enumerate() {
        id_rank[row] = rank as u32;
    }

    for set in sources {
        let source_vertices: Vec<VertexId> = set
            .ids()
            .iter()
            .map(|id| builder.add_vertex(id.clone(), set.role()))
            .collect::<Result<_>>()?;
        let self_rows: Vec<Option<usize>> = set.ids().iter().map(|id| targets.position(id.as_str())).collect();

        let lists: Vec<Vec<(usize, f32)>> = (0..set.len())
            .collect::<Vec<_>>()
            .par_chunks(SOURCE_BLOCK)
            .flat_map_iter(|rows| top_k_block(targets, set, rows, &self_rows, &id_rank, k))
            .collect();

        for (row, list) in lists.into_iter().enumerate() {
            for (target_row, weight) in list {
                builder.add_edge(source_vertices[row], target_vertices[target_row], weight);
            }
        }
    }

    Ok(KnnGraph {
        k,
        graph: builder.build(),
    })
}

fn top_k_block(
    targets: &DescriptorSet,
    sources: &DescriptorSet,
    rows: &[usize],
    self_rows: &[Option<usize>],
    id_rank: &[u32],
    k: usize,
) -> Vec<Vec<(usize, f32)>> {
    let n = targets.len();
    // `+ 0.0` folds -0.0 into 0.0 so the total order sees one zero.
    let finish = |s: f32| s.clamp(-1.0, 1.0) + 0.0;
    let mut scores = vec![0f32; rows.len() * n];
    let quads = rows.len() / 4 * 4;
    for t in 0..n {
        let target = targets.row(t);
        for slot in (0..quads).step_by(4) {
            let q = [0, 1, 2, 3].map(|i| sources.row(rows[slot + i]));
            for (i, s) in dot4(q, target).into_iter().enumerate() {
                scores[(slot + i) * n + t] = finish(s);
            }
        }
        for slot in quads..rows.len() {
            scores[slot * n + t] = finish(dot(sources.row(rows[slot]), target));
        }
    }

    let order = |a: &(usize, f32), b: &(usize, f32)| -> Ordering {
        b.1.total_cmp(&a.1).then(id_rank[a.0].cmp(&id_rank[b.0]))
    };
    let mut candidates: Vec<(usize, f32)> = Vec::with_capacity(n);
    rows.iter()
        .enumerate()
        .map(|(slot, &row)| {
            candidates.clear();
            candidates.extend(
                scores[slot * n..(slot + 1) * n]
                    .iter()
                    .copied()
                    .enumerate()
                    .filter(|&(t, _)| Some(t) != self_rows[row]),
            );
            if candidates.len() > k {
                candidates.select_nth_unstable_by(k - 1, order);
                candidates.truncate(k);
            }
            candidates.sort_unstable_by(order);
            candidates.to_vec()
        })
        .collect()
}

/// Neighbor list of one source as `(target id, weight)`, heaviest first.
pub fn neighbor_list<'g>(g: &'g WeightedGraph, source: &str) -> Option<Vec<(&'g ImageId, f32)>> {
    let v = g.find(source)?;
    Some(g.neighbors(v).iter().map(|e| (g.id(e.target), e.weight)).collect())
}

/// Convenience for building an index-over-(query, index) graph, the layout
/// every later stage expects.
pub fn build_retrieval_graph(query: &DescriptorSet, index: &DescriptorSet, k: usize) -> Result<KnnGraph> {
    if query.role() != Role::Query || index.role() != Role::Index {
        return Err(Error::validation("expected a query set and an index set"));
    }
    knn_build(index, &[query, index], k)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dot4_is_bitwise_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for d in [1, 7, 8, 13, 64, 131] {
            let rows: Vec<Vec<f32>> = (0..5).map(|_| unit(&mut rng, d)).collect();
            let got = dot4([&rows[0], &rows[1], &rows[2], &rows[3]], &rows[4]);
            for i in 0..4 {
                assert_eq!(got[i].to_bits(), dot(&rows[i], &rows[4]).to_bits());
            }
        }
    }
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(role: Role, rows: &[(&str, Vec<f32>)]) -> DescriptorSet {
        DescriptorSet::from_rows(rows[0].1.len(), role, rows.iter().cloned()).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
        let mut v: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        normalize_in_place(&mut v).unwrap();
        v
    }

    #[test]
    fn blend_concatenates_then_normalizes() {
        let a = set(Role::Query, &[("x", vec![1.0, 0.0])]);
        let b = set(Role::Query, &[("x", vec![0.0, 1.0])]);
        let out = blend(&a, &b).unwrap();
        assert_eq!(out.dim(), 4);
        let h = std::f32::consts::FRAC_1_SQRT_2;
        let row = out.get("x").unwrap();
        for (got, want) in row.iter().zip([h, 0.0, 0.0, h]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn blend_of_identical_sets() {
        let v = vec![0.6, 0.8];
        let a = set(Role::Index, &[("x", v.clone())]);
        let out = blend(&a, &a).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        for (got, want) in out.get("x").unwrap().iter().zip([0.6 * h, 0.8 * h, 0.6 * h, 0.8 * h]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn blend_matches_hand_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..3 {
            let (x, y) = (unit(&mut rng, 3), unit(&mut rng, 2));
            let a = DescriptorSet::from_rows(3, Role::Index, [(format!("i{i}"), x.clone())]).unwrap();
            let b = DescriptorSet::from_rows(2, Role::Index, [(format!("i{i}"), y.clone())]).unwrap();
            let out = blend(&a, &b).unwrap();
            // Both halves are unit, so the concatenation has norm sqrt(2).
            let norm = (x.iter().chain(&y).map(|v| (*v as f64).powi(2)).sum::<f64>()).sqrt();
            for (got, want) in out.row(0).iter().zip(x.iter().chain(&y)) {
                assert!((*got as f64 - *want as f64 / norm).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blend_rejects_mismatched_ids() {
        let a = set(Role::Index, &[("x", vec![1.0, 0.0])]);
        let b = set(Role::Index, &[("y", vec![1.0, 0.0])]);
        assert!(matches!(blend(&a, &b), Err(Error::Validation(_))));
        let b = set(Role::Index, &[("x", vec![1.0, 0.0]), ("y", vec![1.0, 0.0])]);
        assert!(blend(&a, &b).is_err());
    }

    #[test]
    fn orthogonal_targets() {
        let sources = set(Role::Query, &[("q", vec![1.0, 0.0])]);
        let targets = set(Role::Index, &[("a", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])]);
        let g = knn_build(&targets, &[&sources], 2).unwrap();
        let list = neighbor_list(&g.graph, "q").unwrap();
        assert_eq!(list.len(), 2);
        assert_eq!((list[0].0.as_str(), list[0].1), ("a", 1.0));
        assert_eq!((list[1].0.as_str(), list[1].1), ("b", 0.0));
    }

    #[test]
    fn self_is_excluded_by_id_not_weight() {
        let targets = set(
            Role::Index,
            &[("q", vec![1.0, 0.0]), ("dup", vec![1.0, 0.0]), ("b", vec![0.0, 1.0])],
        );
        let g = knn_build(&targets, &[&targets], 5).unwrap();
        let list = neighbor_list(&g.graph, "q").unwrap();
        let names: Vec<&str> = list.iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(names, ["dup", "b"]);
    }

    #[test]
    fn ties_break_by_id() {
        let sources = set(Role::Query, &[("q", vec![1.0, 0.0])]);
        let targets = set(
            Role::Index,
            &[("c", vec![0.0, 1.0]), ("a", vec![0.0, 1.0]), ("b", vec![0.0, -1.0])],
        );
        let g = knn_build(&targets, &[&sources], 2).unwrap();
        let names: Vec<&str> = neighbor_list(&g.graph, "q").unwrap().iter().map(|(id, _)| id.as_str()).collect();
        assert_eq!(names, ["a", "b"]);
    }

    #[test]
    fn dimension_mismatch_and_zero_k() {
        let sources = set(Role::Query, &[("q", vec![1.0, 0.0, 0.0])]);
        let targets = set(Role::Index, &[("a", vec![1.0, 0.0])]);
        assert!(knn_build(&targets, &[&sources], 1).is_err());
        assert!(knn_build(&targets, &[&targets], 0).is_err());
    }

    #[test]
    fn symmetrize_single_edge_and_max_merge() {
        let sources = set(Role::Query, &[("a", vec![1.0, 0.0])]);
        let targets = set(Role::Index, &[("b", vec![0.9, 0.435_889_9])]);
        let g = knn_build(&targets, &[&sources], 1).unwrap().symmetrize();
        let w = neighbor_list(&g.graph, "a").unwrap()[0].1;
        assert_eq!(neighbor_list(&g.graph, "b").unwrap()[0].1, w);

        let mut b = GraphBuilder::new();
        let a = b.add_vertex(ImageId::new("a").unwrap(), Role::Index).unwrap();
        let c = b.add_vertex(ImageId::new("b").unwrap(), Role::Index).unwrap();
        b.add_edge(a, c, 0.9);
        b.add_edge(c, a, 0.8);
        let g = KnnGraph { k: 1, graph: b.build() }.symmetrize();
        assert_eq!(neighbor_list(&g.graph, "a").unwrap()[0].1, 0.9);
        assert_eq!(neighbor_list(&g.graph, "b").unwrap()[0].1, 0.9);
    }

    #[test]
    fn csv_round_trip_keeps_six_decimals() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = DescriptorSet::from_rows(4, Role::Query, (0..3).map(|i| (format!("q{i}"), unit(&mut rng, 4)))).unwrap();
        let x = DescriptorSet::from_rows(4, Role::Index, (0..5).map(|i| (format!("x{i}"), unit(&mut rng, 4)))).unwrap();
        let g = build_retrieval_graph(&q, &x, 3).unwrap();
        let mut buf = Vec::new();
        g.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("source,target,weight\n"));
        assert!(text.lines().skip(1).all(|l| l.rsplit(',').next().unwrap().split('.').nth(1).unwrap().len() == 6));
        let back = KnnGraph::read_csv(&buf[..], &[&q, &x]).unwrap();
        assert_eq!(back.graph.edge_count(), g.graph.edge_count());
        for ((u1, e1), (u2, e2)) in g.graph.edges().zip(back.graph.edges()) {
            assert_eq!((u1, e1.target), (u2, e2.target));
            assert!((e1.weight - e2.weight).abs() <= 5e-7);
        }
        assert!(KnnGraph::read_csv("source,target,weight\nq0,nope,0.5\n".as_bytes(), &[&q, &x]).is_err());
    }
}
