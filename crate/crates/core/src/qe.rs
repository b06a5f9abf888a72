//! Query expansion over spatially verified neighbors.
//!
//! Each query (and, on the database side, each index image) is averaged with
//! its most reliable neighbors: the verified candidates with the most RANSAC
//! inliers among its top `sv_depth`. The neighbor graph is then rebuilt on
//! the expanded descriptors.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Role, WeightedGraph};
use crate::knn::{build_retrieval_graph, KnnGraph};
use crate::store::{normalize_in_place, DescriptorSet, ImageId, LocalFeatureSet};
use crate::sv::{sv_rerank, RansacParams};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QeParams {
    /// Neighbors passed to spatial verification.
    pub sv_depth: usize,
    /// Verified neighbors averaged into the descriptor.
    pub expand_count: usize,
    /// Neighbor weight exponent: `w = max(sim, 0)^alpha`; 0 gives a plain average.
    pub alpha: f64,
    pub database_side: bool,
}

impl Default for QeParams {
    fn default() -> Self {
        QeParams {
            sv_depth: 10,
            expand_count: 2,
            alpha: 0.0,
            database_side: true,
        }
    }
}

impl QeParams {
    pub fn validate(&self) -> Result<()> {
        if self.expand_count > self.sv_depth {
            return Err(Error::validation(format!(
                "expand count {} exceeds SV depth {}",
                self.expand_count, self.sv_depth
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::validation("alpha must be a non-negative number"));
        }
        Ok(())
    }
}

/// `normalize(q + sum_i max(sim_i, 0)^alpha * d_i)`; `q` itself when there are no neighbors.
pub fn expand_descriptor(q: &[f32], neighbors: &[(&[f32], f32)], alpha: f64) -> Result<Vec<f32>> {
    if neighbors.is_empty() {
        return Ok(q.to_vec());
    }
    let mut acc: Vec<f64> = q.iter().map(|v| *v as f64).collect();
    for (desc, sim) in neighbors {
        if desc.len() != q.len() {
            return Err(Error::validation(format!(
                "neighbor descriptor has length {}, expected {}",
                desc.len(),
                q.len()
            )));
        }
        let w = (*sim as f64).max(0.0).powf(alpha);
        for (a, d) in acc.iter_mut().zip(desc.iter()) {
            *a += w * *d as f64;
        }
    }
    let mut out: Vec<f32> = acc.into_iter().map(|v| v as f32).collect();
    normalize_in_place(&mut out)?;
    Ok(out)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct QeStats {
    pub images_considered: usize,
    pub images_expanded: usize,
    pub neighbors_used: usize,
}

#[derive(Clone, Debug)]
pub struct QeOutput {
    pub query: DescriptorSet,
    pub index: DescriptorSet,
    pub graph: KnnGraph,
    pub stats: QeStats,
}

/// Chooses the verified neighbors of `id` and returns its expanded descriptor
/// plus how many neighbors went into it.
fn expand_one(
    id: &ImageId,
    own: &[f32],
    graph: &WeightedGraph,
    index: &DescriptorSet,
    local: &LocalFeatureSet,
    qe: &QeParams,
    ransac: &RansacParams,
) -> Result<(Vec<f32>, usize)> {
    if qe.expand_count == 0 {
        return Ok((own.to_vec(), 0));
    }
    let Some(v) = graph.find(id.as_str()) else {
        return Ok((own.to_vec(), 0));
    };
    let top: Vec<(ImageId, f32)> = graph
        .neighbors(v)
        .iter()
        .filter(|e| graph.role(e.target) == Role::Index && graph.id(e.target) != id)
        .take(qe.sv_depth)
        .map(|e| (graph.id(e.target).clone(), e.weight))
        .collect();
    let candidates: Vec<ImageId> = top.iter().map(|(c, _)| c.clone()).collect();
    let verified = sv_rerank(id, &candidates, local, ransac)?;
    let chosen: Vec<(&[f32], f32)> = verified
        .iter()
        .filter(|s| s.result.verified)
        .take(qe.expand_count)
        .map(|s| {
            let desc = index.get(s.id.as_str()).expect("graph targets come from the index set");
            (desc, top[s.rank].1)
        })
        .collect();
    let used = chosen.len();
    Ok((expand_descriptor(own, &chosen, qe.alpha)?, used))
}

fn expand_set(
    set: &DescriptorSet,
    graph: &WeightedGraph,
    index: &DescriptorSet,
    local: &LocalFeatureSet,
    qe: &QeParams,
    ransac: &RansacParams,
) -> Result<(DescriptorSet, QeStats)> {
    let rows: Vec<(Vec<f32>, usize)> = (0..set.len())
        .into_par_iter()
        .map(|row| expand_one(set.id(row), set.row(row), graph, index, local, qe, ransac))
        .collect::<Result<_>>()?;
    let mut out = DescriptorSet::new(set.dim(), set.role())?;
    let mut stats = QeStats::default();
    for (row, (values, used)) in rows.into_iter().enumerate() {
        stats.images_considered += 1;
        if used > 0 {
            stats.images_expanded += 1;
            stats.neighbors_used += used;
        }
        out.push(set.id(row).clone(), &values)?;
    }
    Ok((out, stats))
}

/// One QE-SV pass. `graph` must be the unsymmetrized retrieval graph built
/// from `query` and `index` (index targets, query and index sources).
/// Neighbors are always averaged in with their original descriptors.
pub fn qe_sv_pass(
    graph: &KnnGraph,
    query: &DescriptorSet,
    index: &DescriptorSet,
    local: &LocalFeatureSet,
    qe: &QeParams,
    ransac: &RansacParams,
    k: usize,
) -> Result<QeOutput> {
    qe.validate()?;
    ransac.validate()?;
    let (new_query, mut stats) = expand_set(query, &graph.graph, index, local, qe, ransac)?;
    let new_index = if qe.database_side {
        let (expanded, index_stats) = expand_set(index, &graph.graph, index, local, qe, ransac)?;
        stats.images_considered += index_stats.images_considered;
        stats.images_expanded += index_stats.images_expanded;
        stats.neighbors_used += index_stats.neighbors_used;
        expanded
    } else {
        index.clone()
    };
    let refined = build_retrieval_graph(&new_query, &new_index, k)?;
    Ok(QeOutput {
        query: new_query,
        index: new_index,
        graph: refined,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Keypoints;

    #[test]
    fn empty_neighbors_is_identity() {
        let q = [0.6, 0.8];
        assert_eq!(expand_descriptor(&q, &[], 0.0).unwrap(), q.to_vec());
    }

    #[test]
    fn self_neighbor_is_idempotent() {
        let q = [1.0, 0.0];
        assert_eq!(expand_descriptor(&q, &[(&q, 1.0)], 0.0).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn weighted_expansion_matches_hand_arithmetic() {
        let out = expand_descriptor(&[1.0, 0.0], &[(&[0.0, 1.0], 0.5)], 1.0).unwrap();
        // normalize((1, 0.5)) = (2, 1) / sqrt(5)
        let s5 = 5f64.sqrt();
        assert!((out[0] as f64 - 2.0 / s5).abs() < 1e-6);
        assert!((out[1] as f64 - 1.0 / s5).abs() < 1e-6);
        assert!((out[0] - 0.8944).abs() < 1e-4 && (out[1] - 0.4472).abs() < 1e-4);
    }

    #[test]
    fn negative_similarity_clamps_to_zero_weight() {
        let out = expand_descriptor(&[1.0, 0.0], &[(&[0.0, 1.0], -0.5)], 1.0).unwrap();
        assert_eq!(out, vec![1.0, 0.0]);
        assert!(expand_descriptor(&[1.0, 0.0], &[(&[0.0, 1.0, 0.0], 0.5)], 1.0).is_err());
    }

    #[test]
    fn params_validate() {
        assert!(QeParams::default().validate().is_ok());
        let bad = QeParams {
            expand_count: 11,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    fn sets() -> (DescriptorSet, DescriptorSet) {
        let q = DescriptorSet::from_rows(2, Role::Query, [("q", vec![1.0, 0.0])]).unwrap();
        let x = DescriptorSet::from_rows(
            2,
            Role::Index,
            [
                ("a", vec![0.8, 0.6]),
                ("b", vec![0.6, 0.8]),
                ("c", vec![0.0, 1.0]),
            ],
        )
        .unwrap();
        (q, x)
    }

    #[test]
    fn no_local_features_is_a_no_op() {
        let (q, x) = sets();
        let g = build_retrieval_graph(&q, &x, 2).unwrap();
        let local = LocalFeatureSet::new(4).unwrap();
        let out = qe_sv_pass(&g, &q, &x, &local, &QeParams::default(), &RansacParams::default(), 2).unwrap();
        assert_eq!(out.query, q);
        assert_eq!(out.index, x);
        assert_eq!(out.graph, g);
        assert_eq!(out.stats.images_expanded, 0);
    }

    fn layout(dim: usize) -> Keypoints {
        let mut kp = Keypoints::new(dim);
        for i in 0..12 {
            let mut d = vec![0.0; dim];
            d[i] = 1.0;
            kp.push((i * 31 % 17) as f32 * 11.0, (i * 7 % 13) as f32 * 9.0, &d).unwrap();
        }
        kp
    }

    #[test]
    fn two_verified_neighbors_give_normalized_mean() {
        let (q, x) = sets();
        let g = build_retrieval_graph(&q, &x, 3).unwrap();
        let mut local = LocalFeatureSet::new(12).unwrap();
        for id in ["q", "a", "b", "c"] {
            local.insert(ImageId::new(id).unwrap(), layout(12)).unwrap();
        }
        let qe = QeParams {
            database_side: false,
            ..Default::default()
        };
        let out = qe_sv_pass(&g, &q, &x, &local, &qe, &RansacParams::default(), 3).unwrap();
        // All three candidates verify with 12 inliers; the two best-ranked (a, b) are used.
        let mut want = [1.0 + 0.8 + 0.6, 0.6 + 0.8];
        normalize_in_place(&mut want).unwrap();
        let got = out.query.get("q").unwrap();
        assert!((got[0] - want[0]).abs() < 1e-6 && (got[1] - want[1]).abs() < 1e-6);
        assert_eq!(out.index, x);
        assert_eq!(out.stats.neighbors_used, 2);
    }

    #[test]
    fn expand_count_zero_is_identity() {
        let (q, x) = sets();
        let g = build_retrieval_graph(&q, &x, 3).unwrap();
        let mut local = LocalFeatureSet::new(12).unwrap();
        for id in ["q", "a", "b", "c"] {
            local.insert(ImageId::new(id).unwrap(), layout(12)).unwrap();
        }
        let qe = QeParams {
            expand_count: 0,
            ..Default::default()
        };
        let out = qe_sv_pass(&g, &q, &x, &local, &qe, &RansacParams::default(), 3).unwrap();
        assert_eq!(out.query, q);
        assert_eq!(out.index, x);
    }
}
