//! Spatial verification: local descriptor matching plus RANSAC affine fitting.

mod matching;
mod ransac;

pub use matching::{match_features, Correspondence};
pub use ransac::{best_hypothesis, ransac_affine, Affine, VerificationResult};

use crate::error::{Error, Result};
use crate::seed::pair_seed;
use crate::store::{ImageId, LocalFeatureSet};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacParams {
    pub iterations: u32,
    /// Maximum reprojection error in pixels for a correspondence to count as an inlier.
    pub inlier_threshold: f64,
    /// Upper bound on the best/second-best distance ratio when matching.
    pub ratio: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacParams {
    fn default() -> Self {
        RansacParams {
            iterations: 1000,
            inlier_threshold: 3.0,
            ratio: 0.8,
            min_inliers: 10,
            seed: 0,
        }
    }
}

impl RansacParams {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::validation("RANSAC needs at least one iteration"));
        }
        if !(self.inlier_threshold > 0.0 && self.inlier_threshold.is_finite()) {
            return Err(Error::validation("inlier threshold must be positive"));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::validation("ratio bound must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SvScore {
    pub id: ImageId,
    /// Position in the candidate list that was verified.
    pub rank: usize,
    pub result: VerificationResult,
}

impl SvScore {
    pub fn inliers(&self) -> usize {
        self.result.inlier_count
    }
}

/// Verifies each candidate against `query` and reorders by inlier count
/// (descending), keeping the original order among equal counts. Images
/// without local features score zero inliers.
pub fn sv_rerank(
    query: &ImageId,
    candidates: &[ImageId],
    features: &LocalFeatureSet,
    params: &RansacParams,
) -> Result<Vec<SvScore>> {
    params.validate()?;
    let query_kp = features.get(query.as_str());
    let mut scores = Vec::with_capacity(candidates.len());
    for (rank, candidate) in candidates.iter().enumerate() {
        let result = match (query_kp, features.get(candidate.as_str())) {
            (Some(a), Some(b)) => {
                let corr = match_features(a, b, params.ratio)?;
                let pair = RansacParams {
                    seed: pair_seed(params.seed, query.as_str(), candidate.as_str()),
                    ..*params
                };
                ransac_affine(&corr, &pair)
            }
            _ => VerificationResult::unverified(),
        };
        scores.push(SvScore {
            id: candidate.clone(),
            rank,
            result,
        });
    }
    scores.sort_by(|a, b| b.inliers().cmp(&a.inliers()).then(a.rank.cmp(&b.rank)));
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::Keypoints;

    fn kp_grid(n: usize, dx: f32, dy: f32, desc_offset: usize, dim: usize) -> Keypoints {
        let mut kp = Keypoints::new(dim);
        for i in 0..n {
            let mut d = vec![0.0; dim];
            d[(i + desc_offset) % dim] = 1.0;
            let (x, y) = ((i % 5) as f32 * 37.0 + (i * i % 7) as f32, (i / 5) as f32 * 41.0 + (i % 3) as f32 * 5.0);
            kp.push(x + dx, y + dy, &d).unwrap();
        }
        kp
    }

    fn id(s: &str) -> ImageId {
        ImageId::new(s).unwrap()
    }

    #[test]
    fn identical_layout_ranks_first() {
        let mut features = LocalFeatureSet::new(32).unwrap();
        features.insert(id("q"), kp_grid(15, 0.0, 0.0, 0, 32)).unwrap();
        features.insert(id("far"), kp_grid(15, 0.0, 0.0, 16, 32)).unwrap();
        features.insert(id("same"), kp_grid(15, 0.0, 0.0, 0, 32)).unwrap();
        let params = RansacParams::default();
        let out = sv_rerank(&id("q"), &[id("far"), id("same")], &features, &params).unwrap();
        assert_eq!(out[0].id, id("same"));
        assert_eq!(out[0].inliers(), 15);
        assert!(out[0].result.verified);
        assert_eq!(out[1].inliers(), 0);
    }

    #[test]
    fn unverifiable_candidates_keep_order() {
        let features = LocalFeatureSet::new(4).unwrap();
        let cands = [id("c"), id("a"), id("b")];
        let out = sv_rerank(&id("q"), &cands, &features, &RansacParams::default()).unwrap();
        let ids: Vec<_> = out.iter().map(|s| s.id.clone()).collect();
        assert_eq!(ids, cands);
        assert!(out.iter().all(|s| s.inliers() == 0 && !s.result.verified));
    }

    #[test]
    fn params_validation() {
        let bad = RansacParams {
            iterations: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RansacParams {
            inlier_threshold: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = RansacParams {
            ratio: 1.5,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
