//! Seeded synthetic retrieval dataset with planted clusters, bridges and
//! shared keypoint layouts.
//!
//! Every cluster is one "landmark" with a unit center `c` and two displaced
//! sub-centers `s1`, `s2`, each orthogonal to `c`. Descriptors are
//! `normalize(base + noise * g / sqrt(dim))` with `g` standard normal, where
//! `base` sits on the great circle from `c` toward a sub-center:
//!
//! - queries, and the non-bridge index and training images: `base = c`;
//! - half the bridge index images: spread along `c -> s1`, so a chain of
//!   index images links the far end back to the center;
//! - the other half: at `s2`, with no index image in between. Only the
//!   bridge share of the training images (also at `s2`) connects them to the
//!   cluster's label.
//!
//! Ground truth is every index image of the query's cluster. Query and index
//! images carry an affine copy of a per-cluster keypoint template plus
//! random outlier keypoints.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graph::Role;
use crate::seed::{derive, mix64};
use crate::store::{
    normalize_in_place, DescriptorSet, GroundTruth, ImageId, Keypoints, Label, LabelTable, LocalFeatureSet,
};

const IMAGE_WIDTH: f64 = 640.0;
const IMAGE_HEIGHT: f64 = 480.0;
/// Pixel jitter on template keypoints.
const KEYPOINT_JITTER: f64 = 0.5;
/// Per-component noise on template local descriptors, before normalization.
const LOCAL_DESC_NOISE: f64 = 0.05;
/// Furthest point of the `c -> s1` chain, as a fraction of the quarter turn.
const CHAIN_START: f64 = 0.15;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub clusters: usize,
    pub queries_per_cluster: usize,
    pub index_per_cluster: usize,
    pub train_per_cluster: usize,
    pub dim: usize,
    /// Intra-cluster noise magnitude.
    pub noise: f64,
    /// Share of index (and training) images placed off the cluster center.
    pub bridge_fraction: f64,
    pub keypoints: usize,
    pub outlier_fraction: f64,
    pub local_dim: usize,
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            clusters: 20,
            queries_per_cluster: 5,
            index_per_cluster: 40,
            train_per_cluster: 10,
            dim: 64,
            noise: 0.45,
            bridge_fraction: 0.3,
            keypoints: 40,
            outlier_fraction: 0.3,
            local_dim: 32,
            seed: 42,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 3 {
            return Err(Error::validation("synthetic descriptors need at least 3 dimensions"));
        }
        if self.local_dim == 0 {
            return Err(Error::validation("local descriptor dimension must be positive"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::validation("noise must be non-negative"));
        }
        for (name, v) in [
            ("bridge fraction", self.bridge_fraction),
            ("outlier fraction", self.outlier_fraction),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub query: DescriptorSet,
    pub index: DescriptorSet,
    pub train: DescriptorSet,
    pub local: LocalFeatureSet,
    pub labels: LabelTable,
    pub truth: GroundTruth,
}

struct Generator {
    rng: ChaCha8Rng,
    id_seed: u64,
    next_id: u64,
    used: BTreeSet<String>,
}

impl Generator {
    fn gaussian(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn unit(&mut self, n: usize) -> Vec<f64> {
        let mut v = self.gaussian(n);
        scale_to_unit(&mut v);
        v
    }

    /// Random unit vector orthogonal to `c`.
    fn orthogonal_to(&mut self, c: &[f64]) -> Vec<f64> {
        let mut v = self.gaussian(c.len());
        let along: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
        for (a, b) in v.iter_mut().zip(c) {
            *a -= along * b;
        }
        scale_to_unit(&mut v);
        v
    }

    fn id(&mut self) -> ImageId {
        loop {
            let token = format!("{:016x}", mix64(self.id_seed ^ self.next_id));
            self.next_id += 1;
            if self.used.insert(token.clone()) {
                return ImageId::new(token).expect("hex ids are valid");
            }
        }
    }

    fn member(&mut self, base: &[f64], noise: f64) -> Vec<f32> {
        let scale = noise / (base.len() as f64).sqrt();
        let g = self.gaussian(base.len());
        let mut v: Vec<f32> = base.iter().zip(g).map(|(b, n)| (b + scale * n) as f32).collect();
        normalize_in_place(&mut v).expect("noisy unit vector is non-zero");
        v
    }
}

fn scale_to_unit(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Point at fraction `lambda` of the quarter turn from `c` toward orthogonal `s`.
fn toward(c: &[f64], s: &[f64], lambda: f64) -> Vec<f64> {
    let (sin, cos) = (lambda * std::f64::consts::FRAC_PI_2).sin_cos();
    c.iter().zip(s).map(|(a, b)| cos * a + sin * b).collect()
}

struct Template {
    points: Vec<[f64; 2]>,
    descs: Vec<Vec<f64>>,
}

fn keypoints_for(g: &mut Generator, template: &Template, params: &SynthParams) -> Result<Keypoints> {
    let total = template.points.len();
    let outliers = (total as f64 * params.outlier_fraction).round() as usize;
    let inliers = total - outliers;

    let scale = g.rng.random_range(0.8..1.2);
    let angle = g.rng.random_range(-20f64..20.0).to_radians();
    let (tx, ty) = (g.rng.random_range(-30.0..30.0), g.rng.random_range(-30.0..30.0));
    let (sin, cos) = angle.sin_cos();

    let mut kp = Keypoints::new(params.local_dim);
    let chosen = sample(&mut g.rng, total, inliers);
    for i in chosen.iter() {
        let [x, y] = template.points[i];
        let jx: f64 = g.rng.sample::<f64, _>(StandardNormal) * KEYPOINT_JITTER;
        let jy: f64 = g.rng.sample::<f64, _>(StandardNormal) * KEYPOINT_JITTER;
        let px = scale * (cos * x - sin * y) + tx + jx;
        let py = scale * (sin * x + cos * y) + ty + jy;
        let noise = g.gaussian(params.local_dim);
        let mut desc: Vec<f32> = template.descs[i]
            .iter()
            .zip(noise)
            .map(|(d, n)| (d + LOCAL_DESC_NOISE * n) as f32)
            .collect();
        normalize_in_place(&mut desc)?;
        kp.push(px as f32, py as f32, &desc)?;
    }
    for _ in 0..outliers {
        let x = g.rng.random_range(0.0..IMAGE_WIDTH);
        let y = g.rng.random_range(0.0..IMAGE_HEIGHT);
        let desc: Vec<f32> = g.unit(params.local_dim).into_iter().map(|v| v as f32).collect();
        kp.push(x as f32, y as f32, &desc)?;
    }
    Ok(kp)
}

/// Generates the dataset; identical parameters give bit-identical output.
pub fn gen_synthetic(params: &SynthParams) -> Result<SynthData> {
    params.validate()?;
    let mut g = Generator {
        rng: ChaCha8Rng::seed_from_u64(derive(params.seed, "synth")),
        id_seed: derive(params.seed, "synth-ids"),
        next_id: 0,
        used: BTreeSet::new(),
    };

    let mut query = DescriptorSet::new(params.dim, Role::Query)?;
    let mut index = DescriptorSet::new(params.dim, Role::Index)?;
    let mut train = DescriptorSet::new(params.dim, Role::Train)?;
    let mut local = LocalFeatureSet::new(params.local_dim)?;
    let mut labels = LabelTable::new();
    let mut truth = GroundTruth::new();

    let displaced_index = (params.index_per_cluster as f64 * params.bridge_fraction).round() as usize;
    let chained = displaced_index.div_ceil(2);
    let displaced_train = (params.train_per_cluster as f64 * params.bridge_fraction).round() as usize;

    for cluster in 0..params.clusters {
        let label = Label(cluster as u64 + 1);
        let center = g.unit(params.dim);
        let chain_end = g.orthogonal_to(&center);
        let far = g.orthogonal_to(&center);
        let template = Template {
            points: (0..params.keypoints)
                .map(|_| {
                    [
                        g.rng.random_range(40.0..IMAGE_WIDTH - 40.0),
                        g.rng.random_range(40.0..IMAGE_HEIGHT - 40.0),
                    ]
                })
                .collect(),
            descs: (0..params.keypoints).map(|_| g.unit(params.local_dim)).collect(),
        };

        let mut query_ids = Vec::new();
        for _ in 0..params.queries_per_cluster {
            let id = g.id();
            let desc = g.member(&center, params.noise);
            query.push(id.clone(), &desc)?;
            local.insert(id.clone(), keypoints_for(&mut g, &template, params)?)?;
            query_ids.push(id);
        }

        let mut relevant = BTreeSet::new();
        for j in 0..params.index_per_cluster {
            let base = if j < params.index_per_cluster - displaced_index {
                center.clone()
            } else if j < params.index_per_cluster - displaced_index + chained {
                let lambda = g.rng.random_range(CHAIN_START..=1.0);
                toward(&center, &chain_end, lambda)
            } else {
                far.clone()
            };
            let id = g.id();
            let desc = g.member(&base, params.noise);
            index.push(id.clone(), &desc)?;
            local.insert(id.clone(), keypoints_for(&mut g, &template, params)?)?;
            relevant.insert(id);
        }
        for id in query_ids {
            truth.insert(id, relevant.clone())?;
        }

        for j in 0..params.train_per_cluster {
            let base = if j < params.train_per_cluster - displaced_train {
                &center
            } else {
                &far
            };
            let id = g.id();
            let desc = g.member(base, params.noise);
            train.push(id.clone(), &desc)?;
            labels.insert(id, label)?;
        }
    }

    Ok(SynthData {
        query,
        index,
        train,
        local,
        labels,
        truth,
    })
}
