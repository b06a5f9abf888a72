use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Correspondence, RansacParams};

/// 2x3 affine map: `dst = [a b tx; c d ty] * [x y 1]^T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine(pub [[f64; 3]; 2]);

impl Affine {
    pub const IDENTITY: Affine = Affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);

    /// Scale, rotation (radians) and translation composed into one map.
    pub fn similarity(scale: f64, angle: f64, tx: f64, ty: f64) -> Affine {
        let (s, c) = angle.sin_cos();
        Affine([[scale * c, -scale * s, tx], [scale * s, scale * c, ty]])
    }

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2],
        ]
    }

    pub fn residual_sq(&self, c: &Correspondence) -> f64 {
        let [x, y] = self.apply(c.src);
        (x - c.dst[0]).powi(2) + (y - c.dst[1]).powi(2)
    }

    pub fn max_abs_diff(&self, other: &Affine) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerificationResult {
    pub inlier_count: usize,
    pub verified: bool,
    /// Present exactly when `inlier_count >= 3`.
    pub transform: Option<Affine>,
}

impl VerificationResult {
    pub fn unverified() -> Self {
        VerificationResult {
            inlier_count: 0,
            verified: false,
            transform: None,
        }
    }
}

/// Solves `m * x = rhs` by Cramer's rule; `None` when `m` is near singular
/// relative to `scale` (the magnitude of its entries squared).
fn solve3(m: [[f64; 3]; 3], rhs: [f64; 3], scale: f64) -> Option<[f64; 3]> {
    let det3 = |a: [[f64; 3]; 3]| {
        a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
            + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
    };
    let det = det3(m);
    if !det.is_finite() || det.abs() <= 1e-9 * scale {
        return None;
    }
    let mut x = [0.0; 3];
    for (col, out) in x.iter_mut().enumerate() {
        let mut replaced = m;
        for row in 0..3 {
            replaced[row][col] = rhs[row];
        }
        *out = det3(replaced) / det;
    }
    Some(x)
}

/// Exact affine map through three correspondences; `None` if the sources are collinear.
fn affine_from_three(c: [&Correspondence; 3]) -> Option<Affine> {
    let m = c.map(|c| [c.src[0], c.src[1], 1.0]);
    let extent = c
        .iter()
        .flat_map(|c| c.src)
        .fold(1.0f64, |acc, v| acc.max(v.abs()));
    let scale = extent * extent;
    let row0 = solve3(m, c.map(|c| c.dst[0]), scale)?;
    let row1 = solve3(m, c.map(|c| c.dst[1]), scale)?;
    Some(Affine([row0, row1]))
}

/// Least-squares affine fit over `members`, computed in centered coordinates.
fn affine_least_squares(corr: &[Correspondence], members: &[usize]) -> Option<Affine> {
    let n = members.len() as f64;
    let (mut mx, mut my) = (0.0, 0.0);
    for &i in members {
        mx += corr[i].src[0];
        my += corr[i].src[1];
    }
    mx /= n;
    my /= n;

    let mut normal = [[0.0; 3]; 3];
    let mut rhs_x = [0.0; 3];
    let mut rhs_y = [0.0; 3];
    let mut extent = 1.0f64;
    for &i in members {
        let c = &corr[i];
        let row = [c.src[0] - mx, c.src[1] - my, 1.0];
        extent = extent.max(row[0].abs()).max(row[1].abs());
        for r in 0..3 {
            for s in 0..3 {
                normal[r][s] += row[r] * row[s];
            }
            rhs_x[r] += row[r] * c.dst[0];
            rhs_y[r] += row[r] * c.dst[1];
        }
    }
    let scale = (n * extent * extent).powi(2) * n;
    let px = solve3(normal, rhs_x, scale)?;
    let py = solve3(normal, rhs_y, scale)?;
    let uncenter = |p: [f64; 3]| [p[0], p[1], p[2] - p[0] * mx - p[1] * my];
    Some(Affine([uncenter(px), uncenter(py)]))
}

fn inliers_of(model: &Affine, corr: &[Correspondence], threshold_sq: f64) -> Vec<usize> {
    (0..corr.len())
        .filter(|&i| model.residual_sq(&corr[i]) <= threshold_sq)
        .collect()
}

fn choose3(n: usize) -> u64 {
    let n = n as u64;
    if n < 3 {
        0
    } else {
        n * (n - 1) * (n - 2) / 6
    }
}

/// Best sampled hypothesis and its consensus set, before the refit.
///
/// When every 3-subset fits in the iteration budget the subsets are
/// enumerated in lexicographic order instead of sampled. A collinear sample
/// uses up its round without producing a model.
pub fn best_hypothesis(corr: &[Correspondence], params: &RansacParams) -> Option<(Affine, Vec<usize>)> {
    let n = corr.len();
    if n < 3 {
        return None;
    }
    let threshold_sq = params.inlier_threshold * params.inlier_threshold;
    let mut best: Option<(Affine, Vec<usize>)> = None;
    let consider = |sample: [usize; 3], best: &mut Option<(Affine, Vec<usize>)>| {
        if let Some(model) = affine_from_three(sample.map(|i| &corr[i])) {
            let inliers = inliers_of(&model, corr, threshold_sq);
            if best.as_ref().is_none_or(|(_, b)| inliers.len() > b.len()) {
                *best = Some((model, inliers));
            }
        }
    };

    if choose3(n) <= params.iterations as u64 {
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    consider([i, j, k], &mut best);
                }
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        for _ in 0..params.iterations {
            let idx = rand::seq::index::sample(&mut rng, n, 3);
            consider([idx.index(0), idx.index(1), idx.index(2)], &mut best);
        }
    }
    best
}

/// RANSAC over affine maps with a least-squares refit on the winning consensus set.
///
/// The reported inliers are those of the refit model (falling back to the
/// sampled model if the consensus set is degenerate), so every reported
/// inlier is within `inlier_threshold` of the returned transform.
pub fn ransac_affine(corr: &[Correspondence], params: &RansacParams) -> VerificationResult {
    let Some((sampled, consensus)) = best_hypothesis(corr, params) else {
        return VerificationResult::unverified();
    };
    let threshold_sq = params.inlier_threshold * params.inlier_threshold;
    let model = affine_least_squares(corr, &consensus).unwrap_or(sampled);
    let inlier_count = inliers_of(&model, corr, threshold_sq).len();
    VerificationResult {
        inlier_count,
        verified: inlier_count >= params.min_inliers,
        transform: (inlier_count >= 3).then_some(model),
    }
}
