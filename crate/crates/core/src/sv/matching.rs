use crate::error::{Error, Result};
use crate::knn::dot;
use crate::store::Keypoints;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub src: [f64; 2],
    pub dst: [f64; 2],
    pub score: f32,
    pub src_index: usize,
    pub dst_index: usize,
}

impl Correspondence {
    pub fn new(src: [f64; 2], dst: [f64; 2], score: f32) -> Self {
        Correspondence {
            src,
            dst,
            score,
            src_index: 0,
            dst_index: 0,
        }
    }
}

/// Nearest-neighbor matches from `a` into `b` that pass the distance-ratio test.
///
/// Similarities `s` map to distances `1 - s` (proportional to squared L2 for
/// unit descriptors). A match is kept when `d_best / d_second <= ratio`; two
/// equally close candidates count as ratio 1, and a lone candidate as ratio 0.
pub fn match_features(a: &Keypoints, b: &Keypoints, ratio: f64) -> Result<Vec<Correspondence>> {
    if a.dim() != b.dim() {
        return Err(Error::validation(format!(
            "local descriptor dimensions differ: {} vs {}",
            a.dim(),
            b.dim()
        )));
    }
    let mut out = Vec::new();
    if b.is_empty() {
        return Ok(out);
    }
    for i in 0..a.len() {
        let desc = a.desc(i);
        let mut best = (f32::NEG_INFINITY, 0usize);
        let mut second = f32::NEG_INFINITY;
        for j in 0..b.len() {
            let s = dot(desc, b.desc(j));
            if s > best.0 {
                second = best.0;
                best = (s, j);
            } else if s > second {
                second = s;
            }
        }
        let observed = if b.len() == 1 {
            0.0
        } else {
            let d1 = (1.0 - best.0 as f64).max(0.0);
            let d2 = (1.0 - second as f64).max(0.0);
            if d2 == 0.0 {
                1.0
            } else {
                d1 / d2
            }
        };
        if observed <= ratio {
            let [sx, sy] = a.point(i);
            let [dx, dy] = b.point(best.1);
            out.push(Correspondence {
                src: [sx as f64, sy as f64],
                dst: [dx as f64, dy as f64],
                score: best.0,
                src_index: i,
                dst_index: best.1,
            });
        }
    }
    out.sort_by(|x, y| {
        y.score
            .total_cmp(&x.score)
            .then(x.src_index.cmp(&y.src_index))
            .then(x.dst_index.cmp(&y.dst_index))
    });
    Ok(out)
}
