//! Retrieval metrics and the seeded synthetic dataset.

mod synth;

pub use synth::{gen_synthetic, SynthData, SynthParams};

use std::collections::{BTreeSet, HashMap};
use std::io::{self, Write};

use crate::error::{Error, Result};
use crate::store::{GroundTruth, ImageId};

/// Challenge cutoff for mAP@K.
pub const DEFAULT_CUTOFF: usize = 100;

/// AP@K: `(1 / min(m, K)) * sum_{i <= min(n, K)} P(i) * rel(i)` with `m = |relevant|`.
/// Zero when nothing is relevant.
pub fn average_precision_at<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>, cutoff: usize) -> f64 {
    let denominator = relevant.len().min(cutoff);
    if denominator == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, item) in ranked.iter().take(cutoff).enumerate() {
        if relevant.contains(item) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / denominator as f64
}

/// Uncut AP over the whole list, denominator `|relevant|`. Diagnostics only.
pub fn average_precision<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>) -> f64 {
    average_precision_at(ranked, relevant, usize::MAX)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapReport {
    pub map: f64,
    pub queries: usize,
    /// Ground-truth queries with no ranking; each scored 0.
    pub missing: usize,
}

/// Unweighted mean of per-query AP over every ground-truth query.
/// `cutoff = None` computes plain (uncut) mAP.
pub fn mean_ap(
    rankings: &HashMap<ImageId, Vec<ImageId>>,
    truth: &GroundTruth,
    cutoff: Option<usize>,
) -> Result<MapReport> {
    if truth.is_empty() {
        return Err(Error::validation("ground truth has no queries"));
    }
    let mut total = 0.0;
    let mut missing = 0;
    for (query, relevant) in truth.iter() {
        match rankings.get(query) {
            Some(ranked) => {
                total += match cutoff {
                    Some(k) => average_precision_at(ranked, relevant, k),
                    None => average_precision(ranked, relevant),
                }
            }
            None => missing += 1,
        }
    }
    Ok(MapReport {
        map: total / truth.len() as f64,
        queries: truth.len(),
        missing,
    })
}

/// `stage,map` rows.
pub fn write_stage_csv<W: Write>(rows: &[(String, f64)], writer: &mut W) -> io::Result<()> {
    writeln!(writer, "stage,map")?;
    for (stage, map) in rows {
        writeln!(writer, "{stage},{map:.6}")?;
    }
    Ok(())
}

pub fn write_stage_text<W: Write>(rows: &[(String, f64)], writer: &mut W) -> io::Result<()> {
    let width = rows.iter().map(|(s, _)| s.len()).max().unwrap_or(5).max(5);
    writeln!(writer, "{:<width$}  mAP@{DEFAULT_CUTOFF}", "stage")?;
    for (stage, map) in rows {
        writeln!(writer, "{stage:<width$}  {map:.4}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(tokens: &[&str]) -> Vec<ImageId> {
        tokens.iter().map(|t| ImageId::new(*t).unwrap()).collect()
    }

    fn set(tokens: &[&str]) -> BTreeSet<ImageId> {
        ids(tokens).into_iter().collect()
    }

    #[test]
    fn perfect_ranking() {
        assert_eq!(average_precision_at(&ids(&["a", "b", "z"]), &set(&["a", "b"]), 100), 1.0);
    }

    #[test]
    fn one_miss_in_between() {
        let ap = average_precision_at(&ids(&["a", "x", "b"]), &set(&["a", "b"]), 100);
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.833_333_333_3).abs() < 1e-9);
    }

    #[test]
    fn relevant_beyond_cutoff_scores_zero() {
        let mut ranked: Vec<ImageId> = (0..100).map(|i| ImageId::new(format!("n{i}")).unwrap()).collect();
        ranked.push(ImageId::new("a").unwrap());
        assert_eq!(average_precision_at(&ranked, &set(&["a"]), 100), 0.0);
        assert!(average_precision(&ranked, &set(&["a"])) > 0.0);
    }

    #[test]
    fn denominator_caps_at_cutoff() {
        let relevant: BTreeSet<u32> = (0..200).collect();
        let ranked: Vec<u32> = (0..100).collect();
        assert_eq!(average_precision_at(&ranked, &relevant, 100), 1.0);
        assert_eq!(average_precision_at(&ranked, &BTreeSet::new(), 100), 0.0);
    }

    fn truth(rows: &[(&str, &[&str])]) -> GroundTruth {
        let mut gt = GroundTruth::new();
        for (q, r) in rows {
            gt.insert(ImageId::new(*q).unwrap(), set(r)).unwrap();
        }
        gt
    }

    #[test]
    fn mean_of_two_queries() {
        let gt = truth(&[("q1", &["a"]), ("q2", &["b"])]);
        let mut rankings = HashMap::new();
        rankings.insert(ImageId::new("q1").unwrap(), ids(&["a"]));
        rankings.insert(ImageId::new("q2").unwrap(), ids(&["x", "b"]));
        let report = mean_ap(&rankings, &gt, Some(100)).unwrap();
        assert!((report.map - 0.75).abs() < 1e-12);
        assert_eq!(report.missing, 0);
    }

    #[test]
    fn missing_query_contributes_zero() {
        let gt = truth(&[("q1", &["a"]), ("q2", &["b"])]);
        let mut rankings = HashMap::new();
        rankings.insert(ImageId::new("q1").unwrap(), ids(&["a"]));
        let report = mean_ap(&rankings, &gt, Some(100)).unwrap();
        assert_eq!((report.map, report.missing), (0.5, 1));
        assert!(mean_ap(&rankings, &GroundTruth::new(), Some(100)).is_err());
    }

    #[test]
    fn stage_csv_format() {
        let mut buf = Vec::new();
        write_stage_csv(&[("Blend".into(), 0.5), ("+EGT".into(), 0.75)], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "stage,map\nBlend,0.500000\n+EGT,0.750000\n");
    }
}
