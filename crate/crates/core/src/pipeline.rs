//! Stage orchestration shared by the subcommands and the ablation run.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::egt::{augment, build_label_graph, egt_traverse, semisup_egt, AugmentedGraph, EgtParams, RankedList};
use crate::error::{Error, Result};
use crate::eval::{mean_ap, DEFAULT_CUTOFF};
use crate::graph::{Role, WeightedGraph};
use crate::knn::{build_retrieval_graph, KnnGraph};
use crate::qe::{qe_sv_pass, QeParams};
use crate::store::{DescriptorSet, GroundTruth, ImageId, LabelTable, LocalFeatureSet, Submission};
use crate::sv::RansacParams;

pub const STAGE_BLEND: &str = "Blend";
pub const STAGE_QESV: &str = "+QE-SV";
pub const STAGE_EGT: &str = "+EGT";
pub const STAGE_SEMISUP: &str = "+SemiSup-EGT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stages {
    pub qesv: bool,
    pub egt: bool,
    pub semisup: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        qesv: true,
        egt: true,
        semisup: true,
    };

    pub fn validate(&self) -> Result<()> {
        if self.semisup && !self.egt {
            return Err(Error::Usage("the semi-supervised stage requires the EGT stage".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub k: usize,
    pub egt: EgtParams,
    pub qe: QeParams,
    pub ransac: RansacParams,
    pub stages: Stages,
}

impl PipelineConfig {
    /// Defaults around a required trust threshold: `k = p = 100`, every stage on.
    pub fn new(t: f32) -> Self {
        PipelineConfig {
            k: 100,
            egt: EgtParams::new(t, 100, 100),
            qe: QeParams::default(),
            ransac: RansacParams::default(),
            stages: Stages::ALL,
        }
    }

    /// Checks the stage chain and that each enabled stage has its inputs.
    pub fn validate(&self, inputs: &Inputs) -> Result<()> {
        self.stages.validate()?;
        if self.k == 0 {
            return Err(Error::Usage("k must be at least 1".into()));
        }
        if self.stages.qesv && inputs.local.is_none() {
            return Err(Error::Usage("QE-SV needs local features".into()));
        }
        if self.stages.semisup && (inputs.labels.is_none() || inputs.train.is_none()) {
            return Err(Error::Usage(
                "the semi-supervised stage needs labels and training descriptors".into(),
            ));
        }
        self.egt.validate()?;
        self.qe.validate()?;
        self.ransac.validate()
    }
}

pub struct Inputs {
    pub query: DescriptorSet,
    pub index: DescriptorSet,
    pub local: Option<LocalFeatureSet>,
    pub train: Option<DescriptorSet>,
    pub labels: Option<LabelTable>,
}

/// Index neighbors of every query in graph order, truncated to `limit`.
pub fn knn_rankings(graph: &WeightedGraph, query: &DescriptorSet, limit: usize) -> Submission {
    query
        .ids()
        .iter()
        .map(|q| {
            let ranked = graph
                .find(q.as_str())
                .map(|v| {
                    graph
                        .neighbors(v)
                        .iter()
                        .filter(|e| graph.role(e.target) == Role::Index)
                        .take(limit)
                        .map(|e| graph.id(e.target).clone())
                        .collect()
                })
                .unwrap_or_default();
            (q.clone(), ranked)
        })
        .collect()
}

fn collect_lists<F>(query: &DescriptorSet, traverse: F) -> Result<Submission>
where
    F: Fn(&ImageId) -> Result<RankedList> + Sync + Send,
{
    let lists: Vec<RankedList> = query.ids().par_iter().map(traverse).collect::<Result<_>>()?;
    let capped = lists.iter().filter(|l| l.step_capped).count();
    if capped > 0 {
        log::warn!("{capped} traversals stopped at the step cap");
    }
    Ok(lists.into_iter().map(|l| (l.query.clone(), l.ids())).collect())
}

/// EGT from every query over a symmetrized graph; only index images are retrieved.
pub fn egt_rankings(graph: &WeightedGraph, query: &DescriptorSet, params: &EgtParams) -> Result<Submission> {
    collect_lists(query, |q| egt_traverse(graph, q.as_str(), params, |v| graph.role(v) == Role::Index))
}

pub fn semisup_rankings(aug: &AugmentedGraph, query: &DescriptorSet, params: &EgtParams) -> Result<Submission> {
    collect_lists(query, |q| semisup_egt(aug, q.as_str(), params))
}

/// Label hubs plus anchors for `query` and `index` on top of symmetrized `base`.
pub fn augmented_graph(
    base: &KnnGraph,
    train: &DescriptorSet,
    labels: &LabelTable,
    query: &DescriptorSet,
    index: &DescriptorSet,
) -> Result<AugmentedGraph> {
    let label_graph = build_label_graph(labels);
    let aug = augment(base, &label_graph, train, labels, query, index)?;
    log::info!(
        "augmented graph: {} hubs, {} anchors",
        label_graph.hub_count(),
        aug.anchors.len()
    );
    Ok(aug)
}

/// Runs the enabled stages cumulatively and returns each stage's rankings in order.
pub fn run_stages(config: &PipelineConfig, inputs: &Inputs) -> Result<Vec<(&'static str, Submission)>> {
    config.validate(inputs)?;
    let p = config.egt.p;
    let mut out = Vec::new();

    let base = build_retrieval_graph(&inputs.query, &inputs.index, config.k).map_err(|e| e.in_stage(STAGE_BLEND))?;
    out.push((STAGE_BLEND, knn_rankings(&base.graph, &inputs.query, p)));

    let (graph, query, index) = match (&inputs.local, config.stages.qesv) {
        (Some(local), true) => {
            let qe = qe_sv_pass(
                &base,
                &inputs.query,
                &inputs.index,
                local,
                &config.qe,
                &config.ransac,
                config.k,
            )
            .map_err(|e| e.in_stage(STAGE_QESV))?;
            log::info!(
                "QE-SV expanded {} of {} images with {} neighbors",
                qe.stats.images_expanded,
                qe.stats.images_considered,
                qe.stats.neighbors_used
            );
            out.push((STAGE_QESV, knn_rankings(&qe.graph.graph, &qe.query, p)));
            (qe.graph, qe.query, qe.index)
        }
        _ => (base, inputs.query.clone(), inputs.index.clone()),
    };

    if !config.stages.egt {
        return Ok(out);
    }
    let symmetric = graph.symmetrize();
    let egt = egt_rankings(&symmetric.graph, &query, &config.egt).map_err(|e| e.in_stage(STAGE_EGT))?;
    out.push((STAGE_EGT, egt));

    if let (true, Some(train), Some(labels)) = (config.stages.semisup, &inputs.train, &inputs.labels) {
        let semisup = augmented_graph(&symmetric, train, labels, &query, &index)
            .and_then(|aug| semisup_rankings(&aug, &query, &config.egt))
            .map_err(|e| e.in_stage(STAGE_SEMISUP))?;
        out.push((STAGE_SEMISUP, semisup));
    }
    Ok(out)
}

pub fn rankings_map(submission: &Submission) -> HashMap<ImageId, Vec<ImageId>> {
    submission.iter().cloned().collect()
}

/// Per-stage mAP@100 over every enabled stage.
pub fn run_ablation(config: &PipelineConfig, inputs: &Inputs, truth: &GroundTruth) -> Result<Vec<(String, f64)>> {
    let stages = run_stages(config, inputs)?;
    stages
        .iter()
        .map(|(name, submission)| {
            let report = mean_ap(&rankings_map(submission), truth, Some(DEFAULT_CUTOFF))?;
            log::info!("{name}: mAP@{DEFAULT_CUTOFF} {:.4}", report.map);
            Ok((name.to_string(), report.map))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inputs() -> Inputs {
        Inputs {
            query: DescriptorSet::from_rows(2, Role::Query, [("q", vec![1.0, 0.0])]).unwrap(),
            index: DescriptorSet::from_rows(2, Role::Index, [("a", vec![0.6, 0.8]), ("b", vec![1.0, 0.0])]).unwrap(),
            local: None,
            train: None,
            labels: None,
        }
    }

    #[test]
    fn semisup_without_egt_is_a_usage_error() {
        let stages = Stages {
            qesv: false,
            egt: false,
            semisup: true,
        };
        assert!(matches!(stages.validate(), Err(Error::Usage(_))));
    }

    #[test]
    fn missing_inputs_are_usage_errors() {
        let config = PipelineConfig::new(0.5);
        assert!(matches!(config.validate(&inputs()), Err(Error::Usage(_))));
        let config = PipelineConfig {
            stages: Stages {
                qesv: false,
                egt: true,
                semisup: true,
            },
            ..PipelineConfig::new(0.5)
        };
        assert!(matches!(run_stages(&config, &inputs()), Err(Error::Usage(_))));
    }

    #[test]
    fn blend_and_egt_stages() {
        let config = PipelineConfig {
            stages: Stages {
                qesv: false,
                egt: true,
                semisup: false,
            },
            ..PipelineConfig::new(0.5)
        };
        let stages = run_stages(&config, &inputs()).unwrap();
        let names: Vec<&str> = stages.iter().map(|(n, _)| *n).collect();
        assert_eq!(names, [STAGE_BLEND, STAGE_EGT]);
        let b = ImageId::new("b").unwrap();
        let a = ImageId::new("a").unwrap();
        assert_eq!(stages[0].1[0].1, [b.clone(), a.clone()]);
        assert_eq!(stages[1].1[0].1, [b, a]);
    }

    #[test]
    fn ablation_reports_map_per_stage() {
        let mut truth = GroundTruth::new();
        truth
            .insert(ImageId::new("q").unwrap(), [ImageId::new("a").unwrap()].into_iter().collect())
            .unwrap();
        let config = PipelineConfig {
            stages: Stages {
                qesv: false,
                egt: false,
                semisup: false,
            },
            ..PipelineConfig::new(0.5)
        };
        let rows = run_ablation(&config, &inputs(), &truth).unwrap();
        assert_eq!(rows, [("Blend".to_string(), 0.5)]);
    }
}
