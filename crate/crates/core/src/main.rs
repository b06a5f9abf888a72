use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use graph_rerank::egt::EgtParams;
use graph_rerank::eval::{gen_synthetic, mean_ap, write_stage_csv, write_stage_text, SynthParams, DEFAULT_CUTOFF};
use graph_rerank::knn::{blend, build_retrieval_graph, KnnGraph};
use graph_rerank::pipeline::{
    augmented_graph, egt_rankings, rankings_map, run_ablation, run_stages, semisup_rankings, Inputs, PipelineConfig,
    Stages,
};
use graph_rerank::qe::{qe_sv_pass, QeParams};
use graph_rerank::store::{
    load_descriptors, load_ground_truth, load_labels, load_local_features, load_submission, save_descriptors,
    save_ground_truth, save_labels, save_local_features, save_submission, DescriptorSet, LabelTable, Submission,
};
use graph_rerank::sv::RansacParams;
use graph_rerank::{Error, Role};

#[derive(Parser)]
#[command(name = "graph-rerank", version, about = "k-NN graph re-ranking for image retrieval")]
struct Cli {
    /// Worker threads; defaults to the machine's parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Concatenate two descriptor spaces per image and renormalize.
    Blend {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the symmetrized k-NN graph over query and index images.
    Knn {
        #[command(flatten)]
        descs: Descs,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Expand descriptors with spatially verified neighbors and rebuild the graph.
    Qesv {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        descs: Descs,
        #[arg(long)]
        local: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[command(flatten)]
        qe: QeArgs,
        #[command(flatten)]
        ransac: RansacArgs,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        out_query: PathBuf,
        #[arg(long)]
        out_index: PathBuf,
    },
    /// Rank index images per query by graph traversal and write a submission.
    Rerank {
        #[arg(long)]
        graph: PathBuf,
        #[command(flatten)]
        descs: Descs,
        #[command(flatten)]
        egt: EgtArgs,
        #[command(flatten)]
        semi: SemiArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a submission against ground truth.
    Eval {
        #[arg(long)]
        submission: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CUTOFF)]
        cutoff: usize,
        /// Plain mAP over whole rows instead of mAP@cutoff.
        #[arg(long)]
        uncut: bool,
    },
    /// Write a seeded synthetic dataset.
    Synth {
        #[command(flatten)]
        params: SynthArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run the stages cumulatively and report mAP per stage.
    Ablate {
        #[command(flatten)]
        descs: Descs,
        /// Second descriptor space for the query images, blended in first.
        #[arg(long, requires = "index_b")]
        query_b: Option<PathBuf>,
        #[arg(long, requires = "query_b")]
        index_b: Option<PathBuf>,
        #[arg(long)]
        local: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[command(flatten)]
        egt: EgtArgs,
        #[command(flatten)]
        qe: QeArgs,
        #[command(flatten)]
        ransac: RansacArgs,
        #[command(flatten)]
        semi: SemiArgs,
        /// Per-stage `stage,map` CSV.
        #[arg(long)]
        out: PathBuf,
        /// Submission of the last stage.
        #[arg(long)]
        submission: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Descs {
    #[arg(long)]
    query: PathBuf,
    #[arg(long)]
    index: PathBuf,
}

#[derive(Args)]
struct EgtArgs {
    /// Trust threshold.
    #[arg(long)]
    t: f32,
    /// Result budget per query.
    #[arg(long, default_value_t = 100)]
    p: usize,
}

#[derive(Args)]
struct SemiArgs {
    /// Augment the graph with labeled training images.
    #[arg(long)]
    semisup: bool,
    #[arg(long)]
    labels: Option<PathBuf>,
    #[arg(long)]
    train_desc: Option<PathBuf>,
}

#[derive(Args)]
struct QeArgs {
    #[arg(long, default_value_t = 0.0)]
    alpha: f64,
    #[arg(long, default_value_t = 10)]
    sv_depth: usize,
    #[arg(long, default_value_t = 2)]
    expand_count: usize,
    /// Expand queries only.
    #[arg(long)]
    no_database_side: bool,
}

#[derive(Args)]
struct RansacArgs {
    #[arg(long, default_value_t = 1000)]
    ransac_iters: u32,
    #[arg(long, default_value_t = 3.0)]
    inlier_thresh: f64,
    #[arg(long, default_value_t = 0.8)]
    ratio: f64,
    #[arg(long, default_value_t = 10)]
    min_inliers: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    clusters: usize,
    #[arg(long, default_value_t = 5)]
    queries: usize,
    #[arg(long, default_value_t = 40)]
    index: usize,
    #[arg(long, default_value_t = 10)]
    train: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long, default_value_t = 0.45)]
    noise: f64,
    #[arg(long, default_value_t = 0.3)]
    bridge_fraction: f64,
    #[arg(long, default_value_t = 40)]
    keypoints: usize,
    #[arg(long, default_value_t = 0.3)]
    outlier_fraction: f64,
    #[arg(long, default_value_t = 32)]
    local_dim: usize,
}

impl QeArgs {
    fn params(&self) -> QeParams {
        QeParams {
            sv_depth: self.sv_depth,
            expand_count: self.expand_count,
            alpha: self.alpha,
            database_side: !self.no_database_side,
        }
    }
}

impl RansacArgs {
    fn params(&self) -> RansacParams {
        RansacParams {
            iterations: self.ransac_iters,
            inlier_threshold: self.inlier_thresh,
            ratio: self.ratio,
            min_inliers: self.min_inliers,
            seed: self.seed,
        }
    }
}

impl SemiArgs {
    /// Labels and training descriptors when `--semisup` is set.
    fn load(&self) -> Result<Option<(LabelTable, DescriptorSet)>> {
        if !self.semisup {
            return Ok(None);
        }
        let (Some(labels), Some(train)) = (&self.labels, &self.train_desc) else {
            return Err(Error::Usage("--semisup needs --labels and --train-desc".into()).into());
        };
        Ok(Some((load_labels(labels)?, load_descriptors(train, Role::Train)?)))
    }

    fn check(&self) -> Result<()> {
        if self.semisup && (self.labels.is_none() || self.train_desc.is_none()) {
            return Err(Error::Usage("--semisup needs --labels and --train-desc".into()).into());
        }
        Ok(())
    }
}

impl SynthArgs {
    fn params(&self) -> SynthParams {
        SynthParams {
            clusters: self.clusters,
            queries_per_cluster: self.queries,
            index_per_cluster: self.index,
            train_per_cluster: self.train,
            dim: self.dim,
            noise: self.noise,
            bridge_fraction: self.bridge_fraction,
            keypoints: self.keypoints,
            outlier_fraction: self.outlier_fraction,
            local_dim: self.local_dim,
            seed: self.seed,
        }
    }
}

impl Descs {
    fn load(&self) -> Result<(DescriptorSet, DescriptorSet)> {
        Ok((
            load_descriptors(&self.query, Role::Query)?,
            load_descriptors(&self.index, Role::Index)?,
        ))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn save_graph(graph: &KnnGraph, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    graph.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn load_graph(path: &Path, sets: &[&DescriptorSet]) -> Result<KnnGraph> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(KnnGraph::read_csv(BufReader::new(file), sets)?)
}

fn save_rows(submission: &Submission, path: &Path) -> Result<()> {
    Ok(save_submission(submission.iter().map(|(q, r)| (q, r.as_slice())), path)?)
}

fn egt_params(args: &EgtArgs, k: usize) -> EgtParams {
    EgtParams::new(args.t, args.p, k)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Blend { a, b, out } => {
            let a = load_descriptors(&a, Role::Query).context("blend")?;
            let b = load_descriptors(&b, Role::Query).context("blend")?;
            save_descriptors(&blend(&a, &b).context("blend")?, &out)?;
        }
        Command::Knn { descs, k, out } => {
            let (query, index) = descs.load().context("knn")?;
            let graph = build_retrieval_graph(&query, &index, k).context("knn")?;
            save_graph(&graph.symmetrize(), &out)?;
        }
        Command::Qesv {
            graph,
            descs,
            local,
            k,
            qe,
            ransac,
            out,
            out_query,
            out_index,
        } => {
            let (query, index) = descs.load().context("qesv")?;
            let graph = load_graph(&graph, &[&query, &index]).context("qesv")?;
            let local = load_local_features(&local).context("qesv")?;
            let result = qe_sv_pass(&graph, &query, &index, &local, &qe.params(), &ransac.params(), k).context("qesv")?;
            log::info!(
                "expanded {} of {} images",
                result.stats.images_expanded,
                result.stats.images_considered
            );
            save_graph(&result.graph.symmetrize(), &out)?;
            save_descriptors(&result.query, &out_query)?;
            save_descriptors(&result.index, &out_index)?;
        }
        Command::Rerank {
            graph,
            descs,
            egt,
            semi,
            out,
        } => {
            semi.check()?;
            let (query, index) = descs.load().context("rerank")?;
            let graph = load_graph(&graph, &[&query, &index]).context("rerank")?.symmetrize();
            let params = egt_params(&egt, graph.k);
            let submission = match semi.load().context("rerank")? {
                Some((labels, train)) => {
                    let aug = augmented_graph(&graph, &train, &labels, &query, &index).context("rerank")?;
                    semisup_rankings(&aug, &query, &params).context("rerank")?
                }
                None => egt_rankings(&graph.graph, &query, &params).context("rerank")?,
            };
            save_rows(&submission, &out)?;
        }
        Command::Eval {
            submission,
            truth,
            cutoff,
            uncut,
        } => {
            let rows = load_submission(&submission).context("eval")?;
            let truth = load_ground_truth(&truth).context("eval")?;
            let report = mean_ap(&rankings_map(&rows), &truth, (!uncut).then_some(cutoff)).context("eval")?;
            let label = if uncut { "mAP".to_string() } else { format!("mAP@{cutoff}") };
            println!("{label} {:.6} over {} queries ({} missing)", report.map, report.queries, report.missing);
        }
        Command::Synth { params, out_dir } => {
            let data = gen_synthetic(&params.params()).context("synth")?;
            fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
            save_descriptors(&data.query, out_dir.join("query.gds"))?;
            save_descriptors(&data.index, out_dir.join("index.gds"))?;
            save_descriptors(&data.train, out_dir.join("train.gds"))?;
            save_local_features(&data.local, out_dir.join("local.glf"))?;
            save_labels(&data.labels, out_dir.join("labels.csv"))?;
            save_ground_truth(&data.truth, out_dir.join("truth.csv"))?;
        }
        Command::Ablate {
            descs,
            query_b,
            index_b,
            local,
            truth,
            k,
            egt,
            qe,
            ransac,
            semi,
            out,
            submission,
        } => {
            semi.check()?;
            let (mut query, mut index) = descs.load().context("ablate")?;
            if let (Some(qb), Some(ib)) = (query_b, index_b) {
                query = blend(&query, &load_descriptors(&qb, Role::Query)?).context("Blend")?;
                index = blend(&index, &load_descriptors(&ib, Role::Index)?).context("Blend")?;
            }
            let semi_inputs = semi.load().context("ablate")?;
            let stages = Stages {
                qesv: true,
                egt: true,
                semisup: semi_inputs.is_some(),
            };
            let (labels, train) = semi_inputs.unzip();
            let inputs = Inputs {
                query,
                index,
                local: Some(load_local_features(&local).context("ablate")?),
                train,
                labels,
            };
            let truth = load_ground_truth(&truth).context("ablate")?;
            let config = PipelineConfig {
                k,
                egt: egt_params(&egt, k),
                qe: qe.params(),
                ransac: ransac.params(),
                stages,
            };
            let rows = run_ablation(&config, &inputs, &truth)?;
            let mut w = create(&out)?;
            write_stage_csv(&rows, &mut w)?;
            w.flush()?;
            write_stage_text(&rows, &mut io::stdout().lock())?;
            if let Some(path) = submission {
                let stages = run_stages(&config, &inputs)?;
                let (_, last) = stages.last().expect("the blend stage always runs");
                save_rows(last, &path)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).init();

    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::FAILURE;
        }
    }

    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if matches!(e.downcast_ref::<Error>(), Some(Error::Usage(_))) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
