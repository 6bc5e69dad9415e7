//! `conceptree`: counting/enumeration of concept hierarchies, hierarchy
//! derivation from data, single training runs, experiment sweeps and
//! plot emission. Usage errors exit 2 (clap), everything else that
//! fails exits 1 with a diagnostic on stderr.

use std::collections::BTreeSet;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use conceptree::affinity::{affinity_matrix, derive_hierarchy_bottomup, AffinityConfig};
use conceptree::cluster::{self, ClusterConfig};
use conceptree::data::{fetch_mnist, make_blobs, load_mnist, BlobSpec, Dataset, Split};
use conceptree::hierarchy::{count_hierarchies, enumerate_hierarchies};
use conceptree::nn::TrainConfig;
use conceptree::train::{evaluate, train_flat, train_guided, FitConfig};
use conceptree::{Error, Hierarchy, Result};

use conceptree_cli::config::{data_dir, ExperimentConfig, Mode, MNIST_DEFAULT_HIERARCHY};
use conceptree_cli::{plot, sweep};

const MNIST_BASE_URL: &str = "https://storage.googleapis.com/cvdf-datasets/mnist";

#[derive(Parser)]
#[command(name = "conceptree", version, about = "Concept-hierarchy toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Dataset selection shared by the derive/train subcommands: either
/// MNIST from the data directory or synthetic blobs from a spec file.
#[derive(Args)]
struct DataArgs {
    /// Use MNIST (from the data directory, see --help of fetch-mnist).
    #[arg(long, conflicts_with = "blobs")]
    mnist: bool,
    /// Path to a JSON blob spec.
    #[arg(long)]
    blobs: Option<PathBuf>,
    /// Seed for blob synthesis and derivation subsampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DataArgs {
    fn load(&self) -> Result<Dataset> {
        if let Some(path) = &self.blobs {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let spec: BlobSpec = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            make_blobs(&spec, self.seed)
        } else if self.mnist {
            load_mnist(&data_dir(), Split::Train)
        } else {
            Err(Error::Config("pass --mnist or --blobs <spec.json>".into()))
        }
    }

    /// Like `load`, but capped to a modest per-class sample: hierarchy
    /// derivation does not need the full training set.
    fn load_derivation_pool(&self) -> Result<Dataset> {
        let full = self.load()?;
        full.stratified_prefix(full.len().min(3000), self.seed)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Count concept hierarchies over n concepts.
    Count {
        n: usize,
    },
    /// Enumerate and print all hierarchies over n concepts.
    Enumerate {
        n: usize,
    },
    /// Download and unpack the four MNIST IDX files.
    FetchMnist {
        #[arg(long, default_value = MNIST_BASE_URL)]
        base_url: String,
        /// Destination directory (defaults to the data directory).
        #[arg(long)]
        dest: Option<PathBuf>,
    },
    /// Derive a hierarchy by top-down prototype clustering.
    DeriveCluster {
        #[command(flatten)]
        data: DataArgs,
        /// Where to write the per-node score report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Derive a hierarchy by bottom-up transfer-affinity agglomeration.
    DeriveAffinity {
        #[command(flatten)]
        data: DataArgs,
        /// Where to write the affinity matrix (CSV).
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Train one model and report its test accuracy.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        mode: Mode,
        /// Training examples (stratified subsample); defaults to all.
        #[arg(long)]
        n: Option<usize>,
        /// Serialized hierarchy for guided mode; defaults to the
        /// built-in digit hierarchy on 10-class data.
        #[arg(long)]
        hierarchy: Option<String>,
        /// Where to write the training report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run the full mode x n x seed sweep described by a JSON config.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's output directory.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override the config's seed list (comma-separated).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Override the config's n values (comma-separated).
        #[arg(long, value_delimiter = ',')]
        n_values: Option<Vec<usize>>,
        /// Also emit plots after the sweep.
        #[arg(long)]
        plots: bool,
    },
    /// Render SVG plots from a sweep's CSV result table.
    Plot {
        /// Path to results.csv.
        #[arg(long)]
        results: PathBuf,
        /// Output directory (defaults to the CSV's directory).
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn concepts_of(data: &Dataset) -> BTreeSet<usize> {
    (0..data.concept_count()).collect()
}

#[derive(serde::Serialize)]
struct NodeScore {
    members: Vec<usize>,
    children: Vec<String>,
    cohesion: f64,
    dispersion: f64,
    score: f64,
}

/// Scores each internal node's child grouping the way the top-down
/// derivation scored it.
fn node_scores(h: &Hierarchy, data: &Dataset, config: &ClusterConfig) -> Result<Vec<NodeScore>> {
    let mut scores = Vec::new();
    let mut stack = vec![h];
    while let Some(node) = stack.pop() {
        if node.is_leaf() {
            continue;
        }
        let grouping: Vec<BTreeSet<usize>> = node
            .children()
            .iter()
            .map(|c| c.leaves().into_iter().collect())
            .collect();
        let cohesion = cluster::cohesion(&grouping, data)?;
        let dispersion = cluster::dispersion(&grouping, data)?;
        scores.push(NodeScore {
            members: node.leaves(),
            children: node.children().iter().map(|c| c.to_string()).collect(),
            cohesion,
            dispersion,
            score: cluster::score(cohesion, dispersion, config.lambda),
        });
        stack.extend(node.children());
    }
    Ok(scores)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Count { n } => {
            println!("{}", count_hierarchies(n)?);
        }
        Command::Enumerate { n } => {
            let concepts: BTreeSet<usize> = (0..n).collect();
            for h in enumerate_hierarchies(&concepts)? {
                println!("{h}");
            }
        }
        Command::FetchMnist { base_url, dest } => {
            let dest = dest.unwrap_or_else(data_dir);
            for path in fetch_mnist(&base_url, &dest)? {
                println!("{}", path.display());
            }
        }
        Command::DeriveCluster { data, report } => {
            let dataset = data.load_derivation_pool()?;
            let config = ClusterConfig::default();
            let h = cluster::derive_hierarchy_topdown(&dataset, &concepts_of(&dataset), &config)?;
            println!("{h}");
            if let Some(path) = report {
                let scores = node_scores(&h, &dataset, &config)?;
                let body = serde_json::json!({
                    "hierarchy": h.to_string(),
                    "nodes": scores,
                });
                fs::write(&path, serde_json::to_string_pretty(&body).expect("serializable"))?;
            }
        }
        Command::DeriveAffinity { data, matrix } => {
            let dataset = data.load_derivation_pool()?;
            let config = AffinityConfig {
                train: TrainConfig {
                    seed: data.seed,
                    ..AffinityConfig::default().train
                },
                ..AffinityConfig::default()
            };
            let ids: Vec<usize> = concepts_of(&dataset).into_iter().collect();
            let (affinities, _) = affinity_matrix(&ids, &dataset, &config)?;
            let h =
                derive_hierarchy_bottomup(&affinities, &ids, config.linkage, config.tie_tolerance)?;
            println!("{h}");
            if let Some(path) = matrix {
                let mut csv = String::new();
                for i in 0..affinities.size() {
                    let row: Vec<String> = (0..affinities.size())
                        .map(|j| format!("{:.6}", affinities.scores.get(i, j)))
                        .collect();
                    csv.push_str(&row.join(","));
                    csv.push('\n');
                }
                fs::write(&path, csv)?;
            }
        }
        Command::Train {
            data,
            mode,
            n,
            hierarchy,
            report,
        } => {
            let full = data.load()?;
            let train = match n {
                Some(n) => full.stratified_prefix(n, data.seed)?,
                None => full,
            };
            let test = match &data.blobs {
                // blob runs evaluate on an independently drawn set
                Some(_) => {
                    let mut t = DataArgs {
                        seed: data.seed.wrapping_add(0x9e37_79b9),
                        mnist: false,
                        blobs: data.blobs.clone(),
                    }
                    .load()?;
                    t.split = Split::Test;
                    t
                }
                None => load_mnist(&data_dir(), Split::Test)?,
            };
            let config = FitConfig {
                train: TrainConfig {
                    learning_rate: 0.01,
                    batch_size: 16,
                    max_epochs_per_phase: 10,
                    seed: data.seed,
                    ..TrainConfig::default()
                },
                ..FitConfig::default()
            };
            let (net, mut train_report, h) = match mode {
                Mode::Flat => {
                    let (net, r) = train_flat(&train, &config)?;
                    (net, r, None)
                }
                Mode::Guided => {
                    let text = match hierarchy {
                        Some(text) => text,
                        None if train.concept_count() == 10 => MNIST_DEFAULT_HIERARCHY.to_string(),
                        None => {
                            return Err(Error::Config(
                                "guided mode needs --hierarchy for non-10-class data".into(),
                            ))
                        }
                    };
                    let h = Hierarchy::parse(&text)?;
                    let (net, r) = train_guided(&train, &h, &config)?;
                    (net, r, Some(h))
                }
            };
            train_report.test_accuracy = Some(evaluate(&net, h.as_ref(), &test)?);
            println!(
                "{} n={} seed={} test_accuracy={:.4}",
                mode.name(),
                train_report.n,
                train_report.seed,
                train_report.test_accuracy.unwrap()
            );
            if let Some(path) = report {
                let json = serde_json::to_string_pretty(&train_report).expect("serializable");
                sweep::write_atomic(&path, json.as_bytes())?;
            }
        }
        Command::Sweep {
            config,
            output_dir,
            seeds,
            n_values,
            plots,
        } => {
            let mut experiment = ExperimentConfig::load(&config)?;
            if let Some(dir) = output_dir {
                experiment.output_dir = dir;
            }
            if let Some(seeds) = seeds {
                experiment.seeds = seeds;
            }
            if let Some(n_values) = n_values {
                experiment.n_values = n_values;
            }
            experiment.validate()?;
            let rows = sweep::run_sweep(&experiment)?;
            println!("{}", sweep::render_csv(&rows).trim_end());
            if plots {
                for path in plot::emit_plots(&rows, &experiment.output_dir)? {
                    println!("{}", path.display());
                }
            }
        }
        Command::Plot { results, output_dir } => {
            let text = fs::read_to_string(&results)
                .map_err(|e| Error::Config(format!("{}: {e}", results.display())))?;
            let rows = sweep::parse_csv(&text)?;
            let dir = output_dir
                .or_else(|| results.parent().map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("."));
            for path in plot::emit_plots(&rows, &dir)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
