//! Sweep orchestration: trains one model per mode x n x seed cell,
//! persists per-cell reports (resumably, with atomic writes) and a CSV
//! result table.

use std::fs;
use std::path::{Path, PathBuf};

use conceptree::affinity::{affinity_matrix, derive_hierarchy_bottomup, AffinityConfig};
use conceptree::cluster::{derive_hierarchy_topdown, ClusterConfig};
use conceptree::data::Dataset;
use conceptree::nn::TrainConfig;
use conceptree::train::{evaluate, train_flat, train_guided, FitConfig, TrainReport};
use conceptree::{Error, Hierarchy, Result};

use crate::config::{ExperimentConfig, HierarchySource, Mode, MNIST_DEFAULT_HIERARCHY};

/// One CSV row of the result table.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub mode: String,
    pub n: usize,
    pub seed: u64,
    pub test_accuracy: f64,
    pub report_path: PathBuf,
}

/// Writes via a sibling temp file and rename, so a crash never leaves
/// a partial file at the destination.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        e.into()
    })
}

/// Concept pool capped for hierarchy derivation: clustering and
/// affinity probes only need a modest per-class sample, and running
/// them on all of MNIST would dwarf the sweep itself.
const DERIVE_SAMPLE_CAP: usize = 3000;

/// Materializes the hierarchy a guided run trains against.
pub fn resolve_hierarchy(config: &ExperimentConfig, train: &Dataset) -> Result<Hierarchy> {
    let concepts = config.concepts(train);
    match &config.hierarchy_source {
        HierarchySource::Fixed(h) => {
            h.validate(&concepts)?;
            Ok(h.clone())
        }
        HierarchySource::MnistPaperDefault => {
            let h = Hierarchy::parse(MNIST_DEFAULT_HIERARCHY)?;
            h.validate(&concepts)?;
            Ok(h)
        }
        HierarchySource::Clustering => {
            let pool = derivation_pool(train, config.seeds[0])?;
            derive_hierarchy_topdown(&pool, &concepts, &ClusterConfig::default())
        }
        HierarchySource::Affinity => {
            let pool = derivation_pool(train, config.seeds[0])?;
            let affinity = AffinityConfig {
                train: TrainConfig {
                    seed: config.seeds[0],
                    ..AffinityConfig::default().train
                },
                ..AffinityConfig::default()
            };
            let ids: Vec<usize> = concepts.iter().copied().collect();
            let (matrix, _) = affinity_matrix(&ids, &pool, &affinity)?;
            derive_hierarchy_bottomup(&matrix, &ids, affinity.linkage, affinity.tie_tolerance)
        }
    }
}

fn derivation_pool(train: &Dataset, seed: u64) -> Result<Dataset> {
    if train.len() <= DERIVE_SAMPLE_CAP {
        Ok(train.clone())
    } else {
        train.stratified_prefix(DERIVE_SAMPLE_CAP, seed)
    }
}

fn report_path(output_dir: &Path, mode: Mode, n: usize, seed: u64) -> PathBuf {
    output_dir.join(format!("report-{}-n{n}-s{seed}.json", mode.name()))
}

fn load_report(path: &Path) -> Option<TrainReport> {
    let text = fs::read_to_string(path).ok()?;
    let report: TrainReport = serde_json::from_str(&text).ok()?;
    report.validate().ok()?;
    Some(report)
}

fn run_cell(
    mode: Mode,
    n: usize,
    seed: u64,
    train: &Dataset,
    test: &Dataset,
    hierarchy: Option<&Hierarchy>,
    base: &TrainConfig,
) -> Result<TrainReport> {
    let subset = train.stratified_prefix(n, seed)?;
    let config = FitConfig {
        train: TrainConfig {
            seed,
            ..base.clone()
        },
        ..FitConfig::default()
    };
    let (net, mut report) = match mode {
        Mode::Flat => train_flat(&subset, &config)?,
        Mode::Guided => {
            let h = hierarchy.expect("guided cell without a hierarchy");
            train_guided(&subset, h, &config)?
        }
    };
    let h = if mode == Mode::Guided { hierarchy } else { None };
    report.test_accuracy = Some(evaluate(&net, h, test)?);
    Ok(report)
}

/// Runs every mode x n x seed cell, skipping cells whose report file
/// already exists, and rewrites the CSV result table from the full set
/// of reports. Reruns with an identical config are byte-identical.
pub fn run_sweep(config: &ExperimentConfig) -> Result<Vec<ResultRow>> {
    config.validate()?;
    let (train, test) = config.load_dataset()?;
    if let Some(&bad) = config.n_values.iter().find(|&&n| n > train.len()) {
        return Err(Error::Config(format!(
            "n={bad} exceeds the {}-example training set",
            train.len()
        )));
    }
    let hierarchy = if config.modes.contains(&Mode::Guided) {
        Some(resolve_hierarchy(config, &train)?)
    } else {
        None
    };
    fs::create_dir_all(&config.output_dir)?;

    let mut rows = Vec::new();
    for &mode in &config.modes {
        for &n in &config.n_values {
            for &seed in &config.seeds {
                let path = report_path(&config.output_dir, mode, n, seed);
                let report = match load_report(&path) {
                    Some(report) => report,
                    None => {
                        let report =
                            run_cell(mode, n, seed, &train, &test, hierarchy.as_ref(), &config.train)?;
                        let json = serde_json::to_string_pretty(&report).expect("report serializes");
                        write_atomic(&path, json.as_bytes())?;
                        report
                    }
                };
                rows.push(ResultRow {
                    mode: mode.name().to_string(),
                    n,
                    seed,
                    test_accuracy: report.test_accuracy.ok_or_else(|| {
                        Error::Consistency(format!("{}: report lacks test accuracy", path.display()))
                    })?,
                    report_path: path,
                });
            }
        }
    }
    write_atomic(&config.output_dir.join("results.csv"), render_csv(&rows).as_bytes())?;
    Ok(rows)
}

pub fn render_csv(rows: &[ResultRow]) -> String {
    let mut out = String::from("mode,n,seed,test_accuracy,report_path\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{:.6},{}\n",
            row.mode,
            row.n,
            row.seed,
            row.test_accuracy,
            row.report_path.display()
        ));
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != "mode,n,seed,test_accuracy,report_path" {
                return Err(Error::Parse(format!("unexpected CSV header: {line}")));
            }
            continue;
        }
        let fields: Vec<&str> = line.splitn(5, ',').collect();
        if fields.len() != 5 {
            return Err(Error::Parse(format!("CSV line {}: {line}", i + 1)));
        }
        let bad = |what: &str| Error::Parse(format!("CSV line {}: bad {what}", i + 1));
        rows.push(ResultRow {
            mode: fields[0].to_string(),
            n: fields[1].parse().map_err(|_| bad("n"))?,
            seed: fields[2].parse().map_err(|_| bad("seed"))?,
            test_accuracy: fields[3].parse().map_err(|_| bad("test_accuracy"))?,
            report_path: PathBuf::from(fields[4]),
        });
    }
    Ok(rows)
}
