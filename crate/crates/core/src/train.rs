//! Flat and hierarchy-guided phased training.
//!
//! Flat training is the classical setting: one softmax head over all
//! concepts. Guided training gives the network one sigmoid unit per
//! non-root node of a concept hierarchy and proceeds in phases, one
//! per hierarchy level: phase d trains the loss restricted to units of
//! depth ≤ d (cumulative, so earlier groupings are not forgotten) and
//! advances when the active loss plateaus or the epoch budget runs
//! out. The recorded loss trace always covers all units, which is what
//! produces the saturate-then-drop shape at phase boundaries.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::hierarchy::Hierarchy;
use crate::nn::{
    gradients, init_network_with, sgd_step, Activation, DenseNetwork, HeadSpec, HeadTargets,
    TrainConfig,
};
use crate::tensor::Tensor2;
use crate::{Error, Result};

/// Model shape and schedule knobs shared by flat and guided training.
#[derive(Debug, Clone)]
pub struct FitConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    /// Guided leaf decision: false = product of sigmoid outputs along
    /// each root-to-leaf path, true = greedy top-down routing.
    pub greedy_routing: bool,
    pub train: TrainConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            hidden: vec![256, 128],
            activation: Activation::Relu,
            greedy_routing: false,
            train: TrainConfig::default(),
        }
    }
}

/// One training phase: all nodes of depth ≤ `depth` carry loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Phase {
    pub depth: usize,
    /// Indices into the hierarchy's non-root node list.
    pub active: Vec<usize>,
    pub max_epochs: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhaseSchedule {
    pub phases: Vec<Phase>,
}

impl PhaseSchedule {
    /// Cumulative schedule: one phase per hierarchy level, each
    /// activating every node of that depth or shallower.
    pub fn cumulative(h: &Hierarchy, max_epochs: usize) -> Self {
        let nodes = nonroot_nodes(h);
        let depth = nodes.iter().map(|n| n.depth).max().unwrap_or(0);
        let phases = (1..=depth)
            .map(|d| Phase {
                depth: d,
                active: (0..nodes.len()).filter(|&i| nodes[i].depth <= d).collect(),
                max_epochs,
            })
            .collect();
        PhaseSchedule { phases }
    }

    pub fn validate(&self) -> Result<()> {
        for pair in self.phases.windows(2) {
            if pair[1].depth <= pair[0].depth {
                return Err(Error::Consistency("phase depths not increasing".into()));
            }
            if !pair[0].active.iter().all(|i| pair[1].active.contains(i)) {
                return Err(Error::Consistency("phase active sets not nested".into()));
            }
        }
        Ok(())
    }
}

/// Everything one training run produces besides the network itself.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainReport {
    pub mode: String,
    pub n: usize,
    pub seed: u64,
    /// (step, loss) pairs; guided losses cover all node units.
    pub loss_trace: Vec<(usize, f64)>,
    /// Step index at which each phase after the first began.
    pub phase_boundaries: Vec<usize>,
    /// Loss actually optimized each step (active-masked for guided
    /// runs); equals the reported trace for flat runs.
    pub active_loss_trace: Vec<f64>,
    pub test_accuracy: Option<f64>,
    pub config_fingerprint: String,
}

impl TrainReport {
    pub fn validate(&self) -> Result<()> {
        if !self.phase_boundaries.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Consistency(
                "phase boundaries not strictly increasing".into(),
            ));
        }
        if let Some(a) = self.test_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Consistency(format!("test accuracy {a} outside [0,1]")));
            }
        }
        Ok(())
    }
}

fn fingerprint(mode: &str, config: &FitConfig) -> String {
    format!(
        "{mode};hidden={:?};act={:?};routing={};lr={};batch={};epochs={};seed={};ptol={};pwin={}",
        config.hidden,
        config.activation,
        config.greedy_routing,
        config.train.learning_rate,
        config.train.batch_size,
        config.train.max_epochs_per_phase,
        config.train.seed,
        config.train.plateau_tolerance,
        config.train.plateau_window,
    )
}

/// A non-root node of the hierarchy in depth-first order.
#[derive(Debug, Clone)]
struct NodeInfo {
    depth: usize,
    leaves: BTreeSet<usize>,
}

fn nonroot_nodes(h: &Hierarchy) -> Vec<NodeInfo> {
    fn walk(node: &Hierarchy, depth: usize, out: &mut Vec<NodeInfo>) {
        if depth > 0 {
            out.push(NodeInfo {
                depth,
                leaves: node.leaves().into_iter().collect(),
            });
        }
        for child in node.children() {
            walk(child, depth + 1, out);
        }
    }
    let mut out = Vec::new();
    walk(h, 0, &mut out);
    out
}

/// Binary supervision vector over the non-root nodes of `h`: 1 exactly
/// on the nodes of the root-to-leaf path of `concept`.
pub fn node_targets(h: &Hierarchy, concept: usize) -> Result<Vec<f64>> {
    let nodes = nonroot_nodes(h);
    if !nodes
        .iter()
        .any(|n| n.leaves.len() == 1 && n.leaves.contains(&concept))
    {
        return Err(Error::Label(format!("concept {concept} is not a leaf")));
    }
    Ok(nodes
        .iter()
        .map(|n| f64::from(n.leaves.contains(&concept)))
        .collect())
}

fn shuffled_epoch_order(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

/// Plateau rule: relative improvement of the mean active loss between
/// the previous window and the latest one falls below the tolerance.
fn plateaued(losses: &[f64], window: usize, tolerance: f64) -> bool {
    if losses.len() < 2 * window || window == 0 {
        return false;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let prev = mean(&losses[losses.len() - 2 * window..losses.len() - window]);
    let last = mean(&losses[losses.len() - window..]);
    (prev - last) / prev.abs().max(f64::MIN_POSITIVE) < tolerance
}

/// Classical training: softmax over all concepts, single phase.
pub fn train_flat(data: &Dataset, config: &FitConfig) -> Result<(DenseNetwork, TrainReport)> {
    data.validate()?;
    config.train.validate()?;
    let concepts = data.concept_names.len();
    let mut sizes = vec![data.features.cols()];
    sizes.extend_from_slice(&config.hidden);
    let mut net = init_network_with(
        &sizes,
        config.activation,
        &[HeadSpec::softmax("concepts", concepts)],
        config.train.seed,
    )?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut trace = Vec::new();
    let mut step = 0usize;
    'epochs: for _ in 0..config.train.max_epochs_per_phase {
        let order = shuffled_epoch_order(data.len(), &mut rng);
        for chunk in order.chunks(config.train.batch_size) {
            let batch = data.features.select_rows(chunk)?;
            let targets: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads) = gradients(&net, &batch, 0, &HeadTargets::Classes(&targets))?;
            sgd_step(&mut net, &grads, config.train.learning_rate);
            trace.push((step, loss));
            step += 1;
        }
        let losses: Vec<f64> = trace.iter().map(|&(_, l)| l).collect();
        if plateaued(&losses, config.train.plateau_window, config.train.plateau_tolerance) {
            break 'epochs;
        }
    }

    let report = TrainReport {
        mode: "flat".into(),
        n: data.len(),
        seed: config.train.seed,
        active_loss_trace: trace.iter().map(|&(_, l)| l).collect(),
        loss_trace: trace,
        phase_boundaries: Vec::new(),
        test_accuracy: None,
        config_fingerprint: fingerprint("flat", config),
    };
    report.validate()?;
    Ok((net, report))
}

/// Hierarchy-guided phased training: one sigmoid unit per non-root
/// node, phases per level, cumulative activation, plateau-or-budget
/// transitions.
pub fn train_guided(
    data: &Dataset,
    h: &Hierarchy,
    config: &FitConfig,
) -> Result<(DenseNetwork, TrainReport)> {
    data.validate()?;
    config.train.validate()?;
    let leaves: BTreeSet<usize> = h.leaves().into_iter().collect();
    let concepts: BTreeSet<usize> = (0..data.concept_names.len()).collect();
    if leaves != concepts {
        return Err(Error::Consistency(format!(
            "hierarchy leaves {leaves:?} do not match data concepts {concepts:?}"
        )));
    }

    let nodes = nonroot_nodes(h);
    let schedule = PhaseSchedule::cumulative(h, config.train.max_epochs_per_phase);
    schedule.validate()?;
    let mut sizes = vec![data.features.cols()];
    sizes.extend_from_slice(&config.hidden);
    let mut net = init_network_with(
        &sizes,
        config.activation,
        &[HeadSpec::multilabel("nodes", nodes.len())],
        config.train.seed,
    )?;

    // per-concept supervision rows, built once
    let target_rows: Vec<Vec<f64>> = (0..data.concept_names.len())
        .map(|c| node_targets(h, c))
        .collect::<Result<_>>()?;
    let all_active = vec![true; nodes.len()];

    let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
    let mut trace = Vec::new();
    let mut boundaries = Vec::new();
    let mut all_active_losses = Vec::new();
    let mut step = 0usize;
    for (p, phase) in schedule.phases.iter().enumerate() {
        if p > 0 {
            boundaries.push(step);
        }
        let mask: Vec<bool> = (0..nodes.len()).map(|i| phase.active.contains(&i)).collect();
        let mut active_losses = Vec::new();
        'phase: for _ in 0..phase.max_epochs {
            let order = shuffled_epoch_order(data.len(), &mut rng);
            for chunk in order.chunks(config.train.batch_size) {
                let batch = data.features.select_rows(chunk)?;
                let mut targets = Tensor2::zeros(chunk.len(), nodes.len());
                for (row, &i) in chunk.iter().enumerate() {
                    for (col, &t) in target_rows[data.labels[i]].iter().enumerate() {
                        targets.set(row, col, t);
                    }
                }
                // the step optimizes the active-masked loss ...
                let (active_loss, grads) = gradients(
                    &net,
                    &batch,
                    0,
                    &HeadTargets::Multilabel {
                        targets: &targets,
                        active: &mask,
                    },
                )?;
                sgd_step(&mut net, &grads, config.train.learning_rate);
                // ... while the trace reports the loss over all units,
                // so still-untrained levels show up as a plateau that
                // drops once their phase begins
                let (full_loss, _) = gradients(
                    &net,
                    &batch,
                    0,
                    &HeadTargets::Multilabel {
                        targets: &targets,
                        active: &all_active,
                    },
                )?;
                trace.push((step, full_loss));
                active_losses.push(active_loss);
                step += 1;
            }
            if plateaued(
                &active_losses,
                config.train.plateau_window,
                config.train.plateau_tolerance,
            ) {
                break 'phase;
            }
        }
        all_active_losses.extend(active_losses);
    }

    let report = TrainReport {
        mode: "guided".into(),
        n: data.len(),
        seed: config.train.seed,
        loss_trace: trace,
        phase_boundaries: boundaries,
        active_loss_trace: all_active_losses,
        test_accuracy: None,
        config_fingerprint: fingerprint("guided", config),
    };
    report.validate()?;
    Ok((net, report))
}

/// Leaf predictions of a guided network: path-product of sigmoid
/// outputs by default, greedy top-down routing on request.
pub fn predict_guided(
    net: &DenseNetwork,
    h: &Hierarchy,
    features: &Tensor2,
    greedy: bool,
) -> Result<Vec<usize>> {
    let nodes = nonroot_nodes(h);
    let out = &net.forward(features)?[0];
    if out.cols() != nodes.len() {
        return Err(Error::Shape(format!(
            "{} output units for {} hierarchy nodes",
            out.cols(),
            nodes.len()
        )));
    }
    let leaves = h.leaves();
    let mut predictions = Vec::with_capacity(out.rows());
    for row in 0..out.rows() {
        let best = if greedy {
            greedy_route(h, &nodes, out, row)
        } else {
            // product over the root-to-leaf path, per leaf
            leaves
                .iter()
                .map(|&leaf| {
                    let score: f64 = nodes
                        .iter()
                        .enumerate()
                        .filter(|(_, n)| n.leaves.contains(&leaf))
                        .map(|(i, _)| out.get(row, i))
                        .product();
                    (leaf, score)
                })
                .max_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                .map(|(leaf, _)| leaf)
                .unwrap()
        };
        predictions.push(best);
    }
    Ok(predictions)
}

fn greedy_route(h: &Hierarchy, nodes: &[NodeInfo], out: &Tensor2, row: usize) -> usize {
    // walk down, at each node picking the child whose unit fires most
    let mut current = h;
    loop {
        match current {
            Hierarchy::Leaf(id) => return *id,
            Hierarchy::Internal(children) => {
                current = children
                    .iter()
                    .max_by(|a, b| {
                        let score = |c: &Hierarchy| {
                            let cl: BTreeSet<usize> = c.leaves().into_iter().collect();
                            let i = nodes.iter().position(|n| n.leaves == cl).unwrap();
                            out.get(row, i)
                        };
                        score(a).partial_cmp(&score(b)).unwrap()
                    })
                    .unwrap();
            }
        }
    }
}

/// Fraction of correct leaf predictions; guided nets pass their
/// hierarchy, flat nets pass none.
pub fn evaluate(
    net: &DenseNetwork,
    hierarchy: Option<&Hierarchy>,
    testset: &Dataset,
) -> Result<f64> {
    let predictions = match hierarchy {
        Some(h) => predict_guided(net, h, &testset.features, false)?,
        None => {
            let out = &net.forward(&testset.features)?[0];
            (0..out.rows())
                .map(|row| {
                    (0..out.cols())
                        .max_by(|&a, &b| out.get(row, a).partial_cmp(&out.get(row, b)).unwrap())
                        .unwrap()
                })
                .collect()
        }
    };
    let correct = predictions
        .iter()
        .zip(&testset.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / testset.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec, Split};

    fn pair_spec(examples: usize) -> BlobSpec {
        BlobSpec {
            concept_count: 6,
            dims: 12,
            planted_hierarchy: Hierarchy::parse("((0,1),(2,3),(4,5))").unwrap(),
            super_cluster_separation: 10.0,
            within_spread: 0.05,
            examples_per_concept: examples,
        }
    }

    fn two_blob_data() -> Dataset {
        let spec = BlobSpec {
            concept_count: 2,
            dims: 4,
            planted_hierarchy: Hierarchy::parse("(0,1)").unwrap(),
            super_cluster_separation: 10.0,
            within_spread: 0.05,
            examples_per_concept: 40,
        };
        make_blobs(&spec, 7).unwrap()
    }

    #[test]
    fn node_targets_flat_tree_is_one_hot() {
        let h = Hierarchy::parse("(0,1,2,3,4,5,6,7,8,9)").unwrap();
        let t = node_targets(&h, 3).unwrap();
        let mut expected = vec![0.0; 10];
        expected[3] = 1.0;
        assert_eq!(t, expected);
    }

    #[test]
    fn node_targets_two_level_path() {
        let h = Hierarchy::parse("((0,1),(2,3))").unwrap();
        // DFS order: (0,1), 0, 1, (2,3), 2, 3
        assert_eq!(node_targets(&h, 0).unwrap(), vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(node_targets(&h, 3).unwrap(), vec![0.0, 0.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn node_targets_ones_equal_leaf_depth() {
        let h = Hierarchy::parse("((0,(1,2)),3)").unwrap();
        for (concept, depth) in [(0usize, 2usize), (1, 3), (2, 3), (3, 1)] {
            let ones = node_targets(&h, concept)
                .unwrap()
                .iter()
                .filter(|&&v| v == 1.0)
                .count();
            assert_eq!(ones, depth, "concept {concept}");
        }
    }

    #[test]
    fn node_targets_unknown_concept_rejected() {
        let h = Hierarchy::parse("(0,1)").unwrap();
        assert!(matches!(node_targets(&h, 5), Err(Error::Label(_))));
    }

    #[test]
    fn cumulative_schedule_is_nested_and_per_level() {
        let h = Hierarchy::parse("((0,(1,2)),3)").unwrap();
        let s = PhaseSchedule::cumulative(&h, 5);
        s.validate().unwrap();
        assert_eq!(s.phases.len(), 3);
        assert_eq!(s.phases[0].active.len(), 2); // (0,(1,2)) and 3
        assert_eq!(s.phases[2].active.len(), 6); // every non-root node
    }

    #[test]
    fn flat_training_solves_separable_blobs() {
        let data = two_blob_data();
        let config = FitConfig {
            hidden: vec![16],
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs_per_phase: 50,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (net, report) = train_flat(&data, &config).unwrap();
        assert_eq!(report.mode, "flat");
        assert!(report.phase_boundaries.is_empty());
        let acc = evaluate(&net, None, &data).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let data = two_blob_data();
        let config = FitConfig {
            hidden: vec![8],
            train: TrainConfig {
                learning_rate: 0.0,
                batch_size: 80,
                max_epochs_per_phase: 3,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (_, report) = train_flat(&data, &config).unwrap();
        let first = report.loss_trace.first().unwrap().1;
        for &(_, l) in &report.loss_trace {
            // batch order varies per epoch, so summation order may
            // perturb the last few bits
            assert!((l - first).abs() < 1e-9 * first.abs());
        }
    }

    #[test]
    fn guided_training_recovers_planted_concepts() {
        let spec = pair_spec(40);
        let data = make_blobs(&spec, 3).unwrap();
        let config = FitConfig {
            hidden: vec![32, 16],
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs_per_phase: 60,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (net, report) = train_guided(&data, &spec.planted_hierarchy, &config).unwrap();
        assert_eq!(report.mode, "guided");
        // phase count = tree depth
        assert_eq!(report.phase_boundaries.len() + 1, 2);
        let acc = evaluate(&net, Some(&spec.planted_hierarchy), &data).unwrap();
        assert_eq!(acc, 1.0, "trace tail {:?}", &report.loss_trace.iter().rev().take(3).collect::<Vec<_>>());
    }

    #[test]
    fn guided_flat_hierarchy_is_single_phase() {
        let data = two_blob_data();
        let h = Hierarchy::parse("(0,1)").unwrap();
        let config = FitConfig {
            hidden: vec![16],
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs_per_phase: 50,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (net, report) = train_guided(&data, &h, &config).unwrap();
        assert!(report.phase_boundaries.is_empty());
        let acc = evaluate(&net, Some(&h), &data).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn guided_rejects_mismatched_hierarchy() {
        let data = two_blob_data();
        let h = Hierarchy::parse("(0,1,2)").unwrap();
        let config = FitConfig::default();
        assert!(matches!(
            train_guided(&data, &h, &config),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn reports_are_bitwise_reproducible() {
        let data = two_blob_data();
        let config = FitConfig {
            hidden: vec![8],
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs_per_phase: 5,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (_, a) = train_flat(&data, &config).unwrap();
        let (_, b) = train_flat(&data, &config).unwrap();
        assert_eq!(a, b);
        let h = Hierarchy::parse("(0,1)").unwrap();
        let (_, c) = train_guided(&data, &h, &config).unwrap();
        let (_, d) = train_guided(&data, &h, &config).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn per_phase_loss_decreases_on_planted_data() {
        let spec = pair_spec(40);
        let data = make_blobs(&spec, 5).unwrap();
        let config = FitConfig {
            hidden: vec![32, 16],
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs_per_phase: 40,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (_, report) = train_guided(&data, &spec.planted_hierarchy, &config).unwrap();
        let mut starts = vec![0usize];
        starts.extend(&report.phase_boundaries);
        let mut ends: Vec<usize> = report.phase_boundaries.clone();
        ends.push(report.loss_trace.len());
        let mean = |r: std::ops::Range<usize>| {
            let slice = &report.active_loss_trace[r];
            slice.iter().sum::<f64>() / slice.len() as f64
        };
        for (s, e) in starts.iter().zip(&ends) {
            let w = 5.min((e - s) / 2).max(1);
            assert!(
                mean(e - w..*e) < mean(*s..s + w),
                "phase starting at step {s} did not make progress"
            );
        }
    }

    #[test]
    fn greedy_and_product_routing_agree_on_confident_net() {
        let spec = pair_spec(30);
        let data = make_blobs(&spec, 9).unwrap();
        let config = FitConfig {
            hidden: vec![32, 16],
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs_per_phase: 60,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (net, _) = train_guided(&data, &spec.planted_hierarchy, &config).unwrap();
        let product = predict_guided(&net, &spec.planted_hierarchy, &data.features, false).unwrap();
        let greedy = predict_guided(&net, &spec.planted_hierarchy, &data.features, true).unwrap();
        assert_eq!(product, greedy);
    }

    #[test]
    fn evaluate_uses_split_labels() {
        let data = two_blob_data();
        assert_eq!(data.split, Split::Train);
        // a network predicting class 1 everywhere scores the class-1 rate
        let config = FitConfig {
            hidden: vec![8],
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                max_epochs_per_phase: 1,
                ..TrainConfig::default()
            },
            ..FitConfig::default()
        };
        let (net, _) = train_flat(&data, &config).unwrap();
        let acc = evaluate(&net, None, &data).unwrap();
        assert!((0.0..=1.0).contains(&acc));
    }
}
