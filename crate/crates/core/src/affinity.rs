//! Bottom-up hierarchy derivation from pairwise transfer affinity.
//!
//! The affinity of an ordered concept pair (source, target) is measured
//! by training an encoder+head on the source one-vs-rest task, freezing
//! the encoder, fine-tuning a fresh head on the target one-vs-rest task
//! for a bounded number of steps, and reading off the target validation
//! accuracy. Closely related concepts transfer well, so greedy
//! agglomeration of the symmetrized matrix reconstructs the concept
//! hierarchy, and the per-node classifiers of the final tree can be
//! warm-started from the encoders trained on the way.

use std::collections::BTreeSet;

use crate::data::Dataset;
use crate::hierarchy::Hierarchy;
use crate::nn::{
    backward_and_step, gradients, init_network_with, Activation, DenseNetwork, Gradients,
    HeadSpec, HeadTargets, TrainConfig,
};
use crate::tensor::Tensor2;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Average,
    Single,
    Complete,
}

#[derive(Debug, Clone)]
pub struct AffinityConfig {
    /// Hidden layer widths of the shared encoder. The last width is a
    /// deliberate bottleneck: a frozen encoder trained on one concept
    /// only retains features relevant to that concept's neighborhood,
    /// which is what makes the affinity signal informative.
    pub encoder_sizes: Vec<usize>,
    /// Source-task training epochs (E).
    pub source_epochs: usize,
    /// Head-only fine-tuning steps on the target task (F).
    pub finetune_steps: usize,
    /// Fraction of the pool held out for affinity validation.
    pub validation_fraction: f64,
    pub linkage: Linkage,
    /// Merges whose affinity is within this tolerance of a child's
    /// merge affinity are flattened into one multi-way node.
    pub tie_tolerance: f64,
    /// L2 shrink applied to encoder weights during source training.
    /// Decaying features the source task does not need keeps unrelated
    /// concepts unseparable under the frozen encoder, which sharpens
    /// the affinity contrast.
    pub weight_decay: f64,
    /// Independently seeded source encoders per concept whose probe
    /// accuracies are averaged.
    pub replicates: usize,
    pub train: TrainConfig,
}

impl Default for AffinityConfig {
    fn default() -> Self {
        AffinityConfig {
            encoder_sizes: vec![16, 4],
            source_epochs: 100,
            finetune_steps: 2000,
            validation_fraction: 0.2,
            linkage: Linkage::Average,
            tie_tolerance: 0.05,
            weight_decay: 0.03,
            replicates: 3,
            train: TrainConfig {
                learning_rate: 0.01,
                batch_size: 16,
                ..TrainConfig::default()
            },
        }
    }
}

/// Symmetric concept-by-concept transfer-affinity scores.
#[derive(Debug, Clone)]
pub struct AffinityMatrix {
    pub scores: Tensor2,
}

impl AffinityMatrix {
    pub fn size(&self) -> usize {
        self.scores.rows()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scores.rows() != self.scores.cols() {
            return Err(Error::Shape("affinity matrix not square".into()));
        }
        if !self.scores.is_finite() {
            return Err(Error::Domain("non-finite affinity".into()));
        }
        for i in 0..self.size() {
            for j in 0..self.size() {
                if self.scores.get(i, j) != self.scores.get(j, i) {
                    return Err(Error::Domain(format!("asymmetry at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    /// Arithmetic-mean symmetrization; idempotent.
    pub fn symmetrized(raw: &Tensor2) -> Result<AffinityMatrix> {
        if raw.rows() != raw.cols() {
            return Err(Error::Shape("affinity matrix not square".into()));
        }
        let n = raw.rows();
        let mut scores = Tensor2::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                scores.set(i, j, 0.5 * (raw.get(i, j) + raw.get(j, i)));
            }
        }
        let m = AffinityMatrix { scores };
        m.validate()?;
        Ok(m)
    }
}

/// Deterministic train/validation split of the pool, stratified by
/// concept.
fn split_pool(data: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n = data.len();
    let n_train = n - ((n as f64) * fraction).round() as usize;
    let shuffled = data.stratified_prefix(n, seed)?;
    let train = shuffled.subset(&(0..n_train).collect::<Vec<_>>())?;
    let val = shuffled.subset(&(n_train..n).collect::<Vec<_>>())?;
    Ok((train, val))
}

fn binary_labels(data: &Dataset, positives: &BTreeSet<usize>) -> Vec<usize> {
    data.labels
        .iter()
        .map(|l| usize::from(positives.contains(l)))
        .collect()
}

/// Index order for a one-vs-rest task that alternates positives and
/// negatives, cycling the (rarer) positives. Without this the positive
/// class is outnumbered and gradient steps settle on the constant
/// "rest" predictor.
fn balanced_order(labels: &[usize]) -> Vec<usize> {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 1).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return (0..labels.len()).collect();
    }
    let mut order = Vec::with_capacity(2 * neg.len());
    for (k, &n) in neg.iter().enumerate() {
        order.push(pos[k % pos.len()]);
        order.push(n);
    }
    order
}

fn batches(order: &[usize], batch_size: usize) -> Vec<Vec<usize>> {
    order.chunks(batch_size).map(|c| c.to_vec()).collect()
}

fn sgd_step_head_only(net: &mut DenseNetwork, grads: &Gradients, lr: f64) {
    for (head, (gw, gb)) in net
        .heads
        .iter_mut()
        .zip(grads.head_weights.iter().zip(&grads.head_biases))
    {
        for (w, g) in head.weights.values_mut().iter_mut().zip(gw.values()) {
            *w -= lr * g;
        }
        for (b, g) in head.biases.iter_mut().zip(gb) {
            *b -= lr * g;
        }
    }
}

fn accuracy_binary(net: &DenseNetwork, data: &Dataset, positives: &BTreeSet<usize>) -> Result<f64> {
    let out = &net.forward(&data.features)?[0];
    let labels = binary_labels(data, positives);
    let correct = (0..data.len())
        .filter(|&i| {
            // ties resolve to class 0, so a zero head predicts "rest"
            let pred = usize::from(out.get(i, 1) > out.get(i, 0));
            pred == labels[i]
        })
        .count();
    Ok(correct as f64 / data.len().max(1) as f64)
}

fn zero_head(net: &mut DenseNetwork) {
    let head = &mut net.heads[0];
    head.weights.values_mut().iter_mut().for_each(|w| *w = 0.0);
    head.biases.iter_mut().for_each(|b| *b = 0.0);
}

/// Trains an encoder+head on the source one-vs-rest task; the returned
/// network's hidden layers are the transferable encoder.
pub fn train_source_encoder(
    source: &BTreeSet<usize>,
    train: &Dataset,
    config: &AffinityConfig,
    seed: u64,
) -> Result<DenseNetwork> {
    if source.is_empty() {
        return Err(Error::Task("empty source task".into()));
    }
    let mut sizes = vec![train.features.cols()];
    sizes.extend_from_slice(&config.encoder_sizes);
    let mut net = init_network_with(
        &sizes,
        Activation::Relu,
        &[HeadSpec::softmax("task", 2)],
        seed,
    )?;
    let labels = binary_labels(train, source);
    let batch_ids = batches(&balanced_order(&labels), config.train.batch_size);
    let shrink = 1.0 - config.train.learning_rate * config.weight_decay;
    for _ in 0..config.source_epochs {
        for ids in &batch_ids {
            let batch = train.features.select_rows(ids)?;
            let targets: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            backward_and_step(&mut net, &batch, 0, &HeadTargets::Classes(&targets), &config.train)?;
            if config.weight_decay > 0.0 {
                for layer in &mut net.layers {
                    layer.weights.values_mut().iter_mut().for_each(|w| *w *= shrink);
                    layer.biases.iter_mut().for_each(|b| *b *= shrink);
                }
            }
        }
    }
    Ok(net)
}

/// Transfer affinity of an ordered (source, target) pair: target
/// validation accuracy after head-only fine-tuning on the frozen
/// source encoder. The fresh head starts at zero, so with zero
/// fine-tuning steps the score is exactly the majority-class rate.
pub fn transfer_affinity(
    source: &BTreeSet<usize>,
    target: &BTreeSet<usize>,
    data: &Dataset,
    config: &AffinityConfig,
) -> Result<f64> {
    if target.is_empty() {
        return Err(Error::Task("empty target task".into()));
    }
    let (train, val) = split_pool(data, config.validation_fraction, config.train.seed)?;
    let encoder = train_source_encoder(source, &train, config, config.train.seed)?;
    transfer_affinity_from_encoder(&encoder, target, &train, &val, config)
}

/// Same as `transfer_affinity` but reusing an already-trained source
/// encoder (used by `affinity_matrix` to train each source only once).
pub fn transfer_affinity_from_encoder(
    encoder: &DenseNetwork,
    target: &BTreeSet<usize>,
    train: &Dataset,
    val: &Dataset,
    config: &AffinityConfig,
) -> Result<f64> {
    let mut probe = encoder.clone();
    zero_head(&mut probe);
    let labels = binary_labels(train, target);
    let batch_ids = batches(&balanced_order(&labels), config.train.batch_size);
    let mut step = 0usize;
    'outer: loop {
        for ids in &batch_ids {
            if step >= config.finetune_steps {
                break 'outer;
            }
            let batch = train.features.select_rows(ids)?;
            let targets: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
            let (_, grads) = gradients(&probe, &batch, 0, &HeadTargets::Classes(&targets))?;
            sgd_step_head_only(&mut probe, &grads, config.train.learning_rate);
            step += 1;
        }
        if batch_ids.is_empty() {
            break;
        }
    }
    accuracy_binary(&probe, val, target)
}

/// All ordered concept pairs, symmetrized by arithmetic mean. Also
/// returns the per-concept source encoders for hierarchy refinement.
pub fn affinity_matrix(
    concepts: &[usize],
    data: &Dataset,
    config: &AffinityConfig,
) -> Result<(AffinityMatrix, Vec<DenseNetwork>)> {
    if concepts.len() < 2 {
        return Err(Error::Task("need >= 2 concepts".into()));
    }
    let (train, val) = split_pool(data, config.validation_fraction, config.train.seed)?;
    // several independently seeded encoders per source; scores are
    // averaged over them so a single unlucky initialization cannot pin
    // a whole row of the matrix
    let replicate_encoders: Vec<Vec<DenseNetwork>> = concepts
        .iter()
        .map(|&c| {
            (0..config.replicates.max(1))
                .map(|r| {
                    train_source_encoder(
                        &BTreeSet::from([c]),
                        &train,
                        config,
                        config
                            .train
                            .seed
                            .wrapping_add(101 * c as u64)
                            .wrapping_add(r as u64),
                    )
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let n = concepts.len();
    let mut raw = Tensor2::zeros(n, n);
    for (i, encoders) in replicate_encoders.iter().enumerate() {
        for (j, &target) in concepts.iter().enumerate() {
            let mut total = 0.0;
            for encoder in encoders {
                total += transfer_affinity_from_encoder(
                    encoder,
                    &BTreeSet::from([target]),
                    &train,
                    &val,
                    config,
                )?;
            }
            raw.set(i, j, total / encoders.len() as f64);
        }
    }
    let firsts = replicate_encoders
        .into_iter()
        .map(|mut v| v.swap_remove(0))
        .collect();
    Ok((AffinityMatrix::symmetrized(&raw)?, firsts))
}

fn linkage_affinity(
    members_a: &BTreeSet<usize>,
    members_b: &BTreeSet<usize>,
    index_of: &dyn Fn(usize) -> usize,
    scores: &Tensor2,
    linkage: Linkage,
) -> f64 {
    let pairs = members_a.iter().flat_map(|&a| {
        members_b
            .iter()
            .map(move |&b| scores.get(index_of(a), index_of(b)))
    });
    match linkage {
        Linkage::Average => {
            let (sum, count) = pairs.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
            sum / count as f64
        }
        Linkage::Single => pairs.fold(f64::NEG_INFINITY, f64::max),
        Linkage::Complete => pairs.fold(f64::INFINITY, f64::min),
    }
}

/// Greedy agglomeration: repeatedly fuse the cluster pair with maximal
/// affinity (ties to the smallest concept ids) until one root remains.
/// A merge within `tie_tolerance` of a child's own merge affinity
/// absorbs that child's children, so tied levels come out as one
/// multi-way node instead of an arbitrary binary cascade.
pub fn derive_hierarchy_bottomup(
    affinities: &AffinityMatrix,
    concepts: &[usize],
    linkage: Linkage,
    tie_tolerance: f64,
) -> Result<Hierarchy> {
    affinities.validate()?;
    if concepts.len() != affinities.size() {
        return Err(Error::Shape(format!(
            "{} concepts for a {}x{} matrix",
            concepts.len(),
            affinities.size(),
            affinities.size()
        )));
    }
    if concepts.is_empty() {
        return Err(Error::Domain("empty concept set".into()));
    }
    if concepts.len() == 1 {
        return Ok(Hierarchy::Leaf(concepts[0]));
    }
    let index_of = |c: usize| concepts.iter().position(|&x| x == c).unwrap();

    struct Cluster {
        node: Hierarchy,
        members: BTreeSet<usize>,
        merge_affinity: Option<f64>,
    }
    let mut clusters: Vec<Cluster> = concepts
        .iter()
        .map(|&c| Cluster {
            node: Hierarchy::Leaf(c),
            members: BTreeSet::from([c]),
            merge_affinity: None,
        })
        .collect();

    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let a = linkage_affinity(
                    &clusters[i].members,
                    &clusters[j].members,
                    &index_of,
                    &affinities.scores,
                    linkage,
                );
                if best.map_or(true, |(b, _, _)| a > b) {
                    best = Some((a, i, j));
                }
            }
        }
        let (affinity, i, j) = best.unwrap();
        let right = clusters.remove(j);
        let left = clusters.remove(i);
        let mut children = Vec::new();
        for side in [left, right] {
            let tied = side
                .merge_affinity
                .is_some_and(|m| (m - affinity).abs() <= tie_tolerance);
            if tied {
                children.extend(side.node.children().to_vec());
            } else {
                children.push(side.node);
            }
        }
        let members: BTreeSet<usize> = children.iter().flat_map(|c| c.leaves()).collect();
        clusters.push(Cluster {
            node: Hierarchy::internal(children)?,
            members,
            merge_affinity: Some(affinity),
        });
        clusters.sort_by_key(|c| *c.members.iter().next().unwrap());
    }
    Ok(clusters.pop().unwrap().node)
}

/// A per-internal-node classifier of the refined hierarchy.
#[derive(Debug)]
pub struct NodeModel {
    /// Child-index path from the root identifying the node.
    pub path: Vec<usize>,
    pub network: DenseNetwork,
    /// Held-out accuracy of the node's child classifier.
    pub accuracy: f64,
}

/// Assigns each internal node an encoder plus a fresh softmax head over
/// its children, trained to route the node's examples to the child
/// whose leaf-set contains their concept. Encoders are warm-started
/// from the affinity-phase encoder of the node's dominant (largest)
/// child group when available.
pub fn refine_hierarchy(
    h: &Hierarchy,
    data: &Dataset,
    config: &AffinityConfig,
    concept_encoders: &[(usize, DenseNetwork)],
) -> Result<Vec<NodeModel>> {
    let concepts: BTreeSet<usize> = h.leaves().into_iter().collect();
    if !data.labels.iter().all(|l| concepts.contains(l)) {
        return Err(Error::Consistency(
            "dataset has labels outside the hierarchy leaves".into(),
        ));
    }
    let (train, val) = split_pool(data, config.validation_fraction, config.train.seed)?;
    let mut models = Vec::new();
    refine_node(h, &mut Vec::new(), &train, &val, config, concept_encoders, &mut models)?;
    Ok(models)
}

fn refine_node(
    node: &Hierarchy,
    path: &mut Vec<usize>,
    train: &Dataset,
    val: &Dataset,
    config: &AffinityConfig,
    concept_encoders: &[(usize, DenseNetwork)],
    models: &mut Vec<NodeModel>,
) -> Result<()> {
    if node.is_leaf() {
        return Ok(());
    }
    let children = node.children();
    let child_leaves: Vec<BTreeSet<usize>> = children
        .iter()
        .map(|c| c.leaves().into_iter().collect())
        .collect();
    // dominant child group: most leaves, ties to the smallest leaf id
    let dominant = child_leaves
        .iter()
        .enumerate()
        .max_by_key(|(_, l)| (l.len(), std::cmp::Reverse(*l.iter().next().unwrap())))
        .map(|(i, _)| i)
        .unwrap();
    let warm_concept = *child_leaves[dominant].iter().next().unwrap();

    let class_of = |label: usize| child_leaves.iter().position(|l| l.contains(&label));
    let node_train_ids: Vec<usize> = (0..train.len())
        .filter(|&i| class_of(train.labels[i]).is_some())
        .collect();
    let node_val_ids: Vec<usize> = (0..val.len())
        .filter(|&i| class_of(val.labels[i]).is_some())
        .collect();
    if node_train_ids.is_empty() || node_val_ids.is_empty() {
        return Err(Error::Task(format!(
            "no examples for node at path {path:?}"
        )));
    }

    let mut net = match concept_encoders.iter().find(|(c, _)| *c == warm_concept) {
        Some((_, encoder)) => {
            let mut sizes = vec![train.features.cols()];
            sizes.extend(encoder.layers.iter().map(|l| l.weights.cols()));
            let mut net = init_network_with(
                &sizes,
                Activation::Relu,
                &[HeadSpec::softmax("children", children.len())],
                config.train.seed,
            )?;
            net.layers = encoder.layers.clone();
            net
        }
        None => {
            let mut sizes = vec![train.features.cols()];
            sizes.extend_from_slice(&config.encoder_sizes);
            init_network_with(
                &sizes,
                Activation::Relu,
                &[HeadSpec::softmax("children", children.len())],
                config.train.seed,
            )?
        }
    };

    let targets_all: Vec<usize> = node_train_ids
        .iter()
        .map(|&i| class_of(train.labels[i]).unwrap())
        .collect();
    for _ in 0..config.source_epochs {
        for (chunk_ids, chunk_targets) in node_train_ids
            .chunks(config.train.batch_size)
            .zip(targets_all.chunks(config.train.batch_size))
        {
            let batch = train.features.select_rows(chunk_ids)?;
            backward_and_step(
                &mut net,
                &batch,
                0,
                &HeadTargets::Classes(chunk_targets),
                &config.train,
            )?;
        }
    }

    let val_batch = val.features.select_rows(&node_val_ids)?;
    let out = &net.forward(&val_batch)?[0];
    let correct = node_val_ids
        .iter()
        .enumerate()
        .filter(|&(row, &i)| {
            let pred = (0..out.cols())
                .max_by(|&a, &b| out.get(row, a).partial_cmp(&out.get(row, b)).unwrap())
                .unwrap();
            pred == class_of(val.labels[i]).unwrap()
        })
        .count();
    models.push(NodeModel {
        path: path.clone(),
        network: net,
        accuracy: correct as f64 / node_val_ids.len() as f64,
    });

    for (i, child) in children.iter().enumerate() {
        path.push(i);
        refine_node(child, path, train, val, config, concept_encoders, models)?;
        path.pop();
    }
    Ok(())
}
