//! Top-down hierarchy derivation: recursively split a concept set by
//! agglomerative clustering of concept prototypes, scoring each
//! candidate cut by cohesion (nearest-centroid purity) and dispersion
//! (inter-group separation relative to within-group spread).

use std::collections::BTreeSet;

use serde::Serialize;

use crate::data::{class_prototype, euclidean, Dataset, Metric};
use crate::hierarchy::Hierarchy;
use crate::{Error, Result};

/// Returned instead of infinity when a grouping has zero within-group
/// spread.
pub const DISPERSION_SENTINEL: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct ClusterConfig {
    /// Largest number of blocks tried per split.
    pub k_max: usize,
    /// Weight of the saturating dispersion term in the score.
    pub lambda: f64,
    /// Metric for the prototype linkage distances.
    pub metric: Metric,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            k_max: 4,
            lambda: 0.5,
            metric: Metric::NegEuclidean,
        }
    }
}

/// One scored candidate partition of a concept set.
#[derive(Debug, Clone, Serialize)]
pub struct ClusteringSolution {
    pub grouping: Vec<BTreeSet<usize>>,
    pub cohesion: f64,
    pub dispersion: f64,
    pub score: f64,
}

fn group_centroids(grouping: &[BTreeSet<usize>], data: &Dataset) -> Result<Vec<Vec<f64>>> {
    grouping
        .iter()
        .map(|group| {
            if group.is_empty() {
                return Err(Error::Grouping("empty group".into()));
            }
            let indices: Vec<usize> = group
                .iter()
                .flat_map(|&c| data.indices_of(c))
                .collect();
            if indices.is_empty() {
                return Err(Error::Grouping(format!(
                    "group {group:?} has no examples"
                )));
            }
            let mut centroid = vec![0.0; data.features.cols()];
            for &i in &indices {
                for (m, v) in centroid.iter_mut().zip(data.features.row(i)) {
                    *m += v;
                }
            }
            let n = indices.len() as f64;
            centroid.iter_mut().for_each(|m| *m /= n);
            Ok(centroid)
        })
        .collect()
}

fn group_of_concept(grouping: &[BTreeSet<usize>], concept: usize) -> Option<usize> {
    grouping.iter().position(|g| g.contains(&concept))
}

/// Fraction of instances whose nearest group centroid is the group
/// containing the instance's concept.
pub fn cohesion(grouping: &[BTreeSet<usize>], data: &Dataset) -> Result<f64> {
    if grouping.len() < 2 {
        return Err(Error::Grouping("need k >= 2 groups".into()));
    }
    let centroids = group_centroids(grouping, data)?;
    let mut correct = 0usize;
    let mut total = 0usize;
    for i in 0..data.len() {
        let Some(own) = group_of_concept(grouping, data.labels[i]) else {
            continue; // concept outside the grouping under consideration
        };
        let row = data.features.row(i);
        let nearest = centroids
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                euclidean(row, a).partial_cmp(&euclidean(row, b)).unwrap()
            })
            .map(|(g, _)| g)
            .unwrap();
        total += 1;
        if nearest == own {
            correct += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// Minimum distance between group centroids over the maximum average
/// within-group instance-to-centroid distance. Scale-free; zero spread
/// returns `DISPERSION_SENTINEL`.
pub fn dispersion(grouping: &[BTreeSet<usize>], data: &Dataset) -> Result<f64> {
    if grouping.len() < 2 {
        return Err(Error::Grouping("need k >= 2 groups".into()));
    }
    let centroids = group_centroids(grouping, data)?;
    let mut min_between = f64::INFINITY;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            min_between = min_between.min(euclidean(&centroids[i], &centroids[j]));
        }
    }
    let mut max_within: f64 = 0.0;
    for (g, group) in grouping.iter().enumerate() {
        let indices: Vec<usize> = group.iter().flat_map(|&c| data.indices_of(c)).collect();
        let avg = indices
            .iter()
            .map(|&i| euclidean(data.features.row(i), &centroids[g]))
            .sum::<f64>()
            / indices.len() as f64;
        max_within = max_within.max(avg);
    }
    if max_within == 0.0 {
        return Ok(if min_between == 0.0 {
            0.0
        } else {
            DISPERSION_SENTINEL
        });
    }
    Ok(min_between / max_within)
}

pub fn score(cohesion: f64, dispersion: f64, lambda: f64) -> f64 {
    cohesion + lambda * (dispersion / (1.0 + dispersion))
}

fn prototype_distance(a: &[f64], b: &[f64], metric: Metric) -> f64 {
    match metric {
        Metric::NegEuclidean => euclidean(a, b),
        Metric::Cosine => {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            1.0 - dot / (na * nb).max(f64::MIN_POSITIVE)
        }
    }
}

/// Average-linkage agglomerative clustering of the concept prototypes.
/// Returns the partition at every cluster count from |concepts| down to
/// 1, index 0 being the all-singletons state. Ties merge the
/// lexicographically smallest cluster pair.
fn agglomerate(
    concepts: &[usize],
    prototypes: &[Vec<f64>],
    metric: Metric,
) -> Vec<Vec<BTreeSet<usize>>> {
    let mut clusters: Vec<BTreeSet<usize>> =
        concepts.iter().map(|&c| BTreeSet::from([c])).collect();
    let mut states = vec![clusters.clone()];
    let proto_of = |c: usize| &prototypes[concepts.iter().position(|&x| x == c).unwrap()];
    while clusters.len() > 1 {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in i + 1..clusters.len() {
                let mut sum = 0.0;
                for &a in &clusters[i] {
                    for &b in &clusters[j] {
                        sum += prototype_distance(proto_of(a), proto_of(b), metric);
                    }
                }
                let avg = sum / (clusters[i].len() * clusters[j].len()) as f64;
                if best.map_or(true, |(d, _, _)| avg < d) {
                    best = Some((avg, i, j));
                }
            }
        }
        let (_, i, j) = best.unwrap();
        let merged: BTreeSet<usize> = clusters[i].union(&clusters[j]).copied().collect();
        clusters.remove(j);
        clusters.remove(i);
        clusters.push(merged);
        clusters.sort_by_key(|c| *c.iter().next().unwrap());
        states.push(clusters.clone());
    }
    states
}

/// One scored candidate per block count k in 2..=min(k_max, n), each
/// obtained by cutting the agglomerative merge sequence at k blocks.
pub fn candidate_groupings(
    concepts: &BTreeSet<usize>,
    data: &Dataset,
    config: &ClusterConfig,
) -> Result<Vec<ClusteringSolution>> {
    let n = concepts.len();
    if n < 2 {
        return Err(Error::Grouping("need >= 2 concepts".into()));
    }
    let ids: Vec<usize> = concepts.iter().copied().collect();
    let prototypes: Vec<Vec<f64>> = ids
        .iter()
        .map(|&c| class_prototype(data, c))
        .collect::<Result<_>>()?;
    let states = agglomerate(&ids, &prototypes, config.metric);
    let mut out = Vec::new();
    for k in 2..=config.k_max.min(n) {
        let grouping = states[n - k].clone();
        debug_assert_eq!(grouping.len(), k);
        let coh = cohesion(&grouping, data)?;
        let disp = dispersion(&grouping, data)?;
        out.push(ClusteringSolution {
            grouping,
            cohesion: coh,
            dispersion: disp,
            score: score(coh, disp, config.lambda),
        });
    }
    Ok(out)
}

/// Recursive top-down derivation: pick the best-scoring candidate split
/// (ties toward fewer blocks), recurse into each multi-concept block,
/// stop at single concepts.
pub fn derive_hierarchy_topdown(
    data: &Dataset,
    concepts: &BTreeSet<usize>,
    config: &ClusterConfig,
) -> Result<Hierarchy> {
    if concepts.is_empty() {
        return Err(Error::Grouping("empty concept set".into()));
    }
    if concepts.len() == 1 {
        return Ok(Hierarchy::Leaf(*concepts.iter().next().unwrap()));
    }
    let candidates = candidate_groupings(concepts, data, config)?;
    // strictly-better replacement keeps the smallest k on ties
    let best = candidates
        .iter()
        .fold(None::<&ClusteringSolution>, |acc, c| match acc {
            Some(prev) if prev.score >= c.score => Some(prev),
            _ => Some(c),
        })
        .unwrap();
    let children = best
        .grouping
        .iter()
        .map(|block| {
            if block.len() == 1 {
                Ok(Hierarchy::Leaf(*block.iter().next().unwrap()))
            } else {
                derive_hierarchy_topdown(data, block, config)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Hierarchy::internal(children)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, BlobSpec, Split};
    use crate::tensor::Tensor2;

    fn planted_spec() -> BlobSpec {
        BlobSpec {
            concept_count: 6,
            dims: 8,
            planted_hierarchy: Hierarchy::parse("((0,1,2),(3,4,5))").unwrap(),
            super_cluster_separation: 10.0,
            within_spread: 0.05,
            examples_per_concept: 30,
        }
    }

    fn groups(sets: &[&[usize]]) -> Vec<BTreeSet<usize>> {
        sets.iter().map(|s| s.iter().copied().collect()).collect()
    }

    #[test]
    fn cohesion_perfect_on_separated_blobs() {
        let data = make_blobs(&planted_spec(), 0).unwrap();
        let g = groups(&[&[0, 1, 2], &[3, 4, 5]]);
        assert_eq!(cohesion(&g, &data).unwrap(), 1.0);
    }

    #[test]
    fn cohesion_below_one_when_splitting_a_tight_blob() {
        // two concepts drawn from nearly the same place, grouped apart
        let spec = BlobSpec {
            concept_count: 2,
            dims: 2,
            planted_hierarchy: Hierarchy::parse("(0,1)").unwrap(),
            super_cluster_separation: 0.05,
            within_spread: 5.0,
            examples_per_concept: 100,
        };
        let data = make_blobs(&spec, 1).unwrap();
        let g = groups(&[&[0], &[1]]);
        assert!(cohesion(&g, &data).unwrap() < 1.0);
    }

    #[test]
    fn cohesion_requires_k_at_least_two() {
        let data = make_blobs(&planted_spec(), 0).unwrap();
        let g = groups(&[&[0, 1, 2, 3, 4, 5]]);
        assert!(matches!(cohesion(&g, &data), Err(Error::Grouping(_))));
    }

    #[test]
    fn dispersion_large_for_separated_blobs() {
        let spec = BlobSpec {
            concept_count: 2,
            dims: 2,
            planted_hierarchy: Hierarchy::parse("(0,1)").unwrap(),
            super_cluster_separation: 10.0,
            within_spread: 0.1,
            examples_per_concept: 50,
        };
        let data = make_blobs(&spec, 0).unwrap();
        let g = groups(&[&[0], &[1]]);
        assert!(dispersion(&g, &data).unwrap() > 10.0);
    }

    #[test]
    fn dispersion_zero_for_coincident_centroids() {
        // concepts 0 and 1 share identical rows
        let features = Tensor2::from_vec(4, 2, vec![0.1, 0.2, 0.9, 0.8, 0.1, 0.2, 0.9, 0.8]).unwrap();
        let data = Dataset {
            features,
            labels: vec![0, 0, 1, 1],
            concept_names: vec!["a".into(), "b".into()],
            split: Split::Train,
        };
        let g = groups(&[&[0], &[1]]);
        assert_eq!(dispersion(&g, &data).unwrap(), 0.0);
    }

    #[test]
    fn dispersion_sentinel_for_zero_spread() {
        let features = Tensor2::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let data = Dataset {
            features,
            labels: vec![0, 1],
            concept_names: vec!["a".into(), "b".into()],
            split: Split::Train,
        };
        let g = groups(&[&[0], &[1]]);
        assert_eq!(dispersion(&g, &data).unwrap(), DISPERSION_SENTINEL);
    }

    #[test]
    fn scores_scale_invariant() {
        let data = make_blobs(&planted_spec(), 3).unwrap();
        let g = groups(&[&[0, 1, 2], &[3, 4, 5]]);
        let base_coh = cohesion(&g, &data).unwrap();
        let base_disp = dispersion(&g, &data).unwrap();
        for scale in [0.25, 0.5, 0.9] {
            let mut scaled = data.clone();
            scaled
                .features
                .values_mut()
                .iter_mut()
                .for_each(|v| *v *= scale);
            assert!((cohesion(&g, &scaled).unwrap() - base_coh).abs() < 1e-12);
            assert!((dispersion(&g, &scaled).unwrap() - base_disp).abs() < 1e-9);
        }
    }

    #[test]
    fn two_concepts_give_single_candidate() {
        let spec = BlobSpec {
            concept_count: 2,
            dims: 2,
            planted_hierarchy: Hierarchy::parse("(0,1)").unwrap(),
            super_cluster_separation: 10.0,
            within_spread: 0.1,
            examples_per_concept: 20,
        };
        let data = make_blobs(&spec, 0).unwrap();
        let cands =
            candidate_groupings(&[0, 1].into_iter().collect(), &data, &ClusterConfig::default())
                .unwrap();
        assert_eq!(cands.len(), 1);
        assert_eq!(cands[0].grouping.len(), 2);
    }

    #[test]
    fn candidate_count_bounded_by_k_max() {
        let data = make_blobs(&planted_spec(), 0).unwrap();
        let config = ClusterConfig::default();
        let cands =
            candidate_groupings(&(0..6).collect(), &data, &config).unwrap();
        assert!(cands.len() <= config.k_max - 1);
    }

    #[test]
    fn k2_cut_recovers_planted_super_clusters() {
        let data = make_blobs(&planted_spec(), 4).unwrap();
        let cands =
            candidate_groupings(&(0..6).collect(), &data, &ClusterConfig::default()).unwrap();
        let k2 = &cands[0];
        assert_eq!(
            k2.grouping,
            groups(&[&[0, 1, 2], &[3, 4, 5]]),
        );
    }

    #[test]
    fn topdown_single_concept_is_leaf() {
        let data = make_blobs(&planted_spec(), 0).unwrap();
        let h = derive_hierarchy_topdown(&data, &BTreeSet::from([3]), &ClusterConfig::default())
            .unwrap();
        assert_eq!(h, Hierarchy::Leaf(3));
    }

    #[test]
    fn topdown_recovers_planted_hierarchy() {
        let spec = planted_spec();
        let mut hits = 0;
        for seed in 0..10 {
            let data = make_blobs(&spec, seed).unwrap();
            let h =
                derive_hierarchy_topdown(&data, &(0..6).collect(), &ClusterConfig::default())
                    .unwrap();
            h.validate(&(0..6).collect()).unwrap();
            if h == spec.planted_hierarchy {
                hits += 1;
            }
        }
        assert!(hits >= 9, "planted tree recovered in only {hits}/10 seeds");
    }
}
