//! Rooted concept hierarchies: every internal node has at least two
//! children and the leaves are exactly the concept ids, each once.
//!
//! Also houses the search-space machinery: exhaustive enumeration for
//! small concept sets and two exact counters — one consistent with
//! enumeration and one evaluating the published recurrence verbatim
//! (the two disagree from n=4 on; see `count_paper_recurrence`).

use std::collections::BTreeSet;
use std::fmt;

use num_bigint::BigUint;

use crate::{Error, Result};

/// Enumeration is capped here; the space grows super-exponentially
/// (39,208 hierarchies already at n=7).
pub const ENUMERATION_CAP: usize = 7;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hierarchy {
    Leaf(usize),
    Internal(Vec<Hierarchy>),
}

impl Hierarchy {
    pub fn leaf(concept: usize) -> Self {
        Hierarchy::Leaf(concept)
    }

    /// Builds an internal node; children are canonicalized by ascending
    /// minimum leaf id so equality is structural.
    pub fn internal(mut children: Vec<Hierarchy>) -> Result<Self> {
        if children.len() < 2 {
            return Err(Error::Domain(format!(
                "internal node needs >=2 children, got {}",
                children.len()
            )));
        }
        children.sort_by_key(|c| c.min_leaf());
        Ok(Hierarchy::Internal(children))
    }

    pub fn is_leaf(&self) -> bool {
        matches!(self, Hierarchy::Leaf(_))
    }

    pub fn children(&self) -> &[Hierarchy] {
        match self {
            Hierarchy::Leaf(_) => &[],
            Hierarchy::Internal(c) => c,
        }
    }

    fn min_leaf(&self) -> usize {
        match self {
            Hierarchy::Leaf(id) => *id,
            Hierarchy::Internal(c) => c.iter().map(|n| n.min_leaf()).min().unwrap(),
        }
    }

    /// Leaf concept ids in canonical (left-to-right) order.
    pub fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves(&self, out: &mut Vec<usize>) {
        match self {
            Hierarchy::Leaf(id) => out.push(*id),
            Hierarchy::Internal(c) => c.iter().for_each(|n| n.collect_leaves(out)),
        }
    }

    /// Depth of the deepest leaf; a bare leaf has depth 0.
    pub fn depth(&self) -> usize {
        match self {
            Hierarchy::Leaf(_) => 0,
            Hierarchy::Internal(c) => 1 + c.iter().map(|n| n.depth()).max().unwrap(),
        }
    }

    /// All nodes except an internal root: the leaves plus the internal
    /// non-root nodes. Sizes the multilabel output head.
    pub fn node_count(&self) -> usize {
        match self {
            Hierarchy::Leaf(_) => 1,
            Hierarchy::Internal(c) => c.iter().map(|n| n.total_nodes()).sum(),
        }
    }

    fn total_nodes(&self) -> usize {
        match self {
            Hierarchy::Leaf(_) => 1,
            Hierarchy::Internal(c) => 1 + c.iter().map(|n| n.total_nodes()).sum::<usize>(),
        }
    }

    /// Checks the structural invariants against an expected concept set.
    pub fn validate(&self, concepts: &BTreeSet<usize>) -> Result<()> {
        fn walk(node: &Hierarchy, seen: &mut Vec<usize>) -> Result<()> {
            match node {
                Hierarchy::Leaf(id) => seen.push(*id),
                Hierarchy::Internal(c) => {
                    if c.len() < 2 {
                        return Err(Error::Domain("internal node with <2 children".into()));
                    }
                    for child in c {
                        walk(child, seen)?;
                    }
                }
            }
            Ok(())
        }
        let mut seen = Vec::new();
        walk(self, &mut seen)?;
        let seen_set: BTreeSet<usize> = seen.iter().copied().collect();
        if seen.len() != seen_set.len() {
            return Err(Error::Domain("duplicate leaf concept".into()));
        }
        if &seen_set != concepts {
            return Err(Error::Domain("leaf set differs from concept set".into()));
        }
        Ok(())
    }

    /// Parses the nested-list text form, e.g. `((0,1),(2,(3,4)))`.
    pub fn parse(text: &str) -> Result<Self> {
        let bytes: Vec<char> = text.chars().filter(|c| !c.is_whitespace()).collect();
        let mut pos = 0usize;
        let node = parse_node(&bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(Error::Parse(format!("trailing input at offset {pos}")));
        }
        Ok(node)
    }
}

fn parse_node(chars: &[char], pos: &mut usize) -> Result<Hierarchy> {
    match chars.get(*pos) {
        Some('(') => {
            *pos += 1;
            let mut children = Vec::new();
            loop {
                children.push(parse_node(chars, pos)?);
                match chars.get(*pos) {
                    Some(',') => *pos += 1,
                    Some(')') => {
                        *pos += 1;
                        break;
                    }
                    other => {
                        return Err(Error::Parse(format!(
                            "expected ',' or ')' at offset {}, found {:?}",
                            *pos, other
                        )))
                    }
                }
            }
            Hierarchy::internal(children)
        }
        Some(c) if c.is_ascii_digit() => {
            let start = *pos;
            while matches!(chars.get(*pos), Some(c) if c.is_ascii_digit()) {
                *pos += 1;
            }
            let id: usize = chars[start..*pos]
                .iter()
                .collect::<String>()
                .parse()
                .map_err(|e| Error::Parse(format!("bad concept id: {e}")))?;
            Ok(Hierarchy::Leaf(id))
        }
        other => Err(Error::Parse(format!(
            "unexpected {:?} at offset {}",
            other, *pos
        ))),
    }
}

impl serde::Serialize for Hierarchy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for Hierarchy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        Hierarchy::parse(&text).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for Hierarchy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hierarchy::Leaf(id) => write!(f, "{id}"),
            Hierarchy::Internal(children) => {
                write!(f, "(")?;
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        write!(f, ",")?;
                    }
                    write!(f, "{c}")?;
                }
                write!(f, ")")
            }
        }
    }
}

/// One level of a hierarchy: the partition of the concept set induced by
/// truncating the tree at a fixed depth.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LevelPartition {
    pub depth: usize,
    pub blocks: Vec<BTreeSet<usize>>,
}

/// Level partitions from depth 1 down to the leaves. Nodes shallower
/// than the cut contribute their full leaf set unchanged, so the last
/// level is all singletons and each level refines the one before it.
pub fn levels(h: &Hierarchy) -> Vec<LevelPartition> {
    let max_depth = h.depth().max(1);
    (1..=max_depth)
        .map(|d| {
            let mut blocks = Vec::new();
            cut_at_depth(h, d, &mut blocks);
            blocks.sort();
            LevelPartition { depth: d, blocks }
        })
        .collect()
}

fn cut_at_depth(node: &Hierarchy, remaining: usize, blocks: &mut Vec<BTreeSet<usize>>) {
    if remaining == 0 || node.is_leaf() {
        blocks.push(node.leaves().into_iter().collect());
        return;
    }
    for child in node.children() {
        cut_at_depth(child, remaining - 1, blocks);
    }
}

/// All distinct hierarchies over the given concepts, every internal node
/// with >=2 children, children in canonical order. Capped at 7 concepts.
pub fn enumerate_hierarchies(concepts: &BTreeSet<usize>) -> Result<Vec<Hierarchy>> {
    if concepts.is_empty() {
        return Err(Error::Domain("empty concept set".into()));
    }
    if concepts.len() > ENUMERATION_CAP {
        return Err(Error::Capacity(format!(
            "enumeration capped at {} concepts, got {}",
            ENUMERATION_CAP,
            concepts.len()
        )));
    }
    let ids: Vec<usize> = concepts.iter().copied().collect();
    Ok(enumerate_over(&ids))
}

fn enumerate_over(ids: &[usize]) -> Vec<Hierarchy> {
    if ids.len() == 1 {
        return vec![Hierarchy::Leaf(ids[0])];
    }
    let mut out = Vec::new();
    for partition in set_partitions_min_blocks(ids, 2) {
        // Cartesian product of the per-block sub-hierarchies.
        let per_block: Vec<Vec<Hierarchy>> =
            partition.iter().map(|b| enumerate_over(b)).collect();
        let mut choice = vec![0usize; per_block.len()];
        loop {
            let children: Vec<Hierarchy> = per_block
                .iter()
                .zip(&choice)
                .map(|(opts, &i)| opts[i].clone())
                .collect();
            out.push(Hierarchy::internal(children).expect("k>=2 by construction"));
            // odometer increment
            let mut i = 0;
            loop {
                if i == choice.len() {
                    break;
                }
                choice[i] += 1;
                if choice[i] < per_block[i].len() {
                    break;
                }
                choice[i] = 0;
                i += 1;
            }
            if i == choice.len() {
                break;
            }
        }
    }
    out
}

/// All partitions of `ids` into at least `min_blocks` non-empty blocks.
/// Blocks are kept in order of their minimum element.
fn set_partitions_min_blocks(ids: &[usize], min_blocks: usize) -> Vec<Vec<Vec<usize>>> {
    let mut result = Vec::new();
    let mut current: Vec<Vec<usize>> = Vec::new();
    fn recurse(
        ids: &[usize],
        idx: usize,
        current: &mut Vec<Vec<usize>>,
        min_blocks: usize,
        result: &mut Vec<Vec<Vec<usize>>>,
    ) {
        if idx == ids.len() {
            if current.len() >= min_blocks {
                result.push(current.clone());
            }
            return;
        }
        for b in 0..current.len() {
            current[b].push(ids[idx]);
            recurse(ids, idx + 1, current, min_blocks, result);
            current[b].pop();
        }
        current.push(vec![ids[idx]]);
        recurse(ids, idx + 1, current, min_blocks, result);
        current.pop();
    }
    recurse(ids, 0, &mut current, min_blocks, &mut result);
    result
}

/// Exact hierarchy count for n concepts, by the root-split recursion:
/// a(1)=1 and, for n>=2, a(n) sums over multisets of block sizes
/// (m1..mk), k>=2, sum mi = n, the number of labeled partitions with
/// those sizes times the product of a(mi). Consistent with
/// `enumerate_hierarchies` for all n <= 7 and with the published value
/// 660,032 at n = 8.
pub fn count_hierarchies(n: usize) -> Result<BigUint> {
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    let mut memo: Vec<Option<BigUint>> = vec![None; n + 1];
    Ok(count_memo(n, &mut memo))
}

fn count_memo(n: usize, memo: &mut Vec<Option<BigUint>>) -> BigUint {
    if let Some(v) = &memo[n] {
        return v.clone();
    }
    let result = if n == 1 {
        BigUint::from(1u32)
    } else {
        let mut total = BigUint::from(0u32);
        for sizes in integer_partitions_min_parts(n, 2) {
            // labeled ways to split n concepts into blocks of these sizes
            let mut ways = factorial(n);
            for &m in &sizes {
                ways /= factorial(m);
            }
            let mut run = 1usize;
            for i in 1..=sizes.len() {
                if i < sizes.len() && sizes[i] == sizes[i - 1] {
                    run += 1;
                } else {
                    ways /= factorial(run);
                    run = 1;
                }
            }
            let mut term = ways;
            for &m in &sizes {
                term *= count_memo(m, memo);
            }
            total += term;
        }
        total
    };
    memo[n] = Some(result.clone());
    result
}

/// Partitions of n into at least `min_parts` parts, each partition as a
/// non-increasing list of part sizes.
fn integer_partitions_min_parts(n: usize, min_parts: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut current = Vec::new();
    fn recurse(remaining: usize, max_part: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if remaining == 0 {
            out.push(current.clone());
            return;
        }
        for part in (1..=max_part.min(remaining)).rev() {
            current.push(part);
            recurse(remaining - part, part, current, out);
            current.pop();
        }
    }
    recurse(n, n, &mut current, &mut out);
    out.retain(|p| p.len() >= min_parts);
    out
}

fn factorial(n: usize) -> BigUint {
    (1..=n as u64).map(BigUint::from).product::<BigUint>().max(BigUint::from(1u32))
}

fn binomial(n: usize, k: usize) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    factorial(n) / (factorial(k) * factorial(n - k))
}

/// Verbatim evaluation of the published counting recurrence with base
/// cases L(1)=L(2)=1:
///
/// `L(n) = C(n-1,n-2)*L(n-1)*L(1) + 2*sum_{i=0}^{n-3} C(n,i)*L(i+1)*L(n-i-1)`
///
/// This is kept for audit purposes: it agrees with `count_hierarchies`
/// at n=2 and n=3 but yields 28 at n=4 where enumeration gives 26, and
/// 1,434,624 at n=8 where the quoted search-space size 660,032 matches
/// enumeration. The enumeration-consistent counter is authoritative.
pub fn count_paper_recurrence(n: usize) -> Result<BigUint> {
    if n == 0 {
        return Err(Error::Domain("n must be >= 1".into()));
    }
    let mut table: Vec<BigUint> = vec![BigUint::from(1u32); 2.min(n) + 1];
    for m in 3..=n {
        let mut value = binomial(m - 1, m - 2) * &table[m - 1] * &table[1];
        let mut tail = BigUint::from(0u32);
        for i in 0..=m - 3 {
            tail += binomial(m, i) * &table[i + 1] * &table[m - i - 1];
        }
        value += BigUint::from(2u32) * tail;
        table.push(value);
    }
    Ok(table[n.min(table.len() - 1)].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept_set(n: usize) -> BTreeSet<usize> {
        (0..n).collect()
    }

    #[test]
    fn single_concept_is_one_leaf() {
        let all = enumerate_hierarchies(&concept_set(1)).unwrap();
        assert_eq!(all, vec![Hierarchy::Leaf(0)]);
    }

    #[test]
    fn three_concepts_give_four_hierarchies() {
        let all = enumerate_hierarchies(&concept_set(3)).unwrap();
        assert_eq!(all.len(), 4);
        let rendered: BTreeSet<String> = all.iter().map(|h| h.to_string()).collect();
        let expected: BTreeSet<String> = ["(0,1,2)", "(0,(1,2))", "(1,(0,2))", "(2,(0,1))"]
            .iter()
            .map(|s| Hierarchy::parse(s).unwrap().to_string())
            .collect();
        assert_eq!(rendered, expected);
    }

    #[test]
    fn enumeration_has_no_duplicates() {
        for n in 2..=5 {
            let all = enumerate_hierarchies(&concept_set(n)).unwrap();
            let distinct: BTreeSet<&Hierarchy> = all.iter().collect();
            assert_eq!(all.len(), distinct.len(), "duplicates at n={n}");
        }
    }

    #[test]
    fn enumeration_cap_enforced() {
        assert!(matches!(
            enumerate_hierarchies(&concept_set(8)),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn count_matches_known_values() {
        let expected: &[(usize, u64)] = &[
            (1, 1),
            (2, 1),
            (3, 4),
            (4, 26),
            (5, 236),
            (6, 2752),
            (7, 39208),
            (8, 660_032),
        ];
        for &(n, v) in expected {
            assert_eq!(count_hierarchies(n).unwrap(), BigUint::from(v), "n={n}");
        }
    }

    #[test]
    fn count_matches_enumeration() {
        for n in 2..=6 {
            let enumerated = enumerate_hierarchies(&concept_set(n)).unwrap();
            assert_eq!(
                count_hierarchies(n).unwrap(),
                BigUint::from(enumerated.len()),
                "n={n}"
            );
        }
    }

    #[test]
    fn zero_concepts_is_domain_error() {
        assert!(matches!(count_hierarchies(0), Err(Error::Domain(_))));
        assert!(matches!(count_paper_recurrence(0), Err(Error::Domain(_))));
    }

    #[test]
    fn paper_recurrence_small_values() {
        assert_eq!(count_paper_recurrence(2).unwrap(), BigUint::from(1u32));
        assert_eq!(count_paper_recurrence(3).unwrap(), BigUint::from(4u32));
        // Diverges from enumeration (26) from n=4 on.
        assert_eq!(count_paper_recurrence(4).unwrap(), BigUint::from(28u32));
    }

    #[test]
    fn levels_of_two_pair_tree() {
        let h = Hierarchy::parse("((0,1),(2,3))").unwrap();
        let lv = levels(&h);
        assert_eq!(lv.len(), 2);
        assert_eq!(
            lv[0].blocks,
            vec![
                [0, 1].into_iter().collect::<BTreeSet<_>>(),
                [2, 3].into_iter().collect()
            ]
        );
        assert_eq!(lv[1].blocks.len(), 4);
        assert!(lv[1].blocks.iter().all(|b| b.len() == 1));
    }

    #[test]
    fn levels_of_flat_tree() {
        let h = Hierarchy::parse("(0,1,2)").unwrap();
        let lv = levels(&h);
        assert_eq!(lv.len(), 1);
        assert_eq!(lv[0].blocks.len(), 3);
    }

    #[test]
    fn node_counts() {
        assert_eq!(Hierarchy::Leaf(0).node_count(), 1);
        let flat: Vec<Hierarchy> = (0..10).map(Hierarchy::Leaf).collect();
        assert_eq!(Hierarchy::internal(flat).unwrap().node_count(), 10);
        let h = Hierarchy::parse("((0,1),(2,3))").unwrap();
        assert_eq!(h.node_count(), 6);
    }

    #[test]
    fn parse_roundtrip_and_canonical_order() {
        let h = Hierarchy::parse("((2,(3,4)),(0,1))").unwrap();
        assert_eq!(h.to_string(), "((0,1),(2,(3,4)))");
        assert_eq!(Hierarchy::parse(&h.to_string()).unwrap(), h);
    }

    #[test]
    fn parse_rejects_garbage() {
        assert!(Hierarchy::parse("((0,1)").is_err());
        assert!(Hierarchy::parse("(0)").is_err());
        assert!(Hierarchy::parse("0,1").is_err());
    }

    #[test]
    fn validate_checks_leaf_set() {
        let h = Hierarchy::parse("((0,1),2)").unwrap();
        assert!(h.validate(&concept_set(3)).is_ok());
        assert!(h.validate(&concept_set(4)).is_err());
    }

    #[test]
    fn levels_refine_for_enumerated_trees() {
        for h in enumerate_hierarchies(&concept_set(5)).unwrap() {
            let lv = levels(&h);
            assert!(lv.last().unwrap().blocks.iter().all(|b| b.len() == 1));
            for pair in lv.windows(2) {
                for fine in &pair[1].blocks {
                    assert!(
                        pair[0].blocks.iter().any(|coarse| fine.is_subset(coarse)),
                        "refinement violated in {h}"
                    );
                }
            }
        }
    }
}
