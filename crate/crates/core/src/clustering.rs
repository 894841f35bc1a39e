//! Pairwise cosine distances, two-cluster agglomerative clustering and the
//! size-times-density scoring that decides which cluster is discarded.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::cosine_distance;

/// Symmetric `n × n` matrix of cosine distances with a zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates and wraps a row-major `n × n` matrix.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let mut entries = Vec::with_capacity(n * n);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(Error::structural(format!(
                    "row {i} has {} entries, expected {n}",
                    row.len()
                )));
            }
            entries.extend_from_slice(row);
        }
        for i in 0..n {
            if entries[i * n + i] != 0.0 {
                return Err(Error::structural(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = entries[i * n + j];
                if !(0.0..=2.0).contains(&v) {
                    return Err(Error::structural(format!(
                        "entry ({i},{j}) = {v} outside [0, 2]"
                    )));
                }
                if v != entries[j * n + i] {
                    return Err(Error::structural(format!("asymmetric at ({i},{j})")));
                }
            }
        }
        Ok(Self { n, entries })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect()
    }
}

/// Distances between every pair of update vectors.
pub fn pairwise_cosine_matrix<V: AsRef<[f64]>>(updates: &[V]) -> Result<DistanceMatrix> {
    let n = updates.len();
    if n < 2 {
        return Err(Error::usage(format!(
            "pairwise distances need at least 2 vectors, got {n}"
        )));
    }
    let len = updates[0].as_ref().len();
    if let Some(bad) = updates.iter().position(|u| u.as_ref().len() != len) {
        return Err(Error::structural(format!(
            "vector {bad} has length {}, expected {len}",
            updates[bad].as_ref().len()
        )));
    }
    let mut entries = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(updates[i].as_ref(), updates[j].as_ref())?;
            entries[i * n + j] = d;
            entries[j * n + i] = d;
        }
    }
    Ok(DistanceMatrix { n, entries })
}

/// Inter-cluster distance used when merging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    Single,
    Complete,
    #[default]
    Average,
}

impl fmt::Display for Linkage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Linkage::Single => "single",
            Linkage::Complete => "complete",
            Linkage::Average => "average",
        })
    }
}

/// Two-way split of client indices `0..n`.
///
/// `first` is always the cluster holding index 0.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    first: Vec<usize>,
    second: Vec<usize>,
}

impl ClusterAssignment {
    /// Builds an assignment from explicit member lists, checking that they partition `0..n`.
    pub fn new(first: Vec<usize>, second: Vec<usize>) -> Result<Self> {
        let mut first = first;
        let mut second = second;
        first.sort_unstable();
        second.sort_unstable();
        let n = first.len() + second.len();
        let all: BTreeSet<usize> = first.iter().chain(&second).copied().collect();
        if all.len() != n || all.iter().next_back().is_some_and(|&m| m >= n) {
            return Err(Error::usage("clusters must partition 0..n"));
        }
        if n >= 2 && (first.is_empty() || second.is_empty()) {
            return Err(Error::usage("both clusters must be nonempty"));
        }
        Ok(Self { first, second })
    }

    pub fn len(&self) -> usize {
        self.first.len() + self.second.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Members of cluster `k` (1 or 2), sorted ascending.
    pub fn members(&self, k: usize) -> &[usize] {
        match k {
            1 => &self.first,
            2 => &self.second,
            _ => panic!("cluster index must be 1 or 2, got {k}"),
        }
    }

    /// 1 or 2.
    pub fn cluster_of(&self, index: usize) -> usize {
        if self.first.binary_search(&index).is_ok() {
            1
        } else {
            2
        }
    }
}

/// Bottom-up merging under `linkage` until exactly two clusters remain.
///
/// Clusters are identified by their smallest member. Among candidate pairs at
/// equal linkage distance the pair with the lexicographically smallest
/// `(min id, max id)` wins.
pub fn agglomerative_two_clusters(d: &DistanceMatrix, linkage: Linkage) -> Result<ClusterAssignment> {
    let n = d.len();
    if n < 2 {
        return Err(Error::usage(format!(
            "agglomerative clustering needs at least 2 points, got {n}"
        )));
    }

    // Working matrix over active clusters: min/max distance for single/complete,
    // total cross-cluster distance for average (divided by sizes on comparison,
    // so exactly representable sums tie exactly).
    let mut link: Vec<f64> = d.entries.clone();
    let mut size = vec![1usize; n];
    let mut active: Vec<bool> = vec![true; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();

    for _ in 0..(n - 2) {
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..n {
            if !active[a] {
                continue;
            }
            for b in (a + 1)..n {
                if !active[b] {
                    continue;
                }
                let v = match linkage {
                    Linkage::Average => link[a * n + b] / (size[a] * size[b]) as f64,
                    _ => link[a * n + b],
                };
                // ids are ascending in (a, b) scan order, so strict '<' keeps the smallest key
                if best.is_none_or(|(bv, _, _)| v < bv) {
                    best = Some((v, a, b));
                }
            }
        }
        let (_, a, b) = best.expect("at least two active clusters");

        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let (da, db) = (link[k * n + a], link[k * n + b]);
            let merged = match linkage {
                Linkage::Single => da.min(db),
                Linkage::Complete => da.max(db),
                Linkage::Average => da + db,
            };
            link[k * n + a] = merged;
            link[a * n + k] = merged;
        }
        size[a] += size[b];
        active[b] = false;
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
    }

    let mut clusters = (0..n).filter(|&i| active[i]).map(|i| members[i].clone());
    let first = clusters.next().expect("two clusters remain");
    let second = clusters.next().expect("two clusters remain");
    ClusterAssignment::new(first, second)
}

/// Mean pairwise distance among `members`; zero for a singleton.
pub fn cluster_density(d: &DistanceMatrix, members: &[usize]) -> Result<f64> {
    match members.len() {
        0 => Err(Error::usage("density of an empty cluster")),
        1 => Ok(0.0),
        m => {
            let mut sum = 0.0;
            for (x, &i) in members.iter().enumerate() {
                for &j in &members[x + 1..] {
                    sum += d.get(i, j);
                }
            }
            Ok(2.0 * sum / (m * (m - 1)) as f64)
        }
    }
}

/// Benign/poisoned labelling of one layer's clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterVerdict {
    pub benign: Vec<usize>,
    pub poisoned: Vec<usize>,
    pub score_1: f64,
    pub score_2: f64,
}

/// Scores each cluster as `size × density`; the lower-scoring cluster is poisoned.
/// On a tie the second cluster is poisoned.
pub fn label_clusters(d: &DistanceMatrix, a: &ClusterAssignment) -> Result<ClusterVerdict> {
    if a.len() != d.len() {
        return Err(Error::usage(format!(
            "assignment covers {} clients, matrix has {}",
            a.len(),
            d.len()
        )));
    }
    let (c1, c2) = (a.members(1), a.members(2));
    let score_1 = c1.len() as f64 * cluster_density(d, c1)?;
    let score_2 = c2.len() as f64 * cluster_density(d, c2)?;
    let (benign, poisoned) = if score_1 < score_2 { (c2, c1) } else { (c1, c2) };
    Ok(ClusterVerdict {
        benign: benign.to_vec(),
        poisoned: poisoned.to_vec(),
        score_1,
        score_2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn matrix(rows: Vec<Vec<f64>>) -> DistanceMatrix {
        DistanceMatrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn pairwise_examples() {
        let d = pairwise_cosine_matrix(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(d.rows(), vec![vec![0.0, 1.0], vec![1.0, 0.0]]);

        let d = pairwise_cosine_matrix(&vec![vec![1.0, 1.0]; 3]).unwrap();
        assert!(d.rows().iter().flatten().all(|&v| v.abs() < 1e-15));

        let d = pairwise_cosine_matrix(&[vec![1.0, 0.0], vec![1.0, 1.0], vec![0.0, 1.0]]).unwrap();
        let h = 1.0 - 1.0 / 2f64.sqrt();
        assert!((d.get(0, 1) - h).abs() < 1e-12);
        assert!((d.get(0, 2) - 1.0).abs() < 1e-12);
        assert!((d.get(1, 2) - h).abs() < 1e-12);
    }

    #[test]
    fn pairwise_errors() {
        assert!(matches!(
            pairwise_cosine_matrix(&[vec![1.0]]),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            pairwise_cosine_matrix(&[vec![1.0], vec![1.0, 2.0]]),
            Err(Error::Structural(_))
        ));
    }

    #[test]
    fn two_identical_one_far() {
        let d = matrix(vec![
            vec![0.0, 0.0, 1.5],
            vec![0.0, 0.0, 1.2],
            vec![1.5, 1.2, 0.0],
        ]);
        for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average] {
            let a = agglomerative_two_clusters(&d, linkage).unwrap();
            assert_eq!(a.members(1), &[0, 1]);
            assert_eq!(a.members(2), &[2]);
        }
    }

    #[test]
    fn two_points_and_too_few() {
        let d = matrix(vec![vec![0.0, 0.3], vec![0.3, 0.0]]);
        let a = agglomerative_two_clusters(&d, Linkage::Average).unwrap();
        assert_eq!((a.members(1), a.members(2)), (&[0][..], &[1][..]));
        let d1 = matrix(vec![vec![0.0]]);
        assert!(agglomerative_two_clusters(&d1, Linkage::Average).is_err());
    }

    #[test]
    fn all_zero_matrix_uses_index_tie_break() {
        let d = matrix(vec![vec![0.0; 4]; 4]);
        let a = agglomerative_two_clusters(&d, Linkage::Average).unwrap();
        assert_eq!(a.members(1), &[0, 1, 2]);
        assert_eq!(a.members(2), &[3]);
        let v = label_clusters(&d, &a).unwrap();
        assert_eq!(v.poisoned, vec![3]);
    }

    #[test]
    fn density_examples() {
        let d = matrix(vec![
            vec![0.0, 0.2, 0.4, 0.9],
            vec![0.2, 0.0, 0.6, 0.8],
            vec![0.4, 0.6, 0.0, 0.7],
            vec![0.9, 0.8, 0.7, 0.0],
        ]);
        assert_eq!(cluster_density(&d, &[3]).unwrap(), 0.0);
        assert!((cluster_density(&d, &[1, 3]).unwrap() - 0.8).abs() < 1e-15);
        assert!((cluster_density(&d, &[0, 1, 2]).unwrap() - 0.4).abs() < 1e-15);
        assert!(cluster_density(&d, &[]).is_err());
    }

    /// 3 identical vectors (indices 0..3) and 7 vectors whose mutual distances are all 0.5.
    fn three_tight_seven_loose() -> DistanceMatrix {
        let n = 10;
        let mut rows = vec![vec![0.0; n]; n];
        for (i, row) in rows.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                if i == j {
                    continue;
                }
                *v = match (i < 3, j < 3) {
                    (true, true) => 0.0,
                    (false, false) => 0.5,
                    _ => 1.5,
                };
            }
        }
        matrix(rows)
    }

    #[test]
    fn label_dense_minority_poisoned() {
        let d = three_tight_seven_loose();
        let a = ClusterAssignment::new(vec![0, 1, 2], (3..10).collect()).unwrap();
        let v = label_clusters(&d, &a).unwrap();
        assert_eq!(v.score_1, 0.0);
        assert!((v.score_2 - 3.5).abs() < 1e-12);
        assert_eq!(v.poisoned, vec![0, 1, 2]);
        assert_eq!(v.benign, (3..10).collect::<Vec<_>>());
    }

    #[test]
    fn label_tie_poisons_second() {
        let d = matrix(vec![
            vec![0.0, 0.4, 1.0, 1.0],
            vec![0.4, 0.0, 1.0, 1.0],
            vec![1.0, 1.0, 0.0, 0.4],
            vec![1.0, 1.0, 0.4, 0.0],
        ]);
        let a = ClusterAssignment::new(vec![0, 1], vec![2, 3]).unwrap();
        let v = label_clusters(&d, &a).unwrap();
        assert_eq!(v.score_1, v.score_2);
        assert_eq!(v.poisoned, vec![2, 3]);
    }

    #[test]
    fn label_singleton_first_poisoned() {
        let d = matrix(vec![
            vec![0.0, 1.0, 1.0],
            vec![1.0, 0.0, 0.3],
            vec![1.0, 0.3, 0.0],
        ]);
        let a = ClusterAssignment::new(vec![0], vec![1, 2]).unwrap();
        let v = label_clusters(&d, &a).unwrap();
        assert_eq!(v.poisoned, vec![0]);
        assert_eq!(v.benign, vec![1, 2]);
    }

    #[test]
    fn assignment_validation() {
        assert!(ClusterAssignment::new(vec![0, 1], vec![1]).is_err());
        assert!(ClusterAssignment::new(vec![0, 1], vec![]).is_err());
        assert!(ClusterAssignment::new(vec![0, 3], vec![1]).is_err());
        let a = ClusterAssignment::new(vec![2, 0], vec![1]).unwrap();
        assert_eq!(a.cluster_of(2), 1);
        assert_eq!(a.cluster_of(1), 2);
    }

    fn vectors() -> impl Strategy<Value = Vec<Vec<f64>>> {
        vectors_of_len(1..5)
    }

    fn vectors_of_len(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<Vec<f64>>> {
        (2usize..9, len).prop_flat_map(|(n, len)| {
            prop::collection::vec(prop::collection::vec(-1.0f64..1.0, len), n)
        })
    }

    proptest! {
        #[test]
        fn pairwise_matrix_invariants(v in vectors()) {
            let d = pairwise_cosine_matrix(&v).unwrap();
            // from_rows re-validates symmetry, diagonal and range
            prop_assert!(DistanceMatrix::from_rows(&d.rows()).is_ok());
        }

        #[test]
        fn clustering_permutation_equivariant(v in vectors_of_len(2..5), rot in 0usize..8) {
            let n = v.len();
            let d = pairwise_cosine_matrix(&v).unwrap();
            let base = agglomerative_two_clusters(&d, Linkage::Average).unwrap();
            // permuted[i] = v[perm[i]]
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
            let pv: Vec<Vec<f64>> = perm.iter().map(|&p| v[p].clone()).collect();
            let pd = pairwise_cosine_matrix(&pv).unwrap();
            let pa = agglomerative_two_clusters(&pd, Linkage::Average).unwrap();
            let mapped: BTreeSet<usize> = pa.members(1).iter().map(|&i| perm[i]).collect();
            let b1: BTreeSet<usize> = base.members(1).iter().copied().collect();
            let b2: BTreeSet<usize> = base.members(2).iter().copied().collect();
            prop_assert!(mapped == b1 || mapped == b2);
        }

        #[test]
        fn verdict_invariant_under_scaling(v in vectors(), k in -5i32..6) {
            // power-of-two factors keep every cosine distance bit-identical
            let c = 2f64.powi(k);
            let d = pairwise_cosine_matrix(&v).unwrap();
            let scaled: Vec<Vec<f64>> = v.iter().map(|u| u.iter().map(|x| x * c).collect()).collect();
            let ds = pairwise_cosine_matrix(&scaled).unwrap();
            let a = agglomerative_two_clusters(&d, Linkage::Average).unwrap();
            let as_ = agglomerative_two_clusters(&ds, Linkage::Average).unwrap();
            prop_assert_eq!(&d, &ds);
            prop_assert_eq!(&a, &as_);
            let verdict = label_clusters(&d, &a).unwrap();
            prop_assert_eq!(verdict, label_clusters(&ds, &as_).unwrap());
        }

        #[test]
        fn exactly_one_cluster_poisoned(v in vectors()) {
            let d = pairwise_cosine_matrix(&v).unwrap();
            let a = agglomerative_two_clusters(&d, Linkage::Average).unwrap();
            let verdict = label_clusters(&d, &a).unwrap();
            prop_assert!(!verdict.benign.is_empty());
            prop_assert!(!verdict.poisoned.is_empty());
            prop_assert_eq!(verdict.benign.len() + verdict.poisoned.len(), v.len());
        }
    }
}
