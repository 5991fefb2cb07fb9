//! Retrieval ranking and metrics: R@K, median rank, mean rank.
//!
//! Convention: in a similarity matrix the diagonal holds the matched pairs,
//! rows are text-side queries and columns video-side. T2V ranks each row's
//! candidates, V2T each column's. Ties resolve in favor of the true match
//! (only strictly greater similarities push the rank down), which is
//! deterministic and matches the stable-argsort convention.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorBase;
use std::fmt;

/// Retrieval direction: text-to-video or video-to-text.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    T2v,
    V2t,
}

impl Direction {
    pub fn label(self) -> &'static str {
        match self {
            Direction::T2v => "t2v",
            Direction::V2t => "v2t",
        }
    }
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "t2v" => Ok(Direction::T2v),
            "v2t" => Ok(Direction::V2t),
            other => Err(Error::Config { msg: format!("unknown direction `{other}` (t2v or v2t)") }),
        }
    }
}

/// 1-based rank of the true match for each query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn ranks(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Rank every query of the given direction in a square similarity matrix
/// whose diagonal holds the ground-truth matches.
pub fn rank_matrix<S: Scalar>(similarity: &TensorBase<S>, direction: Direction) -> Result<RankVector> {
    let n = similarity.rows();
    if similarity.cols() != n {
        return Err(Error::InvalidArg {
            op: "rank_matrix",
            msg: format!("similarity {:?} is not square", similarity.shape()),
        });
    }
    if similarity.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { what: "similarity matrix".into() });
    }
    let mut ranks = Vec::with_capacity(n);
    for q in 0..n {
        let truth = similarity.get(q, q);
        let mut greater = 0;
        for c in 0..n {
            let candidate = match direction {
                Direction::T2v => similarity.get(q, c),
                Direction::V2t => similarity.get(c, q),
            };
            if candidate > truth {
                greater += 1;
            }
        }
        ranks.push(1 + greater);
    }
    Ok(RankVector(ranks))
}

/// Aggregate retrieval metrics for one direction.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub medr: f64,
    pub mnr: f64,
    pub queries: usize,
}

/// R@K as percentages, median rank (mean of the middle two for an even
/// count), and mean rank.
pub fn metrics(ranks: &RankVector, direction: Direction) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::InvalidArg { op: "metrics", msg: "empty rank vector".into() });
    }
    let q = ranks.len() as f64;
    let recall_at = |k: usize| 100.0 * ranks.ranks().iter().filter(|&&r| r <= k).count() as f64 / q;

    let mut sorted = ranks.ranks().to_vec();
    sorted.sort_unstable();
    let medr = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2] as f64
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) as f64 / 2.0
    };
    let mnr = ranks.ranks().iter().sum::<usize>() as f64 / q;

    Ok(RetrievalReport {
        direction,
        r1: recall_at(1),
        r5: recall_at(5),
        r10: recall_at(10),
        medr,
        mnr,
        queries: ranks.len(),
    })
}

impl RetrievalReport {
    /// One tab-separated line: `direction r1 r5 r10 medr mnr q`.
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.2}\t{:.4}\t{}",
            self.direction.label(),
            self.r1,
            self.r5,
            self.r10,
            self.medr,
            self.mnr,
            self.queries
        )
    }

    /// Machine-readable `section.key=value` lines.
    pub fn machine_lines(&self) -> String {
        let d = self.direction.label();
        format!(
            "{d}.r1={:.4}\n{d}.r5={:.4}\n{d}.r10={:.4}\n{d}.medr={:.2}\n{d}.mnr={:.4}\n{d}.queries={}",
            self.r1, self.r5, self.r10, self.medr, self.mnr, self.queries
        )
    }
}

impl fmt::Display for RetrievalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[{}] queries: {}", self.direction.label().to_uppercase(), self.queries)?;
        writeln!(f, "  R@1  {:6.2}%   R@5  {:6.2}%   R@10 {:6.2}%", self.r1, self.r5, self.r10)?;
        write!(f, "  MedR {:6.2}    MnR  {:8.4}", self.medr, self.mnr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    type T = TensorBase<f64>;

    fn ranks_of(v: Vec<usize>) -> RankVector {
        RankVector(v)
    }

    #[test]
    fn identity_matrix_all_rank_one() {
        let mut s = T::zeros(3, 3);
        for i in 0..3 {
            s.set(i, i, 1.0);
        }
        for dir in [Direction::T2v, Direction::V2t] {
            let r = rank_matrix(&s, dir).unwrap();
            assert_eq!(r.ranks(), &[1, 1, 1]);
        }
    }

    #[test]
    fn hand_counted_rank() {
        // Row [0.2, 0.9, 0.5], truth at index 0: two strictly greater -> rank 3.
        let s = T::from_vec(3, 3, vec![0.2, 0.9, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let r = rank_matrix(&s, Direction::T2v).unwrap();
        assert_eq!(r.ranks()[0], 3);
    }

    #[test]
    fn all_equal_similarities_rank_one_by_tie_rule() {
        let s = T::filled(4, 4, 0.5);
        for dir in [Direction::T2v, Direction::V2t] {
            let r = rank_matrix(&s, dir).unwrap();
            assert!(r.ranks().iter().all(|&x| x == 1));
        }
    }

    #[test]
    fn nan_rejected() {
        let mut s = T::zeros(2, 2);
        s.set(0, 1, f64::NAN);
        assert!(matches!(rank_matrix(&s, Direction::T2v), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn metrics_all_hits() {
        let rep = metrics(&ranks_of(vec![1, 1, 1]), Direction::T2v).unwrap();
        assert_eq!(rep.r1, 100.0);
        assert_eq!(rep.medr, 1.0);
        assert_eq!(rep.mnr, 1.0);
    }

    #[test]
    fn metrics_hand_computed() {
        let rep = metrics(&ranks_of(vec![1, 2, 11, 3]), Direction::V2t).unwrap();
        assert_eq!(rep.r1, 25.0);
        assert_eq!(rep.r5, 75.0);
        assert_eq!(rep.r10, 75.0);
        assert_eq!(rep.medr, 2.5);
        assert_eq!(rep.mnr, 4.25);
        assert_eq!(rep.queries, 4);
    }

    #[test]
    fn recall_monotone_in_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let ranks: Vec<usize> = (0..50).map(|_| rng.gen_range(1..=40)).collect();
        let rep = metrics(&ranks_of(ranks), Direction::T2v).unwrap();
        assert!(rep.r1 <= rep.r5 && rep.r5 <= rep.r10);
    }

    /// Independent brute-force oracle: for each query, sort candidate
    /// scores descending and scan for the first position the truth score
    /// reaches (optimistic ties).
    fn oracle_ranks(s: &T, dir: Direction) -> Vec<usize> {
        let n = s.rows();
        (0..n)
            .map(|q| {
                let truth = s.get(q, q);
                let mut scores: Vec<f64> = (0..n)
                    .map(|c| match dir {
                        Direction::T2v => s.get(q, c),
                        Direction::V2t => s.get(c, q),
                    })
                    .collect();
                scores.sort_by(|a, b| b.partial_cmp(a).unwrap());
                scores.iter().position(|&v| v <= truth).unwrap() + 1
            })
            .collect()
    }

    #[test]
    fn agrees_with_bruteforce_oracle_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(123);
        for _ in 0..25 {
            let n = rng.gen_range(2..=30);
            let s = T::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
            for dir in [Direction::T2v, Direction::V2t] {
                let got = rank_matrix(&s, dir).unwrap();
                assert_eq!(got.ranks(), oracle_ranks(&s, dir).as_slice());
            }
        }
    }

    #[test]
    fn ranks_invariant_under_strictly_increasing_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 12;
        let s = T::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let transformed = s.map(|v| (2.5 * v + 0.3).tanh() * 4.0 + v);
        for dir in [Direction::T2v, Direction::V2t] {
            assert_eq!(
                rank_matrix(&s, dir).unwrap(),
                rank_matrix(&transformed, dir).unwrap()
            );
        }
    }

    #[test]
    fn metrics_invariant_under_consistent_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let n = 10;
        let s = T::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect());

        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        // Permute both rows and columns by the same permutation, which
        // relabels pairs consistently (diagonal stays the truth).
        let mut p = T::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                p.set(i, j, s.get(perm[i], perm[j]));
            }
        }
        for dir in [Direction::T2v, Direction::V2t] {
            let a = metrics(&rank_matrix(&s, dir).unwrap(), dir).unwrap();
            let b = metrics(&rank_matrix(&p, dir).unwrap(), dir).unwrap();
            assert_eq!(a.r1, b.r1);
            assert_eq!(a.medr, b.medr);
            assert_eq!(a.mnr, b.mnr);
        }
    }

    #[test]
    fn report_serialization_shape() {
        let rep = metrics(&ranks_of(vec![1, 2]), Direction::T2v).unwrap();
        let line = rep.tsv_line();
        assert_eq!(line.split('\t').count(), 7);
        assert!(line.starts_with("t2v\t"));
        let machine = rep.machine_lines();
        assert!(machine.contains("t2v.r1=50.0000"));
        assert!(machine.contains("t2v.queries=2"));
    }
}
