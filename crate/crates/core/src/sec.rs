//! Semantic equitable clustering plans.
//!
//! Tokens are ranked once by cosine similarity between their key and the
//! mean-pooled key, then the ranked order is sliced into clusters of equal
//! size. No iteration, and every cluster holds exactly `N = L / M` tokens.
//!
//! The connector variant builds groups over the same ranking, either
//! interleaved (group `n` takes ranks `n, n + G, n + 2G, ...`) or
//! sequential (contiguous rank blocks).

use std::ops::Range;

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::{Scalar, Tensor};

/// Zero-norm guard in cosine denominators.
pub const COSINE_EPS: f64 = 1e-12;

/// Output of one clustering pass.
///
/// `sim` covers the `L` real tokens. `idx` and `inv_idx` cover `L + padded`
/// slots: entries `>= L` in `idx` are dummy tokens, always ranked last.
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPlan {
    pub sim: Vec<f64>,
    /// `idx[rank]` is the token at that rank (descending similarity).
    pub idx: Vec<usize>,
    /// `inv_idx[token]` is the rank of that token.
    pub inv_idx: Vec<usize>,
    pub num_clusters: usize,
    pub cluster_size: usize,
    pub padded: usize,
    /// Passes over the tokens taken to build the plan. Always 1.
    pub iterations: usize,
}

impl ClusterPlan {
    /// Number of real tokens.
    pub fn tokens(&self) -> usize {
        self.sim.len()
    }

    pub fn cluster_ranges(&self) -> Vec<Range<usize>> {
        (0..self.num_clusters)
            .map(|m| m * self.cluster_size..(m + 1) * self.cluster_size)
            .collect()
    }

    /// Slots (real or dummy) in cluster `m`, in rank order.
    pub fn members(&self, m: usize) -> &[usize] {
        &self.idx[m * self.cluster_size..(m + 1) * self.cluster_size]
    }

    pub fn cluster_of(&self, token: usize) -> usize {
        self.inv_idx[token] / self.cluster_size
    }

    /// Cluster id of each real token.
    pub fn assignment(&self) -> Vec<usize> {
        (0..self.tokens()).map(|t| self.cluster_of(t)).collect()
    }

    pub fn is_dummy(&self, slot: usize) -> bool {
        slot >= self.tokens()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let total = self.tokens() + self.padded;
        ops::check_permutation(&self.idx, total)?;
        if self.inv_idx.len() != total
            || self.idx.iter().enumerate().any(|(r, &t)| self.inv_idx[t] != r)
        {
            return Err(Error::PlanMismatch("inv_idx is not the inverse of idx".into()));
        }
        if self.num_clusters * self.cluster_size != total {
            return Err(Error::PlanMismatch(format!(
                "{} clusters of {} for {} slots",
                self.num_clusters, self.cluster_size, total
            )));
        }
        let l = self.tokens();
        for w in self.idx.windows(2) {
            let s = |t: usize| if t < l { self.sim[t] } else { f64::NEG_INFINITY };
            let (a, b) = (s(w[0]), s(w[1]));
            if a < b || (a == b && w[0] > w[1]) {
                return Err(Error::PlanMismatch("ranking is not descending and stable".into()));
            }
        }
        Ok(())
    }
}

/// The cluster center: mean of all keys.
pub fn compute_center<T: Scalar>(keys: &Tensor<T>) -> Result<Tensor<T>> {
    ops::mean_pool_tokens(keys)
}

/// Cosine similarity of every key to `center`, and the ranking of tokens by
/// descending similarity (stable, ties by ascending index).
pub fn similarity_rank<T: Scalar>(
    keys: &Tensor<T>,
    center: &Tensor<T>,
    eps: f64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    if keys.rank() != 2 || center.shape() != [keys.shape()[1]] {
        return Err(Error::shape(
            "similarity_rank",
            format!("keys {:?}, center {:?}", keys.shape(), center.shape()),
        ));
    }
    let c: Vec<f64> = center.to_f64_vec();
    let cn = c.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
    let sim: Vec<f64> = (0..keys.shape()[0])
        .map(|i| {
            let row = keys.row(i);
            let (mut dotp, mut nn) = (0.0, 0.0);
            for (&k, &cv) in row.iter().zip(&c) {
                let k = k.as_f64();
                dotp += k * cv;
                nn += k * k;
            }
            dotp / (nn.sqrt().max(eps) * cn)
        })
        .collect();
    Ok((sim.clone(), rank_descending(&sim)))
}

/// Stable descending argsort.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    idx
}

/// Dummy tokens needed so that `m` divides the token count.
pub fn pad_to_divisible(l: usize, m: usize) -> Result<usize> {
    if m == 0 {
        return Err(Error::invalid("cluster count must be >= 1"));
    }
    Ok((m - l % m) % m)
}

/// Contiguous rank ranges of `m` equal clusters over `l` sorted tokens.
pub fn equal_partition(l: usize, m: usize) -> Result<Vec<Range<usize>>> {
    if m == 0 {
        return Err(Error::invalid("cluster count must be >= 1"));
    }
    if m > l {
        return Err(Error::invalid(format!("{m} clusters for {l} tokens")));
    }
    if l % m != 0 {
        return Err(Error::invalid(format!(
            "{m} clusters do not divide {l} tokens; pad first"
        )));
    }
    let n = l / m;
    Ok((0..m).map(|i| i * n..(i + 1) * n).collect())
}

pub fn invert_permutation(idx: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; idx.len()];
    for (r, &t) in idx.iter().enumerate() {
        inv[t] = r;
    }
    inv
}

/// One clustering pass over `keys: [L, d]` into `m` equal clusters.
pub fn build_cluster_plan<T: Scalar>(keys: &Tensor<T>, m: usize) -> Result<ClusterPlan> {
    if keys.rank() != 2 {
        return Err(Error::shape(
            "build_cluster_plan",
            format!("expected [L, d], got {:?}", keys.shape()),
        ));
    }
    let l = keys.shape()[0];
    if m == 0 || m > l {
        return Err(Error::invalid(format!("{m} clusters for {l} tokens")));
    }
    let center = compute_center(keys)?;
    let (sim, mut idx) = similarity_rank(keys, &center, COSINE_EPS)?;
    let padded = pad_to_divisible(l, m)?;
    // dummies carry -inf similarity, so they sort to the tail in index order
    idx.extend(l..l + padded);
    let ranges = equal_partition(l + padded, m)?;
    let inv_idx = invert_permutation(&idx);
    Ok(ClusterPlan {
        sim,
        idx,
        inv_idx,
        num_clusters: ranges.len(),
        cluster_size: ranges[0].len(),
        padded,
        iterations: 1,
    })
}

/// Scatters rows from rank order back to token order, dropping dummy rows.
/// `y_sorted` has `L` or `L + padded` rows.
pub fn restore_order<T: Scalar>(y_sorted: &Tensor<T>, plan: &ClusterPlan) -> Result<Tensor<T>> {
    let l = plan.tokens();
    let rows = y_sorted.shape().first().copied().unwrap_or(0);
    if y_sorted.rank() != 2 || (rows != l && rows != l + plan.padded) {
        return Err(Error::shape(
            "restore_order",
            format!("{:?} for a plan over {l}+{} tokens", y_sorted.shape(), plan.padded),
        ));
    }
    ops::select_rows(y_sorted, &plan.inv_idx[..l])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupMode {
    /// Group `n` holds ranks `n, n + G, n + 2G, ...`.
    Interleaved,
    /// Group `n` holds ranks `[n·L/G, (n+1)·L/G)`.
    Sequential,
}

impl std::str::FromStr for GroupMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "interleaved" => Ok(GroupMode::Interleaved),
            "sequential" => Ok(GroupMode::Sequential),
            other => Err(Error::invalid(format!("unknown group mode `{other}`"))),
        }
    }
}

/// Connector grouping over a similarity ranking.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GroupPlan {
    pub num_groups: usize,
    pub group_size: usize,
    pub mode: GroupMode,
    /// Sorted-rank positions of each group.
    pub ranks: Vec<Vec<usize>>,
    /// Original token indices of each group, in the same order as `ranks`.
    pub members: Vec<Vec<usize>>,
}

impl GroupPlan {
    /// Largest minus smallest rank in each group.
    pub fn rank_spans(&self) -> Vec<usize> {
        self.ranks
            .iter()
            .map(|r| r.iter().max().unwrap() - r.iter().min().unwrap())
            .collect()
    }
}

fn group_plan(idx: &[usize], g: usize, mode: GroupMode) -> Result<GroupPlan> {
    let l = idx.len();
    if g == 0 || g > l || l % g != 0 {
        return Err(Error::invalid(format!(
            "{g} groups must be in 1..={l} and divide {l} tokens"
        )));
    }
    let size = l / g;
    let ranks: Vec<Vec<usize>> = (0..g)
        .map(|n| match mode {
            GroupMode::Interleaved => (0..size).map(|k| n + k * g).collect(),
            GroupMode::Sequential => (n * size..(n + 1) * size).collect(),
        })
        .collect();
    let members = ranks
        .iter()
        .map(|r| r.iter().map(|&k| idx[k]).collect())
        .collect();
    Ok(GroupPlan {
        num_groups: g,
        group_size: size,
        mode,
        ranks,
        members,
    })
}

/// Interleaved groups: group `n` takes every `G`-th rank starting at `n`.
pub fn build_group_plan(idx: &[usize], g: usize) -> Result<GroupPlan> {
    group_plan(idx, g, GroupMode::Interleaved)
}

/// Contiguous groups over the ranking.
pub fn sequential_group_plan(idx: &[usize], g: usize) -> Result<GroupPlan> {
    group_plan(idx, g, GroupMode::Sequential)
}

pub fn group_plan_for(idx: &[usize], g: usize, mode: GroupMode) -> Result<GroupPlan> {
    group_plan(idx, g, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(rows: &[Vec<f64>]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn center_is_mean_of_keys() {
        assert_eq!(
            compute_center(&t(&[vec![1.0, 3.0], vec![3.0, 1.0]])).unwrap().data(),
            &[2.0, 2.0]
        );
        assert_eq!(compute_center(&t(&[vec![4.0, -1.0]])).unwrap().data(), &[4.0, -1.0]);
        let mut rng = seeded(11);
        let k = Tensor::<f64>::rand_normal(&[49, 16], 1.0, &mut rng);
        let c = compute_center(&k).unwrap();
        for j in 0..16 {
            let s: f64 = (0..49).map(|i| k.get(&[i, j])).sum();
            assert!((c.data()[j] - s / 49.0).abs() < 1e-12);
        }
        assert!(compute_center(&Tensor::<f64>::zeros(&[0, 3])).is_err());
    }

    #[test]
    fn similarity_rank_examples() {
        let c = Tensor::from_f64(&[2], &[1.0, 0.0]).unwrap();
        let (sim, idx) =
            similarity_rank(&t(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]), &c, COSINE_EPS)
                .unwrap();
        assert_eq!(sim, vec![1.0, 0.0, -1.0]);
        assert_eq!(idx, vec![0, 1, 2]);

        let (sim, idx) =
            similarity_rank(&t(&[vec![0.0, 1.0], vec![2.0, 0.0]]), &c, COSINE_EPS).unwrap();
        assert_eq!(sim, vec![0.0, 1.0]);
        assert_eq!(idx, vec![1, 0]);

        let (sim, idx) =
            similarity_rank(&t(&[vec![1.0, 0.0], vec![1.0, 0.0]]), &c, COSINE_EPS).unwrap();
        assert_eq!(sim, vec![1.0, 1.0]);
        assert_eq!(idx, vec![0, 1]);
    }

    #[test]
    fn zero_norm_rows_score_zero() {
        let c = Tensor::from_f64(&[2], &[1.0, 1.0]).unwrap();
        let (sim, _) =
            similarity_rank(&t(&[vec![0.0, 0.0], vec![1.0, 1.0]]), &c, COSINE_EPS).unwrap();
        assert_eq!(sim[0], 0.0);
        let zero = Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let (sim, _) = similarity_rank(&t(&[vec![3.0, 1.0]]), &zero, COSINE_EPS).unwrap();
        assert_eq!(sim, vec![0.0]);
    }

    #[test]
    fn equal_partition_examples() {
        let r = equal_partition(196, 4).unwrap();
        assert_eq!(r.len(), 4);
        assert!(r.iter().all(|c| c.len() == 49));
        assert_eq!(equal_partition(8, 1).unwrap(), vec![0..8]);
        assert_eq!(equal_partition(6, 3).unwrap(), vec![0..2, 2..4, 4..6]);
        assert!(equal_partition(10, 4).is_err());
        assert!(equal_partition(3, 4).is_err());
        assert!(equal_partition(3, 0).is_err());
    }

    #[test]
    fn padding_examples() {
        assert_eq!(pad_to_divisible(196, 4).unwrap(), 0);
        assert_eq!(pad_to_divisible(10, 4).unwrap(), 2);
        assert!(pad_to_divisible(10, 0).is_err());

        let mut rng = seeded(12);
        let k = Tensor::<f64>::rand_normal(&[10, 3], 1.0, &mut rng);
        let plan = build_cluster_plan(&k, 4).unwrap();
        plan.validate().unwrap();
        assert_eq!(plan.padded, 2);
        assert_eq!(plan.cluster_size, 3);
        assert_eq!(&plan.idx[10..], &[10, 11]);
    }

    #[test]
    fn identical_tokens_split_by_index() {
        let k = t(&vec![vec![1.0, 2.0]; 4]);
        let plan = build_cluster_plan(&k, 2).unwrap();
        assert_eq!(plan.members(0), &[0, 1]);
        assert_eq!(plan.members(1), &[2, 3]);
        assert_eq!(plan.iterations, 1);
    }

    #[test]
    fn closer_pair_lands_in_first_cluster() {
        // pair A near the mean direction, pair B further off; brute-force the
        // cosines to confirm the expectation
        let rows = vec![
            vec![1.0, 0.2],
            vec![1.0, -0.2],
            vec![0.3, 1.0],
            vec![0.3, -1.0],
        ];
        let mean = [(1.0 + 1.0 + 0.3 + 0.3) / 4.0, 0.0];
        let cos = |r: &Vec<f64>| {
            (r[0] * mean[0] + r[1] * mean[1])
                / ((r[0] * r[0] + r[1] * r[1]).sqrt() * (mean[0] * mean[0] + mean[1] * mean[1]).sqrt())
        };
        assert!(cos(&rows[0]) > cos(&rows[2]));
        let plan = build_cluster_plan(&t(&rows), 2).unwrap();
        let mut c0 = plan.members(0).to_vec();
        c0.sort();
        assert_eq!(c0, vec![0, 1]);
    }

    #[test]
    fn cluster_plan_rejects_bad_counts() {
        let k = Tensor::<f64>::ones(&[3, 2]);
        assert!(build_cluster_plan(&k, 0).is_err());
        assert!(build_cluster_plan(&k, 4).is_err());
    }

    #[test]
    fn stage_cluster_counts_divide_secvit_token_grids() {
        // 224 input: stage grids 56, 28, 14, 7
        for (side, m) in [(56usize, 32usize), (28, 8), (14, 2), (7, 1)] {
            let mut rng = seeded(side as u64);
            let k = Tensor::<f64>::rand_normal(&[side * side, 4], 1.0, &mut rng);
            let plan = build_cluster_plan(&k, m).unwrap();
            assert_eq!(plan.padded, 0);
            assert_eq!(plan.num_clusters, m);
            assert_eq!(plan.cluster_size, side * side / m);
        }
    }

    #[test]
    fn group_plan_examples() {
        let id: Vec<usize> = (0..6).collect();
        let g = build_group_plan(&id, 3).unwrap();
        assert_eq!(g.ranks, vec![vec![0, 3], vec![1, 4], vec![2, 5]]);
        let s = sequential_group_plan(&id, 3).unwrap();
        assert_eq!(s.ranks, vec![vec![0, 1], vec![2, 3], vec![4, 5]]);
        assert_eq!(
            build_group_plan(&id, 6).unwrap().ranks,
            sequential_group_plan(&id, 6).unwrap().ranks
        );

        let big: Vec<usize> = (0..576).rev().collect();
        let g = build_group_plan(&big, 288).unwrap();
        assert_eq!(g.num_groups, 288);
        assert!(g.members.iter().all(|m| m.len() == 2));
        assert_eq!(g.members[0], vec![575, 287]);
        let s = sequential_group_plan(&big, 288).unwrap();
        assert!(s.rank_spans().iter().all(|&sp| sp == 1));

        let eight: Vec<usize> = vec![3, 1, 4, 0, 7, 5, 2, 6];
        let one = build_group_plan(&eight, 1).unwrap();
        assert_eq!(one.members, vec![eight.clone()]);

        assert!(build_group_plan(&id, 4).is_err());
        assert!(build_group_plan(&id, 0).is_err());
    }

    #[test]
    fn restore_order_inverts_gather() {
        let mut rng = seeded(13);
        let k = Tensor::<f64>::rand_normal(&[12, 3], 1.0, &mut rng);
        let x = Tensor::<f64>::rand_normal(&[12, 5], 1.0, &mut rng);
        let plan = build_cluster_plan(&k, 3).unwrap();
        let sorted = ops::gather_rows(&x, &plan.idx).unwrap();
        assert_eq!(restore_order(&sorted, &plan).unwrap(), x);

        let padded = build_cluster_plan(&k, 5).unwrap();
        let xp = ops::pad_rows(&x, padded.padded).unwrap();
        let sorted = ops::gather_rows(&xp, &padded.idx).unwrap();
        assert_eq!(restore_order(&sorted, &padded).unwrap(), x);
        assert!(restore_order(&Tensor::<f64>::zeros(&[11, 5]), &plan).is_err());
    }
}
