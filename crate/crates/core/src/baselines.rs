//! Reference token partitioners and partition quality metrics.
//!
//! Spatial windows ignore content, k-means groups by content but
//! iterates and produces uneven groups, and the similarity-ranked equal
//! split from [`crate::sec`] does neither.

use std::time::Instant;

use rand::seq::index::sample;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::rng;
use crate::sec::{build_cluster_plan, COSINE_EPS};
use crate::tensor::{Scalar, Tensor};

/// Column order of partition metric CSV rows.
pub const CSV_HEADER: [&str; 8] = [
    "strategy",
    "L",
    "d",
    "groups",
    "balance",
    "purity",
    "iterations",
    "wall_ns",
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub assignment: Vec<usize>,
    pub num_groups: usize,
    pub iterations: usize,
}

impl Partition {
    pub fn new(assignment: Vec<usize>, num_groups: usize, iterations: usize) -> Result<Self> {
        if let Some(&g) = assignment.iter().find(|&&g| g >= num_groups) {
            return Err(Error::invalid(format!("group {g} outside 0..{num_groups}")));
        }
        Ok(Partition {
            assignment,
            num_groups,
            iterations,
        })
    }

    pub fn group_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.num_groups];
        for &g in &self.assignment {
            sizes[g] += 1;
        }
        sizes
    }

    /// Largest over smallest group size; infinite if a group is empty.
    pub fn balance(&self) -> f64 {
        let sizes = self.group_sizes();
        let (lo, hi) = (
            sizes.iter().copied().min().unwrap_or(0),
            sizes.iter().copied().max().unwrap_or(0),
        );
        if lo == 0 {
            f64::INFINITY
        } else {
            hi as f64 / lo as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PartitionMetrics {
    pub balance: f64,
    pub purity: f64,
    pub iterations: usize,
    pub wall_ns: u128,
}

/// Token `(r, c)` of an `h × w` grid goes to window `(r / win)·(w / win) + c / win`.
pub fn window_partition(h: usize, w: usize, win: usize) -> Result<Partition> {
    if win == 0 || h == 0 || w == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::invalid(format!(
            "window {win} does not tile a {h}×{w} grid"
        )));
    }
    let per_row = w / win;
    let assignment = (0..h * w)
        .map(|t| (t / w / win) * per_row + (t % w) / win)
        .collect();
    Partition::new(assignment, (h / win) * per_row, 0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    /// `1 − cos(x, c)`.
    Cosine,
    /// Squared Euclidean.
    Euclidean,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Distance::Cosine),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(Error::invalid(format!("unknown distance `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct KMeansOptions {
    pub k: usize,
    pub max_iter: usize,
    pub seed: u64,
    pub distance: Distance,
}

impl KMeansOptions {
    pub fn new(k: usize, seed: u64) -> Self {
        KMeansOptions {
            k,
            max_iter: 50,
            seed,
            distance: Distance::Cosine,
        }
    }
}

/// `k` distinct token indices drawn from `seed`, used as initial centroids.
pub fn kmeans_init(l: usize, k: usize, seed: u64) -> Vec<usize> {
    sample(&mut rng::seeded(seed), l, k).into_vec()
}

fn distance(kind: Distance, x: &[f64], c: &[f64]) -> f64 {
    match kind {
        Distance::Euclidean => x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum(),
        Distance::Cosine => {
            let dot: f64 = x.iter().zip(c).map(|(a, b)| a * b).sum();
            let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nc = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            1.0 - dot / (nx * nc).max(COSINE_EPS)
        }
    }
}

/// Lloyd's algorithm.
///
/// `iterations` counts assignment passes, including the final pass that
/// finds the assignment unchanged; a run stopped by `max_iter` reports
/// `max_iter`. Ties go to the lower centroid index. A cluster left empty
/// after an update takes the token farthest from its own centroid.
pub fn kmeans_cluster<T: Scalar>(x: &Tensor<T>, opts: &KMeansOptions) -> Result<Partition> {
    if x.rank() != 2 {
        return Err(Error::shape(
            "kmeans_cluster",
            format!("expected [L, d], got {:?}", x.shape()),
        ));
    }
    let (l, d) = (x.shape()[0], x.shape()[1]);
    if opts.k == 0 || opts.k > l {
        return Err(Error::invalid(format!("k = {} for {l} tokens", opts.k)));
    }
    if opts.max_iter == 0 {
        return Err(Error::invalid("max_iter must be at least 1"));
    }
    let pts: Vec<f64> = x.to_f64_vec();
    let row = |i: usize| &pts[i * d..(i + 1) * d];
    let mut centroids: Vec<Vec<f64>> = kmeans_init(l, opts.k, opts.seed)
        .into_iter()
        .map(|i| row(i).to_vec())
        .collect();
    let mut assignment: Option<Vec<usize>> = None;
    let mut iterations = 0;
    while iterations < opts.max_iter {
        iterations += 1;
        let next: Vec<usize> = (0..l)
            .map(|i| {
                let mut best = (0, f64::INFINITY);
                for (c, cen) in centroids.iter().enumerate() {
                    let dist = distance(opts.distance, row(i), cen);
                    if dist < best.1 {
                        best = (c, dist);
                    }
                }
                best.0
            })
            .collect();
        if assignment.as_ref() == Some(&next) {
            break;
        }
        let mut sums = vec![vec![0.0; d]; opts.k];
        let mut counts = vec![0usize; opts.k];
        for (i, &c) in next.iter().enumerate() {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..opts.k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        for c in 0..opts.k {
            if counts[c] == 0 {
                let far = (0..l)
                    .map(|i| (i, distance(opts.distance, row(i), &centroids[next[i]])))
                    .fold((0, f64::NEG_INFINITY), |a, b| if b.1 > a.1 { b } else { a })
                    .0;
                centroids[c] = row(far).to_vec();
            }
        }
        assignment = Some(next);
    }
    Partition::new(assignment.expect("at least one pass"), opts.k, iterations)
}

/// Similarity-ranked equal split; always a single pass.
pub fn sec_partition<T: Scalar>(keys: &Tensor<T>, m: usize) -> Result<Partition> {
    let plan = build_cluster_plan(keys, m)?;
    Partition::new(plan.assignment(), plan.num_clusters, plan.iterations)
}

/// Fraction of same-label token pairs that share a group. Zero when no such
/// pair is co-grouped, including when there are no same-label pairs.
pub fn pairwise_purity(assignment: &[usize], labels: &[usize]) -> f64 {
    use std::collections::HashMap;
    let mut by_label: HashMap<usize, u64> = HashMap::new();
    let mut by_both: HashMap<(usize, usize), u64> = HashMap::new();
    for (&g, &y) in assignment.iter().zip(labels) {
        *by_label.entry(y).or_default() += 1;
        *by_both.entry((g, y)).or_default() += 1;
    }
    let pairs = |n: u64| n * n.saturating_sub(1) / 2;
    let total: u64 = by_label.values().map(|&n| pairs(n)).sum();
    let together: u64 = by_both.values().map(|&n| pairs(n)).sum();
    if together == 0 {
        0.0
    } else {
        together as f64 / total as f64
    }
}

pub fn score_partition(p: &Partition, labels: &[usize], wall_ns: u128) -> Result<PartitionMetrics> {
    if labels.len() != p.assignment.len() {
        return Err(Error::invalid(format!(
            "{} labels for {} tokens",
            labels.len(),
            p.assignment.len()
        )));
    }
    Ok(PartitionMetrics {
        balance: p.balance(),
        purity: pairwise_purity(&p.assignment, labels),
        iterations: p.iterations,
        wall_ns,
    })
}

/// Runs `f` and returns its result with the elapsed nanoseconds.
pub fn timed<R>(f: impl FnOnce() -> R) -> (R, u128) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_nanos())
}

/// Tokens whose cosine to a hidden direction falls in one of `bands` disjoint
/// bands inside `[0.05, 0.95]`; the band is the planted label. Labels are
/// balanced, norms are random and the token order is shuffled.
pub fn planted_bands(l: usize, d: usize, bands: usize, seed: u64) -> Result<(Tensor<f64>, Vec<usize>)> {
    if bands == 0 || d < 2 || l < bands {
        return Err(Error::invalid("need d >= 2 and at least one token per band"));
    }
    let mut rng = rng::seeded(seed);
    let mut gauss = |n: usize| -> Vec<f64> { (0..n).map(|_| StandardNormal.sample(&mut rng)).collect() };
    let normalize = |v: &mut Vec<f64>| {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        v.iter_mut().for_each(|a| *a /= n);
    };
    let mut u = gauss(d);
    normalize(&mut u);
    let mut labels: Vec<usize> = (0..l).map(|i| i % bands).collect();
    {
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng::substream(seed, 1));
    }
    let width = 0.9 / bands as f64;
    let mut jitter = rng::substream(seed, 2);
    let mut data = Vec::with_capacity(l * d);
    for &b in &labels {
        let centre = 0.95 - width * (b as f64 + 0.5);
        let c = centre + jitter.random_range(-0.3..0.3) * width;
        let mut v = gauss(d);
        let along: f64 = v.iter().zip(&u).map(|(a, b)| a * b).sum();
        v.iter_mut().zip(&u).for_each(|(a, b)| *a -= along * b);
        normalize(&mut v);
        let s = (1.0 - c * c).sqrt();
        let scale = jitter.random_range(0.5..2.0);
        data.extend(u.iter().zip(&v).map(|(a, b)| scale * (c * a + s * b)));
    }
    Ok((Tensor::new(&[l, d], data)?, labels))
}
