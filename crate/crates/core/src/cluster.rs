//! Activation ranges: 1-D K-Means over a neuron's non-zero activations, and
//! the single top-quantile range used by the classic dissection methods.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::store::ActivationArchive;

pub const DEFAULT_N_CLUSTERS: usize = 5;
pub const DEFAULT_RESTARTS: usize = 8;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOP_QUANTILE: f64 = 0.005;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClusterError {
    #[error("need at least {needed} distinct values, found {found}")]
    TooFewDistinctValues { needed: usize, found: usize },
    #[error("number of clusters must be at least 1")]
    ZeroClusters,
    #[error("neuron {neuron} out of range ({n_neurons} neurons)")]
    NeuronOutOfRange { neuron: usize, n_neurons: usize },
    #[error("quantile must lie in (0, 1), got {0}")]
    InvalidQuantile(f64),
}

/// Inclusive activation range `[lo, hi]`; `hi` may be `+inf`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdInterval {
    pub lo: f64,
    pub hi: f64,
}

impl ThresholdInterval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(lo <= hi);
        ThresholdInterval { lo, hi }
    }

    pub fn contains(&self, v: f64) -> bool {
        self.lo <= v && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub neuron: usize,
    pub n_cls: usize,
    /// Ascending and pairwise disjoint.
    pub intervals: Vec<ThresholdInterval>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub restarts: usize,
    pub max_iters: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { restarts: DEFAULT_RESTARTS, max_iters: DEFAULT_MAX_ITERS }
    }
}

/// Result of [`kmeans_1d`]. Clusters are contiguous runs of the sorted input.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    sorted: Vec<f64>,
    /// `bounds[j]..bounds[j + 1]` indexes cluster `j` in `sorted`.
    bounds: Vec<usize>,
    pub centroids: Vec<f64>,
    pub wcss: f64,
}

impl KMeans1d {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn cluster(&self, j: usize) -> &[f64] {
        &self.sorted[self.bounds[j]..self.bounds[j + 1]]
    }

    pub fn clusters(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.k()).map(|j| self.cluster(j))
    }
}

fn count_distinct(sorted: &[f64]) -> usize {
    if sorted.is_empty() {
        return 0;
    }
    1 + sorted.windows(2).filter(|w| w[0] != w[1]).count()
}

fn segment_wcss(seg: &[f64]) -> f64 {
    if seg.is_empty() {
        return 0.0;
    }
    let mean = seg.iter().sum::<f64>() / seg.len() as f64;
    seg.iter().map(|v| (v - mean) * (v - mean)).sum()
}

/// Lloyd's algorithm on scalars with k-means++ seeding, best of `restarts`
/// runs by within-cluster sum of squares.
///
/// Works on the sorted values: in one dimension the nearest-centroid cells are
/// intervals, so each assignment step is `k` binary searches and each update
/// step reads prefix sums. Values equal to a cell midpoint go to the lower
/// centroid, so equal values always share a cluster.
///
/// Lloyd can stall in a local optimum, so the result is finally compared
/// against the exact dynamic-programming partition and replaced when that one
/// has strictly lower WCSS.
pub fn kmeans_1d(values: &[f64], k: usize, seed: u64, cfg: KMeansConfig) -> Result<KMeans1d, ClusterError> {
    if k == 0 {
        return Err(ClusterError::ZeroClusters);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = count_distinct(&sorted);
    if distinct < k {
        return Err(ClusterError::TooFewDistinctValues { needed: k, found: distinct });
    }

    let mut prefix = Vec::with_capacity(sorted.len() + 1);
    prefix.push(0.0f64);
    let mut acc = 0.0;
    for v in &sorted {
        acc += v;
        prefix.push(acc);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<usize>, Vec<f64>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let init = kmeanspp_init(&sorted, k, &mut rng);
        let (bounds, centroids) = lloyd(&sorted, &prefix, init, cfg.max_iters);
        let wcss: f64 = (0..k).map(|j| segment_wcss(&sorted[bounds[j]..bounds[j + 1]])).sum();
        if best.as_ref().is_none_or(|(w, _, _)| wcss < *w) {
            best = Some((wcss, bounds, centroids));
        }
    }
    let (mut wcss, mut bounds, mut centroids) = best.expect("at least one restart");
    let exact = optimal_bounds(&sorted, k);
    let exact_wcss: f64 = (0..k).map(|j| segment_wcss(&sorted[exact[j]..exact[j + 1]])).sum();
    if exact_wcss < wcss {
        centroids =
            (0..k).map(|j| (prefix[exact[j + 1]] - prefix[exact[j]]) / (exact[j + 1] - exact[j]) as f64).collect();
        bounds = exact;
        wcss = exact_wcss;
    }
    Ok(KMeans1d { sorted, bounds, centroids, wcss })
}

/// Globally optimal contiguous partition of `sorted` into `k` non-empty
/// clusters, never splitting runs of equal values.
///
/// Dynamic programme over the distinct values with the divide-and-conquer
/// speed-up (the optimal split point is monotone in the prefix length), so
/// the cost is `O(k d log d)` for `d` distinct values.
fn optimal_bounds(sorted: &[f64], k: usize) -> Vec<usize> {
    let mut starts: Vec<usize> = (0..sorted.len()).filter(|&i| i == 0 || sorted[i] != sorted[i - 1]).collect();
    starts.push(sorted.len());
    let d = starts.len() - 1;
    let mut p1 = vec![0.0f64; sorted.len() + 1];
    let mut p2 = vec![0.0f64; sorted.len() + 1];
    for (i, v) in sorted.iter().enumerate() {
        p1[i + 1] = p1[i] + v;
        p2[i + 1] = p2[i] + v * v;
    }
    let cost = |a: usize, b: usize| {
        let (lo, hi) = (starts[a], starts[b]);
        let n = (hi - lo) as f64;
        let s = p1[hi] - p1[lo];
        (p2[hi] - p2[lo] - s * s / n).max(0.0)
    };

    let mut prev: Vec<f64> = (0..=d).map(|i| if i == 0 { 0.0 } else { cost(0, i) }).collect();
    let mut args: Vec<Vec<usize>> = Vec::with_capacity(k);
    args.push(vec![0; d + 1]);
    for j in 2..=k {
        let mut cur = vec![f64::INFINITY; d + 1];
        let mut arg = vec![0usize; d + 1];
        // (i range, split range) work items
        let mut stack = vec![(j, d, j - 1, d - 1)];
        while let Some((lo, hi, opt_lo, opt_hi)) = stack.pop() {
            if lo > hi {
                continue;
            }
            let mid = (lo + hi) / 2;
            let mut best = (f64::INFINITY, opt_lo);
            for (t, &p) in prev.iter().enumerate().take(opt_hi.min(mid - 1) + 1).skip(opt_lo) {
                let c = p + cost(t, mid);
                if c < best.0 {
                    best = (c, t);
                }
            }
            cur[mid] = best.0;
            arg[mid] = best.1;
            if mid > lo {
                stack.push((lo, mid - 1, opt_lo, best.1));
            }
            stack.push((mid + 1, hi, best.1, opt_hi));
        }
        prev = cur;
        args.push(arg);
    }

    let mut cuts = vec![d];
    let mut i = d;
    for j in (1..k).rev() {
        i = args[j][i];
        cuts.push(i);
    }
    cuts.push(0);
    cuts.reverse();
    cuts.dedup();
    cuts.into_iter().map(|g| starts[g]).collect()
}

fn kmeanspp_init(sorted: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = sorted.len();
    let mut centroids = vec![sorted[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = sorted.iter().map(|v| (v - centroids[0]).powi(2)).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && *d > 0.0 {
                    idx = i;
                    break;
                }
            }
            // floating round-off can leave `idx` on an already chosen value
            if d2[idx] == 0.0 {
                idx = d2.iter().rposition(|&d| d > 0.0).expect("distinct >= k");
            }
            idx
        } else {
            unreachable!("fewer distinct values than clusters")
        };
        let c = sorted[pick];
        centroids.push(c);
        for (d, v) in d2.iter_mut().zip(sorted) {
            *d = d.min((v - c).powi(2));
        }
    }
    centroids.sort_by(f64::total_cmp);
    centroids
}

fn assign(sorted: &[f64], centroids: &[f64]) -> Vec<usize> {
    let k = centroids.len();
    let mut bounds = Vec::with_capacity(k + 1);
    bounds.push(0);
    for j in 0..k - 1 {
        let mid = 0.5 * (centroids[j] + centroids[j + 1]);
        let lo = *bounds.last().unwrap();
        bounds.push(lo + sorted[lo..].partition_point(|&v| v <= mid));
    }
    bounds.push(sorted.len());
    bounds
}

fn lloyd(sorted: &[f64], prefix: &[f64], mut centroids: Vec<f64>, max_iters: usize) -> (Vec<usize>, Vec<f64>) {
    let k = centroids.len();
    let mut bounds = assign(sorted, &centroids);
    for _ in 0..max_iters {
        let mut empties = vec![];
        for j in 0..k {
            let (a, b) = (bounds[j], bounds[j + 1]);
            if a < b {
                centroids[j] = (prefix[b] - prefix[a]) / (b - a) as f64;
            } else {
                empties.push(j);
            }
        }
        // reseed each empty centroid at the value farthest from its centroid;
        // in 1-D that is always a segment endpoint
        for &e in &empties {
            let mut far: Option<(f64, f64)> = None;
            for j in (0..k).filter(|j| !empties.contains(j)) {
                let (a, b) = (bounds[j], bounds[j + 1]);
                for v in [sorted[a], sorted[b - 1]] {
                    let d = (v - centroids[j]).abs();
                    if d > 0.0 && !centroids.contains(&v) && far.is_none_or(|(fd, _)| d > fd) {
                        far = Some((d, v));
                    }
                }
            }
            if let Some((_, v)) = far {
                centroids[e] = v;
            }
        }
        centroids.sort_by(f64::total_cmp);
        let next = assign(sorted, &centroids);
        if next == bounds && empties.is_empty() {
            break;
        }
        bounds = next;
    }
    for j in 0..k {
        let (a, b) = (bounds[j], bounds[j + 1]);
        if a < b {
            centroids[j] = (prefix[b] - prefix[a]) / (b - a) as f64;
        }
    }
    (bounds, centroids)
}

/// Non-zero activations of `neuron`, widened to `f64`.
pub fn nonzero_activations(archive: &ActivationArchive, neuron: usize) -> Vec<f64> {
    archive.neuron_values(neuron).filter(|&v| v != 0.0).map(f64::from).collect()
}

/// Cluster a neuron's non-zero activations into `n_cls` disjoint intervals
/// `[min(cluster), max(cluster)]`, ascending.
pub fn cluster_thresholds(
    archive: &ActivationArchive,
    neuron: usize,
    n_cls: usize,
    seed: u64,
    cfg: KMeansConfig,
) -> Result<ClusterSet, ClusterError> {
    if neuron >= archive.n_neurons() {
        return Err(ClusterError::NeuronOutOfRange { neuron, n_neurons: archive.n_neurons() });
    }
    let values = nonzero_activations(archive, neuron);
    let km = kmeans_1d(&values, n_cls, seed, cfg)?;
    let intervals =
        km.clusters().filter(|c| !c.is_empty()).map(|c| ThresholdInterval::new(c[0], c[c.len() - 1])).collect();
    Ok(ClusterSet { neuron, n_cls, intervals })
}

/// `[v, +inf)` with `v` the `(1 - q)` quantile of all activations of `neuron`,
/// linearly interpolated between order statistics.
pub fn quantile_interval(
    archive: &ActivationArchive,
    neuron: usize,
    q: f64,
) -> Result<ThresholdInterval, ClusterError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(ClusterError::InvalidQuantile(q));
    }
    if neuron >= archive.n_neurons() {
        return Err(ClusterError::NeuronOutOfRange { neuron, n_neurons: archive.n_neurons() });
    }
    let mut values: Vec<f64> = archive.neuron_values(neuron).map(f64::from).collect();
    values.sort_by(f64::total_cmp);
    Ok(ThresholdInterval::new(interpolated_quantile(&values, 1.0 - q), f64::INFINITY))
}

fn interpolated_quantile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Exhaustive optimum over contiguous partitions of the sorted values that
    /// never split a run of equal values.
    fn exhaustive_wcss(values: &[f64], k: usize) -> f64 {
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let cuts: Vec<usize> = (1..sorted.len()).filter(|&i| sorted[i] != sorted[i - 1]).collect();
        fn rec(sorted: &[f64], cuts: &[usize], start: usize, k: usize, from_cut: usize) -> f64 {
            if k == 1 {
                return segment_wcss(&sorted[start..]);
            }
            let mut best = f64::INFINITY;
            for ci in from_cut..cuts.len() {
                let c = cuts[ci];
                let v = segment_wcss(&sorted[start..c]) + rec(sorted, cuts, c, k - 1, ci + 1);
                best = best.min(v);
            }
            best
        }
        rec(&sorted, &cuts, 0, k, 0)
    }

    fn archive_from(values: &[f32]) -> ActivationArchive {
        ActivationArchive::new(1, 1, 1, values.len(), "t", values.to_vec()).unwrap()
    }

    #[test]
    fn two_clear_clusters() {
        let v = [0.1, 0.11, 0.9, 0.91];
        let km = kmeans_1d(&v, 2, 7, KMeansConfig::default()).unwrap();
        assert_eq!(km.cluster(0), &[0.1, 0.11]);
        assert_eq!(km.cluster(1), &[0.9, 0.91]);
        assert!((km.wcss - exhaustive_wcss(&v, 2)).abs() < 1e-12);
    }

    #[test]
    fn trivial_k() {
        let v = [3.0, 1.0, 2.0, 2.0];
        let km = kmeans_1d(&v, 1, 0, KMeansConfig::default()).unwrap();
        assert_eq!(km.cluster(0), &[1.0, 2.0, 2.0, 3.0]);
        let km = kmeans_1d(&[1.0, 2.0], 2, 0, KMeansConfig::default()).unwrap();
        assert_eq!(km.cluster(0), &[1.0]);
        assert_eq!(km.cluster(1), &[2.0]);
        assert_eq!(
            kmeans_1d(&[1.0, 1.0], 2, 0, KMeansConfig::default()),
            Err(ClusterError::TooFewDistinctValues { needed: 2, found: 1 })
        );
    }

    #[test]
    fn five_pairs() {
        let vals = [1.0f32, 1.0, 2.0, 2.0, 9.0, 9.0, 10.0, 10.0, 20.0, 20.0, 0.0, 0.0];
        let a = archive_from(&vals);
        let nz: Vec<f64> = vals.iter().filter(|&&v| v != 0.0).map(|&v| v as f64).collect();
        let set = cluster_thresholds(&a, 0, 5, 3, KMeansConfig::default()).unwrap();
        let expected: Vec<_> = [1.0, 2.0, 9.0, 10.0, 20.0].iter().map(|&v| ThresholdInterval::new(v, v)).collect();
        assert_eq!(set.intervals, expected);
        // k = 5 on 5 distinct values: the exhaustive optimum is the zero-cost split
        assert_eq!(exhaustive_wcss(&nz, 5), 0.0);
    }

    #[test]
    fn constant_and_too_few() {
        let a = archive_from(&[0.0, 4.5, 4.5, 0.0]);
        let set = cluster_thresholds(&a, 0, 1, 0, KMeansConfig::default()).unwrap();
        assert_eq!(set.intervals, vec![ThresholdInterval::new(4.5, 4.5)]);
        assert!(matches!(
            cluster_thresholds(&a, 0, 2, 0, KMeansConfig::default()),
            Err(ClusterError::TooFewDistinctValues { needed: 2, found: 1 })
        ));
        assert!(matches!(
            cluster_thresholds(&a, 1, 1, 0, KMeansConfig::default()),
            Err(ClusterError::NeuronOutOfRange { .. })
        ));
    }

    #[test]
    fn quantiles() {
        let vals: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        let a = archive_from(&vals);
        let iv = quantile_interval(&a, 0, 0.5).unwrap();
        assert_eq!(iv.lo, 50.5);
        assert_eq!(iv.hi, f64::INFINITY);
        let near_all = quantile_interval(&a, 0, 1.0 - 1e-12).unwrap();
        assert!(near_all.lo <= 1.0 + 1e-6);
        let c = archive_from(&[2.5; 9]);
        assert_eq!(quantile_interval(&c, 0, 0.005).unwrap().lo, 2.5);
        assert!(quantile_interval(&c, 0, 0.0).is_err());
        assert!(quantile_interval(&c, 0, 1.0).is_err());
    }

    #[test]
    fn negatives_are_kept() {
        let a = archive_from(&[-1.0, 0.0, 1.0]);
        assert_eq!(nonzero_activations(&a, 0), vec![-1.0, 1.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(200))]

            #[test]
            fn matches_exhaustive_on_few_distinct(
                raw in proptest::collection::vec(0u32..12, 2..30),
                scale in 0.1f64..10.0,
                k in 1usize..6,
                seed in any::<u64>(),
            ) {
                // up to 12 distinct values with repeats
                let values: Vec<f64> = raw.iter().map(|&v| (v as f64 + 1.0) * scale + (v as f64).powi(2) * 0.01).collect();
                let mut s = values.clone();
                s.sort_by(f64::total_cmp);
                prop_assume!(count_distinct(&s) >= k);
                let km = kmeans_1d(&values, k, seed, KMeansConfig { restarts: 16, max_iters: 100 }).unwrap();
                let opt = exhaustive_wcss(&values, k);
                prop_assert!((km.wcss - opt).abs() <= 1e-9, "kmeans {} vs optimum {}", km.wcss, opt);
            }

            #[test]
            fn coverage_and_disjointness(
                raw in proptest::collection::vec(-50i32..50, 5..200),
                k in 1usize..6,
                seed in any::<u64>(),
            ) {
                let vals: Vec<f32> = raw.iter().map(|&v| v as f32 * 0.25).collect();
                let a = archive_from(&vals);
                let nz = nonzero_activations(&a, 0);
                let mut s = nz.clone();
                s.sort_by(f64::total_cmp);
                prop_assume!(count_distinct(&s) >= k);
                let set = cluster_thresholds(&a, 0, k, seed, KMeansConfig::default()).unwrap();
                prop_assert_eq!(set.intervals.len(), k);
                for w in set.intervals.windows(2) {
                    prop_assert!(w[0].hi < w[1].lo);
                }
                for v in nz {
                    prop_assert_eq!(set.intervals.iter().filter(|iv| iv.contains(v)).count(), 1);
                }
                let again = cluster_thresholds(&a, 0, k, seed, KMeansConfig::default()).unwrap();
                prop_assert_eq!(again, set);
            }
        }
    }
}
