//! Lloyd's K-Means, the Rand Index, top-1 nearest-neighbour F1 and cluster
//! occupancy statistics.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{dot, map_indexed, norm, sq_dist};
use crate::tensor::Tensor;

/// Cluster labels, one per sample. Label values need not be contiguous.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Partition {
    pub labels: Vec<usize>,
}

impl Partition {
    pub fn new(labels: Vec<usize>) -> Self {
        Self { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self::new(indices.iter().map(|&i| self.labels[i]).collect())
    }
}

impl From<Vec<usize>> for Partition {
    fn from(labels: Vec<usize>) -> Self {
        Self::new(labels)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub centroids: Tensor,
    pub labels: Partition,
    pub inertia: f64,
    /// Number of centroid updates performed.
    pub iterations_run: usize,
    /// Inertia after every assignment step, first to last.
    pub inertia_history: Vec<f64>,
}

/// Index of the nearest centroid and the squared distance to it. Ties go to
/// the lowest index.
fn nearest(x: &[f64], centroids: &Tensor) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(j));
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn kmeans_pp(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<f64> = map_indexed(n, |i| sq_dist(x.row(i), x.row(chosen[0])));
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..n)
        };
        chosen.push(next);
        let c = x.row(next);
        let fresh: Vec<f64> = map_indexed(n, |i| sq_dist(x.row(i), c));
        for (old, new) in dist.iter_mut().zip(fresh) {
            *old = old.min(new);
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &i in &chosen {
        data.extend_from_slice(x.row(i));
    }
    Tensor::matrix(k, d, data).expect("centroid shape")
}

/// Seeded k-means++ initialisation followed by Lloyd iterations until the
/// assignment stops changing or `max_iters` updates have run. A cluster left
/// empty by an update is moved onto the sample farthest from its own centroid.
pub fn kmeans(x: &Tensor, k: usize, max_iters: usize, seed: u64) -> Result<KMeansResult> {
    if !x.is_matrix() {
        return Err(Error::shape("kmeans", format!("expected a matrix, got {:?}", x.shape())));
    }
    let (n, d) = (x.rows(), x.cols());
    if k == 0 || k > n {
        return Err(Error::Param(format!("kmeans needs 1 <= k <= N, got k={k}, N={n}")));
    }
    if max_iters == 0 {
        return Err(Error::Param("kmeans needs max_iters >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(x, k, &mut rng);
    let mut labels: Vec<usize> = Vec::new();
    let mut history = Vec::new();
    let mut iterations = 0;

    loop {
        let assigned = map_indexed(n, |i| nearest(x.row(i), &centroids));
        let inertia: f64 = assigned.iter().map(|&(_, dd)| dd).sum();
        history.push(inertia);
        let next: Vec<usize> = assigned.iter().map(|&(j, _)| j).collect();
        let converged = next == labels;
        labels = next;
        if converged || iterations == max_iters {
            return Ok(KMeansResult {
                centroids,
                labels: Partition::new(labels),
                inertia,
                iterations_run: iterations,
                inertia_history: history,
            });
        }

        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &j) in labels.iter().enumerate() {
            counts[j] += 1;
            for (s, v) in sums[j * d..(j + 1) * d].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let c = counts[j] as f64;
                for (o, s) in centroids.row_mut(j).iter_mut().zip(&sums[j * d..(j + 1) * d]) {
                    *o = s / c;
                }
            }
        }
        // empty clusters jump to the samples farthest from their updated centroid
        let mut taken = vec![false; n];
        for j in (0..k).filter(|&j| counts[j] == 0) {
            let mut far = (usize::MAX, -1.0);
            for i in (0..n).filter(|&i| !taken[i]) {
                let dd = sq_dist(x.row(i), centroids.row(labels[i]));
                if dd > far.1 {
                    far = (i, dd);
                }
            }
            if far.0 == usize::MAX {
                break;
            }
            taken[far.0] = true;
            let point = x.row(far.0).to_vec();
            centroids.row_mut(j).copy_from_slice(&point);
        }
        iterations += 1;
    }
}

fn pairs(n: usize) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Fraction of sample pairs on which the two partitions agree (together in
/// both, or apart in both).
pub fn rand_index(a: &Partition, b: &Partition) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "rand_index",
            format!("partitions have {} and {} samples", a.len(), b.len()),
        ));
    }
    let n = a.len();
    if n < 2 {
        return Err(Error::Param(format!("rand_index needs at least 2 samples, got {n}")));
    }
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&x, &y) in a.labels.iter().zip(&b.labels) {
        *joint.entry((x, y)).or_default() += 1;
        *ca.entry(x).or_default() += 1;
        *cb.entry(y).or_default() += 1;
    }
    let both: u128 = joint.values().map(|&c| pairs(c)).sum();
    let in_a: u128 = ca.values().map(|&c| pairs(c)).sum();
    let in_b: u128 = cb.values().map(|&c| pairs(c)).sum();
    let total = pairs(n);
    // together in both + apart in both
    let agree = both + (total + both - in_a - in_b);
    Ok(agree as f64 / total as f64)
}

/// Macro-averaged F1 of a top-1 nearest-neighbour classifier under cosine
/// distance. Neighbour ties go to the lowest training index; classes are the
/// union of true and predicted test labels.
pub fn knn_top1_f1(
    train_emb: &Tensor,
    train_labels: &Partition,
    test_emb: &Tensor,
    test_labels: &Partition,
) -> Result<f64> {
    if train_emb.rows() == 0 || !train_emb.is_matrix() {
        return Err(Error::Param("knn needs a nonempty training set".into()));
    }
    if train_labels.len() != train_emb.rows() || test_labels.len() != test_emb.rows() {
        return Err(Error::shape("knn_top1_f1", "label count does not match embedding rows".to_string()));
    }
    if test_emb.cols() != train_emb.cols() {
        return Err(Error::shape(
            "knn_top1_f1",
            format!("train dim {} vs test dim {}", train_emb.cols(), test_emb.cols()),
        ));
    }
    let predicted = knn_predict(train_emb, train_labels, test_emb);
    Ok(macro_f1(&test_labels.labels, &predicted))
}

fn cosine_distance(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

fn knn_predict(train: &Tensor, labels: &Partition, test: &Tensor) -> Vec<usize> {
    let train_norms: Vec<f64> = (0..train.rows()).map(|i| norm(train.row(i))).collect();
    map_indexed(test.rows(), |t| {
        let q = test.row(t);
        let nq = norm(q);
        let mut best = (0, f64::INFINITY);
        for (i, &ni) in train_norms.iter().enumerate() {
            let dd = cosine_distance(q, nq, train.row(i), ni);
            if dd < best.1 {
                best = (i, dd);
            }
        }
        labels.labels[best.0]
    })
}

fn macro_f1(truth: &[usize], predicted: &[usize]) -> f64 {
    let mut stats: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for (&t, &p) in truth.iter().zip(predicted) {
        if t == p {
            stats.entry(t).or_default().0 += 1;
        } else {
            stats.entry(p).or_default().1 += 1;
            stats.entry(t).or_default().2 += 1;
        }
    }
    if stats.is_empty() {
        return 0.0;
    }
    let total: f64 = stats
        .values()
        .map(|&(tp, fp, fn_)| 2.0 * tp as f64 / (2 * tp + fp + fn_) as f64)
        .sum();
    total / stats.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub count: usize,
    pub histogram: BTreeMap<usize, usize>,
    pub max_share: f64,
}

pub fn cluster_stats(labels: &Partition) -> Result<ClusterStats> {
    if labels.is_empty() {
        return Err(Error::Param("cluster_stats needs at least one label".into()));
    }
    let mut histogram = BTreeMap::new();
    for &l in &labels.labels {
        *histogram.entry(l).or_insert(0usize) += 1;
    }
    let largest = histogram.values().copied().max().unwrap_or(0);
    Ok(ClusterStats {
        count: histogram.len(),
        max_share: largest as f64 / labels.len() as f64,
        histogram,
    })
}
