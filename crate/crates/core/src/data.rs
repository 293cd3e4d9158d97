//! Synthetic blob datasets, vector-space view augmentation, seeded batching
//! and dataset files.
//!
//! Two on-disk formats hold the same content:
//!
//! * CSV with header `dim_0,...,dim_{D-1},label`, one sample per line.
//! * Little-endian binary: magic `CLSMDATA`, `u32` version 1, `u64` N,
//!   `u64` D, then `N·D` f64 values row-major, then `N` u64 labels.
//!
//! [`Dataset::save`] and [`Dataset::load`] pick the format from the file
//! extension: `.csv` is text, anything else is binary.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clustering::Partition;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"CLSMDATA";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_clusters: usize,
    pub samples_per_cluster: usize,
    pub ambient_dim: usize,
    /// Radius of the sphere the cluster centres are drawn on.
    pub center_separation: f64,
    pub within_cluster_sigma: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Eight well-separated blobs in 64 dimensions.
    pub fn blobs8() -> Self {
        Self {
            n_clusters: 8,
            samples_per_cluster: 50,
            ambient_dim: 64,
            center_separation: 10.0,
            within_cluster_sigma: 0.5,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.n_clusters < 1 {
            problems.push(format!("n_clusters must be >= 1, got {}", self.n_clusters));
        }
        if self.samples_per_cluster < 1 {
            problems.push(format!(
                "samples_per_cluster must be >= 1, got {}",
                self.samples_per_cluster
            ));
        }
        if self.ambient_dim < 2 {
            problems.push(format!("ambient_dim must be >= 2, got {}", self.ambient_dim));
        }
        if !(self.within_cluster_sigma >= 0.0) || !self.within_cluster_sigma.is_finite() {
            problems.push(format!(
                "within_cluster_sigma must be finite and >= 0, got {}",
                self.within_cluster_sigma
            ));
        }
        if !(self.center_separation >= 0.0) || !self.center_separation.is_finite() {
            problems.push(format!(
                "center_separation must be finite and >= 0, got {}",
                self.center_separation
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    /// Ground truth, used only for evaluation.
    pub labels: Partition,
}

impl Dataset {
    pub fn new(x: Tensor, labels: Partition) -> Result<Self> {
        if !x.is_matrix() || x.rows() != labels.len() {
            return Err(Error::shape(
                "dataset",
                format!("{:?} samples vs {} labels", x.shape(), labels.len()),
            ));
        }
        Ok(Self { x, labels })
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn n_classes(&self) -> usize {
        let mut l = self.labels.labels.clone();
        l.sort_unstable();
        l.dedup();
        l.len()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            x: self.x.select_rows(indices),
            labels: self.labels.select(indices),
        }
    }

    /// Seeded split into `(train, test)` index lists with `round(train_fraction·N)`
    /// training samples.
    pub fn split_indices(&self, train_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_fraction).round() as usize;
        let test = order.split_off(cut.min(self.len()));
        (order, test)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = if is_csv(path) { self.to_csv()? } else { self.to_binary() };
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        if is_csv(path) {
            Self::from_csv(&bytes[..])
        } else {
            Self::from_binary(&bytes[..])
        }
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("dim_{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec: Vec<String> = self.x.row(i).iter().map(|v| v.to_string()).collect();
            rec.push(self.labels.labels[i].to_string());
            w.write_record(&rec)?;
        }
        w.into_inner()
            .map_err(|e| Error::format("dataset csv", e.to_string()))
    }

    pub fn from_csv(r: impl Read) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let header = reader.headers()?.clone();
        let d = header.len().saturating_sub(1);
        let well_formed = header.get(d) == Some("label")
            && (0..d).all(|j| header.get(j) == Some(format!("dim_{j}").as_str()));
        if !well_formed {
            return Err(Error::format(
                "dataset csv",
                "header must be dim_0,...,dim_{D-1},label".to_string(),
            ));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in reader.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::format("dataset csv", format!("row {}: bad {what}", line + 1));
            for j in 0..d {
                data.push(rec[j].trim().parse::<f64>().map_err(|_| bad("value"))?);
            }
            labels.push(rec[d].trim().parse::<usize>().map_err(|_| bad("label"))?);
        }
        Self::new(Tensor::matrix(labels.len(), d, data)?, Partition::new(labels))
    }

    pub fn to_binary(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(28 + 8 * (self.x.len() + self.len()));
        out.extend_from_slice(DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim() as u64).to_le_bytes());
        for v in self.x.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &l in &self.labels.labels {
            out.extend_from_slice(&(l as u64).to_le_bytes());
        }
        out
    }

    pub fn from_binary(mut r: impl Read) -> Result<Self> {
        let mut all = Vec::new();
        r.read_to_end(&mut all).map_err(|e| Error::format("dataset", e.to_string()))?;
        let bad = |detail: &str| Error::format("dataset", detail.to_string());
        if all.len() < 28 || &all[..8] != DATASET_MAGIC {
            return Err(bad("bad magic"));
        }
        let u64_at = |o: usize| u64::from_le_bytes(all[o..o + 8].try_into().expect("8 bytes"));
        let version = u32::from_le_bytes(all[8..12].try_into().expect("4 bytes"));
        if version != DATASET_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let (n, d) = (u64_at(12) as usize, u64_at(20) as usize);
        let expected = n
            .checked_mul(d)
            .and_then(|nd| nd.checked_add(n))
            .and_then(|c| c.checked_mul(8))
            .and_then(|c| c.checked_add(28));
        if expected != Some(all.len()) {
            return Err(bad(&format!("length {} does not match N={n}, D={d}", all.len())));
        }
        let data = (0..n * d)
            .map(|i| f64::from_le_bytes(all[28 + 8 * i..36 + 8 * i].try_into().expect("8 bytes")))
            .collect();
        let base = 28 + 8 * n * d;
        let labels = (0..n).map(|i| u64_at(base + 8 * i) as usize).collect();
        Self::new(Tensor::matrix(n, d, data)?, Partition::new(labels))
    }
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Centres uniform on the sphere of radius `center_separation`; samples are
/// centre plus isotropic Gaussian noise, stored cluster by cluster.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.ambient_dim;
    let mut centers = Vec::with_capacity(spec.n_clusters);
    for _ in 0..spec.n_clusters {
        let mut c: Vec<f64> = loop {
            let c: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            if c.iter().any(|&v| v != 0.0) {
                break c;
            }
        };
        let n = c.iter().map(|v| v * v).sum::<f64>().sqrt();
        c.iter_mut().for_each(|v| *v *= spec.center_separation / n);
        centers.push(c);
    }
    let total = spec.n_clusters * spec.samples_per_cluster;
    let mut data = Vec::with_capacity(total * d);
    let mut labels = Vec::with_capacity(total);
    for (k, c) in centers.iter().enumerate() {
        for _ in 0..spec.samples_per_cluster {
            for &cj in c {
                let e: f64 = StandardNormal.sample(&mut rng);
                data.push(cj + spec.within_cluster_sigma * e);
            }
            labels.push(k);
        }
    }
    Dataset::new(Tensor::matrix(total, d, data)?, Partition::new(labels))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    pub noise_sigma: f64,
    pub mask_prob: f64,
    pub scale_range: (f64, f64),
}

impl AugmentSpec {
    pub fn identity() -> Self {
        Self {
            noise_sigma: 0.0,
            mask_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            problems.push(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(0.0..1.0).contains(&self.mask_prob) {
            problems.push(format!("mask_prob must be in [0, 1), got {}", self.mask_prob));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            problems.push(format!("scale_range must satisfy 0 < min <= max, got ({lo}, {hi})"));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems))
        }
    }
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            mask_prob: 0.2,
            scale_range: (0.8, 1.2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ViewBatch {
    pub x1: Tensor,
    pub x2: Tensor,
    pub source_indices: Vec<usize>,
}

fn augment<R: Rng + ?Sized>(x: &Tensor, aug: &AugmentSpec, rng: &mut R) -> Tensor {
    let noise = (aug.noise_sigma > 0.0).then(|| Normal::new(0.0, aug.noise_sigma).expect("sigma"));
    let (lo, hi) = aug.scale_range;
    let mut out = x.clone();
    for i in 0..out.rows() {
        let s = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        for v in out.row_mut(i) {
            *v *= s;
            if aug.mask_prob > 0.0 && rng.random::<f64>() < aug.mask_prob {
                *v = 0.0;
            }
            if let Some(n) = &noise {
                *v += n.sample(rng);
            }
        }
    }
    out
}

/// Two independent augmentations of every row of `x_batch`: scale jitter,
/// coordinate masking, then additive noise.
pub fn make_views<R: Rng + ?Sized>(x_batch: &Tensor, aug: &AugmentSpec, rng: &mut R) -> Result<ViewBatch> {
    if !x_batch.is_matrix() || x_batch.rows() == 0 {
        return Err(Error::shape("make_views", format!("need a nonempty batch, got {:?}", x_batch.shape())));
    }
    aug.validate()?;
    let x1 = augment(x_batch, aug, rng);
    let x2 = augment(x_batch, aug, rng);
    Ok(ViewBatch {
        x1,
        x2,
        source_indices: (0..x_batch.rows()).collect(),
    })
}

/// [`make_views`] over the dataset rows named by `indices`.
pub fn views_of<R: Rng + ?Sized>(
    dataset: &Dataset,
    indices: &[usize],
    aug: &AugmentSpec,
    rng: &mut R,
) -> Result<ViewBatch> {
    let x = dataset.x.select_rows(indices);
    let mut views = make_views(&x, aug, rng)?;
    views.source_indices = indices.to_vec();
    Ok(views)
}

/// A seeded permutation of `0..n` cut into consecutive batches. A trailing
/// batch with fewer than two samples is dropped.
pub fn batch_iter(n: usize, batch_size: usize, epoch_seed: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size < 2 {
        return Err(Error::Param(format!("batch_size must be >= 2, got {batch_size}")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
    Ok(order
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(<[usize]>::to_vec)
        .collect())
}
