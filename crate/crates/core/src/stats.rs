//! Per-class streaming mean and covariance.
//!
//! Batches are merged with the pooled-moment identity, so after any
//! partition of a pixel stream the running `(n, mean, cov)` equal the
//! population statistics of the whole stream.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grid::{FeatureGrid, LabelGrid};
use crate::num::{l2_normalize, Matrix};

/// Mean, pixel count and population covariance of one class inside one image.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalStats {
    pub centroid: Vec<f64>,
    pub count: u64,
    pub covariance: Matrix,
}

fn check_mask(feat: &FeatureGrid, mask: &LabelGrid) -> Result<()> {
    mask.same_shape(feat.height(), feat.width())
}

/// Per-class mean of the pixels selected by `mask`. Absent classes are omitted.
pub fn local_centroids(feat: &FeatureGrid, mask: &LabelGrid) -> Result<BTreeMap<usize, (Vec<f64>, u64)>> {
    check_mask(feat, mask)?;
    let mut sums: BTreeMap<usize, (Vec<f64>, u64)> = BTreeMap::new();
    for i in 0..feat.len() {
        let Some(k) = mask.class_of(i) else { continue };
        let entry = sums.entry(k).or_insert_with(|| (vec![0.0; feat.dim()], 0));
        for (s, v) in entry.0.iter_mut().zip(feat.pixel(i)) {
            *s += v;
        }
        entry.1 += 1;
    }
    for (sum, count) in sums.values_mut() {
        let m = *count as f64;
        sum.iter_mut().for_each(|s| *s /= m);
    }
    Ok(sums)
}

/// Centroid, count and population covariance (divide by `m`) per class.
pub fn local_statistics(feat: &FeatureGrid, mask: &LabelGrid) -> Result<BTreeMap<usize, LocalStats>> {
    let centroids = local_centroids(feat, mask)?;
    let a = feat.dim();
    let mut covs: BTreeMap<usize, Matrix> = centroids.keys().map(|&k| (k, Matrix::zeros(a, a))).collect();
    let mut diff = vec![0.0; a];
    for i in 0..feat.len() {
        let Some(k) = mask.class_of(i) else { continue };
        let mu = &centroids[&k].0;
        for ((d, x), m) in diff.iter_mut().zip(feat.pixel(i)).zip(mu) {
            *d = x - m;
        }
        covs.get_mut(&k).expect("class present").add_outer(1.0, &diff, &diff);
    }
    Ok(centroids
        .into_iter()
        .map(|(k, (centroid, count))| {
            let mut covariance = covs.remove(&k).expect("class present");
            covariance.scale(1.0 / count as f64);
            (
                k,
                LocalStats {
                    centroid,
                    count,
                    covariance,
                },
            )
        })
        .collect())
}

/// Class-level mean vectors with a flag for classes that have never been
/// observed.
#[derive(Clone, Debug, PartialEq)]
pub struct Prototypes {
    pub vectors: Vec<Vec<f64>>,
    pub initialized: Vec<bool>,
}

impl Prototypes {
    /// Treats every vector as initialized.
    pub fn from_vectors(vectors: Vec<Vec<f64>>) -> Self {
        let initialized = vec![true; vectors.len()];
        Self { vectors, initialized }
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn initialized_count(&self) -> usize {
        self.initialized.iter().filter(|&&b| b).count()
    }

    /// Copy with every initialized vector scaled to unit length.
    pub fn normalized(&self) -> Self {
        let vectors = self
            .vectors
            .iter()
            .zip(&self.initialized)
            .map(|(v, &init)| if init { l2_normalize(v).vector } else { v.clone() })
            .collect();
        Self {
            vectors,
            initialized: self.initialized.clone(),
        }
    }
}

/// Running per-class count, mean and covariance.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    dim: usize,
    counts: Vec<u64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Matrix>,
}

impl ClassStats {
    /// Zero-initialized statistics for `num_classes` classes of dimension `dim`.
    pub fn new(num_classes: usize, dim: usize) -> Result<Self> {
        if num_classes == 0 || dim == 0 {
            return Err(Error::Argument("class count and dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            counts: vec![0; num_classes],
            means: vec![vec![0.0; dim]; num_classes],
            covs: vec![Matrix::zeros(dim, dim); num_classes],
        })
    }

    /// Builds statistics directly from per-class `(count, mean, cov)`.
    pub fn from_parts(counts: Vec<u64>, means: Vec<Vec<f64>>, covs: Vec<Matrix>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || means.len() != k || covs.len() != k {
            return Err(Error::Dimension("per-class parts have inconsistent lengths".into()));
        }
        let dim = means[0].len();
        for (m, c) in means.iter().zip(&covs) {
            if m.len() != dim {
                return Err(dim_err("mean length", dim, m.len()));
            }
            if c.rows() != dim || c.cols() != dim {
                return Err(dim_err("covariance side", dim, c.rows()));
            }
            if m.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite mean".into()));
            }
        }
        Ok(Self {
            dim,
            counts,
            means,
            covs,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self, k: usize) -> u64 {
        self.counts[k]
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k]
    }

    pub fn covariance(&self, k: usize) -> &Matrix {
        &self.covs[k]
    }

    pub fn is_initialized(&self, k: usize) -> bool {
        self.counts[k] > 0
    }

    fn check_update(&self, k: usize, centroid: &[f64], m: u64) -> Result<()> {
        if k >= self.num_classes() {
            return Err(Error::Argument(format!(
                "class {k} out of range for {} classes",
                self.num_classes()
            )));
        }
        if m == 0 {
            return Err(Error::Argument("batch pixel count must be positive".into()));
        }
        if centroid.len() != self.dim {
            return Err(dim_err("centroid length", self.dim, centroid.len()));
        }
        Ok(())
    }

    /// Mean-only merge: `mu <- (n mu + m mu') / (n + m)`. The count is left
    /// untouched; follow with [`ClassStats::commit_count`].
    pub fn update_mean(&mut self, k: usize, centroid: &[f64], m: u64) -> Result<()> {
        self.check_update(k, centroid, m)?;
        let n = self.counts[k] as f64;
        let mf = m as f64;
        let total = n + mf;
        for (mu, c) in self.means[k].iter_mut().zip(centroid) {
            *mu = (n * *mu + mf * c) / total;
        }
        Ok(())
    }

    /// `n <- n + m`.
    pub fn commit_count(&mut self, k: usize, m: u64) -> Result<()> {
        if k >= self.num_classes() {
            return Err(Error::Argument(format!("class {k} out of range")));
        }
        self.counts[k] = self.counts[k]
            .checked_add(m)
            .ok_or_else(|| Error::Numeric(format!("pixel count overflow for class {k}")))?;
        Ok(())
    }

    /// Merges one batch into class `k`: covariance first (using the
    /// pre-update mean), then mean, then count.
    pub fn update_cov(&mut self, k: usize, centroid: &[f64], batch_cov: &Matrix, m: u64) -> Result<()> {
        self.check_update(k, centroid, m)?;
        if batch_cov.rows() != self.dim || batch_cov.cols() != self.dim {
            return Err(dim_err("batch covariance side", self.dim, batch_cov.rows()));
        }
        let new_count = self.counts[k]
            .checked_add(m)
            .ok_or_else(|| Error::Numeric(format!("pixel count overflow for class {k}")))?;
        let n = self.counts[k] as f64;
        let mf = m as f64;
        let total = n + mf;

        let delta: Vec<f64> = self.means[k].iter().zip(centroid).map(|(a, b)| a - b).collect();
        let cov = &mut self.covs[k];
        for (s, b) in cov.as_mut_slice().iter_mut().zip(batch_cov.as_slice()) {
            *s = (n * *s + mf * b) / total;
        }
        cov.add_outer(n * mf / (total * total), &delta, &delta);

        self.update_mean(k, centroid, m)?;
        self.counts[k] = new_count;
        Ok(())
    }

    /// Merges every class present in `mask` from one feature map.
    pub fn observe(&mut self, feat: &FeatureGrid, mask: &LabelGrid) -> Result<BTreeMap<usize, LocalStats>> {
        if feat.dim() != self.dim {
            return Err(dim_err("feature dimension", self.dim, feat.dim()));
        }
        let local = local_statistics(feat, mask)?;
        for (&k, s) in &local {
            self.update_cov(k, &s.centroid, &s.covariance, s.count)?;
        }
        Ok(local)
    }

    /// The K global class means; never-observed classes are flagged.
    pub fn prototypes(&self) -> Prototypes {
        Prototypes {
            vectors: self.means.clone(),
            initialized: self.counts.iter().map(|&n| n > 0).collect(),
        }
    }

    /// Copy whose initialized means are scaled to unit length; covariances
    /// and counts are unchanged.
    pub fn with_normalized_means(&self) -> Self {
        let mut out = self.clone();
        for (mean, &n) in out.means.iter_mut().zip(&self.counts) {
            if n > 0 {
                *mean = l2_normalize(mean).vector;
            }
        }
        out
    }

    /// Copy with every covariance replaced by zeros.
    pub fn without_covariance(&self) -> Self {
        let mut out = self.clone();
        out.covs = vec![Matrix::zeros(self.dim, self.dim); self.num_classes()];
        out
    }

    pub fn to_snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            format: SNAPSHOT_FORMAT.to_string(),
            version: SNAPSHOT_VERSION,
            num_classes: self.num_classes(),
            dim: self.dim,
            classes: (0..self.num_classes())
                .map(|k| ClassSnapshot {
                    count: self.counts[k],
                    mean: self.means[k].clone(),
                    cov: self.covs[k].as_slice().to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &StatsSnapshot) -> Result<Self> {
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::Argument(format!(
                "unsupported stats snapshot {} v{}",
                snap.format, snap.version
            )));
        }
        if snap.classes.len() != snap.num_classes {
            return Err(dim_err("snapshot class entries", snap.num_classes, snap.classes.len()));
        }
        let mut counts = Vec::new();
        let mut means = Vec::new();
        let mut covs = Vec::new();
        for c in &snap.classes {
            if c.mean.len() != snap.dim {
                return Err(dim_err("snapshot mean length", snap.dim, c.mean.len()));
            }
            counts.push(c.count);
            means.push(c.mean.clone());
            covs.push(Matrix::from_rows(snap.dim, snap.dim, c.cov.clone())?);
        }
        Self::from_parts(counts, means, covs)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_snapshot())?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Self::from_snapshot(&serde_json::from_str(s)?)
    }
}

const SNAPSHOT_FORMAT: &str = "class-stats";
const SNAPSHOT_VERSION: u32 = 1;

/// Serialized form of [`ClassStats`]. Floats use the shortest decimal that
/// round-trips to the same bits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSnapshot {
    pub format: String,
    pub version: u32,
    pub num_classes: usize,
    pub dim: usize,
    pub classes: Vec<ClassSnapshot>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSnapshot {
    pub count: u64,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`.
    pub cov: Vec<f64>,
}
