use nalgebra::{DMatrix, SymmetricEigen};

use super::{mean_over_queries, LossValue, Query, QuerySet, Temperature};
use crate::error::{Error, Result};
use crate::num::{axpy, dot_unchecked, lse_unchecked, quad_form_unchecked, softmax, Matrix};
use crate::rng::Rng;
use crate::stats::ClassStats;

fn check_stats(class: usize, stats: &ClassStats) -> Result<Vec<usize>> {
    let k = stats.num_classes();
    if class >= k {
        return Err(Error::Argument(format!("query class {class} out of range for {k} classes")));
    }
    if !stats.is_initialized(class) {
        return Err(Error::State(format!("statistics for query class {class} are uninitialized")));
    }
    let active: Vec<usize> = (0..k).filter(|&c| stats.is_initialized(c)).collect();
    if active.len() < 2 {
        return Err(Error::State("need statistics for at least two classes".into()));
    }
    Ok(active)
}

/// Closed-form bound for one query under Gaussian class distributions.
///
/// With `a_k = q.mu_k/tau + q^T S_k q / (2 tau^2)`:
/// `loss = lse_k(a_k) - a_+ + q^T S_+ q / (2 tau^2)`.
pub fn dist_query_loss(q: &[f64], class: usize, stats: &ClassStats, tau: Temperature) -> Result<(f64, Vec<f64>)> {
    let active = check_stats(class, stats)?;
    let t = tau.get();
    let t2 = t * t;
    let quads: Vec<f64> = active
        .iter()
        .map(|&k| quad_form_unchecked(q, stats.covariance(k)))
        .collect();
    let logits: Vec<f64> = active
        .iter()
        .zip(&quads)
        .map(|(&k, quad)| dot_unchecked(q, stats.mean(k)) / t + quad / (2.0 * t2))
        .collect();
    let pos = active.iter().position(|&k| k == class).expect("class is active");
    let loss = lse_unchecked(&logits) - logits[pos] + quads[pos] / (2.0 * t2);

    // d/dq: sum_k p_k (mu_k/tau + sym(S_k) q / tau^2) - mu_+/tau
    let probs = softmax(&logits);
    let mut grad = vec![0.0; q.len()];
    for (&k, &p) in active.iter().zip(&probs) {
        axpy(p / t, stats.mean(k), &mut grad);
        sym_mat_vec_acc(stats.covariance(k), q, p / t2, &mut grad);
    }
    axpy(-1.0 / t, stats.mean(class), &mut grad);
    Ok((loss, grad))
}

/// `out += s * (S + S^T)/2 q`.
fn sym_mat_vec_acc(m: &Matrix, q: &[f64], s: f64, out: &mut [f64]) {
    let n = q.len();
    for i in 0..n {
        let mut acc = 0.0;
        for j in 0..n {
            acc += 0.5 * (m.get(i, j) + m.get(j, i)) * q[j];
        }
        out[i] += s * acc;
    }
}

pub fn dist_loss(queries: &QuerySet, stats: &ClassStats, tau: Temperature) -> Result<LossValue> {
    if stats.dim() != queries.dim() {
        return Err(Error::Dimension("statistics dimension differs from query length".into()));
    }
    mean_over_queries(queries, |Query { vector, class }| {
        dist_query_loss(vector, *class, stats, tau)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McConfig {
    /// Draws in the outer (positive) pool and in each inner (negative) pool.
    pub samples: usize,
    /// Bootstrap replicates for the standard error.
    pub bootstrap: usize,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            samples: 10_000,
            bootstrap: 100,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub estimate: f64,
    pub stderr: f64,
}

/// Sampler for `N(mu, S)` using `S = V diag(l) V^T`.
struct GaussianSampler {
    mean: Vec<f64>,
    /// Row-major `V diag(sqrt(l))`.
    factor: Vec<f64>,
}

impl GaussianSampler {
    fn new(mean: &[f64], cov: &Matrix, class: usize) -> Result<Self> {
        let n = mean.len();
        let m = DMatrix::from_fn(n, n, |i, j| 0.5 * (cov.get(i, j) + cov.get(j, i)));
        let eig = SymmetricEigen::new(m);
        let scale = cov.trace().abs().max(1.0);
        let mut factor = vec![0.0; n * n];
        for (c, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda < -1e-8 * scale {
                return Err(Error::Numeric(format!(
                    "covariance of class {class} is not positive semidefinite (eigenvalue {lambda})"
                )));
            }
            let s = lambda.max(0.0).sqrt();
            for r in 0..n {
                factor[r * n + c] = eig.eigenvectors[(r, c)] * s;
            }
        }
        Ok(Self {
            mean: mean.to_vec(),
            factor,
        })
    }

    /// `q . x / tau` for `x ~ N(mu, S)`.
    fn scaled_projection(&self, q: &[f64], tau: f64, z: &mut [f64], rng: &mut Rng) -> f64 {
        let n = self.mean.len();
        z.iter_mut().for_each(|v| *v = rng.normal());
        let mut acc = 0.0;
        for r in 0..n {
            let x = self.mean[r] + dot_unchecked(&self.factor[r * n..(r + 1) * n], z);
            acc += q[r] * x;
        }
        acc / tau
    }
}

/// Monte-Carlo estimate of the infinite-pair loss for one query.
///
/// The positive expectation is estimated from an outer pool of draws; each
/// negative class's `E e^{q.x/tau}` comes from its own independent pool. The
/// standard error is the spread of bootstrap replicates that resample every
/// pool with replacement.
pub fn mc_infinite_loss(
    q: &[f64],
    class: usize,
    stats: &ClassStats,
    tau: Temperature,
    config: &McConfig,
    rng: &mut Rng,
) -> Result<McEstimate> {
    let active = check_stats(class, stats)?;
    if q.len() != stats.dim() {
        return Err(Error::Dimension("query length differs from statistics dimension".into()));
    }
    if config.samples == 0 {
        return Err(Error::Argument("sample count must be positive".into()));
    }
    let t = tau.get();
    let n = config.samples;
    let mut z = vec![0.0; q.len()];

    let pos_sampler = GaussianSampler::new(stats.mean(class), stats.covariance(class), class)?;
    let outer: Vec<f64> = (0..n)
        .map(|_| pos_sampler.scaled_projection(q, t, &mut z, rng))
        .collect();

    // inner pools stored as exp(s - max) plus the max, for cheap resampling
    let mut inner: Vec<(f64, Vec<f64>)> = Vec::new();
    for &k in active.iter().filter(|&&k| k != class) {
        let sampler = GaussianSampler::new(stats.mean(k), stats.covariance(k), k)?;
        let scores: Vec<f64> = (0..n)
            .map(|_| sampler.scaled_projection(q, t, &mut z, rng))
            .collect();
        let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        inner.push((max, scores.iter().map(|s| (s - max).exp()).collect()));
    }

    let log_neg_mass = |sums: &[f64]| -> f64 {
        let logs: Vec<f64> = inner
            .iter()
            .zip(sums)
            .map(|((max, _), s)| max + (s / n as f64).ln())
            .collect();
        lse_unchecked(&logs)
    };
    // -log(e^s / (e^s + e^L)) = log(1 + e^{L - s})
    let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };

    let full_sums: Vec<f64> = inner.iter().map(|(_, e)| e.iter().sum()).collect();
    let l_full = log_neg_mass(&full_sums);
    let estimate = outer.iter().map(|&s| softplus(l_full - s)).sum::<f64>() / n as f64;

    let mut replicates = Vec::with_capacity(config.bootstrap);
    let mut sums = vec![0.0; inner.len()];
    for _ in 0..config.bootstrap {
        for ((_, e), s) in inner.iter().zip(sums.iter_mut()) {
            *s = (0..n).map(|_| e[rng.below(n)]).sum();
        }
        let l = log_neg_mass(&sums);
        let r = (0..n).map(|_| softplus(l - outer[rng.below(n)])).sum::<f64>() / n as f64;
        replicates.push(r);
    }
    let stderr = if replicates.len() > 1 {
        let mean = replicates.iter().sum::<f64>() / replicates.len() as f64;
        let var = replicates.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (replicates.len() - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    Ok(McEstimate { estimate, stderr })
}

