//! Pixel-to-concept contrastive objectives.
//!
//! Every loss returns its value together with the gradient with respect to
//! each query; class statistics, prototypes and bank entries are constants.
//!
//! - [`proto_loss`]: one positive prototype, one prototype per negative class.
//! - [`bank_loss`]: positives and negatives drawn from per-class centroid queues.
//! - [`dist_loss`]: closed-form upper bound of the loss against infinitely many
//!   Gaussian-distributed positives/negatives.
//! - [`mc_infinite_loss`]: Monte-Carlo estimate of that infinite-pair loss.
//! - [`reg_loss`]: image-level softmax regularizer over prototypes.

mod centroid;
mod distribution;
mod reg;

pub use centroid::{bank_loss, bank_query_loss, proto_loss, proto_query_loss};
pub use distribution::{dist_loss, dist_query_loss, mc_infinite_loss, McConfig, McEstimate};
pub use reg::{reg_loss, RegSign};

use crate::error::{dim_err, Error, Result};
use crate::num::{norm, pairwise_sum};

/// Default softmax temperature.
pub const DEFAULT_TEMPERATURE: f64 = 0.1;

/// Tolerance on `|q| = 1` for [`QuerySet::new`].
pub const UNIT_NORM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Argument(format!("temperature must be positive, got {tau}")));
        }
        Ok(Self(tau))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self(DEFAULT_TEMPERATURE)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub vector: Vec<f64>,
    pub class: usize,
}

impl Query {
    pub fn new(vector: Vec<f64>, class: usize) -> Self {
        Self { vector, class }
    }
}

/// Labelled pixel embeddings contrasted in one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    dim: usize,
    queries: Vec<Query>,
}

impl QuerySet {
    /// Queries must be unit length (within [`UNIT_NORM_TOL`]).
    pub fn new(dim: usize, queries: Vec<Query>) -> Result<Self> {
        let set = Self::unnormalized(dim, queries)?;
        if let Some(q) = set
            .queries
            .iter()
            .find(|q| (norm(&q.vector) - 1.0).abs() > UNIT_NORM_TOL)
        {
            return Err(Error::Argument(format!(
                "query of class {} has norm {}, expected unit length",
                q.class,
                norm(&q.vector)
            )));
        }
        Ok(set)
    }

    /// Skips the unit-norm check (finite-difference probes, raw embeddings).
    pub fn unnormalized(dim: usize, queries: Vec<Query>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Argument("query dimension must be positive".into()));
        }
        for q in &queries {
            if q.vector.len() != dim {
                return Err(dim_err("query length", dim, q.vector.len()));
            }
            if q.vector.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite query".into()));
            }
        }
        Ok(Self { dim, queries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }

    pub fn queries(&self) -> &[Query] {
        &self.queries
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Query> {
        self.queries.iter()
    }
}

/// Loss value and the gradient with respect to each query (or, for
/// [`reg_loss`], the single mean feature).
#[derive(Clone, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grads: Vec<Vec<f64>>,
}

impl LossValue {
    pub fn scaled(mut self, s: f64) -> Self {
        self.value *= s;
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v *= s);
        }
        self
    }
}

/// Mean of per-query losses.
pub fn aggregate_cl(losses: &[f64]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Argument("cannot aggregate an empty query set".into()));
    }
    Ok(pairwise_sum(losses) / losses.len() as f64)
}

/// Averages per-query `(loss, grad)` into a [`LossValue`]; gradients are
/// divided by the query count so they are gradients of the mean.
pub(crate) fn mean_over_queries<F>(queries: &QuerySet, mut per_query: F) -> Result<LossValue>
where
    F: FnMut(&Query) -> Result<(f64, Vec<f64>)>,
{
    if queries.is_empty() {
        return Err(Error::Argument("empty query set".into()));
    }
    let n = queries.len() as f64;
    let mut values = Vec::with_capacity(queries.len());
    let mut grads = Vec::with_capacity(queries.len());
    for q in queries.iter() {
        let (v, mut g) = per_query(q)?;
        g.iter_mut().for_each(|x| *x /= n);
        values.push(v);
        grads.push(g);
    }
    Ok(LossValue {
        value: aggregate_cl(&values)?,
        grads,
    })
}

#[cfg(test)]
mod tests;
