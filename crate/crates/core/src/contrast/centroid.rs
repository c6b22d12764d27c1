use super::{mean_over_queries, LossValue, Query, QuerySet, Temperature};
use crate::bank::CentroidBank;
use crate::error::{Error, Result};
use crate::num::{axpy, dot_unchecked, lse_unchecked, softmax};
use crate::stats::Prototypes;

fn check_class(class: usize, k: usize) -> Result<()> {
    if class >= k {
        return Err(Error::Argument(format!("query class {class} out of range for {k} classes")));
    }
    Ok(())
}

/// Loss and gradient of one query against class prototypes.
///
/// `-log( e^{q.mu+/tau} / sum_k e^{q.mu_k/tau} )` over initialized classes.
pub fn proto_query_loss(q: &[f64], class: usize, protos: &Prototypes, tau: Temperature) -> Result<(f64, Vec<f64>)> {
    check_class(class, protos.len())?;
    if !protos.initialized[class] {
        return Err(Error::State(format!("prototype for query class {class} is uninitialized")));
    }
    if protos.initialized_count() < 2 {
        return Err(Error::State("need at least two initialized prototypes".into()));
    }
    let t = tau.get();
    let active: Vec<usize> = (0..protos.len()).filter(|&k| protos.initialized[k]).collect();
    let logits: Vec<f64> = active
        .iter()
        .map(|&k| dot_unchecked(q, &protos.vectors[k]) / t)
        .collect();
    let pos = active.iter().position(|&k| k == class).expect("class is active");
    let loss = lse_unchecked(&logits) - logits[pos];

    let probs = softmax(&logits);
    let mut grad = vec![0.0; q.len()];
    for (&k, &p) in active.iter().zip(&probs) {
        let coef = if k == class { p - 1.0 } else { p };
        axpy(coef / t, &protos.vectors[k], &mut grad);
    }
    Ok((loss, grad))
}

pub fn proto_loss(queries: &QuerySet, protos: &Prototypes, tau: Temperature) -> Result<LossValue> {
    if protos.vectors.iter().any(|v| v.len() != queries.dim()) {
        return Err(Error::Dimension("prototype length differs from query length".into()));
    }
    mean_over_queries(queries, |Query { vector, class }| {
        proto_query_loss(vector, *class, protos, tau)
    })
}

/// Loss and gradient of one query against the centroid bank.
///
/// For each positive entry `p`:
/// `-log( e^{q.p/tau} / (e^{q.p/tau} + sum_k mean_n e^{q.v_kn/tau}) )`,
/// averaged over the positive queue. Negative classes with empty queues are
/// skipped.
pub fn bank_query_loss(q: &[f64], class: usize, bank: &CentroidBank, tau: Temperature) -> Result<(f64, Vec<f64>)> {
    check_class(class, bank.num_classes())?;
    if bank.is_empty(class) {
        return Err(Error::State(format!("bank queue for positive class {class} is empty")));
    }
    let t = tau.get();
    let a = q.len();

    // log mean_n e^{s_kn} and the softmax-weighted mean entry, per negative class
    let mut neg_log_mass = Vec::new();
    let mut neg_direction = Vec::new();
    for k in (0..bank.num_classes()).filter(|&k| k != class && !bank.is_empty(k)) {
        let queue = bank.queue(k);
        let scores: Vec<f64> = queue.iter().map(|v| dot_unchecked(q, v) / t).collect();
        neg_log_mass.push(lse_unchecked(&scores) - (queue.len() as f64).ln());
        let weights = softmax(&scores);
        let mut dir = vec![0.0; a];
        for (v, w) in queue.iter().zip(&weights) {
            axpy(*w, v, &mut dir);
        }
        neg_direction.push(dir);
    }
    if neg_log_mass.is_empty() {
        return Err(Error::State(format!(
            "no non-empty negative queue for query class {class}"
        )));
    }

    let positives = bank.queue(class);
    let m = positives.len() as f64;
    let mut terms = Vec::with_capacity(1 + neg_log_mass.len());
    let mut loss = 0.0;
    let mut grad = vec![0.0; a];
    for p in positives {
        let s = dot_unchecked(q, p) / t;
        terms.clear();
        terms.push(s);
        terms.extend_from_slice(&neg_log_mass);
        loss += lse_unchecked(&terms) - s;
        let w = softmax(&terms);
        axpy((w[0] - 1.0) / (t * m), p, &mut grad);
        for (wk, dir) in w[1..].iter().zip(&neg_direction) {
            axpy(wk / (t * m), dir, &mut grad);
        }
    }
    Ok((loss / m, grad))
}

pub fn bank_loss(queries: &QuerySet, bank: &CentroidBank, tau: Temperature) -> Result<LossValue> {
    if bank.dim() != queries.dim() {
        return Err(Error::Dimension("bank entry length differs from query length".into()));
    }
    mean_over_queries(queries, |Query { vector, class }| {
        bank_query_loss(vector, *class, bank, tau)
    })
}
