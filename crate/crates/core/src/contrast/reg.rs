use super::{LossValue, Temperature};
use crate::error::{Error, Result};
use crate::num::{axpy, dot_unchecked, lse_unchecked, softmax};
use crate::stats::Prototypes;

/// Sign applied to the regularizer.
///
/// `AsWritten` minimizes `(1/(K log K)) sum_k log softmax_k`, which sharpens the
/// image-level softmax; `Diversity` minimizes its negation, which flattens it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegSign {
    #[default]
    AsWritten,
    Diversity,
}

impl RegSign {
    fn factor(self) -> f64 {
        match self {
            RegSign::AsWritten => 1.0,
            RegSign::Diversity => -1.0,
        }
    }
}

/// `(1/(K log K)) sum_k log softmax_k(Q.mu/tau)` over the `K` initialized
/// prototypes. The single gradient is with respect to `mean_feature`.
pub fn reg_loss(mean_feature: &[f64], protos: &Prototypes, tau: Temperature, sign: RegSign) -> Result<LossValue> {
    let active: Vec<usize> = (0..protos.len()).filter(|&k| protos.initialized[k]).collect();
    if active.len() < 2 {
        return Err(Error::State("regularizer needs at least two initialized prototypes".into()));
    }
    if active.iter().any(|&k| protos.vectors[k].len() != mean_feature.len()) {
        return Err(Error::Dimension("prototype length differs from mean feature".into()));
    }
    let t = tau.get();
    let k = active.len() as f64;
    let norm = sign.factor() / (k * k.ln());
    let logits: Vec<f64> = active
        .iter()
        .map(|&c| dot_unchecked(mean_feature, &protos.vectors[c]) / t)
        .collect();
    let lse = lse_unchecked(&logits);
    let sum_log_probs: f64 = logits.iter().map(|z| z - lse).sum();

    // d/dQ sum_k (z_k - lse) = sum_k mu_k/tau - K sum_k p_k mu_k/tau
    let probs = softmax(&logits);
    let mut grad = vec![0.0; mean_feature.len()];
    for (&c, &p) in active.iter().zip(&probs) {
        axpy(norm * (1.0 - k * p) / t, &protos.vectors[c], &mut grad);
    }
    Ok(LossValue {
        value: norm * sum_log_probs,
        grads: vec![grad],
    })
}
