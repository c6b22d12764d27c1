//! Property suites backed by independent oracles: Monte-Carlo for the
//! closed-form bound, finite differences for gradients, one-shot pooling for
//! the streaming statistics.

use std::str::FromStr;

use pixcon::bank::CentroidBank;
use pixcon::contrast::{
    bank_query_loss, dist_loss, dist_query_loss, mc_infinite_loss, proto_loss, proto_query_loss, reg_loss, McConfig, Query,
    QuerySet, RegSign, Temperature,
};
use pixcon::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
use pixcon::num::{l2_normalize, Matrix};
use pixcon::selftrain::{source_ce, target_ssl, ConfWeight, ProbGrid};
use pixcon::stats::Prototypes;
use pixcon::toymodel::objective::{evaluate, random_batch};
use pixcon::toymodel::{ConceptSpace, Model, Variant};
use pixcon::{ClassStats, FeatureGrid, LabelGrid, Rng, IGNORE};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const GRAD_TOLERANCE: f64 = 1e-5;
pub const STATS_TOLERANCE: f64 = 1e-10;
pub const REDUCTION_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Bound,
    Grads,
    Stats,
    All,
}

impl FromStr for Suite {
    type Err = CliError;

    fn from_str(s: &str) -> CliResult<Self> {
        match s {
            "bound" => Ok(Suite::Bound),
            "grads" => Ok(Suite::Grads),
            "stats" => Ok(Suite::Stats),
            "all" => Ok(Suite::All),
            _ => Err(CliError::Usage(format!("unknown suite `{s}` (expected bound, grads, stats or all)"))),
        }
    }
}

/// Outcome of one property over its trials. `worst` is the extreme of the
/// checked quantity; `margin` is how far it sits inside `limit` (positive
/// means passing).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PropertyReport {
    pub name: String,
    pub trials: usize,
    pub passed: bool,
    pub worst: f64,
    pub limit: f64,
    pub margin: f64,
    pub note: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub properties: Vec<PropertyReport>,
}

/// Largest value must stay below `limit`.
fn at_most(name: &str, trials: usize, worst: f64, limit: f64, note: &str) -> PropertyReport {
    PropertyReport {
        name: name.into(),
        trials,
        passed: worst <= limit && worst.is_finite(),
        worst,
        limit,
        margin: limit - worst,
        note: note.into(),
    }
}

pub fn run_verify(suite: Suite, seed: u64) -> CliResult<VerifyReport> {
    let root = Rng::new(seed).split("verify");
    let mut properties = Vec::new();
    if matches!(suite, Suite::Bound | Suite::All) {
        properties.extend(bound_suite(&root.split("bound"))?);
    }
    if matches!(suite, Suite::Grads | Suite::All) {
        properties.extend(grads_suite(&root.split("grads"))?);
    }
    if matches!(suite, Suite::Stats | Suite::All) {
        properties.extend(stats_suite(&root.split("stats"))?);
    }
    let name = match suite {
        Suite::Bound => "bound",
        Suite::Grads => "grads",
        Suite::Stats => "stats",
        Suite::All => "all",
    };
    Ok(VerifyReport {
        suite: name.into(),
        seed,
        passed: properties.iter().all(|p| p.passed),
        properties,
    })
}

fn unit(rng: &mut Rng, d: usize) -> Vec<f64> {
    l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).vector
}

/// `c * B B^T / d` with standard normal `B`.
fn random_psd(rng: &mut Rng, d: usize, c: f64) -> Matrix {
    let b: Vec<f64> = (0..d * d).map(|_| rng.normal()).collect();
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let v: f64 = (0..d).map(|k| b[i * d + k] * b[j * d + k]).sum();
            m.set(i, j, c * v / d as f64);
        }
    }
    m
}

/// Random statistics with unit-length means and covariances of size
/// comparable to `tau^2`.
fn random_stats(rng: &mut Rng, k: usize, d: usize, tau: f64) -> CliResult<ClassStats> {
    let means: Vec<Vec<f64>> = (0..k).map(|_| unit(rng, d)).collect();
    let covs = (0..k)
        .map(|_| {
            let c = tau * tau * rng.uniform_in(0.1, 2.0);
            random_psd(rng, d, c)
        })
        .collect();
    Ok(ClassStats::from_parts(vec![100; k], means, covs)?)
}

pub fn bound_suite(rng: &Rng) -> CliResult<Vec<PropertyReport>> {
    const INSTANCES: usize = 200;
    let taus = [0.1, 0.5, 1.0];
    let mc = McConfig::default();
    // bound slack measured in bootstrap standard errors
    let mut min_slack = f64::INFINITY;
    for i in 0..INSTANCES {
        let mut r = rng.split("jensen").fork(i as u64);
        let d = 2 + r.below(7);
        let k = 2 + r.below(4);
        let tau = taus[i % taus.len()];
        let stats = random_stats(&mut r, k, d, tau)?;
        let q = unit(&mut r, d);
        let class = r.below(k);
        let t = Temperature::new(tau)?;
        let bound = dist_query_loss(&q, class, &stats, t)?.0;
        let est = mc_infinite_loss(&q, class, &stats, t, &mc, &mut r)?;
        let slack = (bound + 3.0 * est.stderr - est.estimate) / est.stderr.max(f64::MIN_POSITIVE);
        min_slack = min_slack.min(slack);
    }
    let jensen = PropertyReport {
        name: "jensen_bound".into(),
        trials: INSTANCES,
        passed: min_slack >= 0.0,
        worst: min_slack,
        limit: 0.0,
        margin: min_slack,
        note: "min over instances of (closed form + 3 stderr - MC estimate) / stderr".into(),
    };

    let mut worst_dist = 0.0f64;
    let mut worst_bank = 0.0f64;
    const REDUCTIONS: usize = 100;
    for i in 0..REDUCTIONS {
        let mut r = rng.split("reduction").fork(i as u64);
        let d = 2 + r.below(7);
        let k = 2 + r.below(4);
        let tau = Temperature::new(taus[i % taus.len()])?;
        let means: Vec<Vec<f64>> = (0..k).map(|_| unit(&mut r, d)).collect();
        let queries = QuerySet::new(d, (0..5).map(|_| Query::new(unit(&mut r, d), r.below(k))).collect())?;
        let protos = Prototypes::from_vectors(means.clone());
        let proto = proto_loss(&queries, &protos, tau)?.value;
        let zero = ClassStats::from_parts(vec![1; k], means.clone(), vec![Matrix::zeros(d, d); k])?;
        worst_dist = worst_dist.max((dist_loss(&queries, &zero, tau)?.value - proto).abs());
        // constant queues: every entry equals the prototype
        let len = 1 + r.below(6);
        let mut bank = CentroidBank::new(k, d, len)?;
        for (c, m) in means.iter().enumerate() {
            for _ in 0..len {
                bank.enqueue(c, m)?;
            }
        }
        let bank_value = pixcon::contrast::bank_loss(&queries, &bank, tau)?.value;
        worst_bank = worst_bank.max((bank_value - proto).abs());
    }
    Ok(vec![
        jensen,
        at_most("dist_zero_cov_equals_proto", REDUCTIONS, worst_dist, REDUCTION_TOLERANCE, "max |dist - proto|"),
        at_most("bank_constant_queues_equals_proto", REDUCTIONS, worst_bank, REDUCTION_TOLERANCE, "max |bank - proto|"),
    ])
}

fn fd_check<F: FnMut(&[f64]) -> f64>(x: &[f64], analytic: &[f64], f: F) -> f64 {
    relative_error(analytic, &central_difference(x, DEFAULT_STEP, f))
}

pub fn grads_suite(rng: &Rng) -> CliResult<Vec<PropertyReport>> {
    const TRIALS: usize = 20;
    let (h, w, k) = (6, 6, 4);
    let mut worst = [0.0f64; 6];
    for i in 0..TRIALS {
        let mut r = rng.split("losses").fork(i as u64);
        let logits: Vec<f64> = (0..h * w * k).map(|_| 2.0 * r.normal()).collect();
        let labels: Vec<u32> = (0..h * w)
            .map(|_| if r.bernoulli(0.1) { IGNORE } else { r.below(k) as u32 })
            .collect();
        let labels = LabelGrid::new(h, w, k, labels)?;
        let probs = |z: &[f64]| ProbGrid::from_logits(h, w, k, z).expect("valid logits");
        let ce = source_ce(&probs(&logits), &labels)?;
        let flat: Vec<f64> = ce.grads.concat();
        worst[0] = worst[0].max(fd_check(&logits, &flat, |z| source_ce(&probs(z), &labels).unwrap().value));
        let cw = ConfWeight::new(r.uniform())?;
        let ssl = target_ssl(&probs(&logits), &labels, cw)?;
        worst[1] = worst[1].max(fd_check(&logits, &ssl.grads.concat(), |z| {
            target_ssl(&probs(z), &labels, cw).unwrap().value
        }));

        let d = 2 + r.below(7);
        let kk = 2 + r.below(4);
        let tau = Temperature::new([0.1, 0.5, 1.0][i % 3])?;
        let stats = random_stats(&mut r, kk, d, tau.get())?;
        let protos = stats.prototypes();
        let mean_feature: Vec<f64> = unit(&mut r, d).iter().map(|v| v * r.uniform()).collect();
        for sign in [RegSign::AsWritten, RegSign::Diversity] {
            let g = reg_loss(&mean_feature, &protos, tau, sign)?.grads.remove(0);
            worst[2] = worst[2].max(fd_check(&mean_feature, &g, |x| reg_loss(x, &protos, tau, sign).unwrap().value));
        }
        let q = unit(&mut r, d);
        let class = r.below(kk);
        let (_, g) = proto_query_loss(&q, class, &protos, tau)?;
        worst[3] = worst[3].max(fd_check(&q, &g, |x| proto_query_loss(x, class, &protos, tau).unwrap().0));
        let mut bank = CentroidBank::new(kk, d, 4)?;
        for c in 0..kk {
            for _ in 0..1 + r.below(4) {
                bank.enqueue(c, &unit(&mut r, d))?;
            }
        }
        let (_, g) = bank_query_loss(&q, class, &bank, tau)?;
        worst[4] = worst[4].max(fd_check(&q, &g, |x| bank_query_loss(x, class, &bank, tau).unwrap().0));
        let (_, g) = dist_query_loss(&q, class, &stats, tau)?;
        worst[5] = worst[5].max(fd_check(&q, &g, |x| dist_query_loss(x, class, &stats, tau).unwrap().0));
    }
    let names = ["grad_source_ce", "grad_target_ssl", "grad_regularizer", "grad_proto", "grad_bank", "grad_dist"];
    let mut out: Vec<PropertyReport> = names
        .iter()
        .zip(worst)
        .map(|(n, w)| at_most(n, TRIALS, w, GRAD_TOLERANCE, "max relative error vs central differences"))
        .collect();

    // full objective on a 6x6 scene, every student parameter
    for (space, variant) in [ConceptSpace::Projection, ConceptSpace::Encoder]
        .into_iter()
        .flat_map(|s| [Variant::Proto, Variant::Bank, Variant::Dist].map(|v| (s, v)))
    {
        let mut worst = 0.0f64;
        const SCENES: u64 = 2;
        for s in 0..SCENES {
            let seed = rng.split("composite").fork(s).next_u64();
            let (model, batch) = random_batch(variant, space, 1.0, 1.0, seed)?;
            let g = evaluate(&model, &batch, true)?.1.expect("gradient requested");
            let err = fd_check(&model.params, &g, |p| {
                let m = Model::from_params(model.shape, p.to_vec()).unwrap();
                evaluate(&m, &batch, false).unwrap().0.total
            });
            worst = worst.max(err);
        }
        let name = format!(
            "grad_composite_{}{}",
            match variant {
                Variant::Proto => "proto",
                Variant::Bank => "bank",
                Variant::Dist => "dist",
            },
            match space {
                ConceptSpace::Projection => "",
                ConceptSpace::Encoder => "_encoder",
            }
        );
        out.push(at_most(&name, SCENES as usize, worst, GRAD_TOLERANCE, "6x6 scene, all student parameters"));
    }
    Ok(out)
}

/// Mean and population covariance of `rows` computed in one pass over the
/// whole stream.
fn pooled_oracle(rows: &[&[f64]]) -> (Vec<f64>, Vec<f64>) {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r.iter()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = vec![0.0; d * d];
    for r in rows {
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
            }
        }
    }
    (mean, cov)
}

fn rel_dev(got: &[f64], want: &[f64]) -> f64 {
    let diff: f64 = got.iter().zip(want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = want.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(f64::MIN_POSITIVE)
}

pub fn stats_suite(rng: &Rng) -> CliResult<Vec<PropertyReport>> {
    const STREAMS: usize = 50;
    const PIXELS: usize = 200;
    let mut worst = 0.0f64;
    for s in 0..STREAMS {
        let mut r = rng.split("streams").fork(s as u64);
        let d = 1 + r.below(8);
        let k = 1 + r.below(4);
        let offset: Vec<f64> = (0..d).map(|_| 3.0 * r.normal()).collect();
        let pixels: Vec<Vec<f64>> = (0..PIXELS)
            .map(|_| offset.iter().map(|o| o + r.normal() * r.uniform_in(0.1, 2.0)).collect())
            .collect();
        let labels: Vec<u32> = (0..PIXELS).map(|_| r.below(k) as u32).collect();
        let mut stats = ClassStats::new(k, d)?;
        let mut start = 0;
        while start < PIXELS {
            let m = (1 + r.below(40)).min(PIXELS - start);
            let feat = FeatureGrid::from_pixels(1, m, &pixels[start..start + m])?;
            let mask = LabelGrid::new(1, m, k, labels[start..start + m].to_vec())?;
            stats.observe(&feat, &mask)?;
            start += m;
        }
        for c in 0..k {
            let rows: Vec<&[f64]> = (0..PIXELS).filter(|&i| labels[i] as usize == c).map(|i| pixels[i].as_slice()).collect();
            if rows.is_empty() {
                continue;
            }
            let (mean, cov) = pooled_oracle(&rows);
            worst = worst.max(rel_dev(stats.mean(c), &mean));
            worst = worst.max(rel_dev(stats.covariance(c).as_slice(), &cov));
        }
    }
    let mut tiny = ClassStats::new(1, 1)?;
    for (batch, n) in [(vec![vec![0.0], vec![2.0]], 2), (vec![vec![4.0]], 1)] {
        tiny.observe(&FeatureGrid::from_pixels(1, n, &batch)?, &LabelGrid::filled(1, n, 1, 0)?)?;
    }
    let got = tiny.covariance(0).get(0, 0);
    let exact = PropertyReport {
        name: "two_batch_example_exact".into(),
        trials: 1,
        passed: got == 8.0 / 3.0 && tiny.mean(0)[0] == 2.0,
        worst: (got - 8.0 / 3.0).abs(),
        limit: 0.0,
        margin: -(got - 8.0 / 3.0).abs(),
        note: format!("variance of {{0, 2}} then {{4}}: {got:?}"),
    };
    Ok(vec![
        at_most("streaming_matches_pooled", STREAMS, worst, STATS_TOLERANCE, "max relative deviation of mean and covariance"),
        exact,
    ])
}
