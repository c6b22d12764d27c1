use super::*;
use crate::bank::CentroidBank;
use crate::gradcheck::{central_difference, relative_error, DEFAULT_STEP};
use crate::num::{l2_normalize, Matrix};
use crate::rng::Rng;
use crate::stats::{ClassStats, Prototypes};

fn tau(t: f64) -> Temperature {
    Temperature::new(t).unwrap()
}

fn unit(rng: &mut Rng, a: usize) -> Vec<f64> {
    l2_normalize(&(0..a).map(|_| rng.normal()).collect::<Vec<_>>()).vector
}

/// Random PSD matrix `L L^T` rescaled to the given trace.
fn random_psd(rng: &mut Rng, a: usize, trace: f64) -> Matrix {
    let l: Vec<f64> = (0..a * a).map(|_| rng.normal()).collect();
    let mut s = Matrix::zeros(a, a);
    for i in 0..a {
        for j in 0..a {
            let v: f64 = (0..a).map(|c| l[i * a + c] * l[j * a + c]).sum();
            s.set(i, j, v);
        }
    }
    let tr = s.trace();
    s.scale(trace / tr);
    s
}

fn random_stats(rng: &mut Rng, k: usize, a: usize, max_trace: f64) -> ClassStats {
    let means = (0..k).map(|_| unit(rng, a)).collect();
    let covs = (0..k)
        .map(|_| {
            let tr = rng.uniform() * max_trace;
            random_psd(rng, a, tr)
        })
        .collect();
    ClassStats::from_parts(vec![10; k], means, covs).unwrap()
}

fn single(q: Vec<f64>, class: usize) -> QuerySet {
    let dim = q.len();
    QuerySet::unnormalized(dim, vec![Query::new(q, class)]).unwrap()
}

#[test]
fn proto_hand_example() {
    let protos = Prototypes::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let qs = QuerySet::new(2, vec![Query::new(vec![1.0, 0.0], 0)]).unwrap();
    let l = proto_loss(&qs, &protos, tau(1.0)).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln();
    assert!((l.value - expected).abs() < 1e-15);
    assert!((l.value - 0.313262).abs() < 1e-6);
}

#[test]
fn proto_equidistant_query_gives_log_k() {
    // q orthogonal to every prototype
    let protos = Prototypes::from_vectors(vec![
        vec![0.0, 1.0, 0.0],
        vec![0.0, 0.0, 1.0],
        vec![0.0, -1.0, 0.0],
    ]);
    let l = proto_loss(&single(vec![1.0, 0.0, 0.0], 1), &protos, tau(0.1)).unwrap();
    assert!((l.value - 3f64.ln()).abs() < 1e-14);
}

#[test]
fn proto_requires_two_initialized_classes() {
    let mut protos = Prototypes::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    protos.initialized[1] = false;
    let err = proto_loss(&single(vec![1.0, 0.0], 0), &protos, tau(1.0)).unwrap_err();
    assert!(matches!(err, Error::State(_)));
    protos.initialized = vec![false, true];
    assert!(matches!(
        proto_loss(&single(vec![1.0, 0.0], 0), &protos, tau(1.0)),
        Err(Error::State(_))
    ));
}

#[test]
fn uninitialized_classes_are_not_negatives() {
    let mut protos = Prototypes::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
    protos.initialized[2] = false;
    let two = Prototypes::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    let q = single(vec![0.6, 0.8], 0);
    let a = proto_loss(&q, &protos, tau(0.5)).unwrap();
    let b = proto_loss(&q, &two, tau(0.5)).unwrap();
    assert_eq!(a.value, b.value);
}

#[test]
fn query_set_validation() {
    assert!(QuerySet::new(2, vec![Query::new(vec![1.0, 1.0], 0)]).is_err());
    assert!(QuerySet::new(2, vec![Query::new(vec![1.0], 0)]).is_err());
    assert!(QuerySet::unnormalized(2, vec![Query::new(vec![1.0, 1.0], 0)]).is_ok());
    assert!(Temperature::new(0.0).is_err());
    let protos = Prototypes::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
    assert!(matches!(
        proto_loss(&single(vec![1.0, 0.0], 5), &protos, tau(1.0)),
        Err(Error::Argument(_))
    ));
}

#[test]
fn aggregate_examples() {
    assert_eq!(aggregate_cl(&[0.7]).unwrap(), 0.7);
    assert!(aggregate_cl(&[]).is_err());
    let a = [0.1, 0.5, 0.9];
    let doubled = [0.1, 0.5, 0.9, 0.1, 0.5, 0.9];
    assert!((aggregate_cl(&a).unwrap() - aggregate_cl(&doubled).unwrap()).abs() < 1e-15);
    let b = [2.0, 4.0];
    let pooled: Vec<f64> = a.iter().chain(&b).copied().collect();
    let weighted = (aggregate_cl(&a).unwrap() * 3.0 + aggregate_cl(&b).unwrap() * 2.0) / 5.0;
    assert!((aggregate_cl(&pooled).unwrap() - weighted).abs() < 1e-14);
}

#[test]
fn proto_loss_over_set_is_mean_of_singles() {
    let mut rng = Rng::new(9);
    let protos = Prototypes::from_vectors((0..3).map(|_| unit(&mut rng, 4)).collect());
    let queries: Vec<Query> = (0..7).map(|i| Query::new(unit(&mut rng, 4), i % 3)).collect();
    let set = QuerySet::new(4, queries.clone()).unwrap();
    let whole = proto_loss(&set, &protos, tau(0.2)).unwrap();
    let singles: Vec<f64> = queries
        .iter()
        .map(|q| proto_loss(&single(q.vector.clone(), q.class), &protos, tau(0.2)).unwrap().value)
        .collect();
    assert!((whole.value - singles.iter().sum::<f64>() / 7.0).abs() < 1e-14);
}

#[test]
fn proto_translation_matches_direct_recomputation() {
    let mut rng = Rng::new(21);
    let protos: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 3)).collect();
    let q = unit(&mut rng, 3);
    let shift = vec![0.3, -0.2, 0.5];
    let shifted: Vec<Vec<f64>> = protos
        .iter()
        .map(|p| p.iter().zip(&shift).map(|(a, b)| a + b).collect())
        .collect();
    let sq: Vec<f64> = q.iter().zip(&shift).map(|(a, b)| a + b).collect();
    let t = 0.3;
    let got = proto_loss(&single(sq.clone(), 2), &Prototypes::from_vectors(shifted.clone()), tau(t))
        .unwrap()
        .value;
    let dots: Vec<f64> = shifted.iter().map(|p| p.iter().zip(&sq).map(|(a, b)| a * b).sum::<f64>() / t).collect();
    let direct = dots.iter().map(|d| d.exp()).sum::<f64>().ln() - dots[2];
    assert!((got - direct).abs() < 1e-12);
}

#[test]
fn bank_with_constant_queues_equals_proto() {
    let mut rng = Rng::new(2);
    let protos: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
    let mut bank = CentroidBank::new(3, 4, 5).unwrap();
    for (k, p) in protos.iter().enumerate() {
        for _ in 0..5 {
            bank.enqueue(k, p).unwrap();
        }
    }
    let queries: Vec<Query> = (0..6).map(|i| Query::new(unit(&mut rng, 4), i % 3)).collect();
    let set = QuerySet::new(4, queries).unwrap();
    let b = bank_loss(&set, &bank, tau(0.1)).unwrap();
    let p = proto_loss(&set, &Prototypes::from_vectors(protos), tau(0.1)).unwrap();
    assert!((b.value - p.value).abs() < 1e-12);
    for (gb, gp) in b.grads.iter().zip(&p.grads) {
        assert!(relative_error(gb, gp) < 1e-10);
    }
}

#[test]
fn bank_of_single_entries_equals_proto_over_contents() {
    let mut rng = Rng::new(4);
    let mut bank = CentroidBank::new(3, 3, 1).unwrap();
    for k in 0..3 {
        for _ in 0..4 {
            bank.enqueue(k, &unit(&mut rng, 3)).unwrap();
        }
    }
    let contents: Vec<Vec<f64>> = (0..3).map(|k| bank.snapshot(k)[0].clone()).collect();
    let set = QuerySet::new(3, vec![Query::new(unit(&mut rng, 3), 1)]).unwrap();
    let b = bank_loss(&set, &bank, tau(0.5)).unwrap();
    let p = proto_loss(&set, &Prototypes::from_vectors(contents), tau(0.5)).unwrap();
    assert!((b.value - p.value).abs() < 1e-12);
}

#[test]
fn bank_matches_double_loop_oracle() {
    let mut rng = Rng::new(17);
    let (k, b, a, t) = (3, 5, 4, 0.5);
    let mut bank = CentroidBank::new(k, a, b).unwrap();
    for c in 0..k {
        for _ in 0..b {
            bank.enqueue(c, &unit(&mut rng, a)).unwrap();
        }
    }
    let queries: Vec<Query> = (0..4).map(|i| Query::new(unit(&mut rng, a), i % k)).collect();
    let got = bank_loss(&QuerySet::new(a, queries.clone()).unwrap(), &bank, tau(t)).unwrap();

    let dotp = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| u * v).sum::<f64>();
    let mut total = 0.0;
    for q in &queries {
        let pos = bank.snapshot(q.class);
        let mut lq = 0.0;
        for p in &pos {
            let num = (dotp(&q.vector, p) / t).exp();
            let mut neg = 0.0;
            for c in (0..k).filter(|&c| c != q.class) {
                let entries = bank.snapshot(c);
                let mut s = 0.0;
                for v in &entries {
                    s += (dotp(&q.vector, v) / t).exp();
                }
                neg += s / entries.len() as f64;
            }
            lq += -(num / (num + neg)).ln();
        }
        total += lq / pos.len() as f64;
    }
    assert!((got.value - total / queries.len() as f64).abs() < 1e-10);
}

#[test]
fn bank_errors_name_the_empty_class() {
    let mut bank = CentroidBank::new(3, 2, 4).unwrap();
    bank.enqueue(0, &[1.0, 0.0]).unwrap();
    let err = bank_loss(&single(vec![0.0, 1.0], 2), &bank, tau(1.0)).unwrap_err();
    assert!(matches!(&err, Error::State(m) if m.contains("class 2")));
    assert!(matches!(
        bank_loss(&single(vec![0.0, 1.0], 0), &bank, tau(1.0)),
        Err(Error::State(_))
    ));
}

#[test]
fn dist_with_zero_covariance_equals_proto() {
    let mut rng = Rng::new(8);
    for _ in 0..100 {
        let (k, a) = (2 + rng.below(4), 2 + rng.below(7));
        let stats = random_stats(&mut rng, k, a, 1.0).without_covariance();
        let t = [0.1, 0.5, 1.0][rng.below(3)];
        let set = QuerySet::new(a, (0..3).map(|_| Query::new(unit(&mut rng, a), rng.below(k))).collect()).unwrap();
        let d = dist_loss(&set, &stats, tau(t)).unwrap();
        let p = proto_loss(&set, &stats.prototypes(), tau(t)).unwrap();
        assert!((d.value - p.value).abs() < 1e-12);
    }
}

#[test]
fn dist_hand_example() {
    let mut cov = Matrix::identity(2);
    cov.scale(0.25);
    let stats = ClassStats::from_parts(
        vec![1, 1],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        vec![cov.clone(), cov],
    )
    .unwrap();
    let l = dist_loss(&single(vec![1.0, 0.0], 0), &stats, tau(1.0)).unwrap();
    let expected = (1.0 + (-1.0f64).exp()).ln() + 0.125;
    assert!((l.value - expected).abs() < 1e-15);
    assert!((l.value - 0.438262).abs() < 1e-6);
}

#[test]
fn losses_are_invariant_to_negative_class_order() {
    let mut rng = Rng::new(31);
    let stats = random_stats(&mut rng, 4, 3, 0.5);
    let q = unit(&mut rng, 3);
    // swap classes 1 and 3 (both negatives for a class-0 query)
    let perm = [0usize, 3, 2, 1];
    let swapped = ClassStats::from_parts(
        perm.iter().map(|&k| stats.count(k)).collect(),
        perm.iter().map(|&k| stats.mean(k).to_vec()).collect(),
        perm.iter().map(|&k| stats.covariance(k).clone()).collect(),
    )
    .unwrap();
    let a = dist_loss(&single(q.clone(), 0), &stats, tau(0.2)).unwrap();
    let b = dist_loss(&single(q.clone(), 0), &swapped, tau(0.2)).unwrap();
    assert!((a.value - b.value).abs() < 1e-12);
    let pa = proto_loss(&single(q.clone(), 0), &stats.prototypes(), tau(0.2)).unwrap();
    let pb = proto_loss(&single(q, 0), &swapped.prototypes(), tau(0.2)).unwrap();
    assert!((pa.value - pb.value).abs() < 1e-12);
}

#[test]
fn reg_uniform_softmax_gives_minus_one() {
    let protos = Prototypes::from_vectors(vec![vec![0.0, 1.0], vec![0.0, -1.0], vec![0.0, 0.5]]);
    let l = reg_loss(&[1.0, 0.0], &protos, tau(0.1), RegSign::AsWritten).unwrap();
    assert!((l.value + 1.0).abs() < 1e-15);
    let d = reg_loss(&[1.0, 0.0], &protos, tau(0.1), RegSign::Diversity).unwrap();
    assert!((d.value - 1.0).abs() < 1e-15);
}

#[test]
fn reg_concentrated_softmax_stays_finite() {
    let protos = Prototypes::from_vectors(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
    let l = reg_loss(&[1.0, 0.0], &protos, tau(1e-3), RegSign::AsWritten).unwrap();
    assert!(l.value.is_finite());
    assert!(l.value < -1000.0);
}

#[test]
fn reg_matches_direct_formula() {
    let mut rng = Rng::new(12);
    let protos: Vec<Vec<f64>> = (0..4).map(|_| unit(&mut rng, 5)).collect();
    let qm: Vec<f64> = (0..5).map(|_| rng.normal() * 0.3).collect();
    let t = 0.5;
    let got = reg_loss(&qm, &Prototypes::from_vectors(protos.clone()), tau(t), RegSign::AsWritten).unwrap();
    let z: Vec<f64> = protos.iter().map(|p| p.iter().zip(&qm).map(|(a, b)| a * b).sum::<f64>() / t).collect();
    let denom: f64 = z.iter().map(|v| v.exp()).sum();
    let direct: f64 = z.iter().map(|v| (v.exp() / denom).ln()).sum::<f64>() / (4.0 * 4f64.ln());
    assert!((got.value - direct).abs() < 1e-10);
    let mut one = Prototypes::from_vectors(protos);
    one.initialized = vec![true, false, false, false];
    assert!(matches!(reg_loss(&qm, &one, tau(t), RegSign::AsWritten), Err(Error::State(_))));
}

/// Finite-difference check of every query-gradient on random instances.
#[test]
fn query_gradients_match_finite_differences() {
    let mut rng = Rng::new(1234);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (k, a) = (2 + rng.below(4), 2 + rng.below(7));
        let t = [0.1, 0.5, 1.0][rng.below(3)];
        // covariance scaled with tau^2 keeps the quadratic terms O(1)
        let stats = random_stats(&mut rng, k, a, 4.0 * t * t);
        let protos = stats.prototypes();
        let mut bank = CentroidBank::new(k, a, 4).unwrap();
        for c in 0..k {
            for _ in 0..1 + rng.below(4) {
                bank.enqueue(c, &unit(&mut rng, a)).unwrap();
            }
        }
        let class = rng.below(k);
        let q = unit(&mut rng, a);

        let analytic = proto_loss(&single(q.clone(), class), &protos, tau(t)).unwrap().grads.remove(0);
        let numeric = central_difference(&q, DEFAULT_STEP, |x| {
            proto_loss(&single(x.to_vec(), class), &protos, tau(t)).unwrap().value
        });
        worst = worst.max(relative_error(&analytic, &numeric));

        let analytic = bank_loss(&single(q.clone(), class), &bank, tau(t)).unwrap().grads.remove(0);
        let numeric = central_difference(&q, DEFAULT_STEP, |x| {
            bank_loss(&single(x.to_vec(), class), &bank, tau(t)).unwrap().value
        });
        worst = worst.max(relative_error(&analytic, &numeric));

        let analytic = dist_loss(&single(q.clone(), class), &stats, tau(t)).unwrap().grads.remove(0);
        let numeric = central_difference(&q, DEFAULT_STEP, |x| {
            dist_loss(&single(x.to_vec(), class), &stats, tau(t)).unwrap().value
        });
        worst = worst.max(relative_error(&analytic, &numeric));

        for sign in [RegSign::AsWritten, RegSign::Diversity] {
            let qm: Vec<f64> = q.iter().map(|v| v * 0.7).collect();
            let analytic = reg_loss(&qm, &protos, tau(t), sign).unwrap().grads.remove(0);
            let numeric = central_difference(&qm, DEFAULT_STEP, |x| reg_loss(x, &protos, tau(t), sign).unwrap().value);
            worst = worst.max(relative_error(&analytic, &numeric));
        }
    }
    assert!(worst < 1e-6, "worst relative error {worst}");
}

#[test]
fn mc_with_zero_covariance_equals_proto() {
    let mut rng = Rng::new(77);
    let stats = random_stats(&mut rng, 3, 4, 1.0).without_covariance();
    let q = unit(&mut rng, 4);
    let cfg = McConfig { samples: 10_000, bootstrap: 20 };
    let mc = mc_infinite_loss(&q, 1, &stats, tau(0.5), &cfg, &mut rng).unwrap();
    let p = proto_loss(&single(q, 1), &stats.prototypes(), tau(0.5)).unwrap();
    assert!((mc.estimate - p.value).abs() < 1e-12);
    assert_eq!(mc.stderr, 0.0);
}

#[test]
fn mc_respects_closed_form_bound() {
    let mut rng = Rng::new(99);
    for _ in 0..10 {
        let (k, a) = (2 + rng.below(4), 2 + rng.below(7));
        let t = [0.1, 0.5, 1.0][rng.below(3)];
        let stats = random_stats(&mut rng, k, a, 4.0);
        let q = unit(&mut rng, a);
        let class = rng.below(k);
        let mc = mc_infinite_loss(&q, class, &stats, tau(t), &McConfig::default(), &mut rng).unwrap();
        let bound = dist_loss(&single(q, class), &stats, tau(t)).unwrap().value;
        assert!(mc.estimate <= bound + 3.0 * mc.stderr, "{} > {} + 3*{}", mc.estimate, bound, mc.stderr);
    }
}

#[test]
fn mc_stderr_scales_with_inverse_root_samples() {
    let mut rng = Rng::new(5);
    let stats = random_stats(&mut rng, 3, 4, 1.0);
    let q = unit(&mut rng, 4);
    let small = McConfig { samples: 10_000, bootstrap: 400 };
    let large = McConfig { samples: 20_000, bootstrap: 400 };
    let a = mc_infinite_loss(&q, 0, &stats, tau(0.5), &small, &mut rng.split("a")).unwrap();
    let b = mc_infinite_loss(&q, 0, &stats, tau(0.5), &large, &mut rng.split("b")).unwrap();
    let ratio = b.stderr / a.stderr;
    let target = 1.0 / 2f64.sqrt();
    assert!((ratio - target).abs() <= 0.2 * target, "ratio {ratio}");
}

#[test]
fn mc_rejects_indefinite_covariance() {
    let mut cov = Matrix::identity(2);
    cov.set(1, 1, -1.0);
    let stats = ClassStats::from_parts(
        vec![1, 1],
        vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        vec![cov, Matrix::zeros(2, 2)],
    )
    .unwrap();
    let err = mc_infinite_loss(&[1.0, 0.0], 0, &stats, tau(1.0), &McConfig::default(), &mut Rng::new(0));
    assert!(matches!(err, Err(Error::Numeric(_))));
}
