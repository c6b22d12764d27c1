//! Fixtures shared by the benchmarks.

use pixcon::bank::CentroidBank;
use pixcon::contrast::{Query, QuerySet};
use pixcon::num::{l2_normalize, Matrix};
use pixcon::{ClassStats, FeatureGrid, LabelGrid, Rng};

/// `n` unit queries of dimension `dim` over `classes` classes.
pub fn queries(n: usize, dim: usize, classes: usize, rng: &mut Rng) -> QuerySet {
    let qs = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            Query::new(l2_normalize(&v).vector, rng.below(classes))
        })
        .collect();
    QuerySet::new(dim, qs).expect("unit queries")
}

/// Statistics with unit means and small PSD covariances.
pub fn stats(classes: usize, dim: usize, rng: &mut Rng) -> ClassStats {
    let means = (0..classes)
        .map(|_| l2_normalize(&(0..dim).map(|_| rng.normal()).collect::<Vec<_>>()).vector)
        .collect();
    let covs = (0..classes)
        .map(|_| {
            let mut m = Matrix::zeros(dim, dim);
            let v: Vec<f64> = (0..dim).map(|_| 0.1 * rng.normal()).collect();
            m.add_outer(1.0, &v, &v);
            m
        })
        .collect();
    ClassStats::from_parts(vec![10; classes], means, covs).expect("consistent statistics")
}

/// Full bank of random unit centroids.
pub fn bank(classes: usize, dim: usize, capacity: usize, rng: &mut Rng) -> CentroidBank {
    let mut b = CentroidBank::new(classes, dim, capacity).expect("valid bank");
    for k in 0..classes {
        for _ in 0..capacity {
            let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            b.enqueue(k, &l2_normalize(&v).vector).expect("matching dim");
        }
    }
    b
}

/// Random feature map with labels.
pub fn feature_map(h: usize, w: usize, dim: usize, classes: usize, rng: &mut Rng) -> (FeatureGrid, LabelGrid) {
    let data = (0..h * w * dim).map(|_| rng.normal()).collect();
    let labels = (0..h * w).map(|_| rng.below(classes) as u32).collect();
    (
        FeatureGrid::new(h, w, dim, data).expect("sized data"),
        LabelGrid::new(h, w, classes, labels).expect("labels in range"),
    )
}
