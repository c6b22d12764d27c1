//! Segmentation metrics: confusion matrix, IoU/mIoU, pixel accuracy, and the
//! pixel-wise discrimination distance (PDD).

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grid::{FeatureGrid, LabelGrid, IGNORE};
use crate::num::cosine_sim;
use crate::stats::Prototypes;

/// Guard added to the PDD denominator.
pub const PDD_EPS: f64 = 1e-6;

/// `counts[pred][truth]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, pred: usize, truth: usize) -> u64 {
        self.counts[pred * self.classes + truth]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies `pred` against `truth`, skipping IGNORE truth pixels.
    pub fn accumulate(&mut self, pred: &LabelGrid, truth: &LabelGrid) -> Result<()> {
        truth.same_shape(pred.height(), pred.width())?;
        for i in 0..truth.len() {
            let t = truth.get(i);
            if t == IGNORE {
                continue;
            }
            let p = pred.get(i);
            if p == IGNORE || p as usize >= self.classes || t as usize >= self.classes {
                return Err(Error::Argument(format!("pixel {i}: label outside confusion matrix")));
            }
            self.counts[p as usize * self.classes + t as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(dim_err("confusion classes", self.classes, other.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Fraction of evaluated pixels on the diagonal (0 for an empty matrix).
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes).map(|k| self.get(k, k)).sum();
        diag as f64 / total as f64
    }
}

pub fn confusion(pred: &LabelGrid, truth: &LabelGrid) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(truth.num_classes().max(pred.num_classes()));
    cm.accumulate(pred, truth)?;
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes with an empty union.
    pub per_class: Vec<Option<f64>>,
    pub mean: f64,
}

/// `IoU_k = TP / (TP + FP + FN)`; classes with an empty union are excluded
/// from the mean.
pub fn miou(cm: &ConfusionMatrix) -> IouReport {
    let k = cm.classes;
    let per_class: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let pred_total: u64 = (0..k).map(|t| cm.get(c, t)).sum();
            let truth_total: u64 = (0..k).map(|p| cm.get(p, c)).sum();
            let union = pred_total + truth_total - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    IouReport { per_class, mean }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PddReport {
    /// `None` for classes with no labelled pixel.
    pub per_class: Vec<Option<f64>>,
    pub counts: Vec<u64>,
}

impl PddReport {
    /// Mean over the classes that have a value.
    pub fn mean(&self) -> f64 {
        let v: Vec<f64> = self.per_class.iter().flatten().copied().collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }
}

/// Mean over the pixels of class `k` of
/// `sim(x, mu_k) / (sum_{i != k} max(sim(x, mu_i), 0) + eps)` with cosine
/// similarity. Uninitialized prototypes are left out of the denominator.
pub fn pdd(features: &FeatureGrid, labels: &LabelGrid, protos: &Prototypes) -> Result<PddReport> {
    labels.same_shape(features.height(), features.width())?;
    let k = protos.len();
    if labels.num_classes() > k {
        return Err(dim_err("prototype count", labels.num_classes(), k));
    }
    let mut sums = vec![0.0; k];
    let mut counts = vec![0u64; k];
    let mut sims = vec![0.0; k];
    for i in 0..features.len() {
        let Some(c) = labels.class_of(i) else { continue };
        if !protos.initialized[c] {
            return Err(Error::State(format!("prototype for class {c} is uninitialized")));
        }
        let x = features.pixel(i);
        for (j, s) in sims.iter_mut().enumerate() {
            *s = if protos.initialized[j] {
                cosine_sim(x, &protos.vectors[j])?.0
            } else {
                0.0
            };
        }
        let others: f64 = (0..k).filter(|&j| j != c).map(|j| sims[j].max(0.0)).sum();
        sums[c] += sims[c] / (others + PDD_EPS);
        counts[c] += 1;
    }
    let per_class = sums
        .iter()
        .zip(&counts)
        .map(|(s, &n)| (n > 0).then(|| s / n as f64))
        .collect();
    Ok(PddReport { per_class, counts })
}

/// Per-class mean of the features under `labels` (ground truth or predicted),
/// for use as PDD prototypes.
pub fn class_means(features: &FeatureGrid, labels: &LabelGrid, classes: usize) -> Result<Prototypes> {
    let local = crate::stats::local_centroids(features, labels)?;
    let mut vectors = vec![vec![0.0; features.dim()]; classes];
    let mut initialized = vec![false; classes];
    for (k, (c, _)) in local {
        vectors[k] = c;
        initialized[k] = true;
    }
    Ok(Prototypes { vectors, initialized })
}

/// Writes one CSV row per labelled pixel: `pixel,class,e0,...,e{A-1}`.
pub fn export_embeddings(features: &FeatureGrid, labels: &LabelGrid, path: &Path) -> Result<usize> {
    labels.same_shape(features.height(), features.width())?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(path, e);
    let header: Vec<String> = (0..features.dim()).map(|d| format!("e{d}")).collect();
    writeln!(w, "pixel,class,{}", header.join(",")).map_err(io)?;
    let mut rows = 0;
    for i in 0..features.len() {
        let Some(c) = labels.class_of(i) else { continue };
        let coords: Vec<String> = features.pixel(i).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(w, "{i},{c},{}", coords.join(",")).map_err(io)?;
        rows += 1;
    }
    w.flush().map_err(io)?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn grid(h: usize, w: usize, k: usize, l: Vec<u32>) -> LabelGrid {
        LabelGrid::new(h, w, k, l).unwrap()
    }

    #[test]
    fn confusion_examples() {
        let t = grid(2, 2, 3, vec![0, 1, 2, 1]);
        let cm = confusion(&t, &t).unwrap();
        assert_eq!(cm.get(1, 1), 2);
        assert_eq!(cm.total(), 4);
        assert_eq!((0..3).map(|k| cm.get(k, k)).sum::<u64>(), 4);
        let ign = grid(2, 2, 3, vec![IGNORE; 4]);
        assert_eq!(confusion(&t, &ign).unwrap().total(), 0);
        assert!(confusion(&t, &grid(1, 4, 3, vec![0; 4])).is_err());
    }

    #[test]
    fn confusion_matches_tally_oracle() {
        let mut rng = Rng::new(6);
        let p: Vec<u32> = (0..100).map(|_| rng.below(4) as u32).collect();
        let t: Vec<u32> = (0..100).map(|_| if rng.bernoulli(0.1) { IGNORE } else { rng.below(4) as u32 }).collect();
        let cm = confusion(&grid(10, 10, 4, p.clone()), &grid(10, 10, 4, t.clone())).unwrap();
        let mut tally = [[0u64; 4]; 4];
        for (a, b) in p.iter().zip(&t) {
            if *b != IGNORE {
                tally[*a as usize][*b as usize] += 1;
            }
        }
        for a in 0..4 {
            for b in 0..4 {
                assert_eq!(cm.get(a, b), tally[a][b]);
            }
        }
    }

    #[test]
    fn miou_examples() {
        let t = grid(1, 4, 2, vec![0, 0, 1, 1]);
        let r = miou(&confusion(&t, &t).unwrap());
        assert_eq!(r.per_class, vec![Some(1.0), Some(1.0)]);
        assert_eq!(r.mean, 1.0);
        let swapped = grid(1, 4, 2, vec![1, 1, 0, 0]);
        let r = miou(&confusion(&swapped, &t).unwrap());
        assert_eq!(r.per_class, vec![Some(0.0), Some(0.0)]);
        // class 2 never predicted nor present
        let r = miou(&confusion(&grid(1, 2, 3, vec![0, 1]), &grid(1, 2, 3, vec![0, 1])).unwrap());
        assert_eq!(r.per_class[2], None);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn miou_matches_set_oracle() {
        use std::collections::BTreeSet;
        let mut rng = Rng::new(13);
        let p: Vec<u32> = (0..64).map(|_| rng.below(3) as u32).collect();
        let t: Vec<u32> = (0..64).map(|_| rng.below(3) as u32).collect();
        let r = miou(&confusion(&grid(8, 8, 3, p.clone()), &grid(8, 8, 3, t.clone())).unwrap());
        let mut ious = Vec::new();
        for k in 0..3u32 {
            let ps: BTreeSet<usize> = (0..64).filter(|&i| p[i] == k).collect();
            let ts: BTreeSet<usize> = (0..64).filter(|&i| t[i] == k).collect();
            let inter = ps.intersection(&ts).count() as f64;
            let union = ps.union(&ts).count() as f64;
            ious.push(inter / union);
            assert!((r.per_class[k as usize].unwrap() - inter / union).abs() < 1e-12);
        }
        assert!((r.mean - ious.iter().sum::<f64>() / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_invariant_to_relabeling() {
        let mut rng = Rng::new(2);
        let p: Vec<u32> = (0..50).map(|_| rng.below(3) as u32).collect();
        let t: Vec<u32> = (0..50).map(|_| rng.below(3) as u32).collect();
        let perm = [2u32, 0, 1];
        let pp: Vec<u32> = p.iter().map(|&l| perm[l as usize]).collect();
        let tp: Vec<u32> = t.iter().map(|&l| perm[l as usize]).collect();
        let a = miou(&confusion(&grid(5, 10, 3, p), &grid(5, 10, 3, t)).unwrap());
        let b = miou(&confusion(&grid(5, 10, 3, pp), &grid(5, 10, 3, tp)).unwrap());
        assert!((a.mean - b.mean).abs() < 1e-15);
    }

    #[test]
    fn confusion_additive_over_partitions() {
        let mut rng = Rng::new(3);
        let p: Vec<u32> = (0..40).map(|_| rng.below(3) as u32).collect();
        let t: Vec<u32> = (0..40).map(|_| rng.below(3) as u32).collect();
        let whole = confusion(&grid(4, 10, 3, p.clone()), &grid(4, 10, 3, t.clone())).unwrap();
        let mut parts = confusion(&grid(2, 10, 3, p[..20].to_vec()), &grid(2, 10, 3, t[..20].to_vec())).unwrap();
        parts
            .merge(&confusion(&grid(2, 10, 3, p[20..].to_vec()), &grid(2, 10, 3, t[20..].to_vec())).unwrap())
            .unwrap();
        assert_eq!(whole, parts);
    }

    #[test]
    fn pdd_hand_example() {
        // unit prototypes with cosine 0.9 and 0.1 to x = (1, 0)
        let f = FeatureGrid::new(1, 1, 2, vec![1.0, 0.0]).unwrap();
        let protos = Prototypes::from_vectors(vec![
            vec![0.9, (1.0f64 - 0.81).sqrt()],
            vec![0.1, (1.0f64 - 0.01).sqrt()],
        ]);
        let r = pdd(&f, &grid(1, 1, 2, vec![0]), &protos).unwrap();
        let v = r.per_class[0].unwrap();
        assert!((v - 0.9 / (0.1 + PDD_EPS)).abs() < 1e-9);
        assert!((v - 8.99991).abs() < 1e-5);
        assert_eq!(r.per_class[1], None);
    }

    #[test]
    fn pdd_orthogonal_prototypes_stay_finite() {
        let f = FeatureGrid::new(1, 2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let protos = Prototypes::from_vectors(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let r = pdd(&f, &grid(1, 2, 2, vec![0, 1]), &protos).unwrap();
        for v in r.per_class.iter().flatten() {
            assert!(v.is_finite());
            assert!((v - 1.0 / PDD_EPS).abs() < 1e-3);
        }
    }

    #[test]
    fn pdd_is_order_invariant_and_monotone() {
        let mut rng = Rng::new(44);
        let px: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| rng.normal()).collect()).collect();
        let labels = vec![0u32, 1, 2, 0, 1, 2];
        let protos = Prototypes::from_vectors(vec![vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.3], vec![0.2, 0.1, 1.0]]);
        let a = pdd(&FeatureGrid::from_pixels(1, 6, &px).unwrap(), &grid(1, 6, 3, labels.clone()), &protos).unwrap();
        let order = [3, 5, 1, 0, 4, 2];
        let pp: Vec<Vec<f64>> = order.iter().map(|&i| px[i].clone()).collect();
        let pl: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
        let b = pdd(&FeatureGrid::from_pixels(1, 6, &pp).unwrap(), &grid(1, 6, 3, pl), &protos).unwrap();
        for (x, y) in a.per_class.iter().zip(&b.per_class) {
            assert!((x.unwrap() - y.unwrap()).abs() < 1e-12);
        }

        // orthonormal prototypes; x(theta) = (0.8 cos, 0.6, -0.8 sin) keeps its
        // similarity to mu1 fixed and its (clamped) similarity to mu2 at zero
        let protos = Prototypes::from_vectors(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let score = |theta: f64| {
            let x = vec![0.8 * theta.cos(), 0.6, -0.8 * theta.sin()];
            let f = FeatureGrid::new(1, 1, 3, x).unwrap();
            pdd(&f, &grid(1, 1, 3, vec![0]), &protos).unwrap().per_class[0].unwrap()
        };
        assert!(score(0.0) > score(0.1));
        assert!(score(0.1) > score(0.3));
    }

    #[test]
    fn export_writes_labelled_rows_and_round_trips() {
        let mut rng = Rng::new(1);
        let vals: Vec<f64> = (0..4 * 3).map(|_| rng.normal() / 3.0).collect();
        let f = FeatureGrid::new(2, 2, 3, vals.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        assert_eq!(export_embeddings(&f, &grid(2, 2, 2, vec![0, 1, 1, 0]), &path).unwrap(), 4);
        let text = std::fs::read_to_string(&path).unwrap();
        let rows: Vec<&str> = text.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        for (i, row) in rows.iter().enumerate() {
            let fields: Vec<&str> = row.split(',').collect();
            for d in 0..3 {
                let back: f64 = fields[2 + d].parse().unwrap();
                assert_eq!(back.to_bits(), vals[i * 3 + d].to_bits());
            }
        }
        assert_eq!(export_embeddings(&f, &grid(2, 2, 2, vec![0, IGNORE, 1, IGNORE]), &path).unwrap(), 2);
        assert!(export_embeddings(&f, &grid(2, 2, 2, vec![0; 4]), Path::new("/nonexistent/x/y.csv")).is_err());
    }
}
