//! Per-class FIFO queues of recent local centroids.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

/// Default queue capacity.
pub const DEFAULT_CAPACITY: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CentroidBank {
    capacity: usize,
    dim: usize,
    queues: Vec<VecDeque<Vec<f64>>>,
}

impl CentroidBank {
    pub fn new(num_classes: usize, dim: usize, capacity: usize) -> Result<Self> {
        if num_classes == 0 || dim == 0 || capacity == 0 {
            return Err(Error::Argument(
                "bank needs positive class count, dimension and capacity".into(),
            ));
        }
        Ok(Self {
            capacity,
            dim,
            queues: vec![VecDeque::with_capacity(capacity); num_classes],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.queues.len()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self, k: usize) -> usize {
        self.queues[k].len()
    }

    pub fn is_empty(&self, k: usize) -> bool {
        self.queues[k].is_empty()
    }

    /// Appends `centroid` to queue `k`, evicting the oldest entry when full.
    pub fn enqueue(&mut self, k: usize, centroid: &[f64]) -> Result<()> {
        if k >= self.queues.len() {
            return Err(Error::Argument(format!(
                "class {k} out of range for {} queues",
                self.queues.len()
            )));
        }
        if centroid.len() != self.dim {
            return Err(dim_err("centroid length", self.dim, centroid.len()));
        }
        if centroid.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite centroid".into()));
        }
        let q = &mut self.queues[k];
        if q.len() == self.capacity {
            q.pop_front();
        }
        q.push_back(centroid.to_vec());
        Ok(())
    }

    /// Copy of queue `k`, oldest first. Out-of-range classes read as empty.
    pub fn snapshot(&self, k: usize) -> Vec<Vec<f64>> {
        self.queues
            .get(k)
            .map(|q| q.iter().cloned().collect())
            .unwrap_or_default()
    }

    pub(crate) fn queue(&self, k: usize) -> &VecDeque<Vec<f64>> {
        &self.queues[k]
    }

    /// Copy with every entry scaled to unit length (degenerate entries kept).
    pub fn normalized(&self) -> Self {
        let mut out = self.clone();
        for q in &mut out.queues {
            for v in q.iter_mut() {
                *v = crate::num::l2_normalize(v).vector;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn fifo_examples() {
        let mut b = CentroidBank::new(2, 1, 2).unwrap();
        b.enqueue(0, &[1.0]).unwrap();
        assert_eq!(b.snapshot(0), vec![vec![1.0]]);
        b.enqueue(0, &[2.0]).unwrap();
        b.enqueue(0, &[3.0]).unwrap();
        assert_eq!(b.snapshot(0), vec![vec![2.0], vec![3.0]]);
        assert!(b.snapshot(1).is_empty());
        assert!(matches!(b.enqueue(2, &[0.0]), Err(Error::Argument(_))));
        assert!(matches!(b.enqueue(0, &[0.0, 1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn snapshot_is_a_copy() {
        let mut b = CentroidBank::new(1, 1, 3).unwrap();
        b.enqueue(0, &[1.0]).unwrap();
        b.enqueue(0, &[2.0]).unwrap();
        let snap = b.snapshot(0);
        b.enqueue(0, &[3.0]).unwrap();
        assert_eq!(snap, vec![vec![1.0], vec![2.0]]);
    }

    #[test]
    fn thousand_enqueues_keep_last_two_hundred() {
        let mut b = CentroidBank::new(1, 1, 200).unwrap();
        let all: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64]).collect();
        for v in &all {
            b.enqueue(0, v).unwrap();
        }
        assert_eq!(b.snapshot(0), all[800..].to_vec());
    }

    proptest! {
        #[test]
        fn queues_match_list_slice_oracle(ops in prop::collection::vec((0usize..3, -5.0f64..5.0), 0..200), cap in 1usize..10) {
            let mut b = CentroidBank::new(3, 1, cap).unwrap();
            let mut lists: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
            for (k, v) in &ops {
                b.enqueue(*k, &[*v]).unwrap();
                lists[*k].push(vec![*v]);
            }
            for k in 0..3 {
                let l = &lists[k];
                let start = l.len().saturating_sub(cap);
                prop_assert_eq!(b.snapshot(k), l[start..].to_vec());
                prop_assert!(b.len(k) <= cap);
            }
        }
    }
}
