use serde::{Deserialize, Serialize};

/// Square confusion matrix, rows = truth, columns = prediction.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    /// Panics unless `counts` is square.
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Self {
        assert!(counts.iter().all(|r| r.len() == counts.len()), "confusion must be square");
        Self { counts }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.classes()).map(|i| self.counts[i][i]).sum();
        diag as f64 / total as f64
    }

    /// Per-class F1; 0 where precision + recall is 0 or undefined.
    pub fn f1_scores(&self) -> Vec<f64> {
        let n = self.classes();
        (0..n)
            .map(|c| {
                let tp = self.counts[c][c] as f64;
                let predicted: u64 = (0..n).map(|r| self.counts[r][c]).sum();
                let actual: u64 = self.counts[c].iter().sum();
                let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
                let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
                if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                }
            })
            .collect()
    }

    pub fn macro_f1(&self) -> f64 {
        let f = self.f1_scores();
        if f.is_empty() {
            return 0.0;
        }
        f.iter().sum::<f64>() / f.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Confusion,
}

impl Metrics {
    pub fn from_confusion(confusion: Confusion) -> Self {
        Self {
            accuracy: confusion.accuracy(),
            macro_f1: confusion.macro_f1(),
            confusion,
        }
    }
}
