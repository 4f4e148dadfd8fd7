//! Confusion counts and the five quantitative change-detection metrics.

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Tally one pixel: `pred`/`gt` true means changed.
    pub fn add(&mut self, pred: bool, gt: bool) {
        match (pred, gt) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct Metrics {
    pub oa: f64,
    pub pe: f64,
    pub kappa: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Set when a zero denominator forced a metric to 0.
    pub degenerate: bool,
}

/// OA, chance agreement P_e, kappa, precision, recall, F1. Zero
/// denominators define the affected metric as 0 and set the flag.
pub fn metrics(c: &ConfusionCounts) -> Metrics {
    let total = c.total() as f64;
    assert!(total > 0.0, "metrics on empty confusion counts");
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    let oa = (tp + tn) / total;
    // Chance agreement from the confusion marginals.
    let pe = ((tp + fp) * (tp + fn_) + (tn + fn_) * (tn + fp)) / (total * total);
    let mut degenerate = false;
    let kappa = if (1.0 - pe).abs() < 1e-15 {
        degenerate = true;
        0.0
    } else {
        (oa - pe) / (1.0 - pe)
    };
    let precision = if tp + fp > 0.0 {
        tp / (tp + fp)
    } else {
        degenerate = true;
        0.0
    };
    let recall = if tp + fn_ > 0.0 {
        tp / (tp + fn_)
    } else {
        degenerate = true;
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        degenerate = true;
        0.0
    };
    Metrics { oa, pe, kappa, precision, recall, f1, degenerate }
}
