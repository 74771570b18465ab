//! Confusion counts and the nine segmentation scores derived from them.
//!
//! A score whose denominator is zero is `None` and serializes as `null`.
//! Macro averages skip undefined entries instead of treating them as zero.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Mask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    /// Counts with prediction and truth exchanged.
    pub fn transposed(&self) -> Self {
        ConfusionCounts::new(self.tp, self.tn, self.fn_, self.fp)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        ConfusionCounts::new(
            self.tp + o.tp,
            self.tn + o.tn,
            self.fp + o.fp,
            self.fn_ + o.fn_,
        )
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Tallies `pred` against `truth`, restricted to `region` when given.
/// Vessel (`true`) is the positive class.
pub fn confusion_from_masks(
    pred: &Mask,
    truth: &Mask,
    region: Option<&Mask>,
) -> Result<ConfusionCounts> {
    let dims_err = |other: &Mask| Error::ShapeMismatch {
        op: "confusion_from_masks",
        left: vec![pred.height(), pred.width()],
        right: vec![other.height(), other.width()],
    };
    if truth.dims() != pred.dims() {
        return Err(dims_err(truth));
    }
    if let Some(r) = region {
        if r.dims() != pred.dims() {
            return Err(dims_err(r));
        }
    }
    let mut c = ConfusionCounts::default();
    for (k, (&p, &t)) in pred.data().iter().zip(truth.data()).enumerate() {
        if region.is_some_and(|r| !r.data()[k]) {
            continue;
        }
        match (p, t) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
    pub auc: Option<f64>,
    pub fdr: Option<f64>,
    pub g_means: Option<f64>,
    pub kappa: Option<f64>,
    pub pe: Option<f64>,
    /// Present for per-image reports and micro aggregates.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub counts: Option<ConfusionCounts>,
}

pub const METRIC_NAMES: [&str; 9] = [
    "accuracy",
    "precision",
    "recall",
    "specificity",
    "f1",
    "auc",
    "fdr",
    "g_means",
    "kappa",
];

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(c: ConfusionCounts) -> Result<MetricsReport> {
    let total = c.total();
    if total == 0 {
        return Err(Error::invalid("compute_metrics: no pixels were counted"));
    }
    let n = total as f64;
    let accuracy = (c.tp + c.tn) as f64 / n;
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let specificity = ratio(c.tn, c.tn + c.fp);
    let fdr = ratio(c.fp, c.tp + c.fp);
    let f1 = match (precision, recall) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        (Some(_), Some(_)) => Some(0.0),
        _ => None,
    };
    let (auc, g_means) = match (recall, specificity) {
        (Some(r), Some(s)) => (Some((r + s) / 2.0), Some((r * s).sqrt())),
        _ => (None, None),
    };
    // products in f64: u64 would overflow for totals beyond ~4e9
    let (tp, tn, fp, fn_) = (c.tp as f64, c.tn as f64, c.fp as f64, c.fn_ as f64);
    let pe = ((tp + fn_) * (tp + fp) + (tn + fp) * (tn + fn_)) / (n * n);
    let kappa = (pe != 1.0).then(|| (accuracy - pe) / (1.0 - pe));
    Ok(MetricsReport {
        accuracy: Some(accuracy),
        precision,
        recall,
        specificity,
        f1,
        auc,
        fdr,
        g_means,
        kappa,
        pe: Some(pe),
        counts: Some(c),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Micro,
    Macro,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        match name {
            "accuracy" => self.accuracy,
            "precision" => self.precision,
            "recall" => self.recall,
            "specificity" => self.specificity,
            "f1" => self.f1,
            "auc" => self.auc,
            "fdr" => self.fdr,
            "g_means" => self.g_means,
            "kappa" => self.kappa,
            "pe" => self.pe,
            _ => None,
        }
    }

    fn fields_mut(&mut self) -> [&mut Option<f64>; 10] {
        [
            &mut self.accuracy,
            &mut self.precision,
            &mut self.recall,
            &mut self.specificity,
            &mut self.f1,
            &mut self.auc,
            &mut self.fdr,
            &mut self.g_means,
            &mut self.kappa,
            &mut self.pe,
        ]
    }
}

/// Micro: scores of the summed counts. Macro: per-metric mean over images
/// where that metric is defined.
pub fn aggregate(counts: &[ConfusionCounts], mode: Aggregation) -> Result<MetricsReport> {
    if counts.is_empty() {
        return Err(Error::invalid("aggregate: empty corpus"));
    }
    match mode {
        Aggregation::Micro => compute_metrics(
            counts
                .iter()
                .copied()
                .fold(ConfusionCounts::default(), Add::add),
        ),
        Aggregation::Macro => {
            let reports = counts
                .iter()
                .map(|&c| compute_metrics(c))
                .collect::<Result<Vec<_>>>()?;
            if let [only] = reports.as_slice() {
                return Ok(only.clone());
            }
            let mut out = MetricsReport::default();
            let mut sums = [(0.0f64, 0usize); 10];
            for mut r in reports {
                for (slot, v) in sums.iter_mut().zip(r.fields_mut()) {
                    if let Some(v) = *v {
                        slot.0 += v;
                        slot.1 += 1;
                    }
                }
            }
            for (field, (sum, n)) in out.fields_mut().into_iter().zip(sums) {
                *field = (n > 0).then(|| sum / n as f64);
            }
            Ok(out)
        }
    }
}
