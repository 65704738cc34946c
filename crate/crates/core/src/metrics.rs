//! Confusion-matrix metrics: per-class F1, support-weighted F1, and AUROC.
//!
//! Scoring follows a one-vs-all scheme. Abstentions (`No-A`) and ambiguous
//! answers (`2OP`) never create true or false positives; when the truth is a
//! polyp class they count against recall as false negatives.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::PathologyClass;
use crate::extraction::TaskLabel;

/// One binary (one-vs-all) confusion matrix.
///
/// The false-negative field carries a trailing underscore because `fn` is a
/// Rust keyword.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// tp / (tp + fn); `None` when no positives exist.
    pub fn sensitivity(&self) -> Option<f64> {
        let positives = self.tp + self.fn_;
        (positives > 0).then(|| self.tp as f64 / positives as f64)
    }

    /// tn / (tn + fp); `None` when no negatives exist.
    pub fn specificity(&self) -> Option<f64> {
        let negatives = self.tn + self.fp;
        (negatives > 0).then(|| self.tn as f64 / negatives as f64)
    }
}

/// One cell of the full predicted×actual tally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub pred: TaskLabel,
    pub truth: PathologyClass,
    pub count: u64,
}

/// Per-class one-vs-all outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassOutcome {
    pub counts: ConfusionCounts,
    pub f1: f64,
}

/// Multiclass scoring result over the six polyp classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MulticlassReport {
    pub per_class: BTreeMap<PathologyClass, ClassOutcome>,
    pub supports: BTreeMap<PathologyClass, u64>,
    pub weighted_f1: f64,
    /// Every observed (prediction, truth) pair, sorted, including `No-A` and
    /// `2OP` prediction rows.
    pub full_matrix: Vec<MatrixCell>,
}

impl MulticlassReport {
    pub fn matrix_count(&self, pred: TaskLabel, truth: PathologyClass) -> u64 {
        self.full_matrix
            .iter()
            .find(|c| c.pred == pred && c.truth == truth)
            .map_or(0, |c| c.count)
    }

    pub fn matrix_total(&self) -> u64 {
        self.full_matrix.iter().map(|c| c.count).sum()
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("prediction/truth length mismatch: {preds} vs {truths}")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("truth vector contains only one label; AUROC needs both")]
    OneClassTruth,
    #[error("score at index {index} is not finite")]
    NonFiniteScore { index: usize },
    #[error("total polyp support is zero")]
    ZeroSupport,
    #[error("no F1 entry for supported class {class}")]
    MissingF1 { class: PathologyClass },
    #[error("confusion row undefined: needs both a positive and a negative margin")]
    UndefinedRow,
}

/// F1 = 2·tp / (2·tp + fp + fn), with the zero-denominator case defined as 0.
pub fn f1(c: &ConfusionCounts) -> f64 {
    let denominator = 2 * c.tp + c.fp + c.fn_;
    if denominator == 0 {
        return 0.0;
    }
    (2 * c.tp) as f64 / denominator as f64
}

/// Scores multiclass predictions one-vs-all against the six polyp classes.
///
/// For each class `c`: tp requires `pred == c`, fp requires `pred == c` with
/// a different truth, and any other prediction (including `No-A`, `2OP`,
/// `Normal`) on a true-`c` item is a fn. Supports are taken from the truth
/// vector, so `supports[c] == tp + fn` holds by construction.
pub fn one_vs_all(
    preds: &[TaskLabel],
    truths: &[PathologyClass],
) -> Result<MulticlassReport, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let n = preds.len() as u64;
    let mut per_class = BTreeMap::new();
    let mut supports = BTreeMap::new();
    for class in PathologyClass::POLYP {
        let mut counts = ConfusionCounts::default();
        for (pred, truth) in preds.iter().zip(truths) {
            let predicted_c = *pred == TaskLabel::Class(class);
            let truth_c = *truth == class;
            match (predicted_c, truth_c) {
                (true, true) => counts.tp += 1,
                (true, false) => counts.fp += 1,
                (false, true) => counts.fn_ += 1,
                (false, false) => {}
            }
        }
        counts.tn = n - counts.tp - counts.fp - counts.fn_;
        supports.insert(class, counts.tp + counts.fn_);
        per_class.insert(
            class,
            ClassOutcome {
                counts,
                f1: f1(&counts),
            },
        );
    }

    let per_class_f1: BTreeMap<PathologyClass, f64> =
        per_class.iter().map(|(&c, o)| (c, o.f1)).collect();
    let weighted = match weighted_f1(&per_class_f1, &supports) {
        Ok(v) => v,
        // No polyp truths at all: weighted F1 degenerates to 0.
        Err(MetricsError::ZeroSupport) => 0.0,
        Err(other) => return Err(other),
    };

    let mut matrix: BTreeMap<(TaskLabel, PathologyClass), u64> = BTreeMap::new();
    for (pred, truth) in preds.iter().zip(truths) {
        *matrix.entry((*pred, *truth)).or_default() += 1;
    }
    let full_matrix = matrix
        .into_iter()
        .map(|((pred, truth), count)| MatrixCell { pred, truth, count })
        .collect();

    Ok(MulticlassReport {
        per_class,
        supports,
        weighted_f1: weighted,
        full_matrix,
    })
}

/// Support-weighted mean of per-class F1 over the six polyp classes.
/// Zero-support classes are skipped; a supported class without an F1 entry
/// is an error.
pub fn weighted_f1(
    per_class_f1: &BTreeMap<PathologyClass, f64>,
    supports: &BTreeMap<PathologyClass, u64>,
) -> Result<f64, MetricsError> {
    let mut numerator = 0.0;
    let mut total = 0u64;
    for class in PathologyClass::POLYP {
        let support = supports.get(&class).copied().unwrap_or(0);
        if support == 0 {
            continue;
        }
        let f1 = per_class_f1
            .get(&class)
            .ok_or(MetricsError::MissingF1 { class })?;
        numerator += support as f64 * f1;
        total += support;
    }
    if total == 0 {
        return Err(MetricsError::ZeroSupport);
    }
    Ok(numerator / total as f64)
}

/// Binary detection confusion counts with `Polyp` as the positive label.
/// Abstentions land as fn on polyp items and tn on normal items.
pub fn detection_counts(preds: &[TaskLabel], truths: &[bool]) -> Result<ConfusionCounts, MetricsError> {
    if preds.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    let mut counts = ConfusionCounts::default();
    for (pred, &polyp) in preds.iter().zip(truths) {
        let positive = matches!(pred, TaskLabel::Polyp | TaskLabel::Class(_));
        match (positive, polyp) {
            (true, true) => counts.tp += 1,
            (true, false) => counts.fp += 1,
            (false, true) => counts.fn_ += 1,
            (false, false) => counts.tn += 1,
        }
    }
    Ok(counts)
}

/// Trapezoidal area under the ROC curve built from score thresholds.
///
/// Ties share a threshold, which makes the result identical to the
/// probability that a random positive outranks a random negative with ties
/// counted one half. The area numerator is accumulated in integers and
/// divided once, so that equivalence is exact in floating point.
pub fn auroc_from_scores(scores: &[f64], truths: &[bool]) -> Result<f64, MetricsError> {
    if scores.len() != truths.len() {
        return Err(MetricsError::LengthMismatch {
            preds: scores.len(),
            truths: truths.len(),
        });
    }
    if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
        return Err(MetricsError::NonFiniteScore { index });
    }
    let positives = truths.iter().filter(|&&t| t).count() as u64;
    let negatives = truths.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::OneClassTruth);
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    // Walk distinct score levels from high to low; each level contributes one
    // trapezoid (tp_before + tp_after) · Δfp to twice the unnormalized area.
    let mut twice_area = 0u64;
    let mut tp = 0u64;
    let mut fp = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut group_tp = 0u64;
        let mut group_fp = 0u64;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if truths[order[j]] {
                group_tp += 1;
            } else {
                group_fp += 1;
            }
            j += 1;
        }
        twice_area += (2 * tp + group_tp) * group_fp;
        tp += group_tp;
        fp += group_fp;
        i = j;
    }
    debug_assert_eq!((tp, fp), (positives, negatives));
    Ok(twice_area as f64 / (2 * positives * negatives) as f64)
}

/// Single-operating-point AUROC surrogate: (sensitivity + specificity) / 2.
/// Used for categorical predictors that expose no ranking scores.
pub fn point_auroc(c: &ConfusionCounts) -> Result<f64, MetricsError> {
    match (c.sensitivity(), c.specificity()) {
        (Some(sens), Some(spec)) => Ok((sens + spec) / 2.0),
        _ => Err(MetricsError::UndefinedRow),
    }
}
