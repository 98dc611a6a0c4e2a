//! Confusion-matrix accumulation and the evaluation scores derived from it.
//!
//! The positive class is CHANGED. When a class is absent from both the
//! prediction and the label its precision, recall, F1 and IoU are 1; a
//! ratio whose denominator is zero otherwise evaluates to 0.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use ndarray::{ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};

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
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// Counts with the unchanged class taken as positive.
    pub fn swapped(&self) -> Self {
        Self { tp: self.tn, fp: self.fn_, tn: self.tp, fn_: self.fp }
    }

    /// Add one prediction/label pair; both maps are binary with 1 = changed.
    pub fn accumulate(&mut self, pred: ArrayView2<u8>, label: ArrayView2<u8>) -> Result<()> {
        if pred.dim() != label.dim() {
            return dim_err(format!("prediction {:?} vs label {:?}", pred.dim(), label.dim()));
        }
        if pred.iter().chain(label.iter()).any(|&v| v > 1) {
            return Err(Error::Validation("confusion counts need binary maps".into()));
        }
        let mut local = ConfusionCounts::default();
        Zip::from(&pred).and(&label).for_each(|&p, &l| match (p, l) {
            (1, 1) => local.tp += 1,
            (1, 0) => local.fp += 1,
            (0, 0) => local.tn += 1,
            _ => local.fn_ += 1,
        });
        *self += local;
        Ok(())
    }

    pub fn from_maps(pred: ArrayView2<u8>, label: ArrayView2<u8>) -> Result<Self> {
        let mut c = Self::default();
        c.accumulate(pred, label)?;
        Ok(c)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Precision, recall, F1 and IoU of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn class_scores(c: &ConfusionCounts) -> ClassScores {
    if c.tp + c.fp + c.fn_ == 0 {
        return ClassScores { precision: 1.0, recall: 1.0, f1: 1.0, iou: 1.0 };
    }
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    ClassScores { precision, recall, f1, iou }
}

/// Scores reported per image and in aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "Pre")]
    pub precision: f64,
    #[serde(rename = "Rec")]
    pub recall: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    #[serde(rename = "IoU")]
    pub iou: f64,
    #[serde(rename = "OA")]
    pub oa: f64,
    #[serde(rename = "mF1")]
    pub mf1: f64,
    #[serde(rename = "mIoU")]
    pub miou: f64,
}

/// Means of the changed-class and unchanged-class F1 and IoU.
pub fn mean_class_metrics(counts: &ConfusionCounts) -> (f64, f64) {
    let changed = class_scores(counts);
    let unchanged = class_scores(&counts.swapped());
    ((changed.f1 + unchanged.f1) / 2.0, (changed.iou + unchanged.iou) / 2.0)
}

pub fn compute_metrics(counts: &ConfusionCounts) -> Result<MetricsReport> {
    let total = counts.total();
    if total == 0 {
        return Err(Error::Validation("no pixels were evaluated".into()));
    }
    let s = class_scores(counts);
    let (mf1, miou) = mean_class_metrics(counts);
    Ok(MetricsReport {
        precision: s.precision,
        recall: s.recall,
        f1: s.f1,
        iou: s.iou,
        oa: (counts.tp + counts.tn) as f64 / total as f64,
        mf1,
        miou,
    })
}

const FIELDS: [&str; 7] = ["Pre", "Rec", "F1", "IoU", "OA", "mF1", "mIoU"];

impl MetricsReport {
    fn values(&self) -> [f64; 7] {
        [self.precision, self.recall, self.f1, self.iou, self.oa, self.mf1, self.miou]
    }

    fn from_values(v: [f64; 7]) -> Self {
        Self { precision: v[0], recall: v[1], f1: v[2], iou: v[3], oa: v[4], mf1: v[5], miou: v[6] }
    }
}

/// Per-image reports plus the aggregate over globally summed counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub per_image: Vec<(String, MetricsReport)>,
    pub aggregate: MetricsReport,
    pub counts: ConfusionCounts,
}

impl EvaluationReport {
    pub fn from_counts(per_image: Vec<(String, ConfusionCounts)>) -> Result<Self> {
        let counts: ConfusionCounts = per_image.iter().map(|(_, c)| *c).sum();
        let aggregate = compute_metrics(&counts)?;
        let per_image = per_image
            .into_iter()
            .map(|(id, c)| compute_metrics(&c).map(|m| (id, m)))
            .collect::<Result<_>>()?;
        Ok(Self { per_image, aggregate, counts })
    }

    /// `key = value` blocks: one `[image <id>]` block per image, then
    /// `[aggregate]`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut block = |title: &str, m: &MetricsReport| {
            let _ = writeln!(out, "[{title}]");
            for (k, v) in FIELDS.iter().zip(m.values()) {
                let _ = writeln!(out, "{k} = {v:.6}");
            }
            out.push('\n');
        };
        for (id, m) in &self.per_image {
            block(&format!("image {id}"), m);
        }
        block("aggregate", &self.aggregate);
        let _ = writeln!(
            out,
            "# aggregate over summed counts: TP={} FP={} TN={} FN={}",
            self.counts.tp, self.counts.fp, self.counts.tn, self.counts.fn_
        );
        out
    }

    /// Parse the blocks written by [`to_text`](Self::to_text).
    pub fn parse_blocks(text: &str) -> Result<Vec<(String, MetricsReport)>> {
        let mut blocks = Vec::new();
        let mut current: Option<(String, Vec<Option<f64>>)> = None;
        let finish = |cur: Option<(String, Vec<Option<f64>>)>, blocks: &mut Vec<(String, MetricsReport)>| -> Result<()> {
            if let Some((title, vals)) = cur {
                let vals: Vec<f64> = vals
                    .into_iter()
                    .collect::<Option<_>>()
                    .ok_or_else(|| Error::Format(format!("block `{title}` is missing fields")))?;
                blocks.push((title, MetricsReport::from_values(vals.try_into().expect("7 fields"))));
            }
            Ok(())
        };
        for line in text.lines().map(str::trim) {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(title) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                finish(current.take(), &mut blocks)?;
                current = Some((title.to_string(), vec![None; 7]));
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad report line `{line}`")))?;
            let idx = FIELDS
                .iter()
                .position(|f| *f == k.trim())
                .ok_or_else(|| Error::Format(format!("unknown report field `{}`", k.trim())))?;
            let v: f64 = v.trim().parse().map_err(|_| Error::Format(format!("bad value in `{line}`")))?;
            match current.as_mut() {
                Some((_, vals)) => vals[idx] = Some(v),
                None => return Err(Error::Format("field outside a block".into())),
            }
        }
        finish(current.take(), &mut blocks)?;
        Ok(blocks)
    }
}
