//! Plain image-difference change detector used as a reference point.

use ndarray::{Array2, ArrayView3, Axis, Zip};

use crate::data::BiTemporalSample;
use crate::error::{Error, Result};
use crate::metrics::{compute_metrics, ConfusionCounts};
use crate::model::ChangeModel;
use crate::scalar::Scalar;

/// How the change-magnitude threshold is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    Fixed(f64),
    /// Otsu's threshold computed separately for every image pair.
    Otsu,
}

/// Change vector analysis: flags a pixel as changed when the Euclidean norm
/// of its RGB difference reaches the threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifferenceBaseline {
    pub rule: ThresholdRule,
}

const OTSU_BINS: usize = 256;

/// Otsu's between-class-variance threshold over a 256-bin histogram of
/// `values` spanning `[min, max]`.
pub fn otsu_threshold(values: &[f64]) -> f64 {
    let (lo, hi) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if values.is_empty() || !(hi > lo) {
        return hi;
    }
    let width = (hi - lo) / OTSU_BINS as f64;
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[(((v - lo) / width) as usize).min(OTSU_BINS - 1)] += 1;
    }
    let total = values.len() as f64;
    let centre = |i: usize| lo + (i as f64 + 0.5) * width;
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| h as f64 * centre(i)).sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let mut best = (f64::NEG_INFINITY, hi);
    for (i, &h) in hist.iter().enumerate().take(OTSU_BINS - 1) {
        w0 += h as f64;
        sum0 += h as f64 * centre(i);
        let w1 = total - w0;
        if w0 == 0.0 || w1 == 0.0 {
            continue;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let between = w0 * w1 * (m0 - m1) * (m0 - m1);
        if between > best.0 {
            best = (between, lo + (i + 1) as f64 * width);
        }
    }
    best.1
}

/// Per-pixel change-vector magnitude `|x2 - x1|` over the colour channels.
pub fn change_magnitude(t1: ArrayView3<f32>, t2: ArrayView3<f32>) -> Result<Array2<f64>> {
    if t1.dim() != t2.dim() {
        return Err(Error::Dimension(format!("image pair {:?} vs {:?}", t1.dim(), t2.dim())));
    }
    let mut sq = Array2::<f64>::zeros((t1.dim().1, t1.dim().2));
    for (a, b) in t1.axis_iter(Axis(0)).zip(t2.axis_iter(Axis(0))) {
        Zip::from(&mut sq).and(&a).and(&b).for_each(|s, &x, &y| {
            let d = (y - x) as f64;
            *s += d * d;
        });
    }
    Ok(sq.mapv_into(f64::sqrt))
}

impl DifferenceBaseline {
    pub fn otsu() -> Self {
        Self { rule: ThresholdRule::Otsu }
    }

    pub fn fixed(threshold: f64) -> Self {
        Self { rule: ThresholdRule::Fixed(threshold) }
    }

    /// Fixed threshold from a grid over `[0, sqrt(3)]` that maximizes
    /// change-class F1 on `samples`.
    pub fn fit(samples: &[BiTemporalSample]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Validation("cannot fit a threshold on no samples".into()));
        }
        let mags = samples
            .iter()
            .map(|s| change_magnitude(s.image_t1.view(), s.image_t2.view()))
            .collect::<Result<Vec<_>>>()?;
        let labels: Vec<_> = samples.iter().map(|s| s.label.changed()).collect();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for step in 1..=346 {
            let threshold = step as f64 * 0.005;
            let mut counts = ConfusionCounts::default();
            for (m, l) in mags.iter().zip(&labels) {
                counts.accumulate(m.mapv(|v| u8::from(v >= threshold)).view(), l.view())?;
            }
            let f1 = compute_metrics(&counts)?.f1;
            if f1 > best.0 {
                best = (f1, threshold);
            }
        }
        Ok(Self::fixed(best.1))
    }
}

impl<S: Scalar> ChangeModel<S> for DifferenceBaseline {
    /// Magnitude rescaled so the pair's threshold maps to 0.5, clipped to
    /// `[0, 1]`.
    fn predict_probability(&self, t1: ArrayView3<f32>, t2: ArrayView3<f32>) -> Result<Array2<S>> {
        let m = change_magnitude(t1, t2)?;
        let t = match self.rule {
            ThresholdRule::Fixed(t) => t,
            ThresholdRule::Otsu => otsu_threshold(m.as_slice().expect("standard layout")),
        };
        Ok(m.mapv(|v| {
            let score = if t > 0.0 { 0.5 * v / t } else if v > 0.0 { 1.0 } else { 0.5 };
            S::lit(score.min(1.0))
        }))
    }
}
