use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which label value marks a pixel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelPolarity {
    /// 1 = changed. Used on disk (as 255) and for metrics.
    ChangedIsOne,
    /// 1 = unchanged. The mask convention of the temporal-constraint loss.
    UnchangedIsOne,
}

/// Binary per-pixel change label together with its polarity.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChangeLabel {
    values: Array2<u8>,
    polarity: LabelPolarity,
}

impl ChangeLabel {
    pub fn new(values: Array2<u8>, polarity: LabelPolarity) -> Result<Self> {
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Validation(format!("label value {v} is not binary")));
        }
        Ok(Self { values, polarity })
    }

    /// Label from a changed-indicator map (1 = changed).
    pub fn from_changed(changed: Array2<u8>) -> Result<Self> {
        Self::new(changed, LabelPolarity::ChangedIsOne)
    }

    pub fn polarity(&self) -> LabelPolarity {
        self.polarity
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn raw(&self) -> &Array2<u8> {
        &self.values
    }

    /// 1 on changed pixels.
    pub fn changed(&self) -> Array2<u8> {
        match self.polarity {
            LabelPolarity::ChangedIsOne => self.values.clone(),
            LabelPolarity::UnchangedIsOne => self.values.mapv(|v| 1 - v),
        }
    }

    /// 1 on unchanged pixels: the mask `c` of the temporal-constraint loss.
    /// This is the only place the polarity is flipped.
    pub fn unchanged(&self) -> Array2<u8> {
        match self.polarity {
            LabelPolarity::UnchangedIsOne => self.values.clone(),
            LabelPolarity::ChangedIsOne => self.values.mapv(|v| 1 - v),
        }
    }

    pub fn with_polarity(&self, polarity: LabelPolarity) -> Self {
        let values = match polarity {
            LabelPolarity::ChangedIsOne => self.changed(),
            LabelPolarity::UnchangedIsOne => self.unchanged(),
        };
        Self { values, polarity }
    }

    pub fn changed_fraction(&self) -> f64 {
        let changed = self.changed();
        changed.iter().map(|&v| v as usize).sum::<usize>() as f64 / changed.len().max(1) as f64
    }
}

/// A co-registered image pair `[3, h, w]` with values in `[0, 1]` and its
/// change label.
#[derive(Debug, Clone, PartialEq)]
pub struct BiTemporalSample {
    pub id: String,
    pub image_t1: Array3<f32>,
    pub image_t2: Array3<f32>,
    pub label: ChangeLabel,
}

impl BiTemporalSample {
    pub fn new(id: impl Into<String>, image_t1: Array3<f32>, image_t2: Array3<f32>, label: ChangeLabel) -> Result<Self> {
        let s = Self { id: id.into(), image_t1, image_t2, label };
        s.validate()?;
        Ok(s)
    }

    pub fn size(&self) -> (usize, usize) {
        self.label.dim()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.label.dim();
        for (name, img) in [("t1", &self.image_t1), ("t2", &self.image_t2)] {
            let (c, ih, iw) = img.dim();
            if c != 3 || (ih, iw) != (h, w) {
                return Err(Error::Validation(format!(
                    "sample `{}`: {name} image is {c}x{ih}x{iw}, label is {h}x{w}",
                    self.id
                )));
            }
            if img.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("sample `{}`: {name} image has a non-finite value", self.id)));
            }
        }
        Ok(())
    }

    /// Apply the same spatial map to both images and the label.
    pub fn map_spatial(&self, f: impl Fn(ndarray::ArrayView2<f32>) -> Array2<f32>, g: impl Fn(ndarray::ArrayView2<u8>) -> Array2<u8>) -> Self {
        let map_img = |img: &Array3<f32>| {
            let planes: Vec<Array2<f32>> = img.axis_iter(Axis(0)).map(&f).collect();
            let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
            ndarray::stack(Axis(0), &views).expect("equal planes")
        };
        Self {
            id: self.id.clone(),
            image_t1: map_img(&self.image_t1),
            image_t2: map_img(&self.image_t2),
            label: ChangeLabel {
                values: g(self.label.values.view()),
                polarity: self.label.polarity,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn polarity_conversion_is_an_involution() {
        let l = ChangeLabel::from_changed(array![[0, 1], [1, 0]]).unwrap();
        assert_eq!(l.unchanged(), array![[1, 0], [0, 1]]);
        let flipped = l.with_polarity(LabelPolarity::UnchangedIsOne);
        assert_eq!(flipped.changed(), l.changed());
        assert_eq!(flipped.with_polarity(LabelPolarity::ChangedIsOne), l);
    }

    #[test]
    fn non_binary_labels_are_rejected() {
        assert!(ChangeLabel::from_changed(array![[0, 2]]).is_err());
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let label = ChangeLabel::from_changed(Array2::zeros((4, 4))).unwrap();
        let r = BiTemporalSample::new("x", Array3::zeros((3, 4, 4)), Array3::zeros((3, 8, 8)), label);
        assert!(r.is_err());
    }
}
