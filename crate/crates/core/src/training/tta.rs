use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::model::ChangeModel;
use crate::scalar::Scalar;
use crate::semantic::ChangePrediction;

/// The eight axis-aligned symmetries of a square. Rotations are
/// counter-clockwise; `FlipH` mirrors columns and `FlipV` mirrors rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Transform {
    Identity,
    Rot90,
    Rot180,
    Rot270,
    FlipH,
    FlipV,
    Transpose,
    AntiTranspose,
}

impl Transform {
    pub const D4: [Transform; 8] = [
        Transform::Identity,
        Transform::Rot90,
        Transform::Rot180,
        Transform::Rot270,
        Transform::FlipH,
        Transform::FlipV,
        Transform::Transpose,
        Transform::AntiTranspose,
    ];

    /// The subgroup that keeps a non-square frame's shape.
    pub const FLIPS: [Transform; 4] = [Transform::Identity, Transform::FlipH, Transform::FlipV, Transform::Rot180];

    pub fn inverse(self) -> Self {
        match self {
            Transform::Rot90 => Transform::Rot270,
            Transform::Rot270 => Transform::Rot90,
            t => t,
        }
    }

    pub fn swaps_axes(self) -> bool {
        matches!(self, Transform::Rot90 | Transform::Rot270 | Transform::Transpose | Transform::AntiTranspose)
    }

    /// (transpose, then reverse rows, then reverse columns)
    fn steps(self) -> (bool, bool, bool) {
        match self {
            Transform::Identity => (false, false, false),
            Transform::Rot90 => (true, true, false),
            Transform::Rot180 => (false, true, true),
            Transform::Rot270 => (true, false, true),
            Transform::FlipH => (false, false, true),
            Transform::FlipV => (false, true, false),
            Transform::Transpose => (true, false, false),
            Transform::AntiTranspose => (true, true, true),
        }
    }

    pub fn apply2<T: Clone>(self, a: ArrayView2<T>) -> Array2<T> {
        let (t, v, h) = self.steps();
        let a = if t { a.reversed_axes() } else { a };
        match (v, h) {
            (false, false) => a.to_owned(),
            (true, false) => a.slice(s![..;-1, ..]).to_owned(),
            (false, true) => a.slice(s![.., ..;-1]).to_owned(),
            (true, true) => a.slice(s![..;-1, ..;-1]).to_owned(),
        }
    }

    pub fn apply3<T: Clone>(self, a: ArrayView3<T>) -> Array3<T> {
        let planes: Vec<Array2<T>> = a.axis_iter(Axis(0)).map(|p| self.apply2(p)).collect();
        let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
        ndarray::stack(Axis(0), &views).expect("equal plane shapes")
    }
}

/// All of D4 for square frames, the four shape-preserving flips otherwise.
pub fn transforms_for(h: usize, w: usize) -> &'static [Transform] {
    if h == w {
        &Transform::D4
    } else {
        log::info!("test-time augmentation on a {h}x{w} frame uses the 4 flip transforms only");
        &Transform::FLIPS
    }
}

/// Average of inverse-transformed probability maps over `transforms`.
///
/// The per-pixel values are sorted before summation so the result does not
/// depend on the order of `transforms`, not even in the last bit.
pub fn tta_probability_with<S: Scalar, M: ChangeModel<S> + ?Sized>(
    model: &M,
    t1: ArrayView3<f32>,
    t2: ArrayView3<f32>,
    transforms: &[Transform],
) -> Result<Array2<S>> {
    if transforms.is_empty() {
        return Err(Error::Config("test-time augmentation needs at least one transform".into()));
    }
    let (_, h, w) = t1.dim();
    let mut maps = Vec::with_capacity(transforms.len());
    for &t in transforms {
        if t.swaps_axes() && h != w {
            return Err(Error::Dimension(format!("{t:?} does not preserve a {h}x{w} frame")));
        }
        let p = model.predict_probability(t.apply3(t1).view(), t.apply3(t2).view())?;
        maps.push(t.inverse().apply2(p.view()));
    }
    let n = S::lit(transforms.len() as f64);
    let mut buf = Vec::with_capacity(maps.len());
    Ok(Array2::from_shape_fn(maps[0].dim(), |idx| {
        buf.clear();
        buf.extend(maps.iter().map(|m| m[idx]));
        buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        buf.iter().copied().fold(S::zero(), |acc, v| acc + v) / n
    }))
}

pub fn tta_probability<S: Scalar, M: ChangeModel<S> + ?Sized>(
    model: &M,
    t1: ArrayView3<f32>,
    t2: ArrayView3<f32>,
) -> Result<Array2<S>> {
    let (_, h, w) = t1.dim();
    tta_probability_with(model, t1, t2, transforms_for(h, w))
}

pub fn tta_predict<S: Scalar, M: ChangeModel<S> + ?Sized>(
    model: &M,
    t1: ArrayView3<f32>,
    t2: ArrayView3<f32>,
) -> Result<ChangePrediction<S>> {
    let p = tta_probability(model, t1, t2)?;
    Ok(ChangePrediction::from_probability(p, model.threshold()))
}
