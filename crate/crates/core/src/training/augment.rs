use ndarray::{s, Array2, ArrayView2};
use rand::Rng;

use crate::data::{crop_sample, BiTemporalSample};
use crate::error::{Error, Result};

/// One geometric augmentation, shared by both dates and the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Top-left corner and side of the crop window.
    pub crop: Option<(usize, usize, usize)>,
}

impl AugmentDraw {
    pub const IDENTITY: Self = Self { flip_h: false, flip_v: false, crop: None };
}

pub fn draw_augment<R: Rng + ?Sized>(
    rng: &mut R,
    size: (usize, usize),
    crop_size: Option<usize>,
    flip: bool,
) -> Result<AugmentDraw> {
    let (h, w) = size;
    let crop = match crop_size {
        Some(c) if c > h.min(w) => {
            return Err(Error::Config(format!("crop size {c} exceeds image size {h}x{w}")));
        }
        Some(c) => Some((rng.random_range(0..=h - c), rng.random_range(0..=w - c), c)),
        None => None,
    };
    let (flip_h, flip_v) = if flip { (rng.random_bool(0.5), rng.random_bool(0.5)) } else { (false, false) };
    Ok(AugmentDraw { flip_h, flip_v, crop })
}

fn flip_plane<T: Clone>(a: ArrayView2<T>, h: bool, v: bool) -> Array2<T> {
    match (h, v) {
        (false, false) => a.to_owned(),
        (true, false) => a.slice(s![.., ..;-1]).to_owned(),
        (false, true) => a.slice(s![..;-1, ..]).to_owned(),
        (true, true) => a.slice(s![..;-1, ..;-1]).to_owned(),
    }
}

pub fn apply_augment(sample: &BiTemporalSample, draw: &AugmentDraw) -> Result<BiTemporalSample> {
    let cropped = match draw.crop {
        Some((y, x, c)) => crop_sample(sample, y, x, c, sample.id.clone())?,
        None => sample.clone(),
    };
    if !draw.flip_h && !draw.flip_v {
        return Ok(cropped);
    }
    let (h, v) = (draw.flip_h, draw.flip_v);
    Ok(cropped.map_spatial(|p| flip_plane(p, h, v), |p| flip_plane(p, h, v)))
}

/// Random flip (each axis with probability 0.5) and optional random crop,
/// applied identically to both images and the label.
pub fn augment<R: Rng + ?Sized>(
    sample: &BiTemporalSample,
    crop_size: Option<usize>,
    rng: &mut R,
) -> Result<BiTemporalSample> {
    let draw = draw_augment(rng, sample.size(), crop_size, true)?;
    apply_augment(sample, &draw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChangeLabel;
    use ndarray::{Array2, Array3};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn marked(h: usize, w: usize, y: usize, x: usize) -> BiTemporalSample {
        let mut img = Array3::<f32>::zeros((3, h, w));
        let mut label = Array2::<u8>::zeros((h, w));
        img[[0, y, x]] = 1.0;
        label[[y, x]] = 1;
        let mut img2 = img.clone();
        img2[[1, y, x]] = 0.5;
        BiTemporalSample::new("m", img, img2, ChangeLabel::from_changed(label).unwrap()).unwrap()
    }

    fn find_mark(s: &BiTemporalSample) -> ((usize, usize), (usize, usize), (usize, usize)) {
        let pos2 = |a: ndarray::ArrayView2<f32>| a.indexed_iter().find(|(_, &v)| v != 0.0).unwrap().0;
        let l = s.label.raw().indexed_iter().find(|(_, &v)| v != 0).unwrap().0;
        (pos2(s.image_t1.index_axis(ndarray::Axis(0), 0)), pos2(s.image_t2.index_axis(ndarray::Axis(0), 1)), l)
    }

    #[test]
    fn identity_draw_returns_sample() {
        let s = marked(8, 8, 2, 5);
        assert_eq!(apply_augment(&s, &AugmentDraw::IDENTITY).unwrap(), s);
        let full = AugmentDraw { crop: Some((0, 0, 8)), ..AugmentDraw::IDENTITY };
        assert_eq!(apply_augment(&s, &full).unwrap(), s);
    }

    #[test]
    fn horizontal_flip_moves_label_with_images() {
        let s = marked(6, 8, 1, 2);
        let out = apply_augment(&s, &AugmentDraw { flip_h: true, ..AugmentDraw::IDENTITY }).unwrap();
        let flipped = s.label.raw().slice(s![.., ..;-1]).to_owned();
        assert_eq!(out.label.raw(), &flipped);
        assert_eq!(find_mark(&out), ((1, 5), (1, 5), (1, 5)));
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let s = marked(8, 8, 0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(augment(&s, Some(16), &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn flip_frequency_is_one_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (mut h, mut v) = (0, 0);
        let n = 10_000;
        for _ in 0..n {
            let d = draw_augment(&mut rng, (32, 32), None, true).unwrap();
            h += usize::from(d.flip_h);
            v += usize::from(d.flip_v);
        }
        for count in [h, v] {
            let f = count as f64 / n as f64;
            assert!((0.47..=0.53).contains(&f), "flip frequency {f}");
        }
    }

    proptest! {
        #[test]
        fn marked_pixel_is_transported_consistently(
            y in 0usize..12, x in 0usize..12, seed in 0u64..1000, crop in 4usize..=12,
        ) {
            let s = marked(12, 12, y, x);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = draw_augment(&mut rng, (12, 12), Some(crop), true).unwrap();
            let out = apply_augment(&s, &d).unwrap();
            let (cy, cx, c) = d.crop.unwrap();
            let inside = (cy..cy + c).contains(&y) && (cx..cx + c).contains(&x);
            if inside {
                let (mut ey, mut ex) = (y - cy, x - cx);
                if d.flip_v { ey = c - 1 - ey; }
                if d.flip_h { ex = c - 1 - ex; }
                prop_assert_eq!(find_mark(&out), ((ey, ex), (ey, ex), (ey, ex)));
            } else {
                prop_assert!(out.label.raw().iter().all(|&v| v == 0));
                prop_assert!(out.image_t1.iter().all(|&v| v == 0.0));
            }
        }
    }
}
