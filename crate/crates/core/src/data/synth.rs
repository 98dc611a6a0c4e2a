//! Synthetic bi-temporal scenes with exact change labels.
//!
//! The first date is a textured background with rectangular and elliptical
//! "buildings". The second date removes some of them and adds new ones in
//! free space until roughly the requested fraction of pixels has changed
//! occupancy; the label is exactly that occupancy difference. Photometric
//! and geometric nuisance (brightness, tint, noise, a small shift) is then
//! applied to the second image only and never enters the label.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::dataset::{write_dataset, Split};
use super::sample::{BiTemporalSample, ChangeLabel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NuisanceSpec {
    pub enabled: bool,
    /// Global multiplicative brightness change, drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Per-channel multiplicative tint, drawn from `1 ± tint`.
    pub tint: f64,
    pub noise_sigma: f64,
    /// Largest translation in pixels along each axis.
    pub max_shift: usize,
}

impl Default for NuisanceSpec {
    fn default() -> Self {
        Self { enabled: true, brightness: 0.15, tint: 0.08, noise_sigma: 0.02, max_shift: 1 }
    }
}

impl NuisanceSpec {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthMeta {
    pub n: usize,
    pub size: usize,
    pub change_density: f64,
    pub nuisance: NuisanceSpec,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Building {
    shape: Shape,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
    color: [f32; 3],
}

impl Building {
    fn contains(&self, y: usize, x: usize) -> bool {
        if y < self.y0 || x < self.x0 || y >= self.y0 + self.h || x >= self.x0 + self.w {
            return false;
        }
        match self.shape {
            Shape::Rect => true,
            Shape::Ellipse => {
                let cy = self.y0 as f64 + self.h as f64 / 2.0;
                let cx = self.x0 as f64 + self.w as f64 / 2.0;
                let dy = (y as f64 + 0.5 - cy) / (self.h as f64 / 2.0);
                let dx = (x as f64 + 0.5 - cx) / (self.w as f64 / 2.0);
                dy * dy + dx * dx <= 1.0
            }
        }
    }

    fn area(&self) -> usize {
        let mut a = 0;
        for y in self.y0..self.y0 + self.h {
            for x in self.x0..self.x0 + self.w {
                a += usize::from(self.contains(y, x));
            }
        }
        a
    }

    /// Bounding boxes overlap once grown by `margin`.
    fn near(&self, o: &Building, margin: usize) -> bool {
        let a = (self.y0.saturating_sub(margin), self.x0.saturating_sub(margin), self.y0 + self.h + margin, self.x0 + self.w + margin);
        a.0 < o.y0 + o.h && o.y0 < a.2 && a.1 < o.x0 + o.w && o.x0 < a.3
    }
}

const ROOF_COLORS: [[f32; 3]; 5] = [
    [0.78, 0.32, 0.26],
    [0.82, 0.82, 0.80],
    [0.30, 0.44, 0.72],
    [0.22, 0.22, 0.26],
    [0.86, 0.70, 0.38],
];

/// Per-pixel ground texture (vegetation, soil grain).
const GRAIN_SIGMA: f64 = 0.06;

const GROUND_COLORS: [[f32; 3]; 3] = [[0.34, 0.48, 0.26], [0.52, 0.44, 0.31], [0.42, 0.47, 0.36]];

fn random_building<R: Rng>(rng: &mut R, size: usize) -> Building {
    let min = (size / 10).max(6);
    let max = (size / 4).max(min + 1);
    let h = rng.random_range(min..=max);
    let w = rng.random_range(min..=max);
    let base = ROOF_COLORS[rng.random_range(0..ROOF_COLORS.len())];
    let jitter = |v: f32, r: &mut R| (v + r.random_range(-0.05..0.05)).clamp(0.0, 1.0);
    Building {
        shape: if rng.random_bool(0.7) { Shape::Rect } else { Shape::Ellipse },
        y0: rng.random_range(0..=size - h),
        x0: rng.random_range(0..=size - w),
        h,
        w,
        color: [jitter(base[0], rng), jitter(base[1], rng), jitter(base[2], rng)],
    }
}

fn occupancy(buildings: &[Building], size: usize) -> Array2<u8> {
    let mut occ = Array2::zeros((size, size));
    for b in buildings {
        for y in b.y0..b.y0 + b.h {
            for x in b.x0..b.x0 + b.w {
                if b.contains(y, x) {
                    occ[[y, x]] = 1;
                }
            }
        }
    }
    occ
}

fn background<R: Rng>(rng: &mut R, size: usize) -> Array3<f32> {
    let base = GROUND_COLORS[rng.random_range(0..GROUND_COLORS.len())];
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.01..0.08),
                rng.random_range(0.01..0.08),
                rng.random_range(0.0..std::f64::consts::TAU),
                rng.random_range(0.03..0.07),
            )
        })
        .collect();
    let grain = Normal::new(0.0, GRAIN_SIGMA).expect("valid normal");
    let texture = Array2::from_shape_simple_fn((size, size), || grain.sample(rng) as f32);
    Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        let low: f64 = waves
            .iter()
            .map(|&(fy, fx, ph, amp)| amp * (fy * y as f64 * std::f64::consts::TAU + fx * x as f64 * std::f64::consts::TAU + ph + c as f64 * 0.3).sin())
            .sum();
        (base[c] + low as f32 + texture[[y, x]]).clamp(0.0, 1.0)
    })
}

fn render(bg: &Array3<f32>, buildings: &[Building]) -> Array3<f32> {
    let mut img = bg.clone();
    for b in buildings {
        for y in b.y0..b.y0 + b.h {
            for x in b.x0..b.x0 + b.w {
                if !b.contains(y, x) {
                    continue;
                }
                // darker rim so outlines stay visible against similar ground
                let rim = y == b.y0 || x == b.x0 || y + 1 == b.y0 + b.h || x + 1 == b.x0 + b.w;
                let shade = if rim { 0.8 } else { 1.0 };
                for c in 0..3 {
                    img[[c, y, x]] = b.color[c] * shade;
                }
            }
        }
    }
    img
}

fn quantize(img: &mut Array3<f32>) {
    img.mapv_inplace(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0);
}

fn apply_nuisance<R: Rng>(img: &Array3<f32>, spec: &NuisanceSpec, rng: &mut R) -> Array3<f32> {
    let (_, h, w) = img.dim();
    let b = 1.0 + rng.random_range(-spec.brightness..=spec.brightness) as f32;
    let tint: [f32; 3] = std::array::from_fn(|_| 1.0 + rng.random_range(-spec.tint..=spec.tint) as f32);
    let s = spec.max_shift as i64;
    let (dy, dx) = if s > 0 { (rng.random_range(-s..=s) as isize, rng.random_range(-s..=s) as isize) } else { (0, 0) };
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid normal");
    let mut out = Array3::zeros(img.raw_dim());
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                let sy = (y as isize - dy).clamp(0, h as isize - 1) as usize;
                let sx = (x as isize - dx).clamp(0, w as isize - 1) as usize;
                let n = if spec.noise_sigma > 0.0 { noise.sample(rng) as f32 } else { 0.0 };
                out[[c, y, x]] = img[[c, sy, sx]] * b * tint[c] + n;
            }
        }
    }
    out
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

fn generate_one(index: usize, size: usize, density: f64, nuisance: &NuisanceSpec, seed: u64) -> Result<BiTemporalSample> {
    let mut rng = sample_rng(seed, index);
    let area = (size * size) as f64;
    let bg = background(&mut rng, size);

    let mut t1: Vec<Building> = Vec::new();
    let mut covered = 0usize;
    let mut attempts = 0;
    while (covered as f64) < 0.18 * area && attempts < 400 {
        attempts += 1;
        let b = random_building(&mut rng, size);
        if t1.iter().any(|o| b.near(o, 3)) {
            continue;
        }
        covered += b.area();
        t1.push(b);
    }

    let target = density * area;
    let mut t2 = t1.clone();
    let mut added: Vec<Building> = Vec::new();
    let mut changed = 0usize;
    attempts = 0;
    while (changed as f64) < 0.9 * target && attempts < 2000 {
        attempts += 1;
        let remaining = target - changed as f64;
        if !t2.is_empty() && rng.random_bool(0.35) {
            let i = rng.random_range(0..t2.len());
            let a = t2[i].area();
            if (a as f64) <= remaining * 1.3 {
                t2.swap_remove(i);
                changed += a;
            }
        } else {
            let b = random_building(&mut rng, size);
            let a = b.area();
            if (a as f64) > remaining * 1.3 || t1.iter().chain(added.iter()).any(|o| b.near(o, 3)) {
                continue;
            }
            added.push(b);
            t2.push(b);
            changed += a;
        }
    }

    let occ1 = occupancy(&t1, size);
    let occ2 = occupancy(&t2, size);
    let label = ndarray::Zip::from(&occ1).and(&occ2).map_collect(|&a, &b| a ^ b);

    let mut img1 = render(&bg, &t1);
    let mut img2 = render(&bg, &t2);
    if nuisance.enabled {
        img2 = apply_nuisance(&img2, nuisance, &mut rng);
    }
    quantize(&mut img1);
    quantize(&mut img2);
    BiTemporalSample::new(format!("synth_{index:05}"), img1, img2, ChangeLabel::from_changed(label)?)
}

/// Generate `n` samples of `size x size`; sample `i` depends only on
/// `(seed, i)`.
pub fn synth_generate(
    n: usize,
    size: usize,
    change_density: f64,
    nuisance: &NuisanceSpec,
    seed: u64,
) -> Result<Vec<BiTemporalSample>> {
    if size == 0 || size % 32 != 0 {
        return Err(Error::Config(format!("synthetic size must be a positive multiple of 32, got {size}")));
    }
    if !(0.0..=1.0).contains(&change_density) {
        return Err(Error::Config(format!("change density {change_density} outside [0, 1]")));
    }
    (0..n)
        .map(|i| generate_one(i, size, change_density, nuisance, seed))
        .collect()
}

/// Write generated samples in the paired layout plus a `meta.json` sidecar.
pub fn write_synthetic(root: &Path, split: Split, samples: &[BiTemporalSample], meta: &SynthMeta) -> Result<()> {
    write_dataset(root, split, samples)?;
    let path = root.join(split.dir_name()).join("meta.json");
    fs::write(path, serde_json::to_string_pretty(meta)?)?;
    Ok(())
}
