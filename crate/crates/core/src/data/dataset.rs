//! Paired directory layout `<root>/<split>/{A,B,label}/<id>.<ext>`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use ndarray::{s, Array2, Array3};
use serde::{Deserialize, Serialize};

use super::sample::{BiTemporalSample, ChangeLabel};
use crate::error::{Error, Result};

const IMAGE_EXTENSIONS: [&str; 6] = ["png", "jpg", "jpeg", "tif", "tiff", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn dir_name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.dir_name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Triple {
    pub t1: PathBuf,
    pub t2: PathBuf,
    pub label: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    entries: BTreeMap<String, Triple>,
    pub tile_size: Option<usize>,
    pub tile_stride: Option<usize>,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        if !matches!(ext.as_deref(), Some(e) if IMAGE_EXTENSIONS.contains(&e)) {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

/// Match `A/`, `B/` and `label/` files by stem. Any id missing a
/// counterpart is reported.
pub fn scan_dataset(root: &Path, split: Split) -> Result<DatasetManifest> {
    let base = root.join(split.dir_name());
    let a = list_images(&base.join("A"))?;
    let b = list_images(&base.join("B"))?;
    let l = list_images(&base.join("label"))?;
    let mut orphans: Vec<String> = a
        .keys()
        .chain(b.keys())
        .chain(l.keys())
        .filter(|id| !(a.contains_key(*id) && b.contains_key(*id) && l.contains_key(*id)))
        .cloned()
        .collect();
    orphans.sort();
    orphans.dedup();
    if !orphans.is_empty() {
        return Err(Error::Manifest {
            message: format!("{} has files without counterparts", base.display()),
            orphans,
        });
    }
    if a.is_empty() {
        return Err(Error::Validation(format!("split `{split}` under {} is empty", root.display())));
    }
    let entries = a
        .into_iter()
        .map(|(id, t1)| {
            let triple = Triple { t2: b[&id].clone(), label: l[&id].clone(), t1 };
            (id, triple)
        })
        .collect();
    Ok(DatasetManifest {
        root: root.to_path_buf(),
        split,
        entries,
        tile_size: None,
        tile_stride: None,
    })
}

impl DatasetManifest {
    /// Sorted sample ids.
    pub fn ids(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn triple(&self, id: &str) -> Option<&Triple> {
        self.entries.get(id)
    }

    pub fn with_tiling(mut self, tile: usize, stride: usize) -> Result<Self> {
        if tile == 0 || stride == 0 {
            return Err(Error::Config("tile size and stride must be positive".into()));
        }
        self.tile_size = Some(tile);
        self.tile_stride = Some(stride);
        Ok(self)
    }

    pub fn load(&self, id: &str) -> Result<BiTemporalSample> {
        load_sample(self, id)
    }

    /// Load every sample, splitting frames into tiles when tiling is set.
    pub fn load_all(&self) -> Result<Vec<BiTemporalSample>> {
        let mut out = Vec::new();
        for id in self.entries.keys() {
            let sample = self.load(id)?;
            match (self.tile_size, self.tile_stride) {
                (Some(t), Some(s)) => out.extend(tile_sample(&sample, t, s)?),
                _ => out.push(sample),
            }
        }
        Ok(out)
    }
}

/// Read an image as `(3, H, W)` RGB in `[0, 1]`.
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Ok(Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn decode_label(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|e| Error::Data { path: path.to_path_buf(), message: e.to_string() })?
        .to_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] != 0)
    }))
}

/// Decode a triple: images to `[0, 1]`, labels to {0, 1} with any nonzero
/// pixel marking change.
pub fn load_sample(manifest: &DatasetManifest, id: &str) -> Result<BiTemporalSample> {
    let triple = manifest
        .triple(id)
        .ok_or_else(|| Error::Validation(format!("id `{id}` is not in the manifest")))?;
    let t1 = read_rgb(&triple.t1)?;
    let t2 = read_rgb(&triple.t2)?;
    let label = decode_label(&triple.label)?;
    let (h, w) = label.dim();
    for (path, img) in [(&triple.t1, &t1), (&triple.t2, &t2)] {
        if (img.dim().1, img.dim().2) != (h, w) {
            return Err(Error::Data {
                path: path.clone(),
                message: format!("image is {}x{}, label is {h}x{w}", img.dim().1, img.dim().2),
            });
        }
    }
    BiTemporalSample::new(id, t1, t2, ChangeLabel::from_changed(label)?)
}

/// Top-left corners of all full tiles, row-major.
pub fn tile_origins(h: usize, w: usize, tile: usize, stride: usize) -> Vec<(usize, usize)> {
    if tile == 0 || stride == 0 || tile > h || tile > w {
        return Vec::new();
    }
    let ys = (0..=h - tile).step_by(stride);
    ys.flat_map(|y| (0..=w - tile).step_by(stride).map(move |x| (y, x)))
        .collect()
}

pub fn crop_sample(sample: &BiTemporalSample, y: usize, x: usize, size: usize, id: String) -> Result<BiTemporalSample> {
    let crop3 = |a: &Array3<f32>| a.slice(s![.., y..y + size, x..x + size]).to_owned();
    let label = sample.label.raw().slice(s![y..y + size, x..x + size]).to_owned();
    BiTemporalSample::new(
        id,
        crop3(&sample.image_t1),
        crop3(&sample.image_t2),
        ChangeLabel::new(label, sample.label.polarity())?,
    )
}

pub fn tile_sample(sample: &BiTemporalSample, tile: usize, stride: usize) -> Result<Vec<BiTemporalSample>> {
    let (h, w) = sample.size();
    tile_origins(h, w, tile, stride)
        .into_iter()
        .map(|(y, x)| crop_sample(sample, y, x, tile, format!("{}@{y}_{x}", sample.id)))
        .collect()
}

fn to_rgb_image(img: &Array3<f32>) -> RgbImage {
    let (_, h, w) = img.dim();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| (img[[c, y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    })
}

/// Write a binary map with 255 on ones.
pub fn write_binary_png(path: &Path, map: &Array2<u8>) -> Result<()> {
    let (h, w) = map.dim();
    let img: GrayImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        Luma([if map[[y as usize, x as usize]] != 0 { 255 } else { 0 }])
    });
    img.save(path)?;
    Ok(())
}

/// Write samples into `<root>/<split>/{A,B,label}` as 8-bit PNG.
pub fn write_dataset(root: &Path, split: Split, samples: &[BiTemporalSample]) -> Result<()> {
    let base = root.join(split.dir_name());
    for sub in ["A", "B", "label"] {
        fs::create_dir_all(base.join(sub))?;
    }
    for s in samples {
        let file = format!("{}.png", s.id);
        to_rgb_image(&s.image_t1).save(base.join("A").join(&file))?;
        to_rgb_image(&s.image_t2).save(base.join("B").join(&file))?;
        write_binary_png(&base.join("label").join(&file), &s.label.changed())?;
    }
    Ok(())
}
