//! Frozen feature encoders and the four-level feature pyramid they produce.

use std::io::{Read, Write};

use ndarray::{Array1, Array4, ArrayView4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{he_normal, hex_digest};
use crate::scalar::{DType, Scalar};
use crate::tensor::kernels::{self, ConvGeometry};

/// Downsampling factor of each pyramid level, finest first.
pub const LEVEL_STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Stub,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Channel count per level, finest (1/4) first.
    pub channels: [usize; 4],
    pub frozen: bool,
    pub seed: u64,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Stub,
            channels: [16, 32, 64, 128],
            frozen: true,
            seed: 0,
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if !self.frozen {
            return Err(Error::Config("the encoder is always frozen".into()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Config("encoder level channel counts must be positive".into()));
        }
        Ok(())
    }
}

/// Four dense feature maps at 1/4, 1/8, 1/16 and 1/32 of the input size,
/// stored `[batch, channels, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid<S> {
    pub input_size: (usize, usize),
    pub levels: [Array4<S>; 4],
}

pub fn check_input_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Dimension(format!(
            "input sides must be positive multiples of 32, got {h}x{w}"
        )));
    }
    Ok(())
}

impl<S: Scalar> FeaturePyramid<S> {
    /// Checks level count, scales and finiteness. Errors name the offending
    /// level (1 = finest).
    pub fn new(input_size: (usize, usize), levels: Vec<Array4<S>>) -> Result<Self> {
        if levels.len() != 4 {
            return Err(Error::Format(format!(
                "a feature pyramid has exactly 4 levels, got {}",
                levels.len()
            )));
        }
        let levels: [Array4<S>; 4] = levels.try_into().expect("length checked");
        let pyramid = Self { input_size, levels };
        pyramid.validate()?;
        Ok(pyramid)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.input_size;
        check_input_size(h, w)?;
        let batch = self.levels[0].dim().0;
        for (i, (level, stride)) in self.levels.iter().zip(LEVEL_STRIDES).enumerate() {
            let (n, _, lh, lw) = level.dim();
            if (lh, lw) != (h / stride, w / stride) {
                return Err(Error::Format(format!(
                    "level {} is {lh}x{lw}, expected {}x{} (1/{stride} of {h}x{w})",
                    i + 1,
                    h / stride,
                    w / stride
                )));
            }
            if n != batch {
                return Err(Error::Format(format!("level {} has batch {n}, expected {batch}", i + 1)));
            }
            if level.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!("level {} contains a non-finite value", i + 1)));
            }
        }
        Ok(())
    }

    pub fn batch(&self) -> usize {
        self.levels[0].dim().0
    }

    pub fn channels(&self) -> [usize; 4] {
        std::array::from_fn(|i| self.levels[i].dim().1)
    }

    /// Stack pyramids of equal geometry along the batch axis.
    pub fn stack(parts: &[&FeaturePyramid<S>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Dimension("cannot stack zero pyramids".into()))?;
        let mut levels = Vec::with_capacity(4);
        for i in 0..4 {
            let views: Vec<_> = parts.iter().map(|p| p.levels[i].view()).collect();
            let joined = ndarray::concatenate(Axis(0), &views)
                .map_err(|e| Error::Dimension(format!("pyramid level {} does not stack: {e}", i + 1)))?;
            levels.push(joined);
        }
        Self::new(first.input_size, levels)
    }

    pub fn cast<T: Scalar>(&self) -> FeaturePyramid<T> {
        FeaturePyramid {
            input_size: self.input_size,
            levels: std::array::from_fn(|i| self.levels[i].mapv(|v| T::lit(v.as_f64()))),
        }
    }
}

const PYRAMID_MAGIC: &[u8; 5] = b"FPYR1";

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Serialize a single-image pyramid record.
///
/// Layout (little-endian): `"FPYR1"`, input height and width (`u32`), level
/// count (`u32`), per level `(channels, height, width)` as `u32`, a one-byte
/// dtype tag (0 = f32, 1 = f64), then each level's `C x H x W` data in level
/// order, finest first.
pub fn write_pyramid<S: Scalar>(pyramid: &FeaturePyramid<S>, out: &mut impl Write) -> Result<()> {
    pyramid.validate()?;
    if pyramid.batch() != 1 {
        return Err(Error::Format(format!(
            "a pyramid record holds one image, got batch {}",
            pyramid.batch()
        )));
    }
    out.write_all(PYRAMID_MAGIC)?;
    out.write_all(&(pyramid.input_size.0 as u32).to_le_bytes())?;
    out.write_all(&(pyramid.input_size.1 as u32).to_le_bytes())?;
    out.write_all(&4u32.to_le_bytes())?;
    for level in &pyramid.levels {
        let (_, c, h, w) = level.dim();
        for d in [c, h, w] {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    out.write_all(&[S::DTYPE.tag()])?;
    for level in &pyramid.levels {
        for v in level.iter() {
            match S::DTYPE {
                DType::F32 => out.write_all(&(v.as_f64() as f32).to_le_bytes())?,
                DType::F64 => out.write_all(&v.as_f64().to_le_bytes())?,
            }
        }
    }
    Ok(())
}

/// Read and validate a pyramid record written by [`write_pyramid`] (or by an
/// external feature extractor following the same layout).
pub fn load_external_pyramid<S: Scalar>(input: &mut impl Read) -> Result<FeaturePyramid<S>> {
    let mut magic = [0u8; 5];
    input.read_exact(&mut magic)?;
    if &magic != PYRAMID_MAGIC {
        return Err(Error::Format("not a pyramid record (bad magic)".into()));
    }
    let h = read_u32(input)? as usize;
    let w = read_u32(input)? as usize;
    let count = read_u32(input)? as usize;
    if count != 4 {
        return Err(Error::Format(format!("record declares {count} levels, expected 4")));
    }
    let mut shapes = Vec::with_capacity(4);
    for _ in 0..4 {
        let c = read_u32(input)? as usize;
        let lh = read_u32(input)? as usize;
        let lw = read_u32(input)? as usize;
        shapes.push((c, lh, lw));
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0])
        .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag[0])))?;
    check_input_size(h, w).map_err(|e| Error::Format(e.to_string()))?;
    for (i, (&(_, lh, lw), stride)) in shapes.iter().zip(LEVEL_STRIDES).enumerate() {
        if (lh, lw) != (h / stride, w / stride) {
            return Err(Error::Format(format!(
                "level {} is {lh}x{lw}, expected {}x{} (1/{stride} of {h}x{w})",
                i + 1,
                h / stride,
                w / stride
            )));
        }
    }
    let mut levels = Vec::with_capacity(4);
    for (i, &(c, lh, lw)) in shapes.iter().enumerate() {
        let mut raw = vec![0u8; c * lh * lw * dtype.size()];
        input
            .read_exact(&mut raw)
            .map_err(|e| Error::Format(format!("level {} data truncated: {e}", i + 1)))?;
        let values: Vec<S> = match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|b| S::lit(f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64))
                .collect(),
            DType::F64 => raw
                .chunks_exact(8)
                .map(|b| S::lit(f64::from_le_bytes(b.try_into().expect("8 bytes"))))
                .collect(),
        };
        levels.push(Array4::from_shape_vec((1, c, lh, lw), values).expect("sized buffer"));
    }
    FeaturePyramid::new((h, w), levels)
}

/// Desk-scale stand-in for a pretrained convolutional encoder: a stride-4
/// stem followed by three stride-2 stages, randomly initialized from the
/// spec seed and never updated afterwards.
#[derive(Debug, Clone)]
pub struct StubEncoder<S> {
    spec: EncoderSpec,
    stages: Vec<(Array4<S>, Array1<S>, ConvGeometry)>,
}

const STEM: ConvGeometry = ConvGeometry { kernel: 4, stride: 4, pad: 0 };
const STAGE: ConvGeometry = ConvGeometry { kernel: 3, stride: 2, pad: 1 };

impl<S: Scalar> StubEncoder<S> {
    pub fn new(spec: &EncoderSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_e4c0_de00_0001);
        let bias_dist = Normal::new(0.0, 0.1).expect("valid normal");
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = 3;
        for (i, &out_ch) in spec.channels.iter().enumerate() {
            let geo = if i == 0 { STEM } else { STAGE };
            let w = he_normal::<S, _>((out_ch, in_ch, geo.kernel, geo.kernel), &mut rng);
            let b = Array1::from_shape_simple_fn(out_ch, || S::lit(bias_dist.sample(&mut rng)));
            stages.push((w, b, geo));
            in_ch = out_ch;
        }
        Ok(Self { spec: spec.clone(), stages })
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    /// Encode a batch of `[n, 3, h, w]` images with values in `[0, 1]`.
    pub fn encode(&self, images: ArrayView4<S>) -> Result<FeaturePyramid<S>> {
        let (_, c, h, w) = images.dim();
        if c != 3 {
            return Err(Error::Dimension(format!("encoder expects 3 image channels, got {c}")));
        }
        check_input_size(h, w)?;
        if images.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("input image contains a non-finite value".into()));
        }
        let half = S::lit(0.5);
        let inv_spread = S::lit(4.0);
        let mut x = images.mapv(|v| (v - half) * inv_spread);
        let mut levels = Vec::with_capacity(4);
        for (weight, bias, geo) in &self.stages {
            x = kernels::conv2d(x.view(), weight.view(), Some(bias.view()), *geo)?;
            x.mapv_inplace(|v| v.max(S::zero()));
            levels.push(x.clone());
        }
        FeaturePyramid::new((h, w), levels)
    }

    /// SHA-256 of all encoder weights; unchanged for the lifetime of the
    /// encoder.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (w, b, _) in &self.stages {
            for v in w.iter().chain(b.iter()) {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hex_digest(hasher.finalize().as_slice())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn spec() -> EncoderSpec {
        EncoderSpec { channels: [16, 32, 64, 128], ..EncoderSpec::default() }
    }

    #[test]
    fn pyramid_scales_follow_input() {
        let enc = StubEncoder::<f32>::new(&spec()).unwrap();
        let img = Array::from_shape_fn((1, 3, 256, 256), |(_, c, y, x)| ((c + y * 3 + x) % 17) as f32 / 17.0);
        let p = enc.encode(img.view()).unwrap();
        let dims: Vec<_> = p.levels.iter().map(|l| l.dim()).collect();
        assert_eq!(dims, vec![(1, 16, 64, 64), (1, 32, 32, 32), (1, 64, 16, 16), (1, 128, 8, 8)]);
    }

    #[test]
    fn zero_image_gives_finite_features() {
        let enc = StubEncoder::<f64>::new(&spec()).unwrap();
        let p = enc.encode(Array4::zeros((1, 3, 64, 64)).view()).unwrap();
        assert!(p.levels.iter().all(|l| l.iter().all(|v| v.is_finite())));
    }

    #[test]
    fn encoding_is_deterministic_per_seed() {
        let img = Array::from_shape_fn((1, 3, 64, 64), |(_, c, y, x)| ((c * 5 + y + 2 * x) % 13) as f32 / 13.0);
        let a = StubEncoder::<f32>::new(&spec()).unwrap().encode(img.view()).unwrap();
        let b = StubEncoder::<f32>::new(&spec()).unwrap().encode(img.view()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let enc = StubEncoder::<f32>::new(&spec()).unwrap();
        assert!(matches!(enc.encode(Array4::zeros((1, 3, 48, 64)).view()), Err(Error::Dimension(_))));
        let mut img = Array4::<f32>::zeros((1, 3, 64, 64));
        img[[0, 1, 3, 3]] = f32::NAN;
        assert!(matches!(enc.encode(img.view()), Err(Error::Validation(_))));
    }

    #[test]
    fn record_round_trip() {
        let enc = StubEncoder::<f32>::new(&spec()).unwrap();
        let img = Array::from_shape_fn((1, 3, 256, 256), |(_, c, y, x)| ((c + y + x) % 7) as f32 / 7.0);
        let p = enc.encode(img.view()).unwrap();
        let mut buf = Vec::new();
        write_pyramid(&p, &mut buf).unwrap();
        let back: FeaturePyramid<f32> = load_external_pyramid(&mut buf.as_slice()).unwrap();
        assert_eq!(back, p);
    }

    fn record_with_shapes(shapes: &[(u32, u32, u32)], fill: f32) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"FPYR1");
        buf.extend_from_slice(&64u32.to_le_bytes());
        buf.extend_from_slice(&64u32.to_le_bytes());
        buf.extend_from_slice(&(shapes.len() as u32).to_le_bytes());
        for &(c, h, w) in shapes {
            for d in [c, h, w] {
                buf.extend_from_slice(&d.to_le_bytes());
            }
        }
        buf.push(0);
        for &(c, h, w) in shapes {
            for _ in 0..c * h * w {
                buf.extend_from_slice(&fill.to_le_bytes());
            }
        }
        buf
    }

    #[test]
    fn half_scale_level_is_a_format_error() {
        let buf = record_with_shapes(&[(2, 32, 32), (2, 8, 8), (2, 4, 4), (2, 2, 2)], 0.0);
        let err = load_external_pyramid::<f32>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(ref m) if m.contains("level 1")), "{err}");
    }

    #[test]
    fn wrong_level_count_is_a_format_error() {
        let buf = record_with_shapes(&[(2, 16, 16), (2, 8, 8), (2, 4, 4)], 0.0);
        assert!(matches!(load_external_pyramid::<f32>(&mut buf.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn non_finite_value_names_the_level() {
        let mut buf = record_with_shapes(&[(1, 16, 16), (1, 8, 8), (1, 4, 4), (1, 2, 2)], 0.0);
        let n = buf.len();
        buf[n - 4..].copy_from_slice(&f32::INFINITY.to_le_bytes());
        let err = load_external_pyramid::<f32>(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("level 4")), "{err}");
    }
}
