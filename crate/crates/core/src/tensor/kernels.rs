//! Dense NCHW kernels shared by the autograd tape and the eager helpers.
//!
//! Every function takes and returns owned or viewed `ndarray` arrays in
//! standard (row-major) layout. Backward kernels receive the upstream
//! gradient and whatever forward intermediates they need; they never touch
//! the tape.

use ndarray::{s, Array1, Array2, Array4, ArrayView1, ArrayView2, ArrayView4, Axis, Zip};
use rayon::prelude::*;

use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

pub const BN_EPS: f64 = 1e-5;

pub fn conv_out_len(len: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < kernel || stride == 0 {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<S: Scalar>(
    xs: &[S],
    (c, h, w): (usize, usize, usize),
    geo: ConvGeometry,
    (ho, wo): (usize, usize),
) -> Array2<S> {
    let k = geo.kernel;
    let plane = ho * wo;
    let mut cols = vec![S::zero(); c * k * k * plane];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &xs[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            *d = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    Array2::from_shape_vec((c * k * k, plane), cols).expect("im2col shape")
}

fn col2im<S: Scalar>(
    cols: ArrayView2<S>,
    (c, h, w): (usize, usize, usize),
    geo: ConvGeometry,
    (ho, wo): (usize, usize),
) -> Vec<S> {
    let k = geo.kernel;
    let plane = ho * wo;
    let cols = cols.as_standard_layout();
    let cs = cols.as_slice().expect("standard layout");
    let mut out = vec![S::zero(); c * h * w];
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                let src = &cs[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            out[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_conv<S: Scalar>(
    x: &ArrayView4<S>,
    weight: &ArrayView4<S>,
    geo: ConvGeometry,
) -> Result<(usize, usize)> {
    let (_, c, h, w) = x.dim();
    let (_, wc, kh, kw) = weight.dim();
    if wc != c {
        return dim_err(format!("convolution expects {wc} input channels, got {c}"));
    }
    if kh != geo.kernel || kw != geo.kernel {
        return dim_err(format!(
            "kernel {kh}x{kw} does not match geometry {}",
            geo.kernel
        ));
    }
    match (
        conv_out_len(h, geo.kernel, geo.stride, geo.pad),
        conv_out_len(w, geo.kernel, geo.stride, geo.pad),
    ) {
        (Some(ho), Some(wo)) => Ok((ho, wo)),
        _ => dim_err(format!("input {h}x{w} too small for kernel {}", geo.kernel)),
    }
}

/// 2-D cross-correlation, weight layout `[out, in, k, k]`.
pub fn conv2d<S: Scalar>(
    x: ArrayView4<S>,
    weight: ArrayView4<S>,
    bias: Option<ArrayView1<S>>,
    geo: ConvGeometry,
) -> Result<Array4<S>> {
    let (ho, wo) = check_conv(&x, &weight, geo)?;
    let (n, c, h, w) = x.dim();
    let co = weight.dim().0;
    let w2 = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, c * geo.kernel * geo.kernel))
        .expect("weight reshape");
    let x = x.as_standard_layout();
    let mut out = Array4::<S>::zeros((n, co, ho, wo));
    out.axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(x.axis_iter(Axis(0)).into_par_iter())
        .for_each(|(mut o, xi)| {
            let xs = xi.as_slice().expect("standard layout");
            let y = if geo.is_pointwise() {
                let xm = ArrayView2::from_shape((c, h * w), xs).expect("pointwise view");
                w2.dot(&xm)
            } else {
                let cols = im2col(xs, (c, h, w), geo, (ho, wo));
                w2.dot(&cols)
            };
            let mut o2 = o
                .view_mut()
                .into_shape_with_order((co, ho * wo))
                .expect("output view");
            o2.assign(&y);
            if let Some(b) = bias {
                for (mut row, &bv) in o2.outer_iter_mut().zip(b.iter()) {
                    row.mapv_inplace(|v| v + bv);
                }
            }
        });
    Ok(out)
}

pub struct ConvGrads<S> {
    pub dx: Array4<S>,
    pub dweight: Array4<S>,
    pub dbias: Array1<S>,
}

pub fn conv2d_backward<S: Scalar>(
    x: ArrayView4<S>,
    weight: ArrayView4<S>,
    dy: ArrayView4<S>,
    geo: ConvGeometry,
) -> Result<ConvGrads<S>> {
    let (ho, wo) = check_conv(&x, &weight, geo)?;
    let (n, c, h, w) = x.dim();
    let co = weight.dim().0;
    if dy.dim() != (n, co, ho, wo) {
        return dim_err("upstream gradient shape does not match convolution output");
    }
    let kk = c * geo.kernel * geo.kernel;
    let w2 = weight
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((co, kk))
        .expect("weight reshape");
    let w2t = w2.t();
    let x = x.as_standard_layout();
    let dy = dy.as_standard_layout();

    let per_item: Vec<(Array2<S>, Vec<S>)> = x
        .axis_iter(Axis(0))
        .into_par_iter()
        .zip(dy.axis_iter(Axis(0)).into_par_iter())
        .map(|(xi, dyi)| {
            let xs = xi.as_slice().expect("standard layout");
            let dy2 = dyi.into_shape_with_order((co, ho * wo)).expect("dy view");
            if geo.is_pointwise() {
                let xm = ArrayView2::from_shape((c, h * w), xs).expect("pointwise view");
                let dw = dy2.dot(&xm.t());
                let dx = w2t.dot(&dy2);
                (dw, dx.into_raw_vec_and_offset().0)
            } else {
                let cols = im2col(xs, (c, h, w), geo, (ho, wo));
                let dw = dy2.dot(&cols.t());
                let dcols = w2t.dot(&dy2);
                (dw, col2im(dcols.view(), (c, h, w), geo, (ho, wo)))
            }
        })
        .collect();

    let mut dw_sum = Array2::<S>::zeros((co, kk));
    let mut dx = Vec::with_capacity(n * c * h * w);
    for (dw, dxi) in per_item {
        dw_sum += &dw;
        dx.extend(dxi);
    }
    let dbias = dy.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
    Ok(ConvGrads {
        dx: Array4::from_shape_vec((n, c, h, w), dx).expect("dx shape"),
        dweight: dw_sum
            .into_shape_with_order((co, c, geo.kernel, geo.kernel))
            .expect("dweight shape"),
        dbias,
    })
}

/// Batch statistics: per-channel mean and biased variance over N, H, W.
pub fn channel_moments<S: Scalar>(x: ArrayView4<S>) -> (Array1<S>, Array1<S>) {
    let (n, c, h, w) = x.dim();
    let m = S::lit((n * h * w) as f64);
    let mut mean = Array1::zeros(c);
    let mut var = Array1::zeros(c);
    for ch in 0..c {
        let plane = x.slice(s![.., ch, .., ..]);
        let mu = plane.sum() / m;
        let v = plane.fold(S::zero(), |acc, &v| acc + (v - mu) * (v - mu)) / m;
        mean[ch] = mu;
        var[ch] = v;
    }
    (mean, var)
}

/// Per-channel affine normalization `gamma * (x - mean) * inv_std + beta`.
pub fn normalize<S: Scalar>(
    x: ArrayView4<S>,
    mean: ArrayView1<S>,
    inv_std: ArrayView1<S>,
    gamma: ArrayView1<S>,
    beta: ArrayView1<S>,
) -> (Array4<S>, Array4<S>) {
    let mut xhat = x.to_owned();
    for (ch, mut plane) in xhat.axis_iter_mut(Axis(1)).enumerate() {
        let (mu, is) = (mean[ch], inv_std[ch]);
        plane.mapv_inplace(|v| (v - mu) * is);
    }
    let mut y = xhat.clone();
    for (ch, mut plane) in y.axis_iter_mut(Axis(1)).enumerate() {
        let (g, b) = (gamma[ch], beta[ch]);
        plane.mapv_inplace(|v| g * v + b);
    }
    (xhat, y)
}

pub fn inv_std<S: Scalar>(var: ArrayView1<S>) -> Array1<S> {
    var.mapv(|v| S::one() / (v + S::lit(BN_EPS)).sqrt())
}

pub struct NormGrads<S> {
    pub dx: Array4<S>,
    pub dgamma: Array1<S>,
    pub dbeta: Array1<S>,
}

/// Backward pass of batch normalization with batch statistics.
pub fn batch_norm_backward<S: Scalar>(
    xhat: ArrayView4<S>,
    inv_std: ArrayView1<S>,
    gamma: ArrayView1<S>,
    dy: ArrayView4<S>,
) -> NormGrads<S> {
    let (n, c, h, w) = xhat.dim();
    let m = S::lit((n * h * w) as f64);
    let mut dx = Array4::zeros((n, c, h, w));
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ch in 0..c {
        let xh = xhat.slice(s![.., ch, .., ..]);
        let g = dy.slice(s![.., ch, .., ..]);
        let sum_dy = g.sum();
        let sum_dy_xh = Zip::from(&g).and(&xh).fold(S::zero(), |acc, &a, &b| acc + a * b);
        dgamma[ch] = sum_dy_xh;
        dbeta[ch] = sum_dy;
        let scale = gamma[ch] * inv_std[ch] / m;
        Zip::from(dx.slice_mut(s![.., ch, .., ..]))
            .and(&g)
            .and(&xh)
            .for_each(|d, &gv, &xv| *d = scale * (m * gv - sum_dy - xv * sum_dy_xh));
    }
    NormGrads { dx, dgamma, dbeta }
}

/// Source indices and interpolation weight along one axis for a resize
/// with half-pixel centers.
#[derive(Debug, Clone, Copy)]
pub struct Tap<S> {
    pub lo: usize,
    pub hi: usize,
    pub frac: S,
}

pub fn bilinear_taps<S: Scalar>(in_len: usize, out_len: usize) -> Vec<Tap<S>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|d| {
            let src = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap { lo, hi, frac: S::lit(src - lo as f64) }
        })
        .collect()
}

pub fn resize_bilinear<S: Scalar>(x: ArrayView4<S>, out_h: usize, out_w: usize) -> Array4<S> {
    let (n, c, h, w) = x.dim();
    if (h, w) == (out_h, out_w) {
        return x.to_owned();
    }
    let ty = bilinear_taps::<S>(h, out_h);
    let tx = bilinear_taps::<S>(w, out_w);
    let mut out = Array4::zeros((n, c, out_h, out_w));
    for ni in 0..n {
        for ci in 0..c {
            let src = x.slice(s![ni, ci, .., ..]);
            let mut dst = out.slice_mut(s![ni, ci, .., ..]);
            for (oy, t) in ty.iter().enumerate() {
                for (ox, u) in tx.iter().enumerate() {
                    let top = src[[t.lo, u.lo]] * (S::one() - u.frac) + src[[t.lo, u.hi]] * u.frac;
                    let bot = src[[t.hi, u.lo]] * (S::one() - u.frac) + src[[t.hi, u.hi]] * u.frac;
                    dst[[oy, ox]] = top * (S::one() - t.frac) + bot * t.frac;
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_backward<S: Scalar>(
    dy: ArrayView4<S>,
    in_h: usize,
    in_w: usize,
) -> Array4<S> {
    let (n, c, out_h, out_w) = dy.dim();
    if (in_h, in_w) == (out_h, out_w) {
        return dy.to_owned();
    }
    let ty = bilinear_taps::<S>(in_h, out_h);
    let tx = bilinear_taps::<S>(in_w, out_w);
    let mut dx = Array4::zeros((n, c, in_h, in_w));
    for ni in 0..n {
        for ci in 0..c {
            let g = dy.slice(s![ni, ci, .., ..]);
            let mut d = dx.slice_mut(s![ni, ci, .., ..]);
            for (oy, t) in ty.iter().enumerate() {
                for (ox, u) in tx.iter().enumerate() {
                    let v = g[[oy, ox]];
                    let (wy0, wy1) = (S::one() - t.frac, t.frac);
                    let (wx0, wx1) = (S::one() - u.frac, u.frac);
                    d[[t.lo, u.lo]] += v * wy0 * wx0;
                    d[[t.lo, u.hi]] += v * wy0 * wx1;
                    d[[t.hi, u.lo]] += v * wy1 * wx0;
                    d[[t.hi, u.hi]] += v * wy1 * wx1;
                }
            }
        }
    }
    dx
}

/// Nearest-neighbour resampling of a 2-D map (floor of the scaled index).
pub fn resize_nearest<T: Copy>(src: ArrayView2<T>, out_h: usize, out_w: usize) -> Array2<T> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((out_h, out_w), |(y, x)| {
        let sy = ((y * h) / out_h).min(h - 1);
        let sx = ((x * w) / out_w).min(w - 1);
        src[[sy, sx]]
    })
}

/// Channel-wise softmax of `x / temperature`, stabilised by subtracting the
/// per-pixel maximum.
pub fn softmax_channels<S: Scalar>(x: ArrayView4<S>, temperature: S) -> Array4<S> {
    let mut out = x.to_owned();
    let (n, c, h, w) = x.dim();
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let mut lane = out.slice_mut(s![ni, .., y, xx]);
                let max = lane.fold(S::neg_infinity(), |m, &v| m.max(v));
                lane.mapv_inplace(|v| ((v - max) / temperature).exp());
                let z = lane.sum();
                lane.mapv_inplace(|v| v / z);
            }
        }
    }
    debug_assert_eq!(out.dim().1, c);
    out
}

pub fn softmax_channels_backward<S: Scalar>(
    y: ArrayView4<S>,
    dy: ArrayView4<S>,
    temperature: S,
) -> Array4<S> {
    let (n, _, h, w) = y.dim();
    let mut dx = Array4::zeros(y.raw_dim());
    for ni in 0..n {
        for yy in 0..h {
            for xx in 0..w {
                let p = y.slice(s![ni, .., yy, xx]);
                let g = dy.slice(s![ni, .., yy, xx]);
                let dot = Zip::from(&p).and(&g).fold(S::zero(), |a, &pv, &gv| a + pv * gv);
                Zip::from(dx.slice_mut(s![ni, .., yy, xx]))
                    .and(&p)
                    .and(&g)
                    .for_each(|d, &pv, &gv| *d = pv * (gv - dot) / temperature);
            }
        }
    }
    dx
}

pub const COSINE_EPS: f64 = 1e-8;

/// Per-pixel cosine similarity between the channel vectors of `a` and `b`.
///
/// The norm product is floored at `COSINE_EPS` rather than offset by it, so
/// identical vectors give exactly 1. Returns `(cos, dot, |a|^2, |b|^2)`.
pub fn pixel_cosine<S: Scalar>(a: ArrayView1<S>, b: ArrayView1<S>) -> (S, S, S, S) {
    let dot = Zip::from(&a).and(&b).fold(S::zero(), |acc, &x, &y| acc + x * y);
    let sa = a.fold(S::zero(), |acc, &x| acc + x * x);
    let sb = b.fold(S::zero(), |acc, &x| acc + x * x);
    (dot / cosine_denominator(sa, sb), dot, sa, sb)
}

fn cosine_denominator<S: Scalar>(sa: S, sb: S) -> S {
    (sa * sb).sqrt().max(S::lit(COSINE_EPS))
}

/// Masked mean of `1 - cos` over pixels where `mask` is one; `mask` has
/// shape `[n, h, w]`. Returns zero when the mask is empty.
pub fn masked_cosine_loss<S: Scalar>(
    a: ArrayView4<S>,
    b: ArrayView4<S>,
    mask: ndarray::ArrayView3<u8>,
) -> S {
    let (n, _, h, w) = a.dim();
    let mut sum = S::zero();
    let mut count = 0usize;
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if mask[[ni, y, x]] == 0 {
                    continue;
                }
                let (cos, ..) = pixel_cosine(a.slice(s![ni, .., y, x]), b.slice(s![ni, .., y, x]));
                sum += S::one() - cos;
                count += 1;
            }
        }
    }
    if count == 0 {
        S::zero()
    } else {
        sum / S::lit(count as f64)
    }
}

pub fn masked_cosine_loss_backward<S: Scalar>(
    a: ArrayView4<S>,
    b: ArrayView4<S>,
    mask: ndarray::ArrayView3<u8>,
    upstream: S,
) -> (Array4<S>, Array4<S>) {
    let (n, _, h, w) = a.dim();
    let mut da = Array4::zeros(a.raw_dim());
    let mut db = Array4::zeros(b.raw_dim());
    let count = mask.iter().filter(|&&m| m != 0).count();
    if count == 0 {
        return (da, db);
    }
    let scale = -upstream / S::lit(count as f64);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                if mask[[ni, y, x]] == 0 {
                    continue;
                }
                let av = a.slice(s![ni, .., y, x]);
                let bv = b.slice(s![ni, .., y, x]);
                let (_, dot, sa, sb) = pixel_cosine(av, bv);
                let denom = cosine_denominator(sa, sb);
                // below the floor the denominator is a constant
                let active = (sa * sb).sqrt() > S::lit(COSINE_EPS);
                let (ka, kb) = if active { (dot / (sa * denom), dot / (sb * denom)) } else { (S::zero(), S::zero()) };
                Zip::from(da.slice_mut(s![ni, .., y, x]))
                    .and(&av)
                    .and(&bv)
                    .for_each(|d, &ai, &bi| *d = scale * (bi / denom - ka * ai));
                Zip::from(db.slice_mut(s![ni, .., y, x]))
                    .and(&av)
                    .and(&bv)
                    .for_each(|d, &ai, &bi| *d = scale * (ai / denom - kb * bi));
            }
        }
    }
    (da, db)
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross-entropy of probabilities against a {0,1} target.
pub fn bce_mean<S: Scalar>(p: ArrayView4<S>, target: ArrayView4<S>) -> S {
    let lo = S::lit(PROB_CLAMP);
    let hi = S::one() - lo;
    let total = Zip::from(&p).and(&target).fold(S::zero(), |acc, &pv, &t| {
        // `max`/`min` would swallow a NaN
        let q = if pv.is_nan() { pv } else { pv.max(lo).min(hi) };
        acc - (t * q.ln() + (S::one() - t) * (S::one() - q).ln())
    });
    total / S::lit(p.len() as f64)
}

pub fn bce_mean_backward<S: Scalar>(p: ArrayView4<S>, target: ArrayView4<S>, upstream: S) -> Array4<S> {
    let lo = S::lit(PROB_CLAMP);
    let hi = S::one() - lo;
    let scale = upstream / S::lit(p.len() as f64);
    let mut dp = Array4::zeros(p.raw_dim());
    Zip::from(&mut dp).and(&p).and(&target).for_each(|d, &pv, &t| {
        *d = if pv < lo || pv > hi {
            S::zero()
        } else {
            -scale * (t / pv - (S::one() - t) / (S::one() - pv))
        };
    });
    dp
}

#[inline]
pub fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}
