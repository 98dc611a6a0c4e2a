//! Task-agnostic semantic branch and the attention-gated change head.
//!
//! The semantic branch maps fused features to a `k`-channel latent per date,
//! normalizes it with a tempered softmax and ties the two dates together
//! with a masked cosine loss on unchanged pixels. The change branch embeds
//! both dates' features with residual blocks and gates them with a sigmoid
//! attention map computed from the concatenated latents.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::Rng;

use crate::data::ChangeLabel;
use crate::error::{dim_err, Error, Result};
use crate::model::AdaptedFeatures;
use crate::nn::{BatchNorm2d, Conv2d, ConvBnRelu, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::kernels::{self, resize_nearest};
use crate::tensor::{ConvGeometry, Graph, Var};

const POINTWISE: ConvGeometry = ConvGeometry { kernel: 1, stride: 1, pad: 0 };
const SAME3: ConvGeometry = ConvGeometry { kernel: 3, stride: 1, pad: 1 };

/// `k x h x w` semantic latent of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLatent<S> {
    values: Array3<S>,
    normalized: bool,
}

impl<S: Scalar> SemanticLatent<S> {
    pub fn new(values: Array3<S>) -> Result<Self> {
        if values.dim().0 < 2 {
            return Err(Error::Config(format!(
                "a semantic latent needs at least 2 channels, got {}",
                values.dim().0
            )));
        }
        Ok(Self { values, normalized: false })
    }

    /// Wrap an already normalized map, checking the simplex invariant.
    pub fn normalized(values: Array3<S>) -> Result<Self> {
        let mut l = Self::new(values)?;
        l.normalized = true;
        l.check_normalized()?;
        Ok(l)
    }

    pub fn values(&self) -> &Array3<S> {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn channels(&self) -> usize {
        self.values.dim().0
    }

    fn check_normalized(&self) -> Result<()> {
        let tol = 1e-6;
        for lane in self.values.lanes(Axis(0)) {
            let sum: f64 = lane.iter().map(|v| v.as_f64()).sum();
            if (sum - 1.0).abs() > tol || lane.iter().any(|v| *v < S::zero() || *v > S::one()) {
                return Err(Error::Validation(format!(
                    "latent pixel is not a distribution (sum {sum})"
                )));
            }
        }
        Ok(())
    }
}

/// Channelwise softmax of `latent / temperature` at every pixel.
pub fn tempered_softmax<S: Scalar>(latent: &SemanticLatent<S>, temperature: S) -> Result<SemanticLatent<S>> {
    if !(temperature > S::zero()) {
        return Err(Error::Config(format!("temperature must satisfy T > 0, got {temperature}")));
    }
    if latent.normalized {
        return Err(Error::Validation("latent is already normalized".into()));
    }
    let x = latent.values.view().insert_axis(Axis(0));
    let y = kernels::softmax_channels(x, temperature);
    Ok(SemanticLatent {
        values: y.index_axis_move(Axis(0), 0),
        normalized: true,
    })
}

/// Mean `1 - cos(l1, l2)` over pixels the label marks unchanged, after
/// nearest-neighbour resampling of the label to the latent resolution.
/// Exactly zero when no pixel is unchanged.
pub fn temporal_constraint_loss<S: Scalar>(
    l1: &SemanticLatent<S>,
    l2: &SemanticLatent<S>,
    label: &ChangeLabel,
) -> Result<S> {
    if l1.values.dim() != l2.values.dim() {
        return dim_err(format!(
            "latent shapes differ: {:?} vs {:?}",
            l1.values.dim(),
            l2.values.dim()
        ));
    }
    let (_, h, w) = l1.values.dim();
    let mask = resize_nearest(label.unchanged().view(), h, w).insert_axis(Axis(0));
    Ok(kernels::masked_cosine_loss(
        l1.values.view().insert_axis(Axis(0)),
        l2.values.view().insert_axis(Axis(0)),
        mask.view(),
    ))
}

/// Stack unchanged masks `[n, h, w]` at latent resolution for the tape op.
pub fn unchanged_masks(labels: &[&ChangeLabel], h: usize, w: usize) -> Array3<u8> {
    let planes: Vec<Array2<u8>> = labels
        .iter()
        .map(|l| resize_nearest(l.unchanged().view(), h, w))
        .collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal mask planes")
}

/// Changed-indicator targets `[n, 1, H, W]` for the supervision loss.
pub fn changed_targets<S: Scalar>(labels: &[&ChangeLabel]) -> Array4<S> {
    let planes: Vec<Array2<S>> = labels
        .iter()
        .map(|l| l.changed().mapv(|v| S::lit(v as f64)))
        .collect();
    let views: Vec<_> = planes.iter().map(|p| p.view()).collect();
    ndarray::stack(Axis(0), &views)
        .expect("equal label planes")
        .insert_axis(Axis(1))
}

pub fn temporal_constraint_loss_var<S: Scalar>(
    g: &mut Graph<S>,
    l1: Var,
    l2: Var,
    labels: &[&ChangeLabel],
) -> Result<Var> {
    let (n, _, h, w) = g.shape4(l1);
    if labels.len() != n {
        return dim_err(format!("{} labels for a batch of {n}", labels.len()));
    }
    g.masked_cosine_loss(l1, l2, unchanged_masks(labels, h, w))
}

/// Mean binary cross-entropy between change probabilities and the changed
/// indicator, probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn change_supervision_loss<S: Scalar>(probability: &Array2<S>, label: &ChangeLabel) -> Result<S> {
    if probability.dim() != label.dim() {
        return dim_err(format!(
            "prediction {:?} vs label {:?}",
            probability.dim(),
            label.dim()
        ));
    }
    let target = label.changed().mapv(|v| S::lit(v as f64));
    Ok(kernels::bce_mean(
        probability.view().insert_axis(Axis(0)).insert_axis(Axis(0)),
        target.view().insert_axis(Axis(0)).insert_axis(Axis(0)),
    ))
}

/// Per-pixel change probability and its thresholded map.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangePrediction<S> {
    pub probability: Array2<S>,
    pub binary: Array2<u8>,
    pub threshold: S,
}

impl<S: Scalar> ChangePrediction<S> {
    pub fn from_probability(probability: Array2<S>, threshold: S) -> Self {
        let binary = probability.mapv(|p| u8::from(p >= threshold));
        Self { probability, binary, threshold }
    }
}

/// Single 1x1 convolution producing the candidate latent.
#[derive(Debug, Clone)]
pub struct SemanticEmbedding {
    pub conv: Conv2d,
    pub k: usize,
}

impl SemanticEmbedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        in_channels: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if k < 2 {
            return Err(Error::Config(format!("semantic channels k must be at least 2, got {k}")));
        }
        Ok(Self {
            conv: Conv2d::new(store, "semantic.embed", in_channels, k, POINTWISE, true, rng)?,
            k,
        })
    }
}

/// Unnormalized `k`-channel latent at the fused resolution.
pub fn extract_latent<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    embed: &SemanticEmbedding,
    fused: &AdaptedFeatures,
) -> Result<Var> {
    embed.conv.forward(g, store, fused.concat)
}

/// `relu(x + bn(conv(relu(bn(conv(x))))))`.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    pub first: ConvBnRelu,
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ResidualBlock {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: ConvBnRelu::new(store, &format!("{name}.a"), width, width, SAME3, rng)?,
            conv: Conv2d::new(store, &format!("{name}.b.conv"), width, width, SAME3, false, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.b.bn"), width)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = self.first.forward(g, store, x)?;
        let y = self.conv.forward(g, store, y)?;
        let y = self.bn.forward(g, store, y)?;
        let y = g.add(x, y)?;
        Ok(g.relu(y))
    }
}

pub const RESIDUAL_BLOCKS: usize = 6;

/// Projects the concatenated bi-temporal features to the change width and
/// refines them with residual blocks.
#[derive(Debug, Clone)]
pub struct ChangeEmbedding {
    pub projection: ConvBnRelu,
    pub blocks: Vec<ResidualBlock>,
    pub width: usize,
}

impl ChangeEmbedding {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        in_channels: usize,
        width: usize,
        blocks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let projection = ConvBnRelu::new(store, "change.project", 2 * in_channels, width, POINTWISE, rng)?;
        let blocks = (0..blocks)
            .map(|i| ResidualBlock::new(store, &format!("change.res{i}"), width, rng))
            .collect::<Result<_>>()?;
        Ok(Self { projection, blocks, width })
    }

    /// Zero the last normalization scale and shift of every residual branch
    /// so each block is the identity on its (non-negative) input.
    pub fn zero_residual_branches<S: Scalar>(&self, store: &mut ParamStore<S>) {
        for b in &self.blocks {
            store.value_mut(b.bn.gamma).fill(S::zero());
            store.value_mut(b.bn.beta).fill(S::zero());
        }
    }
}

pub fn change_embedding<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    embedding: &ChangeEmbedding,
    features_t1: Var,
    features_t2: Var,
) -> Result<Var> {
    if g.shape4(features_t1) != g.shape4(features_t2) {
        return dim_err(format!(
            "temporal feature shapes differ: {:?} vs {:?}",
            g.shape4(features_t1),
            g.shape4(features_t2)
        ));
    }
    let joined = g.concat_channels(&[features_t1, features_t2])?;
    let mut x = embedding.projection.forward(g, store, joined)?;
    for block in &embedding.blocks {
        x = block.forward(g, store, x)?;
    }
    Ok(x)
}

/// `conv2(sigmoid(conv1(l1 ++ l2)) * f_c)` followed by upsampling and a
/// sigmoid.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub gate: Conv2d,
    pub out: Conv2d,
}

impl AttentionHead {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        k: usize,
        change_width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            gate: Conv2d::new(store, "head.gate", 2 * k, change_width, SAME3, true, rng)?,
            out: Conv2d::new(store, "head.out", change_width, 1, SAME3, true, rng)?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub gate: Var,
    pub logits: Var,
    pub probability: Var,
}

pub fn attention_change_head<S: Scalar>(
    g: &mut Graph<S>,
    store: &ParamStore<S>,
    head: &AttentionHead,
    l1: Var,
    l2: Var,
    change_features: Var,
    out_size: (usize, usize),
) -> Result<HeadOutput> {
    let (n, _, h, w) = g.shape4(l1);
    let (fn_, _, fh, fw) = g.shape4(change_features);
    if g.shape4(l2) != g.shape4(l1) || (fn_, fh, fw) != (n, h, w) {
        return dim_err(format!(
            "head inputs disagree spatially: latents {:?}/{:?}, change features {:?}",
            g.shape4(l1),
            g.shape4(l2),
            g.shape4(change_features)
        ));
    }
    let joined = g.concat_channels(&[l1, l2])?;
    let gate = head.gate.forward(g, store, joined)?;
    let gate = g.sigmoid(gate);
    let gated = g.mul(gate, change_features)?;
    let logits = head.out.forward(g, store, gated)?;
    let logits = g.resize(logits, out_size.0, out_size.1);
    let probability = g.sigmoid(logits);
    Ok(HeadOutput { gate, logits, probability })
}
