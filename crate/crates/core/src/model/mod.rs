//! The full change-detection network.

mod encoder;
mod fusion;

pub use encoder::{
    check_input_size, load_external_pyramid, write_pyramid, EncoderKind, EncoderSpec, FeaturePyramid,
    StubEncoder, LEVEL_STRIDES,
};
pub use fusion::{adapt_level, build_fusion, fuse_topdown, Adaptor, AdaptedFeatures, FusionBlock, LevelSet};

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChangeLabel;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::semantic::{
    attention_change_head, change_embedding, changed_targets, extract_latent, temporal_constraint_loss_var,
    AttentionHead, ChangeEmbedding, ChangePrediction, HeadOutput, SemanticEmbedding, RESIDUAL_BLOCKS,
};
use crate::tensor::{Graph, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder: EncoderSpec,
    pub levels: LevelSet,
    pub adaptor_width: usize,
    /// Semantic channels `k`.
    pub semantic_channels: usize,
    pub change_width: usize,
    pub residual_blocks: usize,
    pub temperature: f64,
    pub threshold: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderSpec::default(),
            levels: LevelSet::ALL,
            adaptor_width: 64,
            semantic_channels: 8,
            change_width: 128,
            residual_blocks: RESIDUAL_BLOCKS,
            temperature: 3.0,
            threshold: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.semantic_channels < 2 {
            return Err(Error::Config(format!(
                "semantic channels k must be at least 2, got {}",
                self.semantic_channels
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::Config(format!(
                "temperature must satisfy T > 0, got {}",
                self.temperature
            )));
        }
        if self.adaptor_width == 0 || self.change_width == 0 {
            return Err(Error::Config("adaptor and change widths must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::Config(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }
}

/// Every intermediate of one forward pass that tests or losses need.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub fused: AdaptedFeatures,
    pub latent_raw: Var,
    pub latent_t1: Var,
    pub latent_t2: Var,
    pub change_features: Var,
    pub head: HeadOutput,
    pub batch: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct Losses {
    pub total: Var,
    pub supervision: Var,
    pub temporal: Var,
}

/// Anything that maps an image pair to a change-probability map at the
/// input resolution.
pub trait ChangeModel<S: Scalar> {
    fn predict_probability(&self, t1: ArrayView3<f32>, t2: ArrayView3<f32>) -> Result<Array2<S>>;

    fn threshold(&self) -> S {
        S::lit(0.5)
    }
}

/// Frozen encoder, trainable adaptors, top-down fusion, semantic branch and
/// attention-gated change head.
#[derive(Debug, Clone)]
pub struct SamCd<S: Scalar> {
    config: ModelConfig,
    encoder: Option<StubEncoder<S>>,
    store: ParamStore<S>,
    adaptors: Vec<Adaptor>,
    fusion: Vec<FusionBlock>,
    semantic: SemanticEmbedding,
    change: ChangeEmbedding,
    head: AttentionHead,
}

pub fn images_to_batch<S: Scalar>(images: &[ArrayView3<f32>]) -> Array4<S> {
    let views: Vec<_> = images.to_vec();
    ndarray::stack(Axis(0), &views)
        .expect("equal image shapes")
        .mapv(|v| S::lit(v as f64))
}

impl<S: Scalar> SamCd<S> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let encoder = match config.encoder.kind {
            EncoderKind::Stub => Some(StubEncoder::new(&config.encoder)?),
            EncoderKind::External => None,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let width = config.adaptor_width;
        let adaptors = config
            .levels
            .levels()
            .into_iter()
            .map(|l| Adaptor::new(&mut store, l, config.encoder.channels[l - 1], width, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let fusion = build_fusion(&mut store, config.levels, width, &mut rng)?;
        let fused_channels = width * config.levels.len();
        let semantic = SemanticEmbedding::new(&mut store, fused_channels, config.semantic_channels, &mut rng)?;
        let change = ChangeEmbedding::new(
            &mut store,
            fused_channels,
            config.change_width,
            config.residual_blocks,
            &mut rng,
        )?;
        let head = AttentionHead::new(&mut store, config.semantic_channels, config.change_width, &mut rng)?;
        Ok(Self { config, encoder, store, adaptors, fusion, semantic, change, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Change the softmax temperature; it has no parameters of its own.
    pub fn set_temperature(&mut self, temperature: f64) -> Result<()> {
        let config = ModelConfig { temperature, ..self.config.clone() };
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.store
    }

    pub fn encoder(&self) -> Option<&StubEncoder<S>> {
        self.encoder.as_ref()
    }

    pub fn adaptors(&self) -> &[Adaptor] {
        &self.adaptors
    }

    pub fn change_embedding_module(&self) -> &ChangeEmbedding {
        &self.change
    }

    pub fn head(&self) -> &AttentionHead {
        &self.head
    }

    pub fn semantic_embedding(&self) -> &SemanticEmbedding {
        &self.semantic
    }

    /// Checksum of the frozen encoder weights; `None` for external features.
    pub fn encoder_checksum(&self) -> Option<String> {
        self.encoder.as_ref().map(|e| e.checksum())
    }

    /// Encode `[n, 3, h, w]` images with the stub encoder.
    pub fn encode(&self, images: &Array4<S>) -> Result<FeaturePyramid<S>> {
        match &self.encoder {
            Some(e) => e.encode(images.view()),
            None => Err(Error::Config(
                "model uses external features; supply pyramids instead of images".into(),
            )),
        }
    }

    /// Forward pass over a pyramid holding the first-date batch followed by
    /// the second-date batch (`2 * batch` items). `out_size` is the label
    /// resolution.
    pub fn forward(&self, g: &mut Graph<S>, pyramid: &FeaturePyramid<S>) -> Result<ModelOutput> {
        self.forward_with(g, &self.store, pyramid)
    }

    /// [`forward`](Self::forward) reading parameters from `store`, which must
    /// have this model's layout.
    pub fn forward_with(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        pyramid: &FeaturePyramid<S>,
    ) -> Result<ModelOutput> {
        let total = pyramid.batch();
        if total % 2 != 0 || total == 0 {
            return Err(Error::Dimension(format!(
                "pyramid batch {total} is not a stacked pair of date batches"
            )));
        }
        let batch = total / 2;
        let channels = pyramid.channels();
        if channels != self.config.encoder.channels {
            return Err(Error::Dimension(format!(
                "pyramid channels {channels:?} differ from encoder spec {:?}",
                self.config.encoder.channels
            )));
        }
        let mut adapted = Vec::with_capacity(self.adaptors.len());
        for adaptor in &self.adaptors {
            let f = g.constant(pyramid.levels[adaptor.level - 1].clone());
            adapted.push((adaptor.level, adapt_level(g, store, adaptor, f)?));
        }
        let fused = fuse_topdown(g, store, &self.fusion, &adapted, self.config.levels)?;

        let latent_raw = extract_latent(g, store, &self.semantic, &fused)?;
        let latent = g.softmax_channels(latent_raw, S::lit(self.config.temperature));
        let latent_t1 = g.slice_batch(latent, 0, batch)?;
        let latent_t2 = g.slice_batch(latent, batch, batch)?;

        let f1 = g.slice_batch(fused.concat, 0, batch)?;
        let f2 = g.slice_batch(fused.concat, batch, batch)?;
        let change_features = change_embedding(g, store, &self.change, f1, f2)?;
        let head = attention_change_head(
            g,
            store,
            &self.head,
            latent_t1,
            latent_t2,
            change_features,
            pyramid.input_size,
        )?;
        Ok(ModelOutput { fused, latent_raw, latent_t1, latent_t2, change_features, head, batch })
    }

    /// `L = L_ce + lambda * L_t` over a batch.
    pub fn losses(
        &self,
        g: &mut Graph<S>,
        out: &ModelOutput,
        labels: &[&ChangeLabel],
        lambda_t: f64,
    ) -> Result<Losses> {
        if labels.len() != out.batch {
            return Err(Error::Dimension(format!(
                "{} labels for a batch of {}",
                labels.len(),
                out.batch
            )));
        }
        let supervision = g.bce(out.head.probability, changed_targets(labels))?;
        let temporal = temporal_constraint_loss_var(g, out.latent_t1, out.latent_t2, labels)?;
        let weighted = g.scale(temporal, S::lit(lambda_t));
        let total = g.add(supervision, weighted)?;
        Ok(Losses { total, supervision, temporal })
    }

    /// Stack both dates' images and encode them in one pass.
    pub fn encode_pairs(&self, t1: &[ArrayView3<f32>], t2: &[ArrayView3<f32>]) -> Result<FeaturePyramid<S>> {
        let mut all = t1.to_vec();
        all.extend_from_slice(t2);
        self.encode(&images_to_batch(&all))
    }

    /// Inference-mode probability maps for a stacked pyramid.
    pub fn predict_pyramid(&self, pyramid: &FeaturePyramid<S>) -> Result<Vec<Array2<S>>> {
        let mut g = Graph::new(false);
        let out = self.forward(&mut g, pyramid)?;
        let p = g.value4(out.head.probability);
        Ok(p.axis_iter(Axis(0)).map(|a| a.index_axis(Axis(0), 0).to_owned()).collect())
    }

    pub fn predict(&self, t1: ArrayView3<f32>, t2: ArrayView3<f32>) -> Result<ChangePrediction<S>> {
        let p = self.predict_probability(t1, t2)?;
        Ok(ChangePrediction::from_probability(p, S::lit(self.config.threshold)))
    }

    /// Inference from externally supplied single-image pyramids.
    pub fn predict_external(
        &self,
        p1: &FeaturePyramid<S>,
        p2: &FeaturePyramid<S>,
    ) -> Result<ChangePrediction<S>> {
        let stacked = FeaturePyramid::stack(&[p1, p2])?;
        let mut maps = self.predict_pyramid(&stacked)?;
        Ok(ChangePrediction::from_probability(maps.remove(0), S::lit(self.config.threshold)))
    }
}

impl<S: Scalar> ChangeModel<S> for SamCd<S> {
    fn predict_probability(&self, t1: ArrayView3<f32>, t2: ArrayView3<f32>) -> Result<Array2<S>> {
        if t1.dim() != t2.dim() {
            return Err(Error::Dimension(format!("image pair {:?} vs {:?}", t1.dim(), t2.dim())));
        }
        let pyramid = self.encode_pairs(&[t1], &[t2])?;
        let mut maps = self.predict_pyramid(&pyramid)?;
        Ok(maps.remove(0))
    }

    fn threshold(&self) -> S {
        S::lit(self.config.threshold)
    }
}

/// Convert a `[3, h, w]` image to the model scalar type.
pub fn image_as<S: Scalar>(image: &Array3<f32>) -> Array3<S> {
    image.mapv(|v| S::lit(v as f64))
}
