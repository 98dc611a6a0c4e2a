//! Parameter storage and the small set of layers the model is built from.

use ndarray::{Array1, Array4, ArrayD, Ix1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{dim_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ConvGeometry, Graph, NormObservation, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Updated by the optimizer.
    Trainable,
    /// State that is saved and restored but never receives gradients
    /// (normalization running statistics).
    Buffer,
}

#[derive(Debug, Clone)]
pub struct Parameter<S> {
    pub name: String,
    pub value: ArrayD<S>,
    pub kind: ParamKind,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S> {
    params: Vec<Parameter<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: ArrayD<S>, kind: ParamKind) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        self.params.push(Parameter { name, value, kind });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn value(&self, id: ParamId) -> &ArrayD<S> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut ArrayD<S> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
    }

    pub fn trainable_scalars(&self) -> usize {
        self.trainable().map(|id| self.value(id).len()).sum()
    }

    /// Fold observed batch statistics into the running estimates.
    pub fn apply_observations(&mut self, observations: &[NormObservation<S>]) {
        let m = S::lit(BN_MOMENTUM);
        for obs in observations {
            for (id, batch) in [(obs.running_mean, &obs.mean), (obs.running_var, &obs.var)] {
                let running = self.value_mut(id);
                running.zip_mut_with(batch, |r, &b| *r = (S::one() - m) * *r + m * b);
            }
        }
    }

    /// SHA-256 over names and little-endian `f64` images of all values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for v in p.value.iter() {
                hasher.update(v.as_f64().to_le_bytes());
            }
        }
        hex_digest(hasher.finalize().as_slice())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn he_normal<S: Scalar, R: Rng + ?Sized>(
    shape: (usize, usize, usize, usize),
    rng: &mut R,
) -> Array4<S> {
    let fan_in = (shape.1 * shape.2 * shape.3) as f64;
    let std = (2.0 / fan_in).sqrt();
    Array4::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        S::lit(z * std)
    })
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geo: ConvGeometry,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geo: ConvGeometry,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let w = he_normal::<S, _>((out_channels, in_channels, geo.kernel, geo.kernel), rng);
        let weight = store.add(format!("{name}.weight"), w.into_dyn(), ParamKind::Trainable)?;
        let bias = if bias {
            Some(store.add(
                format!("{name}.bias"),
                Array1::<S>::zeros(out_channels).into_dyn(),
                ParamKind::Trainable,
            )?)
        } else {
            None
        };
        Ok(Self { weight, bias, geo, in_channels, out_channels })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let c = g.shape4(x).1;
        if c != self.in_channels {
            return dim_err(format!(
                "layer expects {} channels, got {c}",
                self.in_channels
            ));
        }
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.geo)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm2d {
    pub fn new<S: Scalar>(store: &mut ParamStore<S>, name: &str, channels: usize) -> Result<Self> {
        let ones = || Array1::<S>::ones(channels).into_dyn();
        let zeros = || Array1::<S>::zeros(channels).into_dyn();
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), ones(), ParamKind::Trainable)?,
            beta: store.add(format!("{name}.beta"), zeros(), ParamKind::Trainable)?,
            running_mean: store.add(format!("{name}.running_mean"), zeros(), ParamKind::Buffer)?,
            running_var: store.add(format!("{name}.running_var"), ones(), ParamKind::Buffer)?,
            channels,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        g.batch_norm(store, x, self.gamma, self.beta, self.running_mean, self.running_var)
    }

    pub fn set_gamma<S: Scalar>(&self, store: &mut ParamStore<S>, value: S) {
        store.value_mut(self.gamma).fill(value);
    }

    pub fn gamma<'a, S: Scalar>(&self, store: &'a ParamStore<S>) -> ndarray::ArrayView1<'a, S> {
        store.value(self.gamma).view().into_dimensionality::<Ix1>().expect("rank-1")
    }
}

/// Convolution (no bias) followed by batch normalization and ReLU.
#[derive(Debug, Clone)]
pub struct ConvBnRelu {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
}

impl ConvBnRelu {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        geo: ConvGeometry,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, geo, false, rng)?,
            bn: BatchNorm2d::new(store, &format!("{name}.bn"), out_channels)?,
        })
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, store: &ParamStore<S>, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, x)?;
        let y = self.bn.forward(g, store, y)?;
        Ok(g.relu(y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_are_rejected() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", ArrayD::zeros(vec![2]), ParamKind::Trainable).unwrap();
        assert!(store.add("a", ArrayD::zeros(vec![2]), ParamKind::Buffer).is_err());
    }

    #[test]
    fn running_statistics_follow_momentum() {
        let mut store = ParamStore::<f64>::new();
        let bn = BatchNorm2d::new(&mut store, "bn", 1).unwrap();
        let mut g = Graph::new(true);
        let x = g.constant(Array4::from_shape_vec((1, 1, 1, 2), vec![1.0, 3.0]).unwrap());
        bn.forward(&mut g, &store, x).unwrap();
        store.apply_observations(&g.take_observations());
        assert!((store.value(bn.running_mean)[[0]] - 0.2).abs() < 1e-12);
        // unbiased variance of {1, 3} is 2
        assert!((store.value(bn.running_var)[[0]] - (0.9 + 0.2)).abs() < 1e-12);
    }

    #[test]
    fn checksum_changes_with_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let conv = Conv2d::new(&mut store, "c", 2, 2, ConvGeometry { kernel: 1, stride: 1, pad: 0 }, true, &mut rng).unwrap();
        let before = store.checksum();
        store.value_mut(conv.weight)[[0, 0, 0, 0]] += 1.0;
        assert_ne!(before, store.checksum());
    }
}
