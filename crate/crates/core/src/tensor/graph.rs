//! Reverse-mode automatic differentiation over dense NCHW arrays.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and enough cached state to run its backward kernel. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse.

use std::collections::HashMap;

use ndarray::{s, Array1, Array3, Array4, ArrayD, ArrayView1, ArrayView4, Axis, Ix1, Ix4, IxDyn};

use super::kernels::{self, ConvGeometry};
use crate::error::{dim_err, Result};
use crate::nn::{ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<S> {
    Constant,
    Param,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geo: ConvGeometry,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array4<S>,
        inv_std: Array1<S>,
    },
    Affine {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array4<S>,
        inv_std: Array1<S>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Concat(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    Resize(Var),
    Softmax {
        x: Var,
        temperature: S,
    },
    CosineLoss {
        a: Var,
        b: Var,
        mask: Array3<u8>,
    },
    Bce {
        p: Var,
        target: Array4<S>,
    },
}

struct Node<S> {
    value: ArrayD<S>,
    op: Op<S>,
}

/// Batch-normalization statistics observed during a training forward pass.
#[derive(Debug, Clone)]
pub struct NormObservation<S> {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Array1<S>,
    /// Unbiased variance, as used for running estimates.
    pub var: Array1<S>,
}

pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    params: HashMap<ParamId, Var>,
    training: bool,
    observations: Vec<NormObservation<S>>,
}

pub struct Gradients<S> {
    grads: Vec<Option<ArrayD<S>>>,
    params: Vec<(ParamId, Var)>,
}

impl<S: Scalar> Gradients<S> {
    pub fn wrt(&self, v: Var) -> Option<&ArrayD<S>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter, or `None` when it did not take part in the
    /// computation.
    pub fn param(&self, id: ParamId) -> Option<&ArrayD<S>> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.wrt(*v))
    }

    pub fn iter_params(&self) -> impl Iterator<Item = (ParamId, &ArrayD<S>)> {
        self.params
            .iter()
            .filter_map(|(p, v)| self.grads[v.0].as_ref().map(|g| (*p, g)))
    }
}

fn view4<S>(a: &ArrayD<S>) -> ArrayView4<'_, S> {
    a.view().into_dimensionality::<Ix4>().expect("rank-4 value")
}

fn view1<S>(a: &ArrayD<S>) -> ArrayView1<'_, S> {
    a.view().into_dimensionality::<Ix1>().expect("rank-1 value")
}

fn accumulate<S: Scalar>(slot: &mut Option<ArrayD<S>>, g: ArrayD<S>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new(training: bool) -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            training,
            observations: Vec::new(),
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: ArrayD<S>, op: Op<S>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &ArrayD<S> {
        &self.nodes[v.0].value
    }

    pub fn value4(&self, v: Var) -> ArrayView4<'_, S> {
        view4(&self.nodes[v.0].value)
    }

    pub fn scalar(&self, v: Var) -> S {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        val.iter().copied().next().unwrap_or_else(S::zero)
    }

    pub fn shape4(&self, v: Var) -> (usize, usize, usize, usize) {
        self.value4(v).dim()
    }

    pub fn take_observations(&mut self) -> Vec<NormObservation<S>> {
        std::mem::take(&mut self.observations)
    }

    pub fn constant(&mut self, value: Array4<S>) -> Var {
        self.push(value.into_dyn(), Op::Constant)
    }

    /// Leaf for a stored parameter; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param);
        self.params.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geo: ConvGeometry) -> Result<Var> {
        let bias = b.map(|b| view1(&self.nodes[b.0].value));
        let y = kernels::conv2d(self.value4(x), view4(&self.nodes[w.0].value), bias, geo)?;
        Ok(self.push(y.into_dyn(), Op::Conv { x, w, b, geo }))
    }

    /// Batch normalization. In training mode batch statistics are used and
    /// recorded for the running estimates; otherwise the running estimates
    /// are applied as a fixed affine map.
    pub fn batch_norm(
        &mut self,
        store: &ParamStore<S>,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let channels = self.shape4(x).1;
        if store.value(gamma).len() != channels {
            return dim_err(format!(
                "normalization over {} channels applied to {channels}",
                store.value(gamma).len()
            ));
        }
        let g = self.param(store, gamma);
        let b = self.param(store, beta);
        let (n, _, h, w) = self.shape4(x);
        if self.training {
            let (mean, var) = kernels::channel_moments(self.value4(x));
            let inv = kernels::inv_std(var.view());
            let (xhat, y) = kernels::normalize(
                self.value4(x),
                mean.view(),
                inv.view(),
                view1(&self.nodes[g.0].value),
                view1(&self.nodes[b.0].value),
            );
            let m = (n * h * w) as f64;
            let unbiased = if m > 1.0 {
                var.mapv(|v| v * S::lit(m / (m - 1.0)))
            } else {
                var.clone()
            };
            self.observations.push(NormObservation {
                running_mean,
                running_var,
                mean,
                var: unbiased,
            });
            Ok(self.push(
                y.into_dyn(),
                Op::BatchNorm {
                    x,
                    gamma: g,
                    beta: b,
                    xhat,
                    inv_std: inv,
                },
            ))
        } else {
            let mean = store.value(running_mean).view().into_dimensionality::<Ix1>().expect("rank-1");
            let var = store.value(running_var).view().into_dimensionality::<Ix1>().expect("rank-1");
            let inv = kernels::inv_std(var);
            let (xhat, y) = kernels::normalize(
                self.value4(x),
                mean,
                inv.view(),
                view1(&self.nodes[g.0].value),
                view1(&self.nodes[b.0].value),
            );
            Ok(self.push(
                y.into_dyn(),
                Op::Affine {
                    x,
                    gamma: g,
                    beta: b,
                    xhat,
                    inv_std: inv,
                },
            ))
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(S::zero()));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(kernels::sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "add of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let y = self.value(a) + self.value(b);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return dim_err(format!(
                "product of {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            ));
        }
        let y = self.value(a) * self.value(b);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, k: S) -> Var {
        let y = self.value(x).mapv(|v| v * k);
        self.push(y, Op::Scale(x, k))
    }

    /// Concatenate along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concatenation of zero tensors");
        };
        let (n, _, h, w) = self.shape4(first);
        for &p in parts {
            let (pn, _, ph, pw) = self.shape4(p);
            if (pn, ph, pw) != (n, h, w) {
                return dim_err(format!(
                    "channel concatenation of {n}x?x{h}x{w} with {pn}x?x{ph}x{pw}"
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.value4(p)).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("validated shapes");
        Ok(self.push(y.into_dyn(), Op::Concat(parts.to_vec())))
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let n = self.shape4(x).0;
        if start + len > n {
            return dim_err(format!("batch slice {start}..{} of {n}", start + len));
        }
        let y = self.value4(x).slice(s![start..start + len, .., .., ..]).to_owned();
        Ok(self.push(y.into_dyn(), Op::SliceBatch { x, start }))
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let y = kernels::resize_bilinear(self.value4(x), out_h, out_w);
        self.push(y.into_dyn(), Op::Resize(x))
    }

    pub fn softmax_channels(&mut self, x: Var, temperature: S) -> Var {
        let y = kernels::softmax_channels(self.value4(x), temperature);
        self.push(y.into_dyn(), Op::Softmax { x, temperature })
    }

    /// Mean `1 - cos` over pixels where `mask` (shape `[n, h, w]`) is one.
    pub fn masked_cosine_loss(&mut self, a: Var, b: Var, mask: Array3<u8>) -> Result<Var> {
        let (n, c, h, w) = self.shape4(a);
        if self.shape4(b) != (n, c, h, w) {
            return dim_err("latent pair shapes differ");
        }
        if mask.dim() != (n, h, w) {
            return dim_err(format!(
                "mask {:?} does not match latent resolution {n}x{h}x{w}",
                mask.dim()
            ));
        }
        let loss = kernels::masked_cosine_loss(self.value4(a), self.value4(b), mask.view());
        Ok(self.push(
            ArrayD::from_elem(IxDyn(&[]), loss),
            Op::CosineLoss { a, b, mask },
        ))
    }

    pub fn bce(&mut self, p: Var, target: Array4<S>) -> Result<Var> {
        if self.shape4(p) != target.dim() {
            return dim_err(format!(
                "prediction {:?} vs target {:?}",
                self.shape4(p),
                target.dim()
            ));
        }
        let loss = kernels::bce_mean(self.value4(p), target.view());
        Ok(self.push(ArrayD::from_elem(IxDyn(&[]), loss), Op::Bce { p, target }))
    }

    /// Back-propagate from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.nodes[root.0].value.len() != 1 {
            return dim_err("backward requires a scalar root");
        }
        let mut grads: Vec<Option<ArrayD<S>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(self.nodes[root.0].value.mapv(|_| S::one()));

        for idx in (0..=root.0).rev() {
            let Some(g_owned) = grads[idx].take() else { continue };
            let g = &g_owned;
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant | Op::Param => {}
                Op::Conv { x, w, b, geo } => {
                    let cg = kernels::conv2d_backward(
                        self.value4(*x),
                        view4(&self.nodes[w.0].value),
                        view4(g),
                        *geo,
                    )?;
                    accumulate(&mut grads[x.0], cg.dx.into_dyn());
                    accumulate(&mut grads[w.0], cg.dweight.into_dyn());
                    if let Some(b) = b {
                        accumulate(&mut grads[b.0], cg.dbias.into_dyn());
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std } => {
                    let ng = kernels::batch_norm_backward(
                        xhat.view(),
                        inv_std.view(),
                        view1(&self.nodes[gamma.0].value),
                        view4(g),
                    );
                    accumulate(&mut grads[x.0], ng.dx.into_dyn());
                    accumulate(&mut grads[gamma.0], ng.dgamma.into_dyn());
                    accumulate(&mut grads[beta.0], ng.dbeta.into_dyn());
                }
                Op::Affine { x, gamma, beta, xhat, inv_std } => {
                    let gv = view4(g);
                    let gam = view1(&self.nodes[gamma.0].value);
                    let mut dx = gv.to_owned();
                    for (ch, mut plane) in dx.axis_iter_mut(Axis(1)).enumerate() {
                        let k = gam[ch] * inv_std[ch];
                        plane.mapv_inplace(|v| v * k);
                    }
                    let dgamma = (&gv * xhat).sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    let dbeta = gv.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                    accumulate(&mut grads[x.0], dx.into_dyn());
                    accumulate(&mut grads[gamma.0], dgamma.into_dyn());
                    accumulate(&mut grads[beta.0], dbeta.into_dyn());
                }
                Op::Relu(x) => {
                    let mut d = g.clone();
                    d.zip_mut_with(&node.value, |d, &y| {
                        if y <= S::zero() {
                            *d = S::zero();
                        }
                    });
                    accumulate(&mut grads[x.0], d);
                }
                Op::Sigmoid(x) => {
                    let mut d = g.clone();
                    d.zip_mut_with(&node.value, |d, &y| *d = *d * y * (S::one() - y));
                    accumulate(&mut grads[x.0], d);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g.clone());
                }
                Op::Mul(a, b) => {
                    let da = g * &self.nodes[b.0].value;
                    let db = g * &self.nodes[a.0].value;
                    accumulate(&mut grads[a.0], da);
                    accumulate(&mut grads[b.0], db);
                }
                Op::Scale(x, k) => {
                    let k = *k;
                    accumulate(&mut grads[x.0], g.mapv(|v| v * k));
                }
                Op::Concat(parts) => {
                    let gv = view4(g);
                    let mut offset = 0;
                    for p in parts {
                        let c = self.shape4(*p).1;
                        let piece = gv.slice(s![.., offset..offset + c, .., ..]).to_owned();
                        accumulate(&mut grads[p.0], piece.into_dyn());
                        offset += c;
                    }
                }
                Op::SliceBatch { x, start } => {
                    let mut d = Array4::zeros(self.shape4(*x));
                    let len = view4(g).dim().0;
                    d.slice_mut(s![*start..*start + len, .., .., ..]).assign(&view4(g));
                    accumulate(&mut grads[x.0], d.into_dyn());
                }
                Op::Resize(x) => {
                    let (_, _, h, w) = self.shape4(*x);
                    let d = kernels::resize_bilinear_backward(view4(g), h, w);
                    accumulate(&mut grads[x.0], d.into_dyn());
                }
                Op::Softmax { x, temperature } => {
                    let d = kernels::softmax_channels_backward(view4(&node.value), view4(g), *temperature);
                    accumulate(&mut grads[x.0], d.into_dyn());
                }
                Op::CosineLoss { a, b, mask } => {
                    let up = g.iter().copied().next().unwrap_or_else(S::zero);
                    let (da, db) = kernels::masked_cosine_loss_backward(
                        self.value4(*a),
                        self.value4(*b),
                        mask.view(),
                        up,
                    );
                    accumulate(&mut grads[a.0], da.into_dyn());
                    accumulate(&mut grads[b.0], db.into_dyn());
                }
                Op::Bce { p, target } => {
                    let up = g.iter().copied().next().unwrap_or_else(S::zero);
                    let d = kernels::bce_mean_backward(self.value4(*p), target.view(), up);
                    accumulate(&mut grads[p.0], d.into_dyn());
                }
            }
            grads[idx] = Some(g_owned);
        }

        let params = self.params.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }
}
