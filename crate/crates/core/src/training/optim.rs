use ndarray::ArrayD;

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Gradients;

/// Momentum SGD with coupled weight decay:
/// `v = momentum * v + (g + wd * w)`, `w -= lr * v`.
#[derive(Debug, Clone)]
pub struct Sgd<S> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<ArrayD<S>>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Velocity buffers indexed by parameter position; `None` until the
    /// parameter first receives a gradient.
    pub fn velocity(&self) -> &[Option<ArrayD<S>>] {
        &self.velocity
    }

    pub fn set_velocity(&mut self, velocity: Vec<Option<ArrayD<S>>>) {
        self.velocity = velocity;
    }

    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &Gradients<S>, lr: f64) -> Result<()> {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let (mu, wd, lr) = (S::lit(self.momentum), S::lit(self.weight_decay), S::lit(lr));
        for (id, grad) in grads.iter_params() {
            if store.get(id).kind != ParamKind::Trainable {
                continue;
            }
            let w = store.value_mut(id);
            if grad.shape() != w.shape() {
                return Err(Error::Dimension(format!(
                    "gradient shape {:?} differs from parameter shape {:?}",
                    grad.shape(),
                    w.shape()
                )));
            }
            let mut d = grad.clone();
            if self.weight_decay != 0.0 {
                d.zip_mut_with(w, |g, &wv| *g = *g + wd * wv);
            }
            let v = match self.velocity[id.index()].take() {
                Some(mut v) => {
                    v.zip_mut_with(&d, |vv, &dv| *vv = mu * *vv + dv);
                    v
                }
                None => d,
            };
            w.zip_mut_with(&v, |wv, &vv| *wv = *wv - lr * vv);
            self.velocity[id.index()] = Some(v);
        }
        Ok(())
    }
}
