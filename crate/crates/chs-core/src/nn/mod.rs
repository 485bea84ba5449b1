//! Minimal neural-network layer library with explicit backward passes.
//!
//! Every layer owns its parameters and their gradient accumulators, caches
//! whatever its backward pass needs during a training-mode forward, and
//! exposes the pair through [`Params::visit_params`] under a stable dotted
//! name. All batch reductions run in a fixed order, so forward, backward and
//! optimizer steps are bit-for-bit deterministic regardless of thread count.

mod attention;
mod conv;
mod linear;
mod norm;
mod pool;
mod transformer;

pub use attention::MultiHeadSelfAttention;
pub use conv::Conv2d;
pub use linear::Linear;
pub use norm::{BatchNorm2d, LayerNorm};
pub use pool::{MaxPool2d, UpsampleNearest2d};
pub use transformer::{FeedForward, PositionalEncoding, PositionalEncodingKind, TransformerLayer};

use crate::elem::Elem;
use ndarray::{ArrayViewD, ArrayViewMutD};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// A mutable view of one named parameter tensor and its gradient.
pub struct ParamMut<'a, F: Elem> {
    pub name: String,
    pub value: ArrayViewMutD<'a, F>,
    pub grad: ArrayViewMutD<'a, F>,
}

/// Read-only counterpart used for checkpointing.
pub struct ParamRef<'a, F: Elem> {
    pub name: String,
    pub value: ArrayViewD<'a, F>,
}

/// Anything holding trainable parameters.
pub trait Params<F: Elem> {
    /// Pushes all parameters in a fixed, construction-stable order.
    fn visit_params<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>);
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// He-normal sample: std = sqrt(2 / fan_in). Draws in f64 then narrows, so
/// the f32 and f64 instantiations of a model see identical initial weights.
pub fn he_normal<F: Elem>(rng: &mut ChaCha8Rng, fan_in: usize) -> F {
    let z: f64 = StandardNormal.sample(rng);
    F::of(z * (2.0 / fan_in as f64).sqrt())
}

/// Xavier-normal sample: std = sqrt(2 / (fan_in + fan_out)).
pub fn xavier_normal<F: Elem>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> F {
    let z: f64 = StandardNormal.sample(rng);
    F::of(z * (2.0 / (fan_in + fan_out) as f64).sqrt())
}

/// ReLU on `[B, C, H, W]` tensors, caching its output for the backward pass.
pub struct Relu4<F: Elem> {
    y: ndarray::Array4<F>,
}

impl<F: Elem> Relu4<F> {
    pub fn new() -> Self {
        Self { y: ndarray::Array4::zeros((0, 0, 0, 0)) }
    }

    pub fn forward(&mut self, x: &ndarray::Array4<F>, train: bool) -> ndarray::Array4<F> {
        let y = x.mapv(|v| v.max(F::zero()));
        if train {
            self.y = y.clone();
        }
        y
    }

    pub fn backward(&mut self, dy: &ndarray::Array4<F>) -> ndarray::Array4<F> {
        assert_eq!(self.y.dim(), dy.dim(), "backward requires a training-mode forward");
        let mut dx = dy.clone();
        dx.zip_mut_with(&self.y, |d, &y| {
            if y <= F::zero() {
                *d = F::zero();
            }
        });
        dx
    }
}

impl<F: Elem> Default for Relu4<F> {
    fn default() -> Self {
        Self::new()
    }
}
