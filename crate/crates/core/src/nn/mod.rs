//! Minimal layer library with hand-written backward passes.
//!
//! Layers expose `forward(&self, ..) -> (output, cache)` and
//! `backward(&mut self, &cache, grad_out) -> grad_in`; parameter gradients
//! accumulate into [`Param::grad`] until [`Module::zero_grad`] is called.

mod act;
mod cbam;
mod conv;
mod linear;
mod norm;
mod resample;

pub use act::{relu, relu_backward, sigmoid};
pub use cbam::{Cbam, CbamCache};
pub use conv::{Conv2d, ConvCache};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm2d, NormCache, NormMode};
pub use resample::{avg_pool, avg_pool_backward, upsample2x, upsample2x_backward};

use rand::Rng;

use crate::tensor::Scalar;

/// What a named tensor is, as far as training and checkpointing care.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Ordinary trainable weight or bias.
    Weight,
    /// Normalization scale/shift; trainable only when normalization is not frozen.
    NormAffine,
    /// Normalization running statistic; never touched by the optimizer.
    NormStat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Scalar> Param<T> {
    pub fn filled(shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Param {
            shape,
            value: vec![value; len],
            grad: vec![T::zero(); len],
        }
    }

    /// Uniform in `±sqrt(6 / fan_in)`, suited to rectified-linear layers.
    pub fn fan_in_uniform(shape: Vec<usize>, fan_in: usize, rng: &mut impl Rng) -> Self {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let len: usize = shape.iter().product();
        let value = (0..len)
            .map(|_| T::lit(rng.random_range(-bound..bound)))
            .collect();
        Param {
            shape,
            value,
            grad: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Param<U> {
        Param {
            shape: self.shape.clone(),
            value: self.value.iter().map(|&v| U::lit(v.as_f64())).collect(),
            grad: vec![U::zero(); self.value.len()],
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Named traversal over every tensor a layer owns, in a fixed order.
pub trait Module<T: Scalar> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>));

    fn zero_grad(&mut self) {
        self.visit_mut("", &mut |_, _, p| p.grad.iter_mut().for_each(|g| *g = T::zero()));
    }

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, kind, p| {
            if kind != ParamKind::NormStat {
                n += p.len();
            }
        });
        n
    }
}
