use rand::Rng;

use super::{join, Module, Param, ParamKind};
use crate::tensor::{matmul, Scalar};

/// Fully connected layer on row-major `N×in` matrices.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct LinearCache<T> {
    rows: usize,
    input: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(in_features: usize, out_features: usize, rng: &mut impl Rng) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::fan_in_uniform(vec![out_features, in_features], in_features, rng),
            bias: Param::filled(vec![out_features], T::zero()),
        }
    }

    pub fn forward(&self, x: &[T], rows: usize) -> (Vec<T>, LinearCache<T>) {
        assert_eq!(x.len(), rows * self.in_features);
        let mut y: Vec<T> = (0..rows).flat_map(|_| self.bias.value.iter().copied()).collect();
        matmul(rows, self.in_features, self.out_features, x, false, &self.weight.value, true, &mut y, true);
        (
            y,
            LinearCache {
                rows,
                input: x.to_vec(),
            },
        )
    }

    pub fn backward(&mut self, cache: &LinearCache<T>, grad: &[T]) -> Vec<T> {
        let rows = cache.rows;
        matmul(self.out_features, rows, self.in_features, grad, true, &cache.input, false, &mut self.weight.grad, true);
        for r in 0..rows {
            for (b, &g) in self.bias.grad.iter_mut().zip(&grad[r * self.out_features..(r + 1) * self.out_features]) {
                *b += g;
            }
        }
        let mut dx = vec![T::zero(); rows * self.in_features];
        matmul(rows, self.out_features, self.in_features, grad, false, &self.weight.value, false, &mut dx, false);
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Weight, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Weight, &mut self.bias);
    }
}
