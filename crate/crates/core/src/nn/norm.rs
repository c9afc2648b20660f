use super::{join, Module, Param, ParamKind};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Use running statistics; nothing inside the layer changes.
    Frozen,
    /// Normalize with batch statistics and update the running averages.
    Batch,
}

/// Per-channel batch normalization over `(N, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    pub eps: f64,
    pub momentum: f64,
}

pub struct NormCache<T> {
    mode: NormMode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    /// Batch mean and unbiased variance, pending commit to the running averages.
    batch_stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(channels: usize) -> Self {
        BatchNorm2d {
            weight: Param::filled(vec![channels], T::one()),
            bias: Param::filled(vec![channels], T::zero()),
            running_mean: Param::filled(vec![channels], T::zero()),
            running_var: Param::filled(vec![channels], T::one()),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    fn channels(&self) -> usize {
        self.weight.len()
    }

    fn normalize(
        &self,
        x: &Tensor<T>,
        mean: &[T],
        inv_std: Vec<T>,
        mode: NormMode,
        batch_stats: Option<(Vec<T>, Vec<T>)>,
    ) -> (Tensor<T>, NormCache<T>) {
        let [n, c, _, _] = x.shape();
        let mut xhat = x.clone();
        let mut y = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.weight.value[ch], self.bias.value[ch]);
                for v in xhat.plane_mut(i, ch) {
                    *v = (*v - m) * s;
                }
                for (o, &xh) in y.plane_mut(i, ch).iter_mut().zip(xhat.plane(i, ch)) {
                    *o = xh * g + b;
                }
            }
        }
        (
            y,
            NormCache {
                mode,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Normalizes `x`. In [`NormMode::Batch`] the batch statistics are kept in
    /// the cache and folded into the running averages by [`Self::backward`].
    pub fn forward(&self, x: &Tensor<T>, mode: NormMode) -> (Tensor<T>, NormCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels(), "norm channels");
        let eps = T::lit(self.eps);
        match mode {
            NormMode::Frozen => {
                let inv_std = self
                    .running_var
                    .value
                    .iter()
                    .map(|&v| T::one() / (v + eps).sqrt())
                    .collect();
                self.normalize(x, &self.running_mean.value, inv_std, mode, None)
            }
            NormMode::Batch => {
                let count = (n * h * w) as f64;
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for i in 0..n {
                        s += x.plane(i, ch).iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count;
                    let mut sq = 0.0;
                    for i in 0..n {
                        sq += x.plane(i, ch).iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = T::lit(m);
                    var[ch] = T::lit(sq / count);
                }
                let inv_std = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let (y, cache) = self.normalize(x, &mean, inv_std, mode, None);
                let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
                let var_unbiased = var.iter().map(|&v| v * T::lit(unbias)).collect();
                (
                    y,
                    NormCache {
                        batch_stats: Some((mean, var_unbiased)),
                        ..cache
                    },
                )
            }
        }
    }

    pub fn backward(&mut self, cache: &NormCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        if let Some((mean, var)) = &cache.batch_stats {
            let mom = T::lit(self.momentum);
            for (rm, &m) in self.running_mean.value.iter_mut().zip(mean) {
                *rm = (T::one() - mom) * *rm + mom * m;
            }
            for (rv, &v) in self.running_var.value.iter_mut().zip(var) {
                *rv = (T::one() - mom) * *rv + mom * v;
            }
        }
        let [n, c, h, w] = grad.shape();
        let count = T::lit((n * h * w) as f64);
        let mut dx = Tensor::zeros(grad.shape());
        for ch in 0..c {
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..n {
                for (&g, &xh) in grad.plane(i, ch).iter().zip(cache.xhat.plane(i, ch)) {
                    sum_dy += g;
                    sum_dy_xhat += g * xh;
                }
            }
            self.weight.grad[ch] += sum_dy_xhat;
            self.bias.grad[ch] += sum_dy;
            let gamma = self.weight.value[ch];
            let s = cache.inv_std[ch];
            for i in 0..n {
                let dst = dx.plane_mut(i, ch);
                let gp = grad.plane(i, ch);
                let xp = cache.xhat.plane(i, ch);
                match cache.mode {
                    NormMode::Frozen => {
                        for (d, &g) in dst.iter_mut().zip(gp) {
                            *d = g * gamma * s;
                        }
                    }
                    NormMode::Batch => {
                        let scale = gamma * s / count;
                        for ((d, &g), &xh) in dst.iter_mut().zip(gp).zip(xp) {
                            *d = scale * (count * g - sum_dy - xh * sum_dy_xhat);
                        }
                    }
                }
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for BatchNorm2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        f(&join(prefix, "weight"), ParamKind::NormAffine, &self.weight);
        f(&join(prefix, "bias"), ParamKind::NormAffine, &self.bias);
        f(&join(prefix, "running_mean"), ParamKind::NormStat, &self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::NormStat, &self.running_var);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        f(&join(prefix, "weight"), ParamKind::NormAffine, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::NormAffine, &mut self.bias);
        f(&join(prefix, "running_mean"), ParamKind::NormStat, &mut self.running_mean);
        f(&join(prefix, "running_var"), ParamKind::NormStat, &mut self.running_var);
    }
}
