use rand::Rng;

use super::{join, Module, Param, ParamKind};
use crate::tensor::{matmul, Scalar, Tensor};

/// Square-kernel, stride-1, zero-padded ("same") 2-D convolution.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

pub struct ConvCache<T> {
    in_shape: [usize; 4],
    /// Per-sample unfolded patches, `(in·k·k) × (H·W)`.
    cols: Vec<Vec<T>>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = in_channels * kernel * kernel;
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            weight: Param::fan_in_uniform(
                vec![out_channels, in_channels, kernel, kernel],
                fan_in,
                rng,
            ),
            bias: Param::filled(vec![out_channels], T::zero()),
        }
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &[T], h: usize, w: usize) -> Vec<T> {
        let k = self.kernel;
        if k == 1 {
            return x.to_vec();
        }
        let pad = (k / 2) as isize;
        let hw = h * w;
        let mut col = vec![T::zero(); self.patch_len() * hw];
        for ci in 0..self.in_channels {
            let plane = &x[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut col[row * hw..(row + 1) * hw];
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                        let sx0 = (x0 as isize + dx) as usize;
                        dst[y * w + x0..y * w + x1].copy_from_slice(&src_row[sx0..sx0 + (x1 - x0)]);
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[T], h: usize, w: usize, out: &mut [T]) {
        let k = self.kernel;
        if k == 1 {
            out.copy_from_slice(col);
            return;
        }
        let pad = (k / 2) as isize;
        let hw = h * w;
        out.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..self.in_channels {
            let plane = &mut out[ci * hw..(ci + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &col[row * hw..(row + 1) * hw];
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    for y in 0..h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= h as isize || x0 >= x1 {
                            continue;
                        }
                        let base = sy as usize * w;
                        for xx in x0..x1 {
                            plane[base + (xx as isize + dx) as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, ConvCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.in_channels, "conv input channels");
        let hw = h * w;
        let mut out = Tensor::zeros([n, self.out_channels, h, w]);
        let mut cols = Vec::with_capacity(n);
        for i in 0..n {
            let col = self.im2col(x.sample(i), h, w);
            let dst = out.sample_mut(i);
            for (o, b) in self.bias.value.iter().enumerate() {
                dst[o * hw..(o + 1) * hw].iter_mut().for_each(|v| *v = *b);
            }
            matmul(
                self.out_channels,
                self.patch_len(),
                hw,
                &self.weight.value,
                false,
                &col,
                false,
                dst,
                true,
            );
            cols.push(col);
        }
        (
            out,
            ConvCache {
                in_shape: x.shape(),
                cols,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let [n, _, h, w] = cache.in_shape;
        let hw = h * w;
        let pl = self.patch_len();
        let mut dx = Tensor::zeros(cache.in_shape);
        let mut dcol = vec![T::zero(); pl * hw];
        for i in 0..n {
            let dy = grad.sample(i);
            matmul(
                self.out_channels,
                hw,
                pl,
                dy,
                false,
                &cache.cols[i],
                true,
                &mut self.weight.grad,
                true,
            );
            for (o, g) in self.bias.grad.iter_mut().enumerate() {
                *g += dy[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
            }
            matmul(
                pl,
                self.out_channels,
                hw,
                &self.weight.value,
                true,
                dy,
                false,
                &mut dcol,
                false,
            );
            self.col2im(&dcol, h, w, dx.sample_mut(i));
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &self.weight);
        f(&join(prefix, "bias"), ParamKind::Weight, &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        f(&join(prefix, "weight"), ParamKind::Weight, &mut self.weight);
        f(&join(prefix, "bias"), ParamKind::Weight, &mut self.bias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn direct_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        let k = conv.kernel as isize;
        let p = k / 2;
        let mut out = Tensor::zeros([n, conv.out_channels, h, w]);
        for b in 0..n {
            for o in 0..conv.out_channels {
                for y in 0..h as isize {
                    for xx in 0..w as isize {
                        let mut acc = conv.bias.value[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y + ky - p;
                                    let sx = xx + kx - p;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * c + ci) * conv.kernel + ky as usize)
                                        * conv.kernel
                                        + kx as usize;
                                    acc += conv.weight.value[wi]
                                        * x.at(b, ci, sy as usize, sx as usize);
                                }
                            }
                        }
                        let idx = ((b * conv.out_channels + o) * h + y as usize) * w + xx as usize;
                        out.data_mut()[idx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in [1, 3, 7] {
            let mut conv = Conv2d::<f64>::new(2, 3, k, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3];
            let x = Tensor::from_vec(
                [2, 2, 5, 6],
                (0..120).map(|v| ((v * 37 % 17) as f64 - 8.0) / 8.0).collect(),
            );
            let (y, _) = conv.forward(&x);
            assert!(y.max_abs_diff(&direct_conv(&conv, &x)) < 1e-12, "k={k}");
        }
    }

    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new(2, 2, 3, &mut rng);
        let x = Tensor::from_vec([1, 2, 4, 5], (0..40).map(|v| (v as f64).sin()).collect());
        let g = Tensor::from_vec([1, 2, 4, 5], (0..40).map(|v| (v as f64 * 0.3).cos()).collect());
        let (y, cache) = conv.forward(&x);
        let dx = conv.backward(&cache, &g);
        // <conv(x) - b, g> = <x, conv^T g>
        let mut lhs = 0.0;
        for o in 0..2 {
            let yp = y.plane(0, o);
            let gp = g.plane(0, o);
            lhs += yp.iter().zip(gp).map(|(a, b)| (a - conv.bias.value[o]) * b).sum::<f64>();
        }
        let rhs: f64 = x.data().iter().zip(dx.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
        // weight gradient: <dW, W> = <y - b, g> for a linear map in W
        let wdot: f64 = conv
            .weight
            .grad
            .iter()
            .zip(&conv.weight.value)
            .map(|(a, b)| a * b)
            .sum();
        assert!((wdot - lhs).abs() < 1e-10);
    }
}
