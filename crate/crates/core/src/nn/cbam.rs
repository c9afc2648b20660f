use rand::Rng;

use super::{join, sigmoid, Conv2d, ConvCache, Linear, LinearCache, Module, Param, ParamKind};
use crate::tensor::{Scalar, Tensor};

pub const CBAM_REDUCTION: usize = 4;
pub const CBAM_SPATIAL_KERNEL: usize = 7;

/// Convolutional block attention: a channel gate followed by a spatial gate.
///
/// The channel gate feeds spatially average- and max-pooled descriptors through
/// a shared two-layer bottleneck, sums the two branches and applies a sigmoid.
/// The spatial gate convolves the channel-wise mean and max maps with a 7×7
/// kernel and applies a sigmoid. Both gates rescale their input multiplicatively.
#[derive(Clone, Debug)]
pub struct Cbam<T> {
    pub channels: usize,
    pub mlp1: Linear<T>,
    pub mlp2: Linear<T>,
    pub spatial: Conv2d<T>,
}

pub struct CbamCache<T> {
    x: Tensor<T>,
    spatial_argmax: Vec<usize>,
    mlp1: LinearCache<T>,
    hidden: Vec<T>,
    mlp2: LinearCache<T>,
    att: Vec<T>,
    x1: Tensor<T>,
    channel_argmax: Vec<usize>,
    conv: ConvCache<T>,
    satt: Vec<T>,
}

impl<T: Scalar> Cbam<T> {
    pub fn new(channels: usize, rng: &mut impl Rng) -> Self {
        let hidden = (channels / CBAM_REDUCTION).max(1);
        Cbam {
            channels,
            mlp1: Linear::new(channels, hidden, rng),
            mlp2: Linear::new(hidden, channels, rng),
            spatial: Conv2d::new(2, 1, CBAM_SPATIAL_KERNEL, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, CbamCache<T>) {
        let [n, c, h, w] = x.shape();
        assert_eq!(c, self.channels, "cbam channels");
        let hw = h * w;
        let inv_hw = T::lit(1.0 / hw as f64);

        // channel gate: rows 0..n are averages, n..2n are maxima
        let mut pooled = vec![T::zero(); 2 * n * c];
        let mut spatial_argmax = vec![0usize; n * c];
        for i in 0..n {
            for ch in 0..c {
                let plane = x.plane(i, ch);
                let mut best = 0;
                let mut sum = T::zero();
                for (p, &v) in plane.iter().enumerate() {
                    sum += v;
                    if v > plane[best] {
                        best = p;
                    }
                }
                pooled[i * c + ch] = sum * inv_hw;
                pooled[(n + i) * c + ch] = plane[best];
                spatial_argmax[i * c + ch] = best;
            }
        }
        let (h1, mlp1) = self.mlp1.forward(&pooled, 2 * n);
        let hidden: Vec<T> = h1.iter().map(|&v| v.max(T::zero())).collect();
        let (z, mlp2) = self.mlp2.forward(&hidden, 2 * n);
        let att: Vec<T> = (0..n * c).map(|k| sigmoid(z[k] + z[n * c + k])).collect();

        let mut x1 = x.clone();
        for i in 0..n {
            for ch in 0..c {
                let a = att[i * c + ch];
                x1.plane_mut(i, ch).iter_mut().for_each(|v| *v *= a);
            }
        }

        // spatial gate
        let inv_c = T::lit(1.0 / c as f64);
        let mut feat = Tensor::zeros([n, 2, h, w]);
        let mut channel_argmax = vec![0usize; n * hw];
        for i in 0..n {
            let sample = x1.sample(i);
            let dst = feat.sample_mut(i);
            for p in 0..hw {
                let mut sum = T::zero();
                let mut best = 0;
                for ch in 0..c {
                    let v = sample[ch * hw + p];
                    sum += v;
                    if v > sample[best * hw + p] {
                        best = ch;
                    }
                }
                dst[p] = sum * inv_c;
                dst[hw + p] = sample[best * hw + p];
                channel_argmax[i * hw + p] = best;
            }
        }
        let (s, conv) = self.spatial.forward(&feat);
        let satt: Vec<T> = s.data().iter().map(|&v| sigmoid(v)).collect();
        let mut y = x1.clone();
        for i in 0..n {
            for ch in 0..c {
                for (v, &g) in y.plane_mut(i, ch).iter_mut().zip(&satt[i * hw..(i + 1) * hw]) {
                    *v *= g;
                }
            }
        }
        (
            y,
            CbamCache {
                x: x.clone(),
                spatial_argmax,
                mlp1,
                hidden,
                mlp2,
                att,
                x1,
                channel_argmax,
                conv,
                satt,
            },
        )
    }

    pub fn backward(&mut self, cache: &CbamCache<T>, grad: &Tensor<T>) -> Tensor<T> {
        let [n, c, h, w] = grad.shape();
        let hw = h * w;
        let one = T::one();

        // spatial gate
        let mut dx1 = grad.clone();
        let mut ds = Tensor::zeros([n, 1, h, w]);
        for i in 0..n {
            let satt = &cache.satt[i * hw..(i + 1) * hw];
            let dsd = ds.sample_mut(i);
            for ch in 0..c {
                let g = grad.plane(i, ch);
                let x1 = cache.x1.plane(i, ch);
                for p in 0..hw {
                    dsd[p] += g[p] * x1[p];
                }
            }
            for p in 0..hw {
                dsd[p] *= satt[p] * (one - satt[p]);
            }
            for ch in 0..c {
                for (d, &s) in dx1.plane_mut(i, ch).iter_mut().zip(satt) {
                    *d *= s;
                }
            }
        }
        let dfeat = self.spatial.backward(&cache.conv, &ds);
        let inv_c = T::lit(1.0 / c as f64);
        for i in 0..n {
            let df = dfeat.sample(i);
            let sample = dx1.sample_mut(i);
            for p in 0..hw {
                let davg = df[p] * inv_c;
                for ch in 0..c {
                    sample[ch * hw + p] += davg;
                }
                let best = cache.channel_argmax[i * hw + p];
                sample[best * hw + p] += df[hw + p];
            }
        }

        // channel gate
        let mut dx = dx1.clone();
        let mut dlogit = vec![T::zero(); n * c];
        for i in 0..n {
            for ch in 0..c {
                let a = cache.att[i * c + ch];
                let datt: T = dx1
                    .plane(i, ch)
                    .iter()
                    .zip(cache.x.plane(i, ch))
                    .map(|(&d, &x)| d * x)
                    .sum();
                dlogit[i * c + ch] = datt * a * (one - a);
                dx.plane_mut(i, ch).iter_mut().for_each(|v| *v *= a);
            }
        }
        let mut dz = dlogit.clone();
        dz.extend_from_slice(&dlogit);
        let mut dh = self.mlp2.backward(&cache.mlp2, &dz);
        for (d, &hv) in dh.iter_mut().zip(&cache.hidden) {
            if hv <= T::zero() {
                *d = T::zero();
            }
        }
        let dpooled = self.mlp1.backward(&cache.mlp1, &dh);
        let inv_hw = T::lit(1.0 / hw as f64);
        for i in 0..n {
            for ch in 0..c {
                let davg = dpooled[i * c + ch] * inv_hw;
                let plane = dx.plane_mut(i, ch);
                plane.iter_mut().for_each(|v| *v += davg);
                plane[cache.spatial_argmax[i * c + ch]] += dpooled[(n + i) * c + ch];
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for Cbam<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &Param<T>)) {
        self.mlp1.visit(&join(prefix, "mlp1"), f);
        self.mlp2.visit(&join(prefix, "mlp2"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, ParamKind, &mut Param<T>)) {
        self.mlp1.visit_mut(&join(prefix, "mlp1"), f);
        self.mlp2.visit_mut(&join(prefix, "mlp2"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
    }
}
