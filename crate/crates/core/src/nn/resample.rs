use crate::imgproc::{resize_plane, resize_plane_adjoint, Interp};
use crate::tensor::{Scalar, Tensor};

/// Non-overlapping `factor×factor` average pooling. Spatial sizes must divide.
pub fn avg_pool<T: Scalar>(x: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    assert!(h % factor == 0 && w % factor == 0, "avg_pool: {h}x{w} not divisible by {factor}");
    let (oh, ow) = (h / factor, w / factor);
    let norm = T::lit(1.0 / (factor * factor) as f64);
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for i in 0..n {
        for ch in 0..c {
            let src = x.plane(i, ch);
            let dst = out.plane_mut(i, ch);
            for y in 0..h {
                let orow = (y / factor) * ow;
                for xx in 0..w {
                    dst[orow + xx / factor] += src[y * w + xx];
                }
            }
            dst.iter_mut().for_each(|v| *v *= norm);
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(grad: &Tensor<T>, factor: usize) -> Tensor<T> {
    let [n, c, oh, ow] = grad.shape();
    let (h, w) = (oh * factor, ow * factor);
    let norm = T::lit(1.0 / (factor * factor) as f64);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let g = grad.plane(i, ch);
            let dst = dx.plane_mut(i, ch);
            for y in 0..h {
                for xx in 0..w {
                    dst[y * w + xx] = g[(y / factor) * ow + xx / factor] * norm;
                }
            }
        }
    }
    dx
}

/// 2× bilinear upsampling with half-pixel centers.
pub fn upsample2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 2 * h, 2 * w]);
    for i in 0..n {
        for ch in 0..c {
            let up = resize_plane(x.plane(i, ch), h, w, 2 * h, 2 * w, Interp::Bilinear);
            out.plane_mut(i, ch).copy_from_slice(&up);
        }
    }
    out
}

pub fn upsample2x_backward<T: Scalar>(grad: &Tensor<T>) -> Tensor<T> {
    let [n, c, h2, w2] = grad.shape();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Tensor::zeros([n, c, h, w]);
    for i in 0..n {
        for ch in 0..c {
            let d = resize_plane_adjoint(grad.plane(i, ch), h, w, h2, w2, Interp::Bilinear);
            dx.plane_mut(i, ch).copy_from_slice(&d);
        }
    }
    dx
}
