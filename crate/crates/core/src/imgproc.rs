//! Plane resampling: nearest, bilinear and bicubic resizing with half-pixel
//! centers, plus the adjoint of the linear resamplers for backpropagation.

use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Bilinear,
    /// Keys cubic convolution with `a = -0.75`.
    Bicubic,
}

const CUBIC_A: f64 = -0.75;

fn cubic_weight(x: f64) -> f64 {
    let x = x.abs();
    let a = CUBIC_A;
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps `(index, weight)` for every output coordinate along one axis.
fn axis_taps(input: usize, output: usize, interp: Interp) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    let last = input as isize - 1;
    (0..output)
        .map(|o| match interp {
            Interp::Nearest => {
                let src = ((o as f64 * scale).floor() as usize).min(input - 1);
                vec![(src, 1.0)]
            }
            Interp::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let l1 = src - i0 as f64;
                if i0 == i1 || l1 == 0.0 {
                    vec![(i0, 1.0)]
                } else {
                    vec![(i0, 1.0 - l1), (i1, l1)]
                }
            }
            Interp::Bicubic => {
                let src = (o as f64 + 0.5) * scale - 0.5;
                let base = src.floor();
                let t = src - base;
                let base = base as isize;
                let mut taps: Vec<(usize, f64)> = Vec::with_capacity(4);
                for j in -1..=2isize {
                    let w = cubic_weight(j as f64 - t);
                    if w == 0.0 {
                        continue;
                    }
                    let idx = (base + j).clamp(0, last) as usize;
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(tap) => tap.1 += w,
                        None => taps.push((idx, w)),
                    }
                }
                taps
            }
        })
        .collect()
}

/// Resizes a single `h×w` plane to `nh×nw`.
pub fn resize_plane<T: Scalar>(
    src: &[T],
    h: usize,
    w: usize,
    nh: usize,
    nw: usize,
    interp: Interp,
) -> Vec<T> {
    assert_eq!(src.len(), h * w, "plane size mismatch");
    if h == nh && w == nw && interp != Interp::Bicubic {
        return src.to_vec();
    }
    let xt = axis_taps(w, nw, interp);
    let yt = axis_taps(h, nh, interp);
    let mut tmp = vec![T::zero(); h * nw];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        for (x, taps) in xt.iter().enumerate() {
            tmp[y * nw + x] = taps.iter().map(|&(i, wt)| row[i] * T::lit(wt)).sum();
        }
    }
    let mut out = vec![T::zero(); nh * nw];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..nw {
            out[y * nw + x] = taps
                .iter()
                .map(|&(i, wt)| tmp[i * nw + x] * T::lit(wt))
                .sum();
        }
    }
    out
}

/// Adjoint (transpose) of [`resize_plane`]: maps a gradient on the `nh×nw`
/// output back to the `h×w` input.
pub fn resize_plane_adjoint<T: Scalar>(
    grad_out: &[T],
    h: usize,
    w: usize,
    nh: usize,
    nw: usize,
    interp: Interp,
) -> Vec<T> {
    assert_eq!(grad_out.len(), nh * nw, "gradient plane size mismatch");
    let xt = axis_taps(w, nw, interp);
    let yt = axis_taps(h, nh, interp);
    let mut tmp = vec![T::zero(); h * nw];
    for (y, taps) in yt.iter().enumerate() {
        for x in 0..nw {
            let g = grad_out[y * nw + x];
            for &(i, wt) in taps {
                tmp[i * nw + x] += g * T::lit(wt);
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        for (x, taps) in xt.iter().enumerate() {
            let g = tmp[y * nw + x];
            for &(i, wt) in taps {
                out[y * w + i] += g * T::lit(wt);
            }
        }
    }
    out
}

/// Mirrors a plane left-right.
pub fn flip_plane<T: Copy>(src: &[T], h: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h {
        out.extend(src[y * w..(y + 1) * w].iter().rev());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_resize_is_exact_for_every_interp() {
        let src: Vec<f32> = (0..35).map(|v| (v as f32 * 0.37).sin()).collect();
        for interp in [Interp::Nearest, Interp::Bilinear, Interp::Bicubic] {
            assert_eq!(resize_plane(&src, 5, 7, 5, 7, interp), src);
        }
    }

    #[test]
    fn interpolators_preserve_constants() {
        let src = vec![0.25f64; 6 * 6];
        for interp in [Interp::Nearest, Interp::Bilinear, Interp::Bicubic] {
            for &(nh, nw) in &[(12, 12), (3, 3), (7, 10)] {
                let out = resize_plane(&src, 6, 6, nh, nw, interp);
                assert!(out.iter().all(|v| (v - 0.25).abs() < 1e-12), "{interp:?}");
            }
        }
    }

    #[test]
    fn bilinear_upsample_matches_half_pixel_reference() {
        // 1-D row [0, 1] upsampled to 4: sources -0.25->0, 0.25, 0.75, 1.25->1
        let out = resize_plane(&[0.0f64, 1.0], 1, 2, 1, 4, Interp::Bilinear);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn adjoint_satisfies_inner_product_identity() {
        let (h, w, nh, nw) = (4, 5, 9, 7);
        let x: Vec<f64> = (0..h * w).map(|v| (v as f64 * 0.91).cos()).collect();
        let y: Vec<f64> = (0..nh * nw).map(|v| (v as f64 * 0.53).sin()).collect();
        for interp in [Interp::Bilinear, Interp::Bicubic, Interp::Nearest] {
            let ax = resize_plane(&x, h, w, nh, nw, interp);
            let aty = resize_plane_adjoint(&y, h, w, nh, nw, interp);
            let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "{interp:?}: {lhs} vs {rhs}");
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let src: Vec<u8> = (0..12).collect();
        let f = flip_plane(&src, 3, 4);
        assert_eq!(&f[..4], &[3, 2, 1, 0]);
        assert_eq!(flip_plane(&f, 3, 4), src);
    }
}
