//! Optical flow fields: frame pairing, the Middlebury `.flo` codec, color-wheel
//! rendering and controlled corruption.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::types::ImageRgb;

/// Magic tag opening every `.flo` file (the little-endian float 202021.25).
pub const FLO_MAGIC: [u8; 4] = *b"PIEH";

/// Magnitude floor used when normalizing flow for rendering.
pub const MAG_EPSILON: f32 = 1e-6;

/// Dense displacement field in pixels per frame, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f32>,
    pub v: Vec<f32>,
    pub source_frame: usize,
    pub target_frame: usize,
}

impl FlowField {
    pub fn new(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        if u.len() != height * width || v.len() != height * width {
            return Err(Error::shape(format!(
                "flow components have {}/{} values, expected {height}x{width}",
                u.len(),
                v.len()
            )));
        }
        if u.iter().chain(&v).any(|x| !x.is_finite()) {
            return Err(Error::invalid("flow contains non-finite values"));
        }
        Ok(FlowField {
            height,
            width,
            u,
            v,
            source_frame: 0,
            target_frame: 1,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
            source_frame: 0,
            target_frame: 1,
        }
    }

    pub fn with_frames(mut self, source: usize, target: usize) -> Self {
        self.source_frame = source;
        self.target_frame = target;
        self
    }

    pub fn max_magnitude(&self) -> f32 {
        self.u
            .iter()
            .zip(&self.v)
            .map(|(u, v)| u.hypot(*v))
            .fold(0.0, f32::max)
    }

    pub fn negated(&self) -> Self {
        FlowField {
            u: self.u.iter().map(|x| -x).collect(),
            v: self.v.iter().map(|x| -x).collect(),
            ..self.clone()
        }
    }
}

/// Source/target frame indices used to compute the flow of frame `t` in a
/// sequence of `len` frames: the next frame, or the previous one for the last
/// frame.
pub fn pair_frames(t: usize, len: usize) -> Result<(usize, usize)> {
    if len < 2 {
        return Err(Error::invalid(format!(
            "sequence of length {len} has no frame pair; motion needs at least 2 frames"
        )));
    }
    if t >= len {
        return Err(Error::invalid(format!("frame {t} out of range for length {len}")));
    }
    Ok(if t + 1 < len { (t, t + 1) } else { (t, t - 1) })
}

/// Encodes a field in Middlebury `.flo` layout.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * flow.u.len());
    buf.extend_from_slice(&FLO_MAGIC);
    buf.extend_from_slice(&(flow.width as i32).to_le_bytes());
    buf.extend_from_slice(&(flow.height as i32).to_le_bytes());
    for (u, v) in flow.u.iter().zip(&flow.v) {
        buf.extend_from_slice(&u.to_le_bytes());
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_flo(bytes: &[u8], path: &Path) -> Result<FlowField> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedFlow {
            path: path.to_path_buf(),
            expected: 12,
            found: bytes.len(),
        });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != FLO_MAGIC {
        return Err(Error::BadFlowMagic {
            path: path.to_path_buf(),
            found: magic,
        });
    }
    let width = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let height = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if width <= 0 || height <= 0 {
        return Err(Error::FlowDims {
            path: path.to_path_buf(),
            width,
            height,
        });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + 8 * w * h;
    if bytes.len() < expected {
        return Err(Error::TruncatedFlow {
            path: path.to_path_buf(),
            expected,
            found: bytes.len(),
        });
    }
    let mut u = Vec::with_capacity(w * h);
    let mut v = Vec::with_capacity(w * h);
    for px in bytes[12..expected].chunks_exact(8) {
        u.push(f32::from_le_bytes(px[0..4].try_into().expect("4 bytes")));
        v.push(f32::from_le_bytes(px[4..8].try_into().expect("4 bytes")));
    }
    Ok(FlowField {
        height: h,
        width: w,
        u,
        v,
        source_frame: 0,
        target_frame: 1,
    })
}

pub fn read_flo(path: &Path) -> Result<FlowField> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_flo(&bytes, path)
}

pub fn write_flo(flow: &FlowField, path: &Path) -> Result<()> {
    fs::write(path, encode_flo(flow)).map_err(|e| Error::io(path, e))
}

/// The 55-entry Middlebury color wheel, as 0–255 RGB triples.
pub fn color_wheel() -> Vec<[f32; 3]> {
    const RY: usize = 15;
    const YG: usize = 6;
    const GC: usize = 4;
    const CB: usize = 11;
    const BM: usize = 13;
    const MR: usize = 6;
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    let ramp = |i: usize, n: usize| (255.0 * i as f64 / n as f64).floor() as f32;
    for i in 0..RY {
        wheel.push([255.0, ramp(i, RY), 0.0]);
    }
    for i in 0..YG {
        wheel.push([255.0 - ramp(i, YG), 255.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 255.0, ramp(i, GC)]);
    }
    for i in 0..CB {
        wheel.push([0.0, 255.0 - ramp(i, CB), 255.0]);
    }
    for i in 0..BM {
        wheel.push([ramp(i, BM), 0.0, 255.0]);
    }
    for i in 0..MR {
        wheel.push([255.0, 0.0, 255.0 - ramp(i, MR)]);
    }
    wheel
}

/// Color of a single normalized vector (`|(u, v)| <= 1` maps inside the wheel).
fn wheel_color(wheel: &[[f32; 3]], u: f32, v: f32) -> [f32; 3] {
    let ncols = wheel.len();
    let rad = u.hypot(v);
    let a = (-v).atan2(-u) / std::f32::consts::PI;
    let fk = (a + 1.0) / 2.0 * (ncols - 1) as f32;
    let k0 = (fk.floor() as usize).min(ncols - 1);
    let k1 = if k0 + 1 == ncols { 0 } else { k0 + 1 };
    let f = fk - k0 as f32;
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        let col = (1.0 - f) * wheel[k0][c] / 255.0 + f * wheel[k1][c] / 255.0;
        let col = if rad <= 1.0 {
            1.0 - rad * (1.0 - col)
        } else {
            col * 0.75
        };
        *o = col.clamp(0.0, 1.0);
    }
    out
}

/// Renders flow with the Middlebury color wheel.
///
/// Vectors are divided by `max_mag`, or by the field's own maximum magnitude
/// when `max_mag` is `None`; either way the divisor is floored at
/// [`MAG_EPSILON`].
pub fn flow_to_rgb(flow: &FlowField, max_mag: Option<f32>) -> ImageRgb {
    let wheel = color_wheel();
    let norm = max_mag.unwrap_or_else(|| flow.max_magnitude()).max(MAG_EPSILON);
    let hw = flow.height * flow.width;
    let mut data = vec![0.0f32; 3 * hw];
    for p in 0..hw {
        let rgb = wheel_color(&wheel, flow.u[p] / norm, flow.v[p] / norm);
        for c in 0..3 {
            data[c * hw + p] = rgb[c];
        }
    }
    ImageRgb::from_clamped(flow.height, flow.width, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    /// Additive Gaussian noise, σ = strength × max magnitude.
    Noise,
    /// Replace the field by zeros.
    Zero,
    /// Spatially permute the vectors.
    Shuffle,
}

impl FromStr for Corruption {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(Corruption::Noise),
            "zero" => Ok(Corruption::Zero),
            "shuffle" => Ok(Corruption::Shuffle),
            other => Err(Error::invalid(format!(
                "unknown corruption mode `{other}` (expected noise, zero or shuffle)"
            ))),
        }
    }
}

pub fn corrupt_flow(
    flow: &FlowField,
    mode: Corruption,
    strength: f32,
    rng: &mut impl Rng,
) -> Result<FlowField> {
    if !(strength >= 0.0) {
        return Err(Error::invalid(format!("corruption strength {strength} must be >= 0")));
    }
    let mut out = flow.clone();
    match mode {
        Corruption::Noise => {
            let sigma = strength * flow.max_magnitude();
            if sigma > 0.0 {
                let normal = Normal::new(0.0f32, sigma)
                    .map_err(|e| Error::invalid(format!("noise distribution: {e}")))?;
                for (u, v) in out.u.iter_mut().zip(out.v.iter_mut()) {
                    *u += normal.sample(rng);
                    *v += normal.sample(rng);
                }
            }
        }
        Corruption::Zero => {
            out.u.iter_mut().for_each(|x| *x = 0.0);
            out.v.iter_mut().for_each(|x| *x = 0.0);
        }
        Corruption::Shuffle => {
            let mut order: Vec<usize> = (0..flow.u.len()).collect();
            order.shuffle(rng);
            for (dst, &src) in order.iter().enumerate() {
                out.u[dst] = flow.u[src];
                out.v[dst] = flow.v[src];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_flow(h: usize, w: usize, seed: u64) -> FlowField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        let v = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        FlowField::new(h, w, u, v).unwrap()
    }

    #[test]
    fn pairing_uses_next_frame_then_previous_for_last() {
        assert_eq!(pair_frames(3, 5).unwrap(), (3, 4));
        assert_eq!(pair_frames(4, 5).unwrap(), (4, 3));
        assert_eq!(pair_frames(0, 2).unwrap(), (0, 1));
        assert!(pair_frames(0, 1).is_err());
        assert!(pair_frames(5, 5).is_err());
    }

    #[test]
    fn flo_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.flo");
        let mut flow = random_flow(16, 16, 1);
        flow.u[0] = -0.0;
        flow.v[3] = f32::MIN_POSITIVE;
        write_flo(&flow, &path).unwrap();
        let back = read_flo(&path).unwrap();
        let bits = |f: &FlowField| {
            f.u.iter().chain(&f.v).map(|x| x.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(bits(&back), bits(&flow));
        assert_eq!((back.height, back.width), (16, 16));
    }

    #[test]
    fn flo_byte_size_follows_layout() {
        // 4 magic + 2·4 dims + W·H·2·4 payload
        let flow = FlowField::zeros(4, 8);
        assert_eq!(encode_flo(&flow).len(), 4 + 8 + 8 * 4 * 2 * 4);
        assert_eq!(encode_flo(&flow).len(), 268);
    }

    #[test]
    fn flo_decode_errors() {
        let p = Path::new("x.flo");
        let mut bytes = encode_flo(&FlowField::zeros(2, 2));
        bytes[..4].copy_from_slice(b"XXXX");
        assert!(matches!(decode_flo(&bytes, p), Err(Error::BadFlowMagic { .. })));

        let bytes = encode_flo(&FlowField::zeros(2, 2));
        assert!(matches!(
            decode_flo(&bytes[..bytes.len() - 1], p),
            Err(Error::TruncatedFlow { .. })
        ));

        let mut bytes = encode_flo(&FlowField::zeros(2, 2));
        bytes[4..8].copy_from_slice(&0i32.to_le_bytes());
        assert!(matches!(decode_flo(&bytes, p), Err(Error::FlowDims { .. })));
    }

    #[test]
    fn zero_flow_renders_white() {
        let img = flow_to_rgb(&FlowField::zeros(4, 4), None);
        assert!(img.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn max_magnitude_renders_fully_saturated() {
        // (+u, 0) maps to angle -pi, i.e. wheel entry 0 (pure red)
        let flow = FlowField::new(1, 1, vec![3.0], vec![0.0]).unwrap();
        let img = flow_to_rgb(&flow, Some(3.0));
        let px = img.pixel(0, 0);
        let min = px.iter().cloned().fold(f32::MAX, f32::min);
        let max = px.iter().cloned().fold(f32::MIN, f32::max);
        assert!(min.abs() < 1e-6, "{px:?}");
        assert!((max - 1.0).abs() < 1e-6);
        // wheel[0] = pure red
        assert!((px[0] - 1.0).abs() < 1e-6 && px[1].abs() < 1e-6 && px[2].abs() < 1e-6);
    }

    #[test]
    fn per_frame_normalization_is_scale_invariant() {
        let flow = random_flow(8, 8, 2);
        let scaled = FlowField {
            u: flow.u.iter().map(|x| x * 3.7).collect(),
            v: flow.v.iter().map(|x| x * 3.7).collect(),
            ..flow.clone()
        };
        let a = flow_to_rgb(&flow, None);
        let b = flow_to_rgb(&scaled, None);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn negated_flow_keeps_saturation_and_rotates_hue() {
        let flow = random_flow(6, 6, 3);
        let a = flow_to_rgb(&flow, None);
        let b = flow_to_rgb(&flow.negated(), None);
        let wheel = color_wheel();
        let norm = flow.max_magnitude();
        for y in 0..6 {
            for x in 0..6 {
                let (pa, pb) = (a.pixel(y, x), b.pixel(y, x));
                let min = |p: [f32; 3]| p.iter().cloned().fold(f32::MAX, f32::min);
                let max = |p: [f32; 3]| p.iter().cloned().fold(f32::MIN, f32::max);
                assert!((min(pa) - min(pb)).abs() < 1e-5);
                assert!((max(pa) - max(pb)).abs() < 1e-5);
                // the negated rendering is the wheel evaluated at the opposite angle
                let i = y * 6 + x;
                let (u, v) = (flow.u[i] / norm, flow.v[i] / norm);
                let rot = wheel_color(&wheel, -u, -v);
                for c in 0..3 {
                    assert!((rot[c] - pb[c]).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn corruption_modes() {
        let flow = random_flow(8, 8, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(corrupt_flow(&flow, Corruption::Noise, 0.0, &mut rng).unwrap(), flow);
        let z = corrupt_flow(&flow, Corruption::Zero, 1.0, &mut rng).unwrap();
        assert!(z.u.iter().chain(&z.v).all(|&x| x == 0.0));
        let noisy = corrupt_flow(&flow, Corruption::Noise, 1.0, &mut rng).unwrap();
        assert_ne!(noisy, flow);
        assert!("blur".parse::<Corruption>().is_err());
        assert!(corrupt_flow(&flow, Corruption::Noise, -1.0, &mut rng).is_err());
    }

    #[test]
    fn shuffle_preserves_vector_multiset() {
        let flow = random_flow(8, 8, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = corrupt_flow(&flow, Corruption::Shuffle, 1.0, &mut rng).unwrap();
        let key = |f: &FlowField| {
            let mut v: Vec<(u32, u32)> = f
                .u
                .iter()
                .zip(&f.v)
                .map(|(a, b)| (a.to_bits(), b.to_bits()))
                .collect();
            v.sort_unstable();
            v
        };
        assert_eq!(key(&s), key(&flow));
        assert_ne!(s.u, flow.u);
    }

    proptest! {
        #[test]
        fn rendering_stays_in_unit_cube(
            vals in proptest::collection::vec(-1e4f32..1e4, 32),
            max_mag in proptest::option::of(0.0f32..100.0),
        ) {
            let flow = FlowField::new(4, 4, vals[..16].to_vec(), vals[16..].to_vec()).unwrap();
            let img = flow_to_rgb(&flow, max_mag);
            prop_assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn pairing_targets_adjacent_frame(len in 2usize..200, t_frac in 0.0f64..1.0) {
            let t = ((len as f64 * t_frac) as usize).min(len - 1);
            let (s, tgt) = pair_frames(t, len).unwrap();
            prop_assert_eq!(s, t);
            prop_assert_eq!((s as i64 - tgt as i64).abs(), 1);
            prop_assert!(tgt < len);
        }
    }
}
