//! Synthetic moving-shapes videos with exact masks and flow.

use std::f32::consts::PI;

use rand::Rng;

use super::{Sample, VosSequence};
use crate::error::{Error, Result};
use crate::flow::{flow_to_rgb, pair_frames, FlowField};
use crate::types::{BinaryMask, ImageRgb};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_sequences: usize,
    pub frames_per_seq: usize,
    pub resolution: usize,
    /// Shape speed range in pixels per frame.
    pub speed_range: (f32, f32),
    /// Number of independent static frames in the SOD set.
    pub n_sod: usize,
    pub background_velocity: (f32, f32),
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_sequences: 4,
            frames_per_seq: 8,
            resolution: 64,
            speed_range: (1.0, 3.0),
            n_sod: 20,
            background_velocity: (0.0, 0.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ShapeKind {
    Rect { half_w: f32, half_h: f32 },
    Disk { radius: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSpec {
    pub kind: ShapeKind,
    /// Center at frame 0, in pixel coordinates (pixel `(x, y)` covers `[x, x+1)`).
    pub center: (f32, f32),
    pub velocity: (f32, f32),
    pub color: [f32; 3],
    /// Stripe texture amplitude and spatial frequency (radians per pixel).
    pub stripe: (f32, f32),
}

impl ShapeSpec {
    fn center_at(&self, t: f32) -> (f32, f32) {
        (
            self.center.0 + self.velocity.0 * t,
            self.center.1 + self.velocity.1 * t,
        )
    }

    fn contains(&self, px: f32, py: f32, t: f32) -> bool {
        let (cx, cy) = self.center_at(t);
        match self.kind {
            ShapeKind::Rect { half_w, half_h } => (px - cx).abs() <= half_w && (py - cy).abs() <= half_h,
            ShapeKind::Disk { radius } => (px - cx).powi(2) + (py - cy).powi(2) <= radius * radius,
        }
    }

    fn shade(&self, px: f32, py: f32, t: f32) -> [f32; 3] {
        let (cx, cy) = self.center_at(t);
        let (amp, freq) = self.stripe;
        let s = 1.0 - amp * (0.5 + 0.5 * ((px - cx + py - cy) * freq).sin());
        self.color.map(|c| (c * s).clamp(0.0, 1.0))
    }
}

/// Low-saturation sinusoidal texture.
#[derive(Debug, Clone, PartialEq)]
pub struct Background {
    pub base: [f32; 3],
    /// `(fx, fy, phase, amplitude, chroma)` per wave.
    pub waves: Vec<(f32, f32, f32, f32, [f32; 3])>,
    pub velocity: (f32, f32),
}

impl Background {
    pub fn flat(gray: f32) -> Self {
        Background {
            base: [gray; 3],
            waves: Vec::new(),
            velocity: (0.0, 0.0),
        }
    }

    fn shade(&self, px: f32, py: f32, t: f32) -> [f32; 3] {
        let (x, y) = (px - self.velocity.0 * t, py - self.velocity.1 * t);
        let mut out = self.base;
        for &(fx, fy, phase, amp, chroma) in &self.waves {
            let s = amp * (fx * x + fy * y + phase).sin();
            for c in 0..3 {
                out[c] += s * chroma[c];
            }
        }
        out.map(|v| v.clamp(0.0, 1.0))
    }

    fn random(res: usize, velocity: (f32, f32), rng: &mut impl Rng) -> Self {
        let gray = rng.random_range(0.3..0.7);
        let base = [0, 1, 2].map(|_| gray + rng.random_range(-0.05..0.05));
        let waves = (0..4)
            .map(|_| {
                let k = rng.random_range(1.0..8.0) * 2.0 * PI / res as f32;
                let dir = rng.random_range(0.0..2.0 * PI);
                let tint = rng.random_range(-0.15..0.15);
                (
                    k * dir.cos(),
                    k * dir.sin(),
                    rng.random_range(0.0..2.0 * PI),
                    rng.random_range(0.04..0.1),
                    [1.0 + tint, 1.0, 1.0 - tint],
                )
            })
            .collect();
        Background {
            base,
            waves,
            velocity,
        }
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let c = v * s;
    let hp = (h / 60.0) % 6.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// A scene of rigid shapes translating over a background. Later shapes
/// occlude earlier ones.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub resolution: usize,
    pub background: Background,
    pub shapes: Vec<ShapeSpec>,
}

impl Scene {
    /// Random scene of 1–2 shapes whose centers stay inside the frame for `frames` frames.
    pub fn random(cfg: &SynthConfig, frames: usize, moving: bool, rng: &mut impl Rng) -> Self {
        let res = cfg.resolution as f32;
        let n_shapes = rng.random_range(1..=2);
        let span = frames.saturating_sub(1) as f32;
        let shapes = (0..n_shapes)
            .map(|_| {
                let kind = if rng.random_bool(0.5) {
                    ShapeKind::Disk {
                        radius: rng.random_range(0.1..0.2) * res,
                    }
                } else {
                    ShapeKind::Rect {
                        half_w: rng.random_range(0.08..0.2) * res,
                        half_h: rng.random_range(0.08..0.2) * res,
                    }
                };
                let velocity = if moving {
                    let (lo, hi) = cfg.speed_range;
                    let speed = if hi > lo { rng.random_range(lo..hi) } else { lo };
                    let dir = rng.random_range(0.0..2.0 * PI);
                    (speed * dir.cos(), speed * dir.sin())
                } else {
                    (0.0, 0.0)
                };
                // center the trajectory on a point in the middle of the frame
                let mid = (
                    rng.random_range(0.3..0.7) * res,
                    rng.random_range(0.3..0.7) * res,
                );
                let center = (mid.0 - velocity.0 * span / 2.0, mid.1 - velocity.1 * span / 2.0);
                let hue = rng.random_range(0.0..360.0);
                ShapeSpec {
                    kind,
                    center,
                    velocity,
                    color: hsv_to_rgb(hue, rng.random_range(0.75..1.0), rng.random_range(0.75..1.0)),
                    stripe: (rng.random_range(0.0..0.2), rng.random_range(0.3..1.2)),
                }
            })
            .collect();
        let bg_velocity = if moving { cfg.background_velocity } else { (0.0, 0.0) };
        Scene {
            resolution: cfg.resolution,
            background: Background::random(cfg.resolution, bg_velocity, rng),
            shapes,
        }
    }

    /// Index of the topmost shape covering each pixel at frame `t`.
    fn labels(&self, t: f32) -> Vec<Option<usize>> {
        let r = self.resolution;
        let mut out = vec![None; r * r];
        for y in 0..r {
            for x in 0..r {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                out[y * r + x] = self.shapes.iter().rposition(|s| s.contains(px, py, t));
            }
        }
        out
    }

    pub fn render(&self, t: usize) -> (ImageRgb, BinaryMask) {
        let r = self.resolution;
        let tf = t as f32;
        let labels = self.labels(tf);
        let mut data = vec![0.0f32; 3 * r * r];
        let mut mask = BinaryMask::zeros(r, r);
        for y in 0..r {
            for x in 0..r {
                let (px, py) = (x as f32 + 0.5, y as f32 + 0.5);
                let i = y * r + x;
                let rgb = match labels[i] {
                    Some(k) => {
                        mask.set(y, x, true);
                        self.shapes[k].shade(px, py, tf)
                    }
                    None => self.background.shade(px, py, tf),
                };
                for c in 0..3 {
                    data[c * r * r + i] = rgb[c];
                }
            }
        }
        (ImageRgb::from_clamped(r, r, data), mask)
    }

    /// Exact flow of frame `t` towards its paired target frame.
    pub fn flow(&self, t: usize, len: usize) -> Result<FlowField> {
        let (src, tgt) = pair_frames(t, len)?;
        let sign = tgt as f32 - src as f32;
        let r = self.resolution;
        let labels = self.labels(t as f32);
        let mut u = vec![0.0f32; r * r];
        let mut v = vec![0.0f32; r * r];
        for (i, l) in labels.iter().enumerate() {
            let vel = match l {
                Some(k) => self.shapes[*k].velocity,
                None => self.background.velocity,
            };
            u[i] = sign * vel.0;
            v[i] = sign * vel.1;
        }
        Ok(FlowField::new(r, r, u, v)?.with_frames(src, tgt))
    }

    pub fn sequence(&self, name: &str, len: usize) -> Result<VosSequence> {
        let mut samples = Vec::with_capacity(len);
        let mut flows = Vec::with_capacity(len);
        for t in 0..len {
            let (image, mask) = self.render(t);
            let flow = self.flow(t, len)?;
            samples.push(Sample::vos(
                format!("{name}/{t:05}"),
                image,
                flow_to_rgb(&flow, None),
                mask,
            ));
            flows.push(flow);
        }
        Ok(VosSequence {
            name: name.to_string(),
            samples,
            flows,
            annotated: vec![true; len],
        })
    }
}

/// Generates a VOS-style set of moving-shape sequences and a SOD-style set of
/// independent static frames.
pub fn generate_synthetic_dataset(
    cfg: &SynthConfig,
    rng: &mut impl Rng,
) -> Result<(Vec<VosSequence>, Vec<Sample>)> {
    if cfg.resolution < 32 {
        return Err(Error::invalid(format!(
            "synthetic resolution {} below 32",
            cfg.resolution
        )));
    }
    if cfg.frames_per_seq < 2 {
        return Err(Error::invalid("synthetic sequences need at least 2 frames"));
    }
    let mut vos = Vec::with_capacity(cfg.n_sequences);
    for s in 0..cfg.n_sequences {
        let scene = Scene::random(cfg, cfg.frames_per_seq, true, rng);
        vos.push(scene.sequence(&format!("seq{s:03}"), cfg.frames_per_seq)?);
    }
    let sod = (0..cfg.n_sod)
        .map(|i| {
            let scene = Scene::random(cfg, 1, false, rng);
            let (image, mask) = scene.render(0);
            Sample::sod(format!("sod{i:05}"), image, mask)
        })
        .collect();
    Ok((vos, sod))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn disk_scene(velocity: (f32, f32), radius: f32) -> Scene {
        Scene {
            resolution: 64,
            background: Background::flat(0.5),
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Disk { radius },
                center: (30.0, 31.0),
                velocity,
                color: [1.0, 0.0, 0.0],
                stripe: (0.0, 0.0),
            }],
        }
    }

    #[test]
    fn moving_disk_carries_its_velocity() {
        let scene = disk_scene((2.0, 0.0), 8.0);
        let (_, mask) = scene.render(1);
        let flow = scene.flow(1, 5).unwrap();
        for i in 0..64 * 64 {
            if mask.data()[i] == 1 {
                assert_eq!((flow.u[i], flow.v[i]), (2.0, 0.0));
            } else {
                assert_eq!((flow.u[i], flow.v[i]), (0.0, 0.0));
            }
        }
        // last frame points back at the previous one
        let last = scene.flow(4, 5).unwrap();
        assert_eq!((last.source_frame, last.target_frame), (4, 3));
        assert!(last.u.iter().all(|&u| u == 0.0 || u == -2.0));
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let scene = disk_scene((0.0, 0.0), 8.0);
        let flow = scene.flow(0, 3).unwrap();
        assert!(flow.u.iter().chain(&flow.v).all(|&x| x == 0.0));
    }

    #[test]
    fn rasterized_area_within_perimeter_of_analytic_area() {
        for radius in [5.0f32, 7.3, 11.9, 15.0] {
            let (_, mask) = disk_scene((0.0, 0.0), radius).render(0);
            let analytic = PI * radius * radius;
            let perimeter = 2.0 * PI * radius;
            assert!(
                (mask.area() as f32 - analytic).abs() <= perimeter,
                "r={radius}: area {} vs {analytic}",
                mask.area()
            );
        }
    }

    #[test]
    fn generator_respects_counts_and_seed() {
        let cfg = SynthConfig {
            n_sequences: 3,
            frames_per_seq: 4,
            resolution: 32,
            n_sod: 5,
            ..Default::default()
        };
        let (vos, sod) = generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(vos.len(), 3);
        assert!(vos.iter().all(|s| s.len() == 4 && s.flows.len() == 4));
        assert_eq!(sod.len(), 5);
        assert!(sod.iter().all(|s| s.validity == 0));
        assert!(vos.iter().flat_map(|s| &s.samples).all(|s| s.check().is_ok()));
        let (vos2, _) = generate_synthetic_dataset(&cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(vos[2].samples, vos2[2].samples);
        let bad = SynthConfig {
            resolution: 16,
            ..cfg
        };
        assert!(generate_synthetic_dataset(&bad, &mut ChaCha8Rng::seed_from_u64(1)).is_err());
    }
}
