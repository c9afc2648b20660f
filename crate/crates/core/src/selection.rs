//! Foreground and confidence maps, adaptive output selection, fusion
//! baselines and test-time augmentation.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::VosSequence;
use crate::error::{Error, Result};
use crate::imgproc::{flip_plane, resize_plane, Interp};
use crate::network::{fuse, Network, Stream};
use crate::tensor::Tensor;
use crate::types::{BinaryMask, ImageRgb};

pub const DEFAULT_H: f64 = 0.05;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Which input produced a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The RGB frame was fed to the motion encoder.
    Image,
    Flow,
    /// A fusion baseline combined both.
    Fused,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Image => "image",
            Source::Flow => "flow",
            Source::Fused => "fused",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferMode {
    FlowOnly,
    ImageOnly,
    Select,
    Input,
    Feature,
    Output,
}

impl InferMode {
    pub const ALL: [InferMode; 6] = [
        InferMode::FlowOnly,
        InferMode::ImageOnly,
        InferMode::Select,
        InferMode::Input,
        InferMode::Feature,
        InferMode::Output,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferMode::FlowOnly => "flow_only",
            InferMode::ImageOnly => "image_only",
            InferMode::Select => "select",
            InferMode::Input => "input",
            InferMode::Feature => "feature",
            InferMode::Output => "output",
        }
    }

    pub fn needs_flow(self) -> bool {
        self != InferMode::ImageOnly
    }
}

impl fmt::Display for InferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InferMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                Error::invalid(format!(
                    "unknown mode `{s}` (expected flow_only, image_only, select, input, feature or output)"
                ))
            })
    }
}

/// A single-frame prediction with its confidence bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionOutput {
    /// `1×2×H×W` logits at processing resolution; absent for TTA ensembles,
    /// which only exist as averaged probabilities.
    pub logits: Option<Tensor<f32>>,
    pub height: usize,
    pub width: usize,
    pub omega: Vec<f64>,
    pub phi: Vec<f64>,
    pub alpha: f64,
    pub h: f64,
    pub source: Source,
}

impl PredictionOutput {
    pub fn from_omega(height: usize, width: usize, omega: Vec<f64>, h: f64, source: Source) -> Result<Self> {
        if omega.len() != height * width {
            return Err(Error::shape(format!("{} values for {height}x{width}", omega.len())));
        }
        let phi = confidence_map(&omega, h)?;
        let alpha = confidence_score(&phi);
        Ok(PredictionOutput {
            logits: None,
            height,
            width,
            omega,
            phi,
            alpha,
            h,
            source,
        })
    }

    pub fn from_logits(logits: Tensor<f32>, h: f64, source: Source) -> Result<Self> {
        let omega = foreground_map(&logits)?;
        let mut out = Self::from_omega(logits.h(), logits.w(), omega, h, source)?;
        out.logits = Some(logits);
        Ok(out)
    }

    pub fn mask(&self, threshold: f64) -> Result<BinaryMask> {
        quantize(&self.omega, self.height, self.width, threshold)
    }
}

/// Per-pixel foreground probability from `1×2×H×W` logits (channel 0 is
/// background), in the overflow-free logistic form.
pub fn foreground_map(logits: &Tensor<f32>) -> Result<Vec<f64>> {
    if logits.n() != 1 || logits.c() != 2 {
        return Err(Error::shape(format!("expected 1x2xHxW logits, got {:?}", logits.shape())));
    }
    Ok(logits
        .plane(0, 0)
        .iter()
        .zip(logits.plane(0, 1))
        .map(|(&bg, &fg)| {
            let d = fg as f64 - bg as f64;
            if d >= 0.0 {
                1.0 / (1.0 + (-d).exp())
            } else {
                let e = d.exp();
                e / (1.0 + e)
            }
        })
        .collect())
}

/// Certainty margin beyond the band `[h, 1-h]`.
pub fn confidence_map(omega: &[f64], h: f64) -> Result<Vec<f64>> {
    if !(0.0..=0.5).contains(&h) {
        return Err(Error::invalid(format!("confidence threshold h = {h} outside [0, 0.5]")));
    }
    Ok(omega
        .iter()
        .map(|&w| {
            if w < h {
                h - w
            } else if w > 1.0 - h {
                w - 1.0 + h
            } else {
                0.0
            }
        })
        .collect())
}

pub fn confidence_score(phi: &[f64]) -> f64 {
    phi.iter().sum()
}

/// The more confident of the two outputs; ties keep the flow output.
pub fn select_output(out_image: PredictionOutput, out_flow: PredictionOutput) -> Result<PredictionOutput> {
    if (out_image.height, out_image.width) != (out_flow.height, out_flow.width) {
        return Err(Error::shape(format!(
            "outputs are {}x{} and {}x{}",
            out_image.height, out_image.width, out_flow.height, out_flow.width
        )));
    }
    if out_image.h != out_flow.h {
        return Err(Error::invalid("outputs use different confidence thresholds"));
    }
    Ok(if out_image.alpha > out_flow.alpha {
        out_image
    } else {
        out_flow
    })
}

/// Foreground iff `ω > threshold`.
pub fn quantize(omega: &[f64], height: usize, width: usize, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid(format!("quantization threshold {threshold} outside (0, 1)")));
    }
    if omega.len() != height * width {
        return Err(Error::shape(format!("{} values for {height}x{width}", omega.len())));
    }
    let data = omega.iter().map(|&w| u8::from(w > threshold)).collect();
    BinaryMask::new(height, width, data)
}

/// How the two inputs reach the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    Image,
    Flow,
    /// Motion input is the mean of image and flow rendering.
    Input,
    /// Motion pyramid is the mean of both motion encodings.
    Feature,
    /// Logits are the mean of the image and flow predictions.
    Output,
}

impl Recipe {
    pub fn source(self) -> Source {
        match self {
            Recipe::Image => Source::Image,
            Recipe::Flow => Source::Flow,
            _ => Source::Fused,
        }
    }
}

fn mean_image(a: &ImageRgb, b: &ImageRgb) -> ImageRgb {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (x + y) / 2.0).collect();
    ImageRgb::from_clamped(a.height(), a.width(), data)
}

/// Logits for one frame at the frame's own size.
pub fn recipe_logits(model: &Network<f32>, image: &ImageRgb, flow: &ImageRgb, recipe: Recipe) -> Result<Tensor<f32>> {
    if (image.height(), image.width()) != (flow.height(), flow.width()) {
        return Err(Error::shape("image and flow rendering differ in size"));
    }
    let x = image.to_tensor();
    match recipe {
        Recipe::Image => model.forward(&x, &x),
        Recipe::Flow => model.forward(&x, &flow.to_tensor()),
        Recipe::Input => model.forward(&x, &mean_image(image, flow).to_tensor()),
        Recipe::Feature => {
            let a = model.encode(&x, Stream::Appearance)?;
            let mi = model.encode(&x, Stream::Motion)?;
            let mf = model.encode(&flow.to_tensor(), Stream::Motion)?;
            let m = fuse(&mi, &mf)?.scale(0.5);
            model.decode(&fuse(&a, &m)?)
        }
        Recipe::Output => {
            let si = model.forward(&x, &x)?;
            let sf = model.forward(&x, &flow.to_tensor())?;
            Ok(si.add(&sf).scale(0.5))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaConfig {
    pub scales: Vec<usize>,
    pub flip: bool,
}

impl TtaConfig {
    /// Scales used with the 64-pixel desk configuration.
    pub fn desk_scale() -> Self {
        TtaConfig {
            scales: vec![48, 64, 112],
            flip: true,
        }
    }
}

/// Nearest multiple of `divisor`, rounding ties down, never below `divisor`.
pub fn round_to_multiple(size: usize, divisor: usize) -> usize {
    let lower = size / divisor * divisor;
    let upper = lower + divisor;
    let pick = if size - lower <= upper - size { lower } else { upper };
    pick.max(divisor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub mode: InferMode,
    /// Side of the square processing resolution.
    pub resolution: usize,
    pub tta: Option<TtaConfig>,
    pub h: f64,
    pub threshold: f64,
}

impl InferOptions {
    pub fn new(mode: InferMode, resolution: usize) -> Self {
        InferOptions {
            mode,
            resolution,
            tta: None,
            h: DEFAULT_H,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Runs `recipe` on every `(scale, flip)` variant and averages the
/// probabilities after undoing the flip and resizing to `height×width`.
/// With a single unflipped variant this is plain inference.
pub fn tta_infer(
    model: &Network<f32>,
    image: &ImageRgb,
    flow: &ImageRgb,
    recipe: Recipe,
    scales: &[usize],
    flip: bool,
    h: f64,
) -> Result<PredictionOutput> {
    if scales.is_empty() {
        return Err(Error::invalid("no inference scales"));
    }
    let (oh, ow) = (image.height(), image.width());
    let div = model.config().size_divisor();
    let flips: &[bool] = if flip { &[false, true] } else { &[false] };
    let mut single = None;
    let mut acc = vec![0.0f64; oh * ow];
    let mut count = 0usize;
    for &scale in scales {
        let s = round_to_multiple(scale, div);
        let (img_s, flow_s) = if (s, s) == (oh, ow) {
            (image.clone(), flow.clone())
        } else {
            (image.resized(s, s, Interp::Bicubic), flow.resized(s, s, Interp::Bicubic))
        };
        for &f in flips {
            let (img_v, flow_v) = if f {
                (img_s.flipped(), flow_s.flipped())
            } else {
                (img_s.clone(), flow_s.clone())
            };
            let logits = recipe_logits(model, &img_v, &flow_v, recipe)?;
            let mut omega = foreground_map(&logits)?;
            if f {
                omega = flip_plane(&omega, s, s);
            }
            if (s, s) != (oh, ow) {
                omega = resize_plane(&omega, s, s, oh, ow, Interp::Bilinear);
            }
            if scales.len() == 1 && !flip {
                single = Some((logits, omega.clone()));
            }
            for (a, w) in acc.iter_mut().zip(&omega) {
                *a += w;
            }
            count += 1;
        }
    }
    if let Some((logits, omega)) = single {
        let mut out = PredictionOutput::from_omega(oh, ow, omega, h, recipe.source())?;
        out.logits = Some(logits);
        return Ok(out);
    }
    let omega = acc.into_iter().map(|a| a / count as f64).collect();
    PredictionOutput::from_omega(oh, ow, omega, h, recipe.source())
}

/// Prediction for one frame with one recipe under `opts` (processing
/// resolution or TTA variants).
pub fn predict(
    model: &Network<f32>,
    image: &ImageRgb,
    flow: &ImageRgb,
    recipe: Recipe,
    opts: &InferOptions,
) -> Result<PredictionOutput> {
    match &opts.tta {
        Some(t) => tta_infer(model, image, flow, recipe, &t.scales, t.flip, opts.h),
        None => tta_infer(model, image, flow, recipe, &[opts.resolution], false, opts.h),
    }
}

/// Outcome of one frame under one mode.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame: String,
    pub mask: BinaryMask,
    pub alpha_image: Option<f64>,
    pub alpha_flow: Option<f64>,
    /// α of a fusion baseline's output.
    pub alpha_fused: Option<f64>,
    pub chosen: Source,
}

pub fn infer_frame(
    model: &Network<f32>,
    frame: &str,
    image: &ImageRgb,
    flow: Option<&ImageRgb>,
    opts: &InferOptions,
) -> Result<FrameResult> {
    let flow = match (flow, opts.mode.needs_flow()) {
        (Some(f), _) => f.clone(),
        (None, false) => image.clone(),
        (None, true) => {
            return Err(Error::MissingFrameFile {
                kind: "flow",
                frame: frame.to_string(),
            })
        }
    };
    let run = |r: Recipe| predict(model, image, &flow, r, opts);
    let (out, alpha_image, alpha_flow, alpha_fused) = match opts.mode {
        InferMode::ImageOnly => {
            let o = run(Recipe::Image)?;
            let a = o.alpha;
            (o, Some(a), None, None)
        }
        InferMode::FlowOnly => {
            let o = run(Recipe::Flow)?;
            let a = o.alpha;
            (o, None, Some(a), None)
        }
        InferMode::Select => {
            let oi = run(Recipe::Image)?;
            let of = run(Recipe::Flow)?;
            let (ai, af) = (oi.alpha, of.alpha);
            (select_output(oi, of)?, Some(ai), Some(af), None)
        }
        m => {
            let recipe = match m {
                InferMode::Input => Recipe::Input,
                InferMode::Feature => Recipe::Feature,
                _ => Recipe::Output,
            };
            let o = run(recipe)?;
            let a = o.alpha;
            (o, None, None, Some(a))
        }
    };
    Ok(FrameResult {
        frame: frame.to_string(),
        mask: out.mask(opts.threshold)?,
        alpha_image,
        alpha_flow,
        alpha_fused,
        chosen: out.source,
    })
}

/// Per-frame α values and chosen sources for a run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SelectionLog {
    pub frames: Vec<FrameResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionSummary {
    pub frames: usize,
    /// Percentage of frames per chosen source; sums to 100 when `frames > 0`.
    pub image_ratio: f64,
    pub flow_ratio: f64,
    pub fused_ratio: f64,
    /// `α_image − α_flow` per frame, where both were computed.
    pub alpha_diff: Vec<f64>,
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|a| a.to_string()).unwrap_or_default()
}

impl SelectionLog {
    pub fn push(&mut self, r: FrameResult) {
        self.frames.push(r);
    }

    pub fn extend(&mut self, other: SelectionLog) {
        self.frames.extend(other.frames);
    }

    pub fn summary(&self) -> SelectionSummary {
        let n = self.frames.len();
        let pct = |s: Source| {
            if n == 0 {
                0.0
            } else {
                100.0 * self.frames.iter().filter(|f| f.chosen == s).count() as f64 / n as f64
            }
        };
        SelectionSummary {
            frames: n,
            image_ratio: pct(Source::Image),
            flow_ratio: pct(Source::Flow),
            fused_ratio: pct(Source::Fused),
            alpha_diff: self
                .frames
                .iter()
                .filter_map(|f| Some(f.alpha_image? - f.alpha_flow?))
                .collect(),
        }
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "frame,alpha_image,alpha_flow,chosen")?;
        for f in &self.frames {
            writeln!(w, "{},{},{},{}", f.frame, opt_num(f.alpha_image), opt_num(f.alpha_flow), f.chosen)?;
        }
        Ok(())
    }

    /// Plot-ready `index,frame,alpha_diff` series.
    pub fn write_alpha_diff_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "index,frame,alpha_diff")?;
        let rows = self
            .frames
            .iter()
            .filter_map(|f| Some((&f.frame, f.alpha_image? - f.alpha_flow?)));
        for (i, (frame, d)) in rows.enumerate() {
            writeln!(w, "{i},{frame},{d}")?;
        }
        Ok(())
    }

    /// Writes `selection.csv`, `selection_summary.json` and `alpha_diff.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let write = |name: &str, f: &dyn Fn(&mut Vec<u8>) -> std::io::Result<()>| -> Result<()> {
            let path = dir.join(name);
            let mut buf = Vec::new();
            f(&mut buf).map_err(|e| Error::io(&path, e))?;
            std::fs::write(&path, buf).map_err(|e| Error::io(&path, e))
        };
        write("selection.csv", &|b| self.write_csv(b))?;
        write("alpha_diff.csv", &|b| self.write_alpha_diff_csv(b))?;
        let json = serde_json::to_vec_pretty(&self.summary())?;
        write("selection_summary.json", &|b| b.write_all(&json))
    }
}

/// Frame-by-frame inference over a sequence; masks come back at each frame's
/// original size.
pub fn infer_sequence(
    model: &Network<f32>,
    seq: &VosSequence,
    opts: &InferOptions,
) -> Result<(Vec<BinaryMask>, SelectionLog)> {
    let mut masks = Vec::with_capacity(seq.len());
    let mut log = SelectionLog::default();
    for s in &seq.samples {
        let r = infer_frame(model, &s.name, &s.image, s.flow.as_ref(), opts)?;
        masks.push(r.mask.clone());
        log.push(r);
    }
    Ok((masks, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::NetConfig;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits_with_diff(d: &[f32]) -> Tensor<f32> {
        let mut data = vec![0.0; d.len()];
        data.extend_from_slice(d);
        Tensor::from_vec([1, 2, 1, d.len()], data)
    }

    #[test]
    fn foreground_map_examples() {
        let w = foreground_map(&logits_with_diff(&[0.0, 9f32.ln(), 1000.0, -1000.0])).unwrap();
        assert_eq!(w[0], 0.5);
        assert!((w[1] - 0.9).abs() < 1e-6);
        assert_eq!(w[2], 1.0);
        assert_eq!(w[3], 0.0);
    }

    #[test]
    fn confidence_branches() {
        let phi = confidence_map(&[0.5, 0.02, 0.98], 0.05).unwrap();
        assert_eq!(phi[0], 0.0);
        assert!((phi[1] - 0.03).abs() < 1e-12);
        assert!((phi[2] - 0.03).abs() < 1e-12);
        assert!(confidence_map(&[0.5], 0.6).is_err());
        assert!(confidence_map(&[0.5], -0.1).is_err());
    }

    #[test]
    fn two_by_two_alpha_fixture() {
        let phi = confidence_map(&[0.01, 0.99, 0.5, 0.96], 0.05).unwrap();
        for (p, e) in phi.iter().zip([0.04, 0.04, 0.0, 0.01]) {
            assert!((p - e).abs() < 1e-12);
        }
        assert!((confidence_score(&phi) - 0.09).abs() < 1e-9);
    }

    #[test]
    fn extreme_maps_reach_the_upper_bound() {
        let omega = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0];
        let a = confidence_score(&confidence_map(&omega, 0.05).unwrap());
        assert!((a - 0.05 * 6.0).abs() < 1e-12);
        assert_eq!(confidence_score(&[0.0; 4]), 0.0);
    }

    fn output(alpha_src: &[f64], source: Source) -> PredictionOutput {
        PredictionOutput::from_omega(1, alpha_src.len(), alpha_src.to_vec(), 0.05, source).unwrap()
    }

    #[test]
    fn selection_picks_larger_alpha_and_flow_on_ties() {
        let img = output(&[0.01, 0.5], Source::Image);
        let flow = output(&[0.01, 0.0], Source::Flow);
        assert_eq!(select_output(img.clone(), flow.clone()).unwrap().source, Source::Flow);
        let flow_tie = output(&[0.5, 0.01], Source::Flow);
        assert_eq!(img.alpha, flow_tie.alpha);
        assert_eq!(select_output(img.clone(), flow_tie).unwrap().source, Source::Flow);
        let flow_low = output(&[0.5, 0.5], Source::Flow);
        let chosen = select_output(img.clone(), flow_low).unwrap();
        assert_eq!(chosen, img);
        let wrong = output(&[0.5], Source::Flow);
        assert!(select_output(img, wrong).is_err());
    }

    #[test]
    fn quantize_is_strict() {
        let m = quantize(&[0.5, 0.5000001, 0.0, 1.0], 2, 2, 0.5).unwrap();
        assert_eq!(m.data(), &[0, 1, 0, 1]);
        assert!(quantize(&[0.5], 1, 1, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn alpha_stays_within_bounds(omega in prop::collection::vec(0.0f64..=1.0, 1..64), h in 0.0f64..=0.5) {
            let a = confidence_score(&confidence_map(&omega, h).unwrap());
            prop_assert!(a >= 0.0);
            prop_assert!(a <= h * omega.len() as f64 + 1e-12);
        }

        #[test]
        fn pushing_towards_extremes_never_lowers_alpha(
            omega in prop::collection::vec(0.0f64..=1.0, 1..32),
            idx in any::<prop::sample::Index>(),
            t in 0.0f64..=1.0,
        ) {
            let i = idx.index(omega.len());
            let mut pushed = omega.clone();
            let target = if omega[i] < 0.5 { 0.0 } else { 1.0 };
            pushed[i] = omega[i] + t * (target - omega[i]);
            let a = confidence_score(&confidence_map(&omega, 0.05).unwrap());
            let b = confidence_score(&confidence_map(&pushed, 0.05).unwrap());
            prop_assert!(b >= a - 1e-12);
        }

        #[test]
        fn foreground_map_is_shift_invariant(d in prop::collection::vec(-20.0f32..20.0, 1..16), s in -100.0f32..100.0) {
            let base = logits_with_diff(&d);
            let shifted = base.map(|v| v + s);
            let a = foreground_map(&base).unwrap();
            let b = foreground_map(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-6);
            }
        }

        #[test]
        fn quantize_matches_scalar_loop(omega in prop::collection::vec(0.0f64..=1.0, 16)) {
            let m = quantize(&omega, 4, 4, 0.5).unwrap();
            for (i, &w) in omega.iter().enumerate() {
                prop_assert_eq!(m.data()[i] == 1, w > 0.5);
            }
        }
    }

    fn model() -> Network<f32> {
        let cfg = NetConfig {
            channels: vec![4, 6, 8, 8],
            decoder_width: 6,
        };
        Network::new(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    fn random_image(seed: u64, side: usize) -> ImageRgb {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageRgb::new(side, side, (0..3 * side * side).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn degenerate_fusion_equals_single_source() {
        let net = model();
        let img = random_image(1, 32);
        let single = recipe_logits(&net, &img, &img, Recipe::Image).unwrap();
        for r in [Recipe::Input, Recipe::Feature, Recipe::Output, Recipe::Flow] {
            let fused = recipe_logits(&net, &img, &img, r).unwrap();
            assert!(fused.max_abs_diff(&single) < 1e-5, "{r:?}");
        }
    }

    #[test]
    fn input_fusion_averages_inputs() {
        let net = model();
        let img = random_image(1, 32);
        let flow = random_image(2, 32);
        let mut avg = vec![0.0f32; img.data().len()];
        for i in 0..avg.len() {
            avg[i] = (img.data()[i] + flow.data()[i]) / 2.0;
        }
        let expect = net.forward(&img.to_tensor(), &Tensor::from_vec([1, 3, 32, 32], avg)).unwrap();
        let got = recipe_logits(&net, &img, &flow, Recipe::Input).unwrap();
        assert_eq!(got, expect);
    }

    #[test]
    fn output_fusion_averages_logits() {
        let net = model();
        let img = random_image(1, 32);
        let flow = random_image(2, 32);
        let si = recipe_logits(&net, &img, &flow, Recipe::Image).unwrap();
        let sf = recipe_logits(&net, &img, &flow, Recipe::Flow).unwrap();
        let so = recipe_logits(&net, &img, &flow, Recipe::Output).unwrap();
        for i in 0..so.data().len() {
            assert!((so.data()[i] - (si.data()[i] + sf.data()[i]) / 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_scale_tta_is_plain_inference() {
        let net = model();
        let img = random_image(4, 32);
        let flow = random_image(5, 32);
        let plain = foreground_map(&recipe_logits(&net, &img, &flow, Recipe::Flow).unwrap()).unwrap();
        let tta = tta_infer(&net, &img, &flow, Recipe::Flow, &[32], false, 0.05).unwrap();
        assert_eq!(tta.omega, plain);
        assert!(tta.logits.is_some());
    }

    #[test]
    fn mirror_symmetric_input_has_identical_flip_member() {
        let net = model();
        let base = random_image(6, 32);
        let sym = mean_image(&base, &base.flipped());
        assert_eq!(sym.flipped(), sym);
        let plain = recipe_logits(&net, &sym, &sym, Recipe::Flow).unwrap();
        let flipped = recipe_logits(&net, &sym.flipped(), &sym.flipped(), Recipe::Flow).unwrap();
        assert_eq!(plain, flipped);
        // the ensemble is the mean of the member and its un-flipped twin
        let w = foreground_map(&plain).unwrap();
        let back = flip_plane(&w, 32, 32);
        let both = tta_infer(&net, &sym, &sym, Recipe::Flow, &[32], true, 0.05).unwrap();
        for i in 0..w.len() {
            assert!((both.omega[i] - (w[i] + back[i]) / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn multi_scale_tta_stays_in_unit_interval() {
        let net = model();
        let img = random_image(7, 40);
        let out = tta_infer(&net, &img, &img, Recipe::Image, &[48, 64, 112], true, 0.05).unwrap();
        assert_eq!(out.omega.len(), 40 * 40);
        assert!(out.omega.iter().all(|w| (0.0..=1.0).contains(w)));
        assert!(out.logits.is_none());
    }

    #[test]
    fn rounding_to_the_size_divisor() {
        assert_eq!(round_to_multiple(48, 32), 32);
        assert_eq!(round_to_multiple(64, 32), 64);
        assert_eq!(round_to_multiple(112, 32), 96);
        assert_eq!(round_to_multiple(50, 32), 64);
        assert_eq!(round_to_multiple(5, 32), 32);
    }

    #[test]
    fn select_frame_matches_the_better_single_mode() {
        let net = model();
        for seed in 0..4 {
            let img = random_image(10 + seed, 32);
            let flow = random_image(20 + seed, 32);
            let run = |m| infer_frame(&net, "f", &img, Some(&flow), &InferOptions::new(m, 32)).unwrap();
            let (sel, fo, io) = (run(InferMode::Select), run(InferMode::FlowOnly), run(InferMode::ImageOnly));
            let expect = if io.alpha_image > fo.alpha_flow { &io } else { &fo };
            assert_eq!(sel.mask, expect.mask);
            assert_eq!(sel.alpha_image, io.alpha_image);
            assert_eq!(sel.alpha_flow, fo.alpha_flow);
        }
    }

    #[test]
    fn modes_parse_and_ratios_sum_to_hundred() {
        for m in InferMode::ALL {
            assert_eq!(m.name().parse::<InferMode>().unwrap(), m);
        }
        assert!("both".parse::<InferMode>().is_err());
        let mut log = SelectionLog::default();
        for (i, src) in [Source::Image, Source::Flow, Source::Flow].into_iter().enumerate() {
            log.push(FrameResult {
                frame: format!("s/{i}"),
                mask: BinaryMask::zeros(1, 1),
                alpha_image: Some(i as f64),
                alpha_flow: Some(1.0),
                alpha_fused: None,
                chosen: src,
            });
        }
        let s = log.summary();
        assert!((s.image_ratio + s.flow_ratio + s.fused_ratio - 100.0).abs() < 1e-9);
        assert_eq!(s.alpha_diff, vec![-1.0, 0.0, 1.0]);
        let mut csv = Vec::new();
        log.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().next(), Some("frame,alpha_image,alpha_flow,chosen"));
        assert_eq!(text.lines().nth(1), Some("s/0,0,1,image"));
    }
}
