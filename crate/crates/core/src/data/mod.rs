//! Dataset layouts, resizing rules and collaborative VOS+SOD batch sampling.
//!
//! VOS roots follow the DAVIS layout:
//!
//! ```text
//! root/JPEGImages/<seq>/00000.jpg   (or .png)
//! root/Annotations/<seq>/00000.png
//! root/Flows/<seq>/00000.flo
//! ```
//!
//! SOD roots hold flat `Images/<stem>.jpg|png` and `Masks/<stem>.png` pairs.

mod synth;

pub use synth::{
    generate_synthetic_dataset, Background, Scene, ShapeKind, ShapeSpec, SynthConfig,
};

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::flow::{flow_to_rgb, read_flo, write_flo, FlowField};
use crate::imgproc::{resize_plane, Interp};
use crate::tensor::Tensor;
use crate::types::{BinaryMask, ImageRgb};

pub const IMAGES_DIR: &str = "JPEGImages";
pub const ANNOTATIONS_DIR: &str = "Annotations";
pub const FLOWS_DIR: &str = "Flows";
pub const SOD_IMAGES_DIR: &str = "Images";
pub const SOD_MASKS_DIR: &str = "Masks";

/// Threshold applied to `[0,1]`-normalized SOD masks.
pub const MASK_THRESHOLD: f32 = 0.5;

/// Smallest training/processing resolution accepted by [`resize_sample`].
pub const MIN_RESOLUTION: usize = 16;

/// Motion validity index of a sample carrying real flow.
pub const VALID_MOTION: u8 = 1;

/// One training or inference unit.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub name: String,
    pub image: ImageRgb,
    /// Color rendering of the flow; `None` means the void (all-zero) slot.
    pub flow: Option<ImageRgb>,
    pub mask: BinaryMask,
    /// 1 when `flow` holds a real rendering, 0 for image-only samples.
    pub validity: u8,
}

impl Sample {
    pub fn vos(name: String, image: ImageRgb, flow: ImageRgb, mask: BinaryMask) -> Self {
        Sample {
            name,
            image,
            flow: Some(flow),
            mask,
            validity: VALID_MOTION,
        }
    }

    pub fn sod(name: String, image: ImageRgb, mask: BinaryMask) -> Self {
        Sample {
            name,
            image,
            flow: None,
            mask,
            validity: 0,
        }
    }

    pub fn check(&self) -> Result<()> {
        let (h, w) = (self.image.height(), self.image.width());
        if (self.mask.height(), self.mask.width()) != (h, w) {
            return Err(Error::shape(format!("{}: mask size differs from image", self.name)));
        }
        match (&self.flow, self.validity) {
            (Some(f), 1) if (f.height(), f.width()) == (h, w) => Ok(()),
            (Some(_), 1) => Err(Error::shape(format!("{}: flow size differs from image", self.name))),
            (None, 0) => Ok(()),
            _ => Err(Error::invalid(format!(
                "{}: validity {} inconsistent with flow presence",
                self.name, self.validity
            ))),
        }
    }

    /// The flow slot: the rendering, or zeros of the image size for SOD samples.
    pub fn motion_slot(&self) -> ImageRgb {
        self.flow
            .clone()
            .unwrap_or_else(|| ImageRgb::zeros(self.image.height(), self.image.width()))
    }
}

/// A frame-ordered VOS sequence with its raw flow fields.
#[derive(Clone, Debug)]
pub struct VosSequence {
    pub name: String,
    pub samples: Vec<Sample>,
    pub flows: Vec<FlowField>,
    /// Frames that carry a ground-truth annotation.
    pub annotated: Vec<bool>,
}

impl VosSequence {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Replaces the flow of frame `t`, re-rendering its motion slot.
    pub fn set_flow(&mut self, t: usize, flow: FlowField, max_mag: Option<f32>) {
        self.samples[t].flow = Some(flow_to_rgb(&flow, max_mag));
        self.flows[t] = flow;
    }
}

#[derive(Clone, Debug)]
pub struct LoadOptions {
    /// Normalization for flow rendering; `None` normalizes per frame.
    pub flow_max_mag: Option<f32>,
    /// Fail when a frame has no annotation (training); otherwise missing
    /// annotations become empty masks flagged in [`VosSequence::annotated`].
    pub require_masks: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            flow_max_mag: None,
            require_masks: true,
        }
    }
}

fn read_dir_sorted(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    Ok(entries)
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("jpg" | "jpeg" | "png")
    )
}

fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Loads a DAVIS-style VOS root; every frame must have an annotation and a flow.
pub fn load_vos_dataset(root: &Path) -> Result<Vec<VosSequence>> {
    load_vos_dataset_with(root, &LoadOptions::default())
}

pub fn load_vos_dataset_with(root: &Path, opts: &LoadOptions) -> Result<Vec<VosSequence>> {
    let images = root.join(IMAGES_DIR);
    if !images.is_dir() {
        return Err(Error::EmptyDataset {
            root: root.to_path_buf(),
        });
    }
    let mut sequences = Vec::new();
    for seq_dir in read_dir_sorted(&images)?.into_iter().filter(|p| p.is_dir()) {
        let seq = seq_dir
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let mut samples = Vec::new();
        let mut flows = Vec::new();
        let mut annotated = Vec::new();
        for frame in read_dir_sorted(&seq_dir)?.into_iter().filter(|p| is_image(p)) {
            let id = stem(&frame);
            let label = format!("{seq}/{id}");
            let image = ImageRgb::load(&frame)?;
            let mask_path = root.join(ANNOTATIONS_DIR).join(&seq).join(format!("{id}.png"));
            let (mask, has_mask) = if mask_path.is_file() {
                // any nonzero label is foreground
                (BinaryMask::load(&mask_path, 0.0)?, true)
            } else if opts.require_masks {
                return Err(Error::MissingFrameFile {
                    kind: "annotation",
                    frame: label,
                });
            } else {
                (BinaryMask::zeros(image.height(), image.width()), false)
            };
            let flow_path = root.join(FLOWS_DIR).join(&seq).join(format!("{id}.flo"));
            if !flow_path.is_file() {
                return Err(Error::MissingFrameFile {
                    kind: "flow",
                    frame: label,
                });
            }
            let flow = read_flo(&flow_path)?;
            if (flow.height, flow.width) != (image.height(), image.width()) {
                return Err(Error::shape(format!(
                    "{label}: flow is {}x{}, image is {}x{}",
                    flow.width,
                    flow.height,
                    image.width(),
                    image.height()
                )));
            }
            let sample = Sample::vos(label, image, flow_to_rgb(&flow, opts.flow_max_mag), mask);
            sample.check()?;
            samples.push(sample);
            flows.push(flow);
            annotated.push(has_mask);
        }
        if samples.is_empty() {
            continue;
        }
        let len = samples.len();
        for (t, f) in flows.iter_mut().enumerate() {
            if len >= 2 {
                let (s, tgt) = crate::flow::pair_frames(t, len)?;
                f.source_frame = s;
                f.target_frame = tgt;
            }
        }
        sequences.push(VosSequence {
            name: seq,
            samples,
            flows,
            annotated,
        });
    }
    if sequences.is_empty() {
        return Err(Error::EmptyDataset {
            root: root.to_path_buf(),
        });
    }
    Ok(sequences)
}

/// Loads a DUTS-style SOD root of paired images and masks.
pub fn load_sod_dataset(root: &Path) -> Result<Vec<Sample>> {
    let collect = |dir: PathBuf| -> Result<BTreeMap<String, PathBuf>> {
        if !dir.is_dir() {
            return Err(Error::EmptyDataset {
                root: root.to_path_buf(),
            });
        }
        Ok(read_dir_sorted(&dir)?
            .into_iter()
            .filter(|p| is_image(p))
            .map(|p| (stem(&p), p))
            .collect())
    };
    let images = collect(root.join(SOD_IMAGES_DIR))?;
    let masks = collect(root.join(SOD_MASKS_DIR))?;
    if let Some(stem) = masks.keys().find(|k| !images.contains_key(*k)) {
        return Err(Error::Unpaired {
            stem: stem.clone(),
            reason: "mask without image",
        });
    }
    let mut samples = Vec::with_capacity(images.len());
    for (stem, image_path) in &images {
        let mask_path = masks.get(stem).ok_or_else(|| Error::Unpaired {
            stem: stem.clone(),
            reason: "image without mask",
        })?;
        let image = ImageRgb::load(image_path)?;
        let mask = BinaryMask::load(mask_path, MASK_THRESHOLD)?;
        let sample = Sample::sod(stem.clone(), image, mask);
        sample.check()?;
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset {
            root: root.to_path_buf(),
        });
    }
    Ok(samples)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes sequences in the VOS layout (PNG frames, PNG masks, `.flo` flows).
pub fn write_vos_dataset(root: &Path, sequences: &[VosSequence]) -> Result<()> {
    for seq in sequences {
        let img_dir = root.join(IMAGES_DIR).join(&seq.name);
        let ann_dir = root.join(ANNOTATIONS_DIR).join(&seq.name);
        let flo_dir = root.join(FLOWS_DIR).join(&seq.name);
        for d in [&img_dir, &ann_dir, &flo_dir] {
            ensure_dir(d)?;
        }
        for (t, (sample, flow)) in seq.samples.iter().zip(&seq.flows).enumerate() {
            let id = format!("{t:05}");
            sample.image.save_png(&img_dir.join(format!("{id}.png")))?;
            if seq.annotated.get(t).copied().unwrap_or(true) {
                sample.mask.save_png(&ann_dir.join(format!("{id}.png")))?;
            }
            write_flo(flow, &flo_dir.join(format!("{id}.flo")))?;
        }
    }
    Ok(())
}

/// Writes samples in the SOD layout.
pub fn write_sod_dataset(root: &Path, samples: &[Sample]) -> Result<()> {
    let img_dir = root.join(SOD_IMAGES_DIR);
    let mask_dir = root.join(SOD_MASKS_DIR);
    ensure_dir(&img_dir)?;
    ensure_dir(&mask_dir)?;
    for s in samples {
        s.image.save_png(&img_dir.join(format!("{}.png", s.name)))?;
        s.mask.save_png(&mask_dir.join(format!("{}.png", s.name)))?;
    }
    Ok(())
}

/// Quantizes resampled mask values back to {0, 1}.
pub fn quantize_mask(height: usize, width: usize, values: &[f32]) -> BinaryMask {
    BinaryMask::from_threshold(height, width, values, MASK_THRESHOLD)
}

/// Resizes a sample to `res×res`.
///
/// Images and flow renderings use bicubic interpolation clamped to `[0,1]`.
/// VOS masks use nearest-neighbor; SOD masks use bicubic interpolation
/// followed by quantization at 0.5.
pub fn resize_sample(sample: &Sample, res: usize) -> Result<Sample> {
    if res < MIN_RESOLUTION {
        return Err(Error::invalid(format!(
            "resolution {res} below minimum {MIN_RESOLUTION}"
        )));
    }
    let (h, w) = (sample.mask.height(), sample.mask.width());
    let mask = if sample.validity == VALID_MOTION {
        let v = resize_plane(&sample.mask.to_f32(), h, w, res, res, Interp::Nearest);
        quantize_mask(res, res, &v)
    } else {
        let v = resize_plane(&sample.mask.to_f32(), h, w, res, res, Interp::Bicubic);
        quantize_mask(res, res, &v)
    };
    Ok(Sample {
        name: sample.name.clone(),
        image: sample.image.resized(res, res, Interp::Bicubic),
        flow: sample.flow.as_ref().map(|f| f.resized(res, res, Interp::Bicubic)),
        mask,
        validity: sample.validity,
    })
}

/// A batch assembled with the motion-validity indexing trick.
#[derive(Clone, Debug)]
pub struct TrainingBatch {
    pub images: Tensor<f32>,
    /// `i·flow + (1−i)·image` per sample.
    pub motion_inputs: Tensor<f32>,
    pub masks: Tensor<f32>,
    /// Motion validity index per sample (`B×1×1×1`).
    pub indices: Tensor<f32>,
    /// Sample names, for diagnostics.
    pub provenance: Vec<String>,
}

impl TrainingBatch {
    pub fn len(&self) -> usize {
        self.images.n()
    }

    pub fn is_empty(&self) -> bool {
        self.images.n() == 0
    }

    pub fn sod_count(&self) -> usize {
        self.indices.data().iter().filter(|&&i| i == 0.0).count()
    }
}

/// `m = i·flow + (1−i)·image`, evaluated element-wise per sample.
pub fn assemble_motion_inputs(
    images: &Tensor<f32>,
    flows: &Tensor<f32>,
    indices: &Tensor<f32>,
) -> Tensor<f32> {
    assert_eq!(images.shape(), flows.shape());
    assert_eq!(indices.n(), images.n());
    let mut out = Tensor::zeros(images.shape());
    for b in 0..images.n() {
        let i = indices.data()[b];
        for ((o, &f), &x) in out.sample_mut(b).iter_mut().zip(flows.sample(b)).zip(images.sample(b)) {
            *o = i * f + (1.0 - i) * x;
        }
    }
    out
}

/// Builds a batch from already-resized samples of equal size.
pub fn collate(samples: &[Sample]) -> Result<TrainingBatch> {
    if samples.is_empty() {
        return Err(Error::invalid("cannot collate an empty batch"));
    }
    let (h, w) = (samples[0].image.height(), samples[0].image.width());
    let mut images = Vec::with_capacity(samples.len());
    let mut flows = Vec::with_capacity(samples.len());
    let mut masks = Vec::with_capacity(samples.len());
    for s in samples {
        s.check()?;
        if (s.image.height(), s.image.width()) != (h, w) {
            return Err(Error::shape(format!("{}: batch members differ in size", s.name)));
        }
        images.push(s.image.to_tensor());
        flows.push(s.motion_slot().to_tensor());
        masks.push(Tensor::from_vec([1, 1, h, w], s.mask.to_f32()));
    }
    let images = Tensor::stack(&images);
    let flows = Tensor::stack(&flows);
    let indices = Tensor::from_vec(
        [samples.len(), 1, 1, 1],
        samples.iter().map(|s| s.validity as f32).collect(),
    );
    Ok(TrainingBatch {
        motion_inputs: assemble_motion_inputs(&images, &flows, &indices),
        images,
        masks: Tensor::stack(&masks),
        indices,
        provenance: samples.iter().map(|s| s.name.clone()).collect(),
    })
}

/// Draws `batch_size` samples, each from SOD with probability `p_sod` and from
/// VOS otherwise, resizes them to `res×res` and collates them.
pub fn sample_training_batch(
    vos: &[Sample],
    sod: &[Sample],
    p_sod: f64,
    batch_size: usize,
    res: usize,
    rng: &mut impl Rng,
) -> Result<TrainingBatch> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if !(0.0..=1.0).contains(&p_sod) {
        return Err(Error::invalid(format!("p_sod {p_sod} outside [0,1]")));
    }
    if (p_sod > 0.0 && sod.is_empty()) || (p_sod < 1.0 && vos.is_empty()) {
        return Err(Error::invalid("sampling from an empty dataset"));
    }
    let mut picked = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let from_sod = rng.random_bool(p_sod);
        let pool = if from_sod { sod } else { vos };
        let s = &pool[rng.random_range(0..pool.len())];
        picked.push(resize_sample(s, res)?);
    }
    collate(&picked)
}
