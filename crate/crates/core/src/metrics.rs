//! Region similarity J, boundary accuracy F and their mean G.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ANNOTATIONS_DIR;
use crate::error::{Error, Result};
use crate::selection::SelectionSummary;
use crate::types::BinaryMask;

fn same_size(gt: &BinaryMask, pred: &BinaryMask) -> Result<()> {
    if (gt.height(), gt.width()) != (pred.height(), pred.width()) {
        return Err(Error::shape(format!(
            "ground truth is {}x{}, prediction is {}x{}",
            gt.height(),
            gt.width(),
            pred.height(),
            pred.width()
        )));
    }
    Ok(())
}

/// Intersection over union; 1 when both masks are empty.
pub fn jaccard(gt: &BinaryMask, pred: &BinaryMask) -> Result<f64> {
    same_size(gt, pred)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&a, &b) in gt.data().iter().zip(pred.data()) {
        inter += (a & b) as usize;
        union += (a | b) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Foreground pixels with a background 4-neighbour; outside the image counts
/// as background.
pub fn boundary_map(mask: &BinaryMask) -> Vec<bool> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) == 0 {
                continue;
            }
            let bg = |yy: isize, xx: isize| {
                yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize || mask.get(yy as usize, xx as usize) == 0
            };
            let (yi, xi) = (y as isize, x as isize);
            out[y * w + x] = bg(yi - 1, xi) || bg(yi + 1, xi) || bg(yi, xi - 1) || bg(yi, xi + 1);
        }
    }
    out
}

/// Dilation by a disk of radius `r` (offsets with `dx²+dy² ≤ r²`).
fn dilate(map: &[bool], h: usize, w: usize, r: usize) -> Vec<bool> {
    let r = r as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let mut out = vec![false; h * w];
    for y in 0..h {
        for x in 0..w {
            if !map[y * w + x] {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y as isize + dy, x as isize + dx);
                if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w {
                    out[yy as usize * w + xx as usize] = true;
                }
            }
        }
    }
    out
}

/// `ceil(0.008 · diagonal)`.
pub fn default_tolerance(height: usize, width: usize) -> usize {
    (0.008 * ((height * height + width * width) as f64).sqrt()).ceil() as usize
}

/// Boundary precision, recall and F-measure with tolerance `tol_px`
/// (default [`default_tolerance`]).
pub fn boundary_prf(gt: &BinaryMask, pred: &BinaryMask, tol_px: Option<usize>) -> Result<(f64, f64, f64)> {
    same_size(gt, pred)?;
    let (h, w) = (gt.height(), gt.width());
    let tol = tol_px.unwrap_or_else(|| default_tolerance(h, w));
    let bg = boundary_map(gt);
    let bp = boundary_map(pred);
    let ng = bg.iter().filter(|&&b| b).count();
    let np = bp.iter().filter(|&&b| b).count();
    match (ng, np) {
        (0, 0) => return Ok((1.0, 1.0, 1.0)),
        (0, _) | (_, 0) => return Ok((0.0, 0.0, 0.0)),
        _ => {}
    }
    let gd = dilate(&bg, h, w, tol);
    let pd = dilate(&bp, h, w, tol);
    let matched_pred = bp.iter().zip(&gd).filter(|(&b, &d)| b && d).count();
    let matched_gt = bg.iter().zip(&pd).filter(|(&b, &d)| b && d).count();
    let p = matched_pred as f64 / np as f64;
    let r = matched_gt as f64 / ng as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f))
}

pub fn boundary_f(gt: &BinaryMask, pred: &BinaryMask, tol_px: Option<usize>) -> Result<f64> {
    Ok(boundary_prf(gt, pred, tol_px)?.2)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub j: f64,
    pub f: f64,
    pub g: f64,
}

impl Scores {
    pub fn new(j: f64, f: f64) -> Self {
        Scores { j, f, g: (j + f) / 2.0 }
    }

    /// Unweighted mean; `None` for an empty slice.
    pub fn mean<'a>(items: impl IntoIterator<Item = &'a Scores>) -> Option<Scores> {
        let (mut j, mut f, mut n) = (0.0, 0.0, 0usize);
        for s in items {
            j += s.j;
            f += s.f;
            n += 1;
        }
        (n > 0).then(|| Scores::new(j / n as f64, f / n as f64))
    }
}

pub fn score_frame(gt: &BinaryMask, pred: &BinaryMask) -> Result<Scores> {
    Ok(Scores::new(jaccard(gt, pred)?, boundary_f(gt, pred, None)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameScore {
    pub sequence: String,
    pub frame: String,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceScore {
    pub name: String,
    pub frames: usize,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_frame: Vec<FrameScore>,
    pub per_sequence: Vec<SequenceScore>,
    pub dataset: Scores,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection_stats: Option<SelectionSummary>,
}

impl EvalReport {
    /// Aggregates frame scores: mean over frames per sequence, then mean over
    /// sequences. Sequences appear in order of first occurrence.
    pub fn from_frames(per_frame: Vec<FrameScore>) -> Self {
        let mut order: Vec<&str> = Vec::new();
        let mut groups: BTreeMap<&str, Vec<&Scores>> = BTreeMap::new();
        for f in &per_frame {
            if !groups.contains_key(f.sequence.as_str()) {
                order.push(&f.sequence);
            }
            groups.entry(&f.sequence).or_default().push(&f.scores);
        }
        let per_sequence: Vec<SequenceScore> = order
            .iter()
            .map(|name| {
                let g = &groups[name];
                SequenceScore {
                    name: name.to_string(),
                    frames: g.len(),
                    scores: Scores::mean(g.iter().copied()).expect("non-empty group"),
                }
            })
            .collect();
        let dataset = Scores::mean(per_sequence.iter().map(|s| &s.scores)).unwrap_or_default();
        EvalReport {
            per_frame,
            per_sequence,
            dataset,
            selection_stats: None,
        }
    }

    /// Mean of sequence scores grouped by the part of the name before `sep`.
    pub fn group_by_prefix(&self, sep: char) -> BTreeMap<String, Scores> {
        let mut groups: BTreeMap<String, Vec<&Scores>> = BTreeMap::new();
        for s in &self.per_sequence {
            let key = s.name.split(sep).next().unwrap_or(&s.name).to_string();
            groups.entry(key).or_default().push(&s.scores);
        }
        groups
            .into_iter()
            .map(|(k, v)| (k, Scores::mean(v).expect("non-empty group")))
            .collect()
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "sequence,frame,j,f,g")?;
        for r in &self.per_frame {
            writeln!(w, "{},{},{},{},{}", r.sequence, r.frame, r.scores.j, r.scores.f, r.scores.g)?;
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec_pretty(self)?;
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    v.sort();
    Ok(v)
}

/// Scores predicted masks in `pred_root/<seq>/<frame>.png` against
/// `gt_root/Annotations/<seq>/<frame>.png`. Frames without an annotation are
/// not scored; an annotated frame without a prediction is an error.
pub fn evaluate_dataset(pred_root: &Path, gt_root: &Path) -> Result<EvalReport> {
    let ann = gt_root.join(ANNOTATIONS_DIR);
    let mut frames = Vec::new();
    for seq_dir in sorted_entries(&ann)? {
        if !seq_dir.is_dir() {
            continue;
        }
        let seq = seq_dir.file_name().unwrap().to_string_lossy().to_string();
        for gt_path in sorted_entries(&seq_dir)? {
            if gt_path.extension().and_then(|e| e.to_str()) != Some("png") {
                continue;
            }
            let stem = gt_path.file_stem().unwrap().to_string_lossy().to_string();
            let pred_path = pred_root.join(&seq).join(format!("{stem}.png"));
            if !pred_path.exists() {
                return Err(Error::MissingFrameFile {
                    kind: "prediction",
                    frame: format!("{seq}/{stem}"),
                });
            }
            let gt = BinaryMask::load(&gt_path, 0.0)?;
            let pred = BinaryMask::load(&pred_path, 0.0)?;
            frames.push(FrameScore {
                sequence: seq.clone(),
                frame: stem,
                scores: score_frame(&gt, &pred)?,
            });
        }
    }
    if frames.is_empty() {
        return Err(Error::EmptyDataset { root: ann });
    }
    Ok(EvalReport::from_frames(frames))
}
