//! Cross-entropy objective, Adam updates and the collaborative training loop.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::save_checkpoint;
use crate::data::{resize_sample, sample_training_batch, Sample, TrainingBatch, VosSequence};
use crate::error::{Error, Result};
use crate::network::{NetConfig, Network};
use crate::nn::{Module, NormMode, ParamKind};
use crate::tensor::{Scalar, Tensor};
use crate::types::BinaryMask;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub resolution: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub steps: usize,
    pub p_sod: f64,
    pub seed: u64,
    /// Keep normalization statistics and affine parameters fixed.
    pub freeze_norm: bool,
    pub net: NetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            resolution: 384,
            batch_size: 16,
            learning_rate: 1e-5,
            steps: 1000,
            p_sod: 0.75,
            seed: 0,
            freeze_norm: true,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings sized for a CPU and a toy backbone trained from scratch.
    pub fn desk_scale() -> Self {
        TrainConfig {
            resolution: 64,
            batch_size: 8,
            learning_rate: 1e-3,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.net.check_input(self.resolution, self.resolution)?;
        if self.steps == 0 {
            return Err(Error::invalid("steps must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.p_sod) {
            return Err(Error::invalid(format!("p_sod {} outside [0,1]", self.p_sod)));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!("learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    /// Checkpoint every tenth of the run.
    pub fn checkpoint_every(&self) -> usize {
        (self.steps / 10).max(1)
    }
}

/// Pixel-mean cross-entropy of `N×2×H×W` logits against `N×1×H×W` binary
/// masks, with its gradient with respect to the logits.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    masks: &Tensor<T>,
) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = logits.shape();
    if c != 2 || masks.shape() != [n, 1, h, w] {
        return Err(Error::shape(format!(
            "logits {:?} vs masks {:?}",
            logits.shape(),
            masks.shape()
        )));
    }
    let count = (n * h * w) as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut total = 0.0;
    for b in 0..n {
        for p in 0..h * w {
            let label = masks.sample(b)[p].as_f64();
            let fg = match label {
                l if l == 0.0 => false,
                l if l == 1.0 => true,
                l => {
                    return Err(Error::NonBinaryMask {
                        value: l as f32,
                        index: b * h * w + p,
                    })
                }
            };
            let bg_l = logits.plane(b, 0)[p].as_f64();
            let fg_l = logits.plane(b, 1)[p].as_f64();
            let m = bg_l.max(fg_l);
            let lse = m + ((bg_l - m).exp() + (fg_l - m).exp()).ln();
            total += lse - if fg { fg_l } else { bg_l };
            let p_fg = (fg_l - lse).exp();
            let p_bg = (bg_l - lse).exp();
            let target = if fg { 1.0 } else { 0.0 };
            grad.plane_mut(b, 0)[p] = T::lit((p_bg - (1.0 - target)) / count);
            grad.plane_mut(b, 1)[p] = T::lit((p_fg - target) / count);
        }
    }
    Ok((total / count, grad))
}

/// Cross-entropy of a single `2×H×W` prediction against a mask.
pub fn cross_entropy_loss<T: Scalar>(logits: &Tensor<T>, mask: &BinaryMask) -> Result<f64> {
    let m = Tensor::from_vec(
        [1, 1, mask.height(), mask.width()],
        mask.data().iter().map(|&v| T::lit(v as f64)).collect(),
    );
    Ok(cross_entropy_with_grad(logits, &m)?.0)
}

/// Adam with fixed moments (0.9, 0.999) and ε = 1e-8.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> Default for Adam<T> {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

fn trainable(kind: ParamKind, freeze_norm: bool) -> bool {
    match kind {
        ParamKind::Weight => true,
        ParamKind::NormAffine => !freeze_norm,
        ParamKind::NormStat => false,
    }
}

impl<T: Scalar> Adam<T> {
    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update of every trainable tensor of `model` from its accumulated gradients.
    pub fn step(&mut self, model: &mut impl Module<T>, lr: f64, freeze_norm: bool) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (m_all, v_all) = (&mut self.m, &mut self.v);
        let eps = self.eps;
        let mut slot = 0;
        model.visit_mut("", &mut |_, kind, p| {
            if !trainable(kind, freeze_norm) {
                return;
            }
            if m_all.len() <= slot {
                m_all.push(vec![T::zero(); p.len()]);
                v_all.push(vec![T::zero(); p.len()]);
            }
            let (m, v) = (&mut m_all[slot], &mut v_all[slot]);
            for i in 0..p.len() {
                let g = p.grad[i].as_f64();
                let mi = b1 * m[i].as_f64() + (1.0 - b1) * g;
                let vi = b2 * v[i].as_f64() + (1.0 - b2) * g * g;
                m[i] = T::lit(mi);
                v[i] = T::lit(vi);
                let update = lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                p.value[i] = T::lit(p.value[i].as_f64() - update);
            }
            slot += 1;
        });
    }
}

/// Loss and gradients for one batch; gradients are zeroed first.
pub fn loss_and_grad<T: Scalar>(
    model: &mut Network<T>,
    batch: &TrainingBatch,
    freeze_norm: bool,
) -> Result<f64> {
    let mode = if freeze_norm { NormMode::Frozen } else { NormMode::Batch };
    let images = batch.images.cast::<T>();
    let motion = batch.motion_inputs.cast::<T>();
    let (logits, cache) = model.forward_train(&images, &motion, mode)?;
    let (loss, grad) = cross_entropy_with_grad(&logits, &batch.masks.cast::<T>())?;
    model.zero_grad();
    model.backward(&cache, &grad);
    Ok(loss)
}

/// One optimization step. A non-finite loss aborts before any parameter changes.
pub fn train_step<T: Scalar>(
    model: &mut Network<T>,
    opt: &mut Adam<T>,
    batch: &TrainingBatch,
    lr: f64,
    freeze_norm: bool,
    step: usize,
) -> Result<f64> {
    let mode = if freeze_norm { NormMode::Frozen } else { NormMode::Batch };
    let images = batch.images.cast::<T>();
    let motion = batch.motion_inputs.cast::<T>();
    let (logits, cache) = model.forward_train(&images, &motion, mode)?;
    let (loss, grad) = cross_entropy_with_grad(&logits, &batch.masks.cast::<T>())?;
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            loss,
            provenance: batch.provenance.join(","),
        });
    }
    model.zero_grad();
    model.backward(&cache, &grad);
    opt.step(model, lr, freeze_norm);
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    /// Fraction of SOD samples drawn so far.
    pub sod_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub losses: Vec<LossRecord>,
    pub checkpoints: Vec<PathBuf>,
}

impl TrainReport {
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.losses[range];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    }
}

pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

pub fn checkpoint_name(step: usize) -> String {
    format!("step{step:06}.ckpt")
}

/// Trains a fresh network. With `out_dir`, writes periodic checkpoints, a
/// final checkpoint and the loss log there.
pub fn train(
    cfg: &TrainConfig,
    vos: &[VosSequence],
    sod: &[Sample],
    out_dir: Option<&Path>,
) -> Result<(Network<f32>, TrainReport)> {
    train_with_progress(cfg, vos, sod, out_dir, |_| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    vos: &[VosSequence],
    sod: &[Sample],
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&LossRecord),
) -> Result<(Network<f32>, TrainReport)> {
    cfg.validate()?;
    let res = cfg.resolution;
    let vos_pool = vos
        .iter()
        .flat_map(|s| s.samples.iter().zip(&s.annotated).filter(|(_, &a)| a).map(|(x, _)| x))
        .map(|s| resize_sample(s, res))
        .collect::<Result<Vec<_>>>()?;
    let sod_pool = sod.iter().map(|s| resize_sample(s, res)).collect::<Result<Vec<_>>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Network::<f32>::new(cfg.net.clone(), &mut rng)?;
    let mut opt = Adam::default();

    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOSS_LOG);
            let mut f = BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?);
            writeln!(f, "step,loss,sod_fraction").map_err(|e| Error::io(&path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let every = cfg.checkpoint_every();
    let mut report = TrainReport {
        losses: Vec::with_capacity(cfg.steps),
        checkpoints: Vec::new(),
    };
    let (mut drawn, mut drawn_sod) = (0usize, 0usize);
    for step in 1..=cfg.steps {
        let batch = sample_training_batch(&vos_pool, &sod_pool, cfg.p_sod, cfg.batch_size, res, &mut rng)?;
        drawn += batch.len();
        drawn_sod += batch.sod_count();
        let loss = train_step(&mut model, &mut opt, &batch, cfg.learning_rate, cfg.freeze_norm, step)?;
        let rec = LossRecord {
            step,
            loss,
            sod_fraction: drawn_sod as f64 / drawn as f64,
        };
        if let Some((f, path)) = log.as_mut() {
            writeln!(f, "{},{},{}", rec.step, rec.loss, rec.sod_fraction).map_err(|e| Error::io(&*path, e))?;
        }
        progress(&rec);
        report.losses.push(rec);
        if let Some(dir) = out_dir {
            if step % every == 0 {
                let path = dir.join(checkpoint_name(step));
                save_checkpoint(&path, &model)?;
                report.checkpoints.push(path);
            }
        }
    }
    if let Some((mut f, path)) = log {
        f.flush().map_err(|e| Error::io(&path, e))?;
    }
    if let Some(dir) = out_dir {
        let path = dir.join(FINAL_CHECKPOINT);
        save_checkpoint(&path, &model)?;
        report.checkpoints.push(path);
    }
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{collate, generate_synthetic_dataset, SynthConfig};
    use rand::Rng;

    fn logits_from_prob(fg_prob: &[f64], side: usize) -> Tensor<f64> {
        // σ_BG = 0, σ_FG = logit(ω)
        let mut data = vec![0.0; side * side];
        data.extend(fg_prob.iter().map(|&p| (p / (1.0 - p)).ln()));
        Tensor::from_vec([1, 2, side, side], data)
    }

    #[test]
    fn equal_logits_give_ln2() {
        let logits = Tensor::<f64>::full([1, 2, 3, 3], 0.7);
        let mask = BinaryMask::new(3, 3, vec![1, 0, 1, 0, 0, 1, 1, 1, 0]).unwrap();
        assert!((cross_entropy_loss(&logits, &mask).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_fixture_matches_scalar_oracle() {
        // foreground pixels at ω = 0.9, 0.5; background pixels at ω = 0.2, 0.3
        let logits = logits_from_prob(&[0.9, 0.5, 0.2, 0.3], 2);
        let mask = BinaryMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        let oracle = -(0.9f64.ln() + 0.5f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 4.0;
        let loss = cross_entropy_loss(&logits, &mask).unwrap();
        assert!((loss - oracle).abs() < 1e-12, "{loss} vs {oracle}");
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let mask = BinaryMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        let mut data = vec![0.0; 8];
        for p in 0..4 {
            let fg = mask.data()[p] == 1;
            data[p] = if fg { -40.0 } else { 40.0 };
            data[4 + p] = if fg { 40.0 } else { -40.0 };
        }
        let loss = cross_entropy_loss(&Tensor::<f64>::from_vec([1, 2, 2, 2], data), &mask).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn loss_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = Tensor::<f64>::from_vec([1, 2, 4, 4], (0..32).map(|_| rng.random_range(-3.0..3.0)).collect());
        let mask = BinaryMask::new(4, 4, (0..16).map(|_| rng.random_range(0..2)).collect()).unwrap();
        let mut shifted = logits.clone();
        for p in 0..16 {
            let s = rng.random_range(-50.0..50.0);
            shifted.plane_mut(0, 0)[p] += s;
            shifted.plane_mut(0, 1)[p] += s;
        }
        let a = cross_entropy_loss(&logits, &mask).unwrap();
        let b = cross_entropy_loss(&shifted, &mask).unwrap();
        assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let logits = Tensor::<f32>::zeros([1, 2, 2, 2]);
        let masks = Tensor::from_vec([1, 1, 2, 2], vec![0.0, 1.0, 0.5, 0.0]);
        assert!(matches!(
            cross_entropy_with_grad(&logits, &masks),
            Err(Error::NonBinaryMask { index: 2, .. })
        ));
    }

    #[test]
    fn loss_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let logits = Tensor::<f64>::from_vec([2, 2, 2, 3], (0..24).map(|_| rng.random_range(-2.0..2.0)).collect());
        let masks = Tensor::<f64>::from_vec([2, 1, 2, 3], (0..12).map(|_| rng.random_range(0..2) as f64).collect());
        let (_, g) = cross_entropy_with_grad(&logits, &masks).unwrap();
        for i in 0..24 {
            let mut p = logits.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = logits.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (cross_entropy_with_grad(&p, &masks).unwrap().0 - cross_entropy_with_grad(&m, &masks).unwrap().0) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    fn small_setup() -> (Network<f32>, TrainingBatch) {
        let cfg = SynthConfig {
            n_sequences: 2,
            frames_per_seq: 3,
            resolution: 32,
            n_sod: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (vos, sod) = generate_synthetic_dataset(&cfg, &mut rng).unwrap();
        let samples = vec![vos[0].samples[0].clone(), sod[0].clone(), vos[1].samples[2].clone()];
        let net = NetConfig {
            channels: vec![4, 6, 8, 8],
            decoder_width: 6,
        };
        (Network::new(net, &mut rng).unwrap(), collate(&samples).unwrap())
    }

    fn snapshot(net: &Network<f32>) -> Vec<(String, Vec<u32>)> {
        net.state()
            .into_iter()
            .map(|t| (t.name, t.data.iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_bit_identical() {
        let (mut net, batch) = small_setup();
        let before = snapshot(&net);
        let mut opt = Adam::default();
        for step in 1..=3 {
            train_step(&mut net, &mut opt, &batch, 0.0, true, step).unwrap();
        }
        assert_eq!(snapshot(&net), before);
    }

    #[test]
    fn frozen_norm_is_bit_identical_after_ten_steps() {
        let (mut net, batch) = small_setup();
        let norm_state = |n: &Network<f32>| {
            snapshot(n)
                .into_iter()
                .filter(|(name, _)| name.contains(".bn"))
                .collect::<Vec<_>>()
        };
        let before = norm_state(&net);
        assert!(!before.is_empty());
        let all_before = snapshot(&net);
        let mut opt = Adam::default();
        for step in 1..=10 {
            train_step(&mut net, &mut opt, &batch, 1e-2, true, step).unwrap();
        }
        assert_eq!(norm_state(&net), before);
        assert_ne!(snapshot(&net), all_before);
    }

    #[test]
    fn unfrozen_norm_updates_statistics() {
        let (mut net, batch) = small_setup();
        let stat = |n: &Network<f32>| {
            n.state()
                .into_iter()
                .find(|t| t.name == "app.block1.bn1.running_mean")
                .unwrap()
                .data
        };
        let before = stat(&net);
        let mut opt = Adam::default();
        train_step(&mut net, &mut opt, &batch, 1e-3, false, 1).unwrap();
        assert_ne!(stat(&net), before);
    }

    #[test]
    fn non_finite_loss_reports_step_and_provenance() {
        let (mut net, batch) = small_setup();
        net.decoder.visit_mut("", &mut |name, _, p| {
            if name == "head.bias" {
                p.value[1] = f32::INFINITY;
            }
        });
        let mut opt = Adam::default();
        match train_step(&mut net, &mut opt, &batch, 1e-3, true, 7) {
            Err(Error::NonFiniteLoss { step, provenance, .. }) => {
                assert_eq!(step, 7);
                assert!(provenance.contains("seq000/00000"));
            }
            other => panic!("expected a non-finite loss error, got {other:?}"),
        }
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // with bias correction the first update is lr·sign(g)
        let (mut net, batch) = small_setup();
        let before = net.state();
        let mut opt = Adam::default();
        train_step(&mut net, &mut opt, &batch, 1e-2, true, 1).unwrap();
        let after = net.state();
        let mut grads = Vec::new();
        net.visit("", &mut |_, kind, p| {
            if kind == ParamKind::Weight {
                grads.push(p.grad.clone())
            }
        });
        let mut k = 0;
        for (b, a) in before.iter().zip(&after) {
            if b.kind != ParamKind::Weight {
                continue;
            }
            for i in 0..b.data.len() {
                let g = grads[k][i];
                if g.abs() > 1e-5 {
                    let d = b.data[i] - a.data[i];
                    assert!((d - 1e-2 * g.signum()).abs() < 1e-4, "{}: {d}", b.name);
                }
            }
            k += 1;
        }
    }
}
