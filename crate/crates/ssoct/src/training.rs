//! Patch-based L1 training with Adam and per-batch factor sampling.
//!
//! Each step draws one factor pair uniformly from the configured set,
//! extracts non-overlapping reference patches from one training image, and
//! pairs them with aligned crops of the cached spectrally-degraded image
//! skipped at the spatial factor. The factor pair is constant within a
//! batch. The network output (`floor(m * ceil(p/m)) >= p` per axis by the
//! floor law) is cropped to the patch size for the loss.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{degrade_spectral, skip_spatial, Factors, OctImage, SpectralMode};
use crate::error::{Error, Result};
use crate::metrics;
use crate::mssmn::Mssmn;
use crate::numerics::{ParamSet, Tape, Tensor, Var};
use crate::phantom::{self, Split};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub patch_size: usize,
    pub patches_per_batch: usize,
    /// (l, m) pairs sampled during training; constant within a batch.
    pub factor_set: Vec<(f64, f64)>,
    pub lr0: f64,
    /// Epoch interval of the halving schedule:
    /// `lr(e) = lr0 * 2^-(floor(e / lr_half_every))`.
    pub lr_half_every: usize,
    pub epochs: usize,
    pub flip_augment: bool,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            patch_size: 64,
            patches_per_batch: 16,
            factor_set: vec![
                (2.0, 2.0),
                (2.0, 3.0),
                (2.0, 4.0),
                (3.0, 2.0),
                (3.0, 3.0),
                (3.0, 4.0),
                (4.0, 2.0),
                (4.0, 3.0),
                (4.0, 4.0),
            ],
            lr0: 1e-4,
            lr_half_every: 200,
            epochs: 40,
            flip_augment: true,
            seed: 1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patches_per_batch == 0 {
            return Err(Error::InvalidConfig("patch sizes must be >= 1".into()));
        }
        if self.factor_set.is_empty() {
            return Err(Error::InvalidConfig("factor_set must not be empty".into()));
        }
        for &(l, m) in &self.factor_set {
            Factors::new(l, m)?;
        }
        let max_integer_m = self
            .factor_set
            .iter()
            .map(|&(_, m)| m)
            .filter(|m| m.fract() == 0.0)
            .fold(0.0f64, f64::max);
        if max_integer_m >= 1.0 && self.patch_size % (max_integer_m as usize) != 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_size {} must be divisible by the largest integer m ({})",
                self.patch_size, max_integer_m
            )));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig("lr0 must be > 0".into()));
        }
        if self.lr_half_every == 0 {
            return Err(Error::InvalidConfig("lr_half_every must be >= 1".into()));
        }
        for beta in [self.adam_beta1, self.adam_beta2] {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::InvalidConfig(format!("adam betas must lie in [0,1), got {}", beta)));
            }
        }
        Ok(())
    }

    /// Distinct spectral factors appearing in the factor set.
    pub fn spectral_factors(&self) -> Vec<f64> {
        let mut ls: Vec<f64> = Vec::new();
        for &(l, _) in &self.factor_set {
            if !ls.iter().any(|&x| x == l) {
                ls.push(l);
            }
        }
        ls
    }
}

/// `lr(epoch) = lr0 * 2^-(floor(epoch / lr_half_every))`.
pub fn learning_rate(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * 2.0f64.powi(-((epoch / cfg.lr_half_every) as i32))
}

// ---------------------------------------------------------------------------
// Losses and the optimizer step
// ---------------------------------------------------------------------------

/// Mean absolute difference on the tape (shape-checked).
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    tape.l1_loss(pred, target)
}

/// Standard Adam update with bias correction over every block in the set.
pub fn adam_step(params: &mut ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64) {
    params.adam_t += 1;
    let t = params.adam_t as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - beta2.powi(t);
    for block in params.blocks_mut() {
        let grad = block.grad.data().to_vec();
        let m1 = block.m1.data_mut();
        for (m, &g) in m1.iter_mut().zip(&grad) {
            *m = beta1 * *m + (1.0 - beta1) * g;
        }
        let m2 = block.m2.data_mut();
        for (v, &g) in m2.iter_mut().zip(&grad) {
            *v = beta2 * *v + (1.0 - beta2) * g * g;
        }
        let (m1, m2) = (block.m1.data().to_vec(), block.m2.data().to_vec());
        let value = block.value.data_mut();
        for i in 0..value.len() {
            let m_hat = m1[i] / bc1;
            let v_hat = m2[i] / bc2;
            value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// One training/validation image: the reference plus the full-size
/// spectrally-degraded image cached per distinct spectral factor
/// (keyed by the factor's bit pattern).
#[derive(Debug, Clone)]
pub struct DatasetItem {
    pub reference: OctImage,
    pub spectral: BTreeMap<u64, OctImage>,
}

impl DatasetItem {
    pub fn spectral_at(&self, l: f64) -> Result<&OctImage> {
        self.spectral.get(&l.to_bits()).ok_or_else(|| {
            Error::arg("sample_batch", format!("no cached spectral degradation for l={}", l))
        })
    }

    /// Degraded LR image at the full factor pair (skip applied on demand).
    pub fn degraded(&self, factors: Factors) -> Result<OctImage> {
        skip_spatial(self.spectral_at(factors.l)?, factors.m)
    }
}

/// Loads one split from a manifest: reads each spectrum, pairs it with its
/// `<stem>.ref.ocim` reference (reconstructing the frame when the file is
/// absent), and caches the spectral degradation for every listed factor.
pub fn load_split(manifest_path: &Path, split: Split, l_values: &[f64]) -> Result<Vec<DatasetItem>> {
    let entries = phantom::read_manifest(manifest_path)?;
    let mut items = Vec::new();
    for entry in entries.iter().filter(|e| e.split == split) {
        let spectrum_path = phantom::resolve_entry_path(manifest_path, entry);
        let frame = phantom::read_spectrum(&spectrum_path)?;
        let ref_path = phantom::reference_path_for(&spectrum_path);
        let reference = if ref_path.is_file() {
            crate::acquisition::read_image(&ref_path)?
        } else {
            crate::acquisition::reconstruct_reference(&frame, false)?
        };
        let mut spectral = BTreeMap::new();
        for &l in l_values {
            spectral.insert(l.to_bits(), degrade_spectral(&frame, l, SpectralMode::Center, false)?);
        }
        items.push(DatasetItem { reference, spectral });
    }
    Ok(items)
}

// ---------------------------------------------------------------------------
// Batch sampling
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Batch {
    /// `B x 1 x ceil(p/m) x ceil(p/m)` degraded patches.
    pub lr: Tensor,
    /// `B x 1 x p x p` reference patches.
    pub hr: Tensor,
    /// Top-left corners of the (disjoint) reference crops.
    pub rects: Vec<(usize, usize)>,
}

fn flip_in_place(pixels: &mut [f64], h: usize, w: usize, flip_h: bool, flip_v: bool) {
    if flip_h {
        for row in pixels.chunks_mut(w) {
            row.reverse();
        }
    }
    if flip_v {
        for r in 0..h / 2 {
            for c in 0..w {
                pixels.swap(r * w + c, (h - 1 - r) * w + c);
            }
        }
    }
}

/// Draws `patches_per_batch` non-overlapping patch pairs from one image at
/// one factor pair. Returns `None` when the image cannot supply enough
/// disjoint patches.
pub fn sample_batch(
    item: &DatasetItem,
    factors: Factors,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Option<Batch>> {
    let p = cfg.patch_size;
    let (h, w) = (item.reference.height(), item.reference.width());
    let mut cells: Vec<(usize, usize)> = Vec::new();
    for r in 0..h / p {
        for c in 0..w / p {
            cells.push((r * p, c * p));
        }
    }
    if cells.len() < cfg.patches_per_batch {
        return Ok(None);
    }
    cells.shuffle(rng);
    cells.truncate(cfg.patches_per_batch);

    let spectral = item.spectral_at(factors.l)?;
    let mut lr_data: Vec<f64> = Vec::new();
    let mut hr_data: Vec<f64> = Vec::new();
    let mut lr_dim = 0usize;
    for &(top, left) in &cells {
        let hr_crop = item.reference.crop(top, left, p, p)?;
        let lr_crop = skip_spatial(&spectral.crop(top, left, p, p)?, factors.m)?;
        lr_dim = lr_crop.height();

        let mut hr_pixels = hr_crop.pixels().to_vec();
        let mut lr_pixels = lr_crop.pixels().to_vec();
        if cfg.flip_augment {
            let flip_h: bool = rng.gen();
            let flip_v: bool = rng.gen();
            flip_in_place(&mut hr_pixels, p, p, flip_h, flip_v);
            flip_in_place(&mut lr_pixels, lr_dim, lr_dim, flip_h, flip_v);
        }
        hr_data.extend_from_slice(&hr_pixels);
        lr_data.extend_from_slice(&lr_pixels);
    }
    let b = cfg.patches_per_batch;
    Ok(Some(Batch {
        lr: Tensor::new(vec![b, 1, lr_dim, lr_dim], lr_data)?,
        hr: Tensor::new(vec![b, 1, p, p], hr_data)?,
        rects: cells,
    }))
}

// ---------------------------------------------------------------------------
// Logs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub l: f64,
    pub m: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l: f64,
    pub m: f64,
    pub val_psnr: f64,
    pub val_ssim: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn write_step_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "step,epoch,l,m,loss")?;
        for s in &self.steps {
            writeln!(out, "{},{},{},{},{}", s.step, s.epoch, s.l, s.m, s.loss)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "epoch,l,m,val_psnr,val_ssim")?;
        for e in &self.epochs {
            writeln!(out, "{},{},{},{},{}", e.epoch, e.l, e.m, e.val_psnr, e.val_ssim)?;
        }
        out.flush()?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the final step.
    pub model: Mssmn,
    /// Snapshot with the best mean validation PSNR (the final model when no
    /// validation ran).
    pub best_model: Mssmn,
    pub log: TrainLog,
}

/// Runs the training loop: per step, sample a factor uniformly, sample one
/// batch from one image, forward at `(l_hat, m_hat) = (l, m)`, L1 loss,
/// backward, Adam. One epoch visits every training image once in shuffled
/// order; validation PSNR/SSIM runs on full B-scans per factor per epoch.
pub fn train(
    model: Mssmn,
    train_items: &[DatasetItem],
    val_items: &[DatasetItem],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_items.is_empty() {
        return Err(Error::EmptyDataset("no training images in the manifest".into()));
    }
    let mut model = model;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut best: Option<(f64, Mssmn)> = None;
    let mut step = 0usize;
    let p = cfg.patch_size;

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg, epoch);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut rng);
        for &idx in &order {
            let (l, m) = cfg.factor_set[rng.gen_range(0..cfg.factor_set.len())];
            let factors = Factors::new(l, m)?;
            let Some(batch) = sample_batch(&train_items[idx], factors, cfg, &mut rng)? else {
                eprintln!(
                    "warning: image {} is too small for {} non-overlapping {}x{} patches; skipped",
                    idx, cfg.patches_per_batch, p, p
                );
                continue;
            };
            let mut tape = Tape::new();
            let out = model.forward_graph(&mut tape, batch.lr, l, m)?;
            let out = tape.crop2d(out, p, p)?;
            let target = tape.constant(batch.hr);
            let loss_var = l1_loss(&mut tape, out, target)?;
            let loss = tape.value(loss_var).scalar_value()?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step, l, m, lr });
            }
            model.params.zero_grads();
            tape.backward(loss_var, &mut model.params)?;
            adam_step(&mut model.params, lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
            log.steps.push(StepRecord { step, epoch, l, m, loss });
            step += 1;
        }

        if !val_items.is_empty() {
            let mut psnr_sum_over_factors = 0.0;
            for &(l, m) in &cfg.factor_set {
                let (mut psnr_acc, mut ssim_acc) = (0.0, 0.0);
                for item in val_items {
                    let (ps, ss) = validate_one(&model, item, Factors::new(l, m)?)?;
                    psnr_acc += ps;
                    ssim_acc += ss;
                }
                let n = val_items.len() as f64;
                log.epochs.push(EpochRecord {
                    epoch,
                    l,
                    m,
                    val_psnr: psnr_acc / n,
                    val_ssim: ssim_acc / n,
                });
                psnr_sum_over_factors += psnr_acc / n;
            }
            let mean_psnr = psnr_sum_over_factors / cfg.factor_set.len() as f64;
            if best.as_ref().map_or(true, |(b, _)| mean_psnr > *b) {
                best = Some((mean_psnr, model.clone()));
            }
        }
    }

    let best_model = best.map(|(_, m)| m).unwrap_or_else(|| model.clone());
    Ok(TrainOutcome { model, best_model, log })
}

/// Full-B-scan validation at one factor pair: degrade (cached spectral +
/// skip), reconstruct, crop to the reference grid, measure.
fn validate_one(model: &Mssmn, item: &DatasetItem, factors: Factors) -> Result<(f64, f64)> {
    let lr_img = item.degraded(factors)?;
    let recon = model.reconstruct(&lr_img, factors.l, factors.m)?;
    let recon = recon.crop(0, 0, item.reference.height(), item.reference.width())?;
    Ok((metrics::psnr(&recon, &item.reference)?, metrics::ssim(&recon, &item.reference)?))
}

/// Manifest-level entry point: loads the train and val splits (caching the
/// spectral degradations for the configured factors) and runs [`train`].
pub fn train_from_manifest(
    model: Mssmn,
    manifest_path: &Path,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ls = cfg.spectral_factors();
    let train_items = load_split(manifest_path, Split::Train, &ls)?;
    let val_items = load_split(manifest_path, Split::Val, &ls)?;
    train(model, &train_items, &val_items, cfg)
}
