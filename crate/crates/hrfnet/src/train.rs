//! Training harness: weighted cross-entropy, Adam with the conventional
//! moment defaults, a multiplicative step-decay schedule, per-epoch
//! validation AUC, and best/last checkpointing.

use std::collections::HashSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, AdamSnapshot};
use crate::datasynth::{DatasetManifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::eval::{pixel_auc, AucMode};
use crate::model::HrfNet;
use crate::ops::act::softmax2_tampered;
use crate::ops::loss;
use crate::tensor::{tensor_from_mask, tensor_from_rgb, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub tampered_weight: f64,
    pub seed: u64,
    /// Optional horizontal-flip augmentation; off by default to match
    /// the plain recipe.
    pub augment_flips: bool,
    /// Keep the SRM branches at their current (typically zeroed) weights
    /// for ablation runs.
    pub freeze_srm: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 1e-3,
            decay_factor: 0.8,
            decay_every: 20,
            epochs: 100,
            batch_size: 4,
            tampered_weight: 10.0,
            seed: 0,
            augment_flips: false,
            freeze_srm: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return cfg(format!("lr0 must be positive, got {}", self.lr0));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return cfg(format!("decay_factor must lie in (0, 1], got {}", self.decay_factor));
        }
        if self.decay_every == 0 {
            return cfg("decay_every must be at least 1".into());
        }
        if self.epochs == 0 {
            return cfg("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return cfg("batch_size must be at least 1".into());
        }
        if !(self.tampered_weight.is_finite() && self.tampered_weight > 0.0) {
            return cfg(format!("tampered_weight must be positive, got {}", self.tampered_weight));
        }
        Ok(())
    }
}

/// Step-decay learning rate: lr0 scaled by decay_factor every
/// decay_every epochs.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    let k = (epoch / cfg.decay_every) as i32;
    let tenx = cfg.decay_factor * 10.0;
    // One-decimal factors (the recipe's 0.8) evaluate through the
    // rational form 8^k/10^k; 8^k is a power of two, so only the final
    // divide rounds and repeated decay stays on the decimal grid.
    if tenx == tenx.trunc() && (1.0..=9.0).contains(&tenx) {
        return (cfg.lr0 * tenx.powi(k)) / 10f64.powi(k);
    }
    cfg.lr0 * cfg.decay_factor.powi(k)
}

/// Weight-normalized two-class cross-entropy over a logit map.
/// Pristine pixels weigh 1, tampered pixels `w_tampered`; the sum of
/// per-pixel weighted terms is divided by the total applied weight.
pub fn weighted_ce(logits: &Tensor, target: &Tensor, w_tampered: f64) -> Result<f64> {
    if logits.c() != 2 {
        return Err(Error::Shape(format!("logits must have 2 channels, got {}", logits.c())));
    }
    if target.shape() != [logits.n(), 1, logits.h(), logits.w()] {
        return Err(Error::Shape(format!(
            "target shape {:?} does not pair with logits {:?}",
            target.shape(),
            logits.shape()
        )));
    }
    if !(w_tampered.is_finite() && w_tampered > 0.0) {
        return Err(Error::Parameter(format!(
            "tampered weight must be positive, got {w_tampered}"
        )));
    }
    if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Data("target mask contains values outside {0, 1}".into()));
    }
    let (value, _, _) = loss::weighted_ce(logits, target, w_tampered);
    Ok(value)
}

/// Adam with bias-corrected first and second moments.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(model: &HrfNet) -> Adam {
        let zeros = |m: &HrfNet| {
            (0..m.params().len())
                .map(|pid| Tensor::zeros(m.params().get(pid).shape()))
                .collect()
        };
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(model),
            v: zeros(model),
        }
    }

    pub fn from_snapshot(snapshot: AdamSnapshot) -> Adam {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: snapshot.step,
            m: snapshot.m,
            v: snapshot.v,
        }
    }

    pub fn snapshot(&self) -> AdamSnapshot {
        AdamSnapshot {
            step: self.step,
            m: self.m.clone(),
            v: self.v.clone(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn apply(
        &mut self,
        model: &mut HrfNet,
        grads: &[Option<Tensor>],
        lr: f64,
        frozen: &HashSet<usize>,
    ) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (pid, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            if frozen.contains(&pid) {
                continue;
            }
            let mut p = model.params().get(pid).clone();
            {
                let m = self.m[pid].data_mut();
                let v = self.v[pid].data_mut();
                let pd = p.data_mut();
                for (i, &g) in grad.data().iter().enumerate() {
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                    let mhat = m[i] / bc1;
                    let vhat = v[i] / bc2;
                    pd[i] -= lr * mhat / (vhat.sqrt() + self.eps);
                }
            }
            model.params_mut().set(pid, p);
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub steps: usize,
    pub final_loss: f64,
    pub best_val_auc: Option<f64>,
    pub best_epoch: Option<usize>,
}

/// Decode one manifest entry into a raw-intensity image tensor and a
/// binary mask tensor.
pub fn load_pair(root: &Path, entry: &ManifestEntry) -> Result<(Tensor, Tensor)> {
    let img = image::open(root.join(&entry.image_path))?.to_rgb8();
    let mask = image::open(root.join(&entry.mask_path))?.to_luma8();
    if img.dimensions() != mask.dimensions() {
        return Err(Error::Data(format!(
            "{} and its mask disagree on dimensions",
            entry.image_path
        )));
    }
    Ok((tensor_from_rgb(&img), tensor_from_mask(&mask)))
}

fn flip_horizontal(t: &Tensor) -> Tensor {
    let [n, c, h, w] = t.shape();
    let mut out = t.clone();
    for ni in 0..n {
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out.set(ni, ci, y, x, t.at(ni, ci, y, w - 1 - x));
                }
            }
        }
    }
    out
}

fn frozen_srm_params(model: &HrfNet) -> HashSet<usize> {
    (0..model.params().len())
        .filter(|&pid| {
            let name = model.params().name(pid);
            name.starts_with("shallow_srm.")
                || name.starts_with("deep_srm.")
                || name.starts_with("refine_srm.")
        })
        .collect()
}

/// Pooled validation AUC of the current model over a split.
pub fn split_auc(model: &HrfNet, root: &Path, entries: &[&ManifestEntry]) -> Result<f64> {
    let mut scores = Vec::with_capacity(entries.len());
    let mut targets = Vec::with_capacity(entries.len());
    for e in entries {
        let (img, mask) = load_pair(root, e)?;
        let logits = model.forward(&img)?;
        scores.push(softmax2_tampered(&logits));
        targets.push(mask);
    }
    pixel_auc(&scores, &targets, AucMode::Pooled)
}

/// Run the full training recipe over the manifest's train split,
/// validating on the val split each epoch. Writes `last.ckpt`,
/// `best.ckpt`, and `history.csv` under `out_dir`.
pub fn train_loop(
    model: &mut HrfNet,
    data_root: &Path,
    manifest: &DatasetManifest,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_entries: Vec<&ManifestEntry> = manifest.entries_for(Split::Train).collect();
    let val_entries: Vec<&ManifestEntry> = manifest.entries_for(Split::Val).collect();
    if train_entries.is_empty() {
        return Err(Error::Data("manifest has no train-split entries".into()));
    }
    if manifest.size != model.config().full_res {
        return Err(Error::Shape(format!(
            "dataset resolution {}x{} does not match the model's {}x{}",
            manifest.size.0,
            manifest.size.1,
            model.config().full_res.0,
            model.config().full_res.1
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let frozen = if cfg.freeze_srm { frozen_srm_params(model) } else { HashSet::new() };
    let mut adam = Adam::new(model);
    let mut history: Vec<EpochStats> = Vec::with_capacity(cfg.epochs);
    let mut best_val_auc: Option<f64> = None;
    let mut best_epoch: Option<usize> = None;
    let mut steps = 0usize;

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg);
        let mut order: Vec<usize> = (0..train_entries.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for batch_ids in order.chunks(cfg.batch_size) {
            let mut images = Vec::with_capacity(batch_ids.len());
            let mut masks = Vec::with_capacity(batch_ids.len());
            for &i in batch_ids {
                let (mut img, mut mask) = load_pair(data_root, train_entries[i])?;
                if cfg.augment_flips && rng.random_range(0..2) == 1 {
                    img = flip_horizontal(&img);
                    mask = flip_horizontal(&mask);
                }
                images.push(img);
                masks.push(mask);
            }
            let images = Tensor::stack_batch(&images)?;
            let masks = Tensor::stack_batch(&masks)?;
            let out = model.loss_and_grads(&images, &masks, cfg.tampered_weight)?;
            adam.apply(model, &out.grads, lr, &frozen);
            model.apply_stat_updates(&out.stat_updates);
            epoch_loss += out.loss;
            epoch_batches += 1;
            steps += 1;
        }
        let train_loss = epoch_loss / epoch_batches as f64;
        let val_auc = if val_entries.is_empty() {
            None
        } else {
            Some(split_auc(model, data_root, &val_entries)?)
        };
        history.push(EpochStats { epoch, lr, train_loss, val_auc });

        let snapshot = adam.snapshot();
        checkpoint::save(&out_dir.join("last.ckpt"), model, epoch as u64, Some(&snapshot))?;
        let improved = match (val_auc, best_val_auc) {
            (Some(v), Some(b)) => v > b,
            (Some(_), None) => true,
            // without a val split, track best train loss instead
            (None, _) => history.iter().all(|h| h.train_loss >= train_loss),
        };
        if improved {
            best_val_auc = val_auc.or(best_val_auc);
            best_epoch = Some(epoch);
            checkpoint::save(&out_dir.join("best.ckpt"), model, epoch as u64, Some(&snapshot))?;
        }
    }
    write_history(&out_dir.join("history.csv"), &history)?;
    Ok(TrainOutcome {
        steps,
        final_loss: history.last().map(|h| h.train_loss).unwrap_or(f64::NAN),
        best_val_auc,
        best_epoch,
        history,
    })
}

fn write_history(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut text = String::from("epoch,lr,train_loss,val_auc\n");
    for h in history {
        let val = h.val_auc.map(|v| format!("{v:.6}")).unwrap_or_default();
        text.push_str(&format!("{},{:.8},{:.6},{}\n", h.epoch, h.lr, h.train_loss, val));
    }
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasynth::{generate_dataset, synthetic_base, SynthConfig};
    use crate::model::ModelConfig;
    use tempfile::TempDir;

    fn tiny_model(res: usize, seed: u64) -> HrfNet {
        HrfNet::new(
            ModelConfig {
                full_res: (res, res),
                deep_input_size: (32, 32),
                width_multiplier: 0.05,
                fusion_channels: 8,
                aspp_rates: vec![1, 2],
                ..ModelConfig::default()
            },
            seed,
        )
        .unwrap()
    }

    fn tiny_dataset(res: usize, count: usize, seed: u64) -> (TempDir, DatasetManifest) {
        let dir = TempDir::new().unwrap();
        let bases = dir.path().join("bases");
        std::fs::create_dir_all(&bases).unwrap();
        for i in 0..2 {
            synthetic_base(res + 8, res + 8, seed + i)
                .save(bases.join(format!("b{i}.png")))
                .unwrap();
        }
        let cfg = SynthConfig {
            count,
            size: (res, res),
            seed,
            split_fractions: (0.5, 0.5, 0.0),
            region_sizes: vec![16, 24],
            feather_radius: 2,
        };
        let manifest = generate_dataset(&bases, &dir.path().join("data"), &cfg).unwrap();
        (dir, manifest)
    }

    #[test]
    fn schedule_matches_the_recipe() {
        let cfg = TrainConfig::default();
        for (epoch, lr) in [(0, 1e-3), (20, 8e-4), (40, 6.4e-4), (60, 5.12e-4), (80, 4.096e-4)] {
            assert_eq!(lr_schedule(epoch, &cfg), lr);
            assert_eq!(lr_schedule(epoch + 19, &cfg), lr);
        }
        for e in 1..100 {
            assert!(lr_schedule(e, &cfg) <= lr_schedule(e - 1, &cfg));
        }
    }

    #[test]
    fn default_config_is_the_paper_recipe() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr0, 1e-3);
        assert_eq!(cfg.decay_factor, 0.8);
        assert_eq!(cfg.decay_every, 20);
        assert_eq!(cfg.epochs, 100);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.tampered_weight, 10.0);
        assert!(!cfg.augment_flips);
        cfg.validate().unwrap();
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        for bad in [
            TrainConfig { lr0: 0.0, ..TrainConfig::default() },
            TrainConfig { decay_factor: 0.0, ..TrainConfig::default() },
            TrainConfig { decay_factor: 1.5, ..TrainConfig::default() },
            TrainConfig { decay_every: 0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { tampered_weight: -1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn weighted_ce_wrapper_validates_inputs() {
        let logits = Tensor::zeros([1, 2, 2, 2]);
        let target = Tensor::zeros([1, 1, 2, 2]);
        let v = weighted_ce(&logits, &target, 10.0).unwrap();
        assert!((v - (2.0f64).ln()).abs() < 1e-12);
        let bad_target = Tensor::filled([1, 1, 2, 2], 0.5);
        assert!(matches!(
            weighted_ce(&logits, &bad_target, 10.0),
            Err(Error::Data(_))
        ));
        let bad_shape = Tensor::zeros([1, 1, 2, 3]);
        assert!(matches!(
            weighted_ce(&logits, &bad_shape, 10.0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            weighted_ce(&logits, &target, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn two_epoch_history_and_checkpoints() {
        let (dir, manifest) = tiny_dataset(64, 4, 3);
        let mut model = tiny_model(64, 1);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 5,
            ..TrainConfig::default()
        };
        let out_dir = dir.path().join("run");
        let outcome = train_loop(&mut model, &dir.path().join("data"), &manifest, &cfg, &out_dir).unwrap();
        assert_eq!(outcome.history.len(), 2);
        assert_eq!(outcome.history[0].lr, 1e-3);
        assert_eq!(outcome.history[1].lr, 1e-3);
        assert!(outcome.history.iter().all(|h| h.train_loss.is_finite()));
        assert!(out_dir.join("last.ckpt").exists());
        assert!(out_dir.join("best.ckpt").exists());
        let text = std::fs::read_to_string(out_dir.join("history.csv")).unwrap();
        assert!(text.starts_with("epoch,lr,train_loss,val_auc\n"));
        assert_eq!(text.lines().count(), 3);
        // val split was non-empty, so AUC must be recorded
        assert!(outcome.history[0].val_auc.is_some());
    }

    #[test]
    fn same_seed_reproduces_the_final_loss() {
        let (dir, manifest) = tiny_dataset(64, 4, 9);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            seed: 11,
            ..TrainConfig::default()
        };
        let root = dir.path().join("data");
        let mut m1 = tiny_model(64, 2);
        let o1 = train_loop(&mut m1, &root, &manifest, &cfg, &dir.path().join("r1")).unwrap();
        let mut m2 = tiny_model(64, 2);
        let o2 = train_loop(&mut m2, &root, &manifest, &cfg, &dir.path().join("r2")).unwrap();
        assert_eq!(o1.final_loss.to_bits(), o2.final_loss.to_bits());
    }

    #[test]
    fn checkpoint_round_trip_preserves_logits() {
        let (dir, manifest) = tiny_dataset(64, 4, 21);
        let mut model = tiny_model(64, 4);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 2,
            seed: 2,
            ..TrainConfig::default()
        };
        let out_dir = dir.path().join("run");
        train_loop(&mut model, &dir.path().join("data"), &manifest, &cfg, &out_dir).unwrap();
        let loaded = checkpoint::load(&out_dir.join("last.ckpt")).unwrap();
        let img = crate::datasynth::synthetic_base(64, 64, 77);
        let x = tensor_from_rgb(&img);
        let a = model.forward(&x).unwrap();
        let b = loaded.model.forward(&x).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a), bits(&b));
        assert!(loaded.optimizer.is_some());
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (dir, mut manifest) = tiny_dataset(64, 4, 31);
        for e in &mut manifest.entries {
            e.split = Split::Test;
        }
        let mut model = tiny_model(64, 0);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(matches!(
            train_loop(&mut model, &dir.path().join("data"), &manifest, &cfg, &dir.path().join("x")),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn resolution_mismatch_is_rejected() {
        let (dir, manifest) = tiny_dataset(64, 4, 41);
        let mut model = tiny_model(96, 0);
        let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
        assert!(matches!(
            train_loop(&mut model, &dir.path().join("data"), &manifest, &cfg, &dir.path().join("x")),
            Err(Error::Shape(_))
        ));
    }
}
