//! Optimization: Adam, the classifier training loop, and adversarial
//! training of the restoration network against a frozen classifier.
//!
//! Restoration training iterates, per minibatch: craft adversarial images
//! against the bare classifier, estimate their gradient maps, forward both
//! through the network, and minimize w_pix·L_pix + w_smt·L_smt with respect
//! to the network parameters only. The classifier receives no updates —
//! gradients flow through it solely to reach the restored image — and a
//! parameter checksum before and after every epoch turns any accidental
//! mutation into a hard failure. When benign mixing is on, every batch
//! carries a 1:1 mix of adversarial and clean pairs.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::attacks::{run_attack, AttackConfig, AttackMethod};
use crate::error::{Error, Result};
use crate::gmem::gradient_maps;
use crate::models::Classifier;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trn::TrnModel;

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        AdamParams {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam over named parameters. Gradients are read from each
/// tensor's grad slot; moment buffers are keyed by name so the same state
/// follows a parameter across epochs.
#[derive(Debug)]
pub struct Adam<T: Scalar> {
    pub hyper: AdamParams,
    step: u64,
    slots: HashMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(hyper: AdamParams) -> Self {
        Adam {
            hyper,
            step: 0,
            slots: HashMap::new(),
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.hyper.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter carrying a gradient. Parameters
    /// without a gradient are left untouched.
    pub fn step(&mut self, params: &mut [(String, &mut Tensor<T>)]) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let b1 = T::from_f64(self.hyper.beta1);
        let b2 = T::from_f64(self.hyper.beta2);
        let one_minus_b1 = T::from_f64(1.0 - self.hyper.beta1);
        let one_minus_b2 = T::from_f64(1.0 - self.hyper.beta2);
        let bias1 = T::from_f64(1.0 - self.hyper.beta1.powi(t));
        let bias2 = T::from_f64(1.0 - self.hyper.beta2.powi(t));
        let lr = T::from_f64(self.hyper.lr);
        let eps = T::from_f64(self.hyper.eps);

        for (name, tensor) in params.iter_mut() {
            let Some(grad) = tensor.grad().map(|g| g.to_vec()) else {
                continue;
            };
            if let Some(bad) = grad.iter().position(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in parameter {name} at index {bad}"
                )));
            }
            let numel = tensor.numel();
            let (m, v) = self
                .slots
                .entry(name.clone())
                .or_insert_with(|| (vec![T::ZERO; numel], vec![T::ZERO; numel]));
            let values = tensor.values_mut();
            for i in 0..numel {
                let g = grad[i];
                m[i] = b1 * m[i] + one_minus_b1 * g;
                v[i] = b2 * v[i] + one_minus_b2 * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            tensor.zero_grad();
        }
        Ok(())
    }
}

/// Learning rate at a given epoch: the base rate decayed by a factor of 10
/// every 30 epochs.
pub fn scheduled_lr(base: f64, epoch: usize) -> f64 {
    base * 10f64.powi(-((epoch / 30) as i32))
}

// ---------------------------------------------------------------------------
// Loss wrappers
// ---------------------------------------------------------------------------

/// ℓ2 restoration loss in pixel space (mean squared difference).
pub fn pixel_loss<T: Scalar>(tape: &mut Tape<T>, restored: Var, benign: Var) -> Result<Var> {
    tape.l2_loss(restored, benign)
}

/// Classification loss of the restored image.
pub fn semantic_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_pix: f64,
    pub loss_smt: f64,
    pub clean_acc: f64,
    pub adv_acc: Option<f64>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainingReport {
    pub epochs: Vec<EpochRecord>,
    pub final_accuracy: f64,
}

/// One JSON record per epoch.
pub fn write_report_jsonl(path: &Path, report: &TrainingReport) -> Result<()> {
    let mut file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    for record in &report.epochs {
        let line = serde_json::to_string(record)
            .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
        writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Classifier training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 8,
            batch_size: 64,
            lr: 1e-3,
            seed: 7,
        }
    }
}

fn accuracy_on<T: Scalar>(model: &Classifier<T>, x: &Tensor<T>, y: &[usize]) -> Result<f64> {
    let preds = model.predict(x)?;
    let correct = preds.iter().zip(y).filter(|(p, y)| p == y).count();
    Ok(100.0 * correct as f64 / y.len().max(1) as f64)
}

fn split_accuracy<T: Scalar>(
    model: &Classifier<T>,
    ds: &crate::data::Dataset<T>,
    split: crate::data::Split,
    batch: usize,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (x, y) in ds.batches(split, batch, None) {
        let preds = model.predict(&x)?;
        correct += preds.iter().zip(&y).filter(|(p, y)| p == y).count();
        total += y.len();
    }
    Ok(100.0 * correct as f64 / total.max(1) as f64)
}

/// Cross-entropy minimization over shuffled minibatches. The report carries
/// per-epoch training loss and held-out (validation) accuracy.
pub fn train_classifier<T: Scalar>(
    ds: &crate::data::Dataset<T>,
    model: &mut Classifier<T>,
    cfg: &ClassifierTrainConfig,
) -> Result<TrainingReport> {
    if ds.split_len(crate::data::Split::Train) == 0 {
        return Err(Error::Validation("training split is empty".into()));
    }
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr));
    let mut report = TrainingReport {
        epochs: Vec::new(),
        final_accuracy: 0.0,
    };
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = scheduled_lr(cfg.lr, epoch);
        adam.set_lr(lr);
        let shuffle = Rng::derive(cfg.seed, epoch as u64).next_u64();
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (x, y) in ds.batches(crate::data::Split::Train, cfg.batch_size, Some(shuffle)) {
            let mut tape = Tape::new();
            let xv = tape.constant(&x);
            let logits = model.forward(&mut tape, xv, true)?;
            let loss = tape.softmax_cross_entropy(logits, &y)?;
            let loss_value = tape.scalar_value(loss);
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged (non-finite loss) at epoch {epoch}"
                )));
            }
            loss_sum += loss_value;
            batches += 1;
            let grads = tape.backward(loss)?;
            drop(tape);
            let mut params = model.named_params_mut();
            for (_, p) in params.iter_mut() {
                grads.store_into(p);
            }
            adam.step(&mut params)?;
        }
        let val_split = if ds.split_len(crate::data::Split::Val) > 0 {
            crate::data::Split::Val
        } else {
            crate::data::Split::Train
        };
        let clean_acc = split_accuracy(model, ds, val_split, 256)?;
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            loss_pix: 0.0,
            loss_smt: loss_sum / batches.max(1) as f64,
            clean_acc,
            adv_acc: None,
            wall_ms: start.elapsed().as_millis(),
        });
        report.final_accuracy = clean_acc;
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Restoration-network training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub attack_method: AttackMethod,
    /// Template for the per-batch attack; its seed field is re-derived per
    /// (epoch, batch) so every minibatch sees fresh perturbations while the
    /// whole run stays seed-deterministic.
    pub attack: AttackConfig,
    /// Mix benign pairs 1:1 into every batch.
    pub include_benign: bool,
    pub w_pix: f64,
    pub w_smt: f64,
    pub seed: u64,
    /// Cap on training samples per epoch (deterministic prefix of the
    /// shuffled order); None uses the full training split.
    pub train_subset: Option<usize>,
    /// Validation samples used for the per-epoch defended-accuracy metric.
    pub eval_subset: usize,
    /// Stop when defended validation accuracy has not improved by at least
    /// 0.2 points over this many epochs; 0 disables early stopping.
    pub early_stop_patience: usize,
}

impl TrainConfig {
    pub fn desk_scale(seed: u64) -> Self {
        TrainConfig {
            epochs: 2,
            batch_size: 50,
            lr: 1e-3,
            attack_method: AttackMethod::Mim,
            attack: AttackConfig {
                random_init: false,
                ..AttackConfig::iterative_default(seed)
            },
            include_benign: true,
            w_pix: 1.0,
            w_smt: 1.0,
            seed,
            train_subset: None,
            eval_subset: 200,
            early_stop_patience: 10,
        }
    }
}

const EARLY_STOP_MIN_DELTA: f64 = 0.2;

/// Defended accuracy of (classifier ∘ restoration) under an optional attack
/// crafted against the bare classifier.
fn defended_accuracy<T: Scalar>(
    classifier: &Classifier<T>,
    trn: &TrnModel<T>,
    x: &Tensor<T>,
    y: &[usize],
    attack: Option<(&AttackMethod, &AttackConfig)>,
) -> Result<f64> {
    let x_eval = match attack {
        Some((method, cfg)) => run_attack(*method, classifier, None, x, y, cfg)?.x_adv,
        None => x.clone(),
    };
    let maps = gradient_maps(classifier, &x_eval, trn.cfg.norm_mode)?;
    let restored = trn.restore(&maps, &x_eval)?;
    accuracy_on(classifier, &restored, y)
}

/// Adversarial training of the restoration network. The classifier is
/// frozen; the report carries per-epoch losses plus defended clean and
/// adversarial accuracy on a validation subset.
pub fn train_trn<T: Scalar>(
    ds: &crate::data::Dataset<T>,
    classifier: &Classifier<T>,
    trn: &mut TrnModel<T>,
    cfg: &TrainConfig,
) -> Result<TrainingReport> {
    cfg.attack.validate()?;
    if cfg.w_pix < 0.0 || cfg.w_smt < 0.0 || (cfg.w_pix == 0.0 && cfg.w_smt == 0.0) {
        return Err(Error::Validation(
            "loss weights must be nonnegative and not both zero".into(),
        ));
    }
    let mut adam = Adam::new(AdamParams::with_lr(cfg.lr));
    let mut report = TrainingReport {
        epochs: Vec::new(),
        final_accuracy: 0.0,
    };
    let mut best_adv = f64::NEG_INFINITY;
    let mut stale_epochs = 0usize;

    // eval subset: deterministic prefix of the validation split
    let val_range = ds.split_range(crate::data::Split::Val);
    let eval_indices: Vec<usize> = val_range.clone().take(cfg.eval_subset).collect();
    let (val_x, val_y) = if eval_indices.is_empty() {
        let fallback: Vec<usize> = ds.split_range(crate::data::Split::Train).take(cfg.eval_subset).collect();
        ds.gather(&fallback)
    } else {
        ds.gather(&eval_indices)
    };

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let checksum_before = classifier.params_checksum();
        let lr = scheduled_lr(cfg.lr, epoch);
        adam.set_lr(lr);
        let shuffle = Rng::derive(cfg.seed, 0x7151 + epoch as u64).next_u64();

        let mut pix_sum = 0.0;
        let mut smt_sum = 0.0;
        let mut batches = 0usize;
        let mut seen = 0usize;

        for (batch_idx, (x, y)) in ds
            .batches(crate::data::Split::Train, cfg.batch_size, Some(shuffle))
            .enumerate()
        {
            if let Some(cap) = cfg.train_subset {
                if seen >= cap {
                    break;
                }
            }
            seen += y.len();

            // 1. adversarial images against the frozen classifier
            let mut attack = cfg.attack.clone();
            attack.seed = Rng::derive(cfg.seed, ((epoch as u64) << 24) | batch_idx as u64).next_u64();
            let adv = run_attack(cfg.attack_method, classifier, None, &x, &y, &attack)?;

            // 2. gradient maps for the adversarial (and optionally benign) halves
            let g_adv = gradient_maps(classifier, &adv.x_adv, trn.cfg.norm_mode)?;
            let (x_in, pixel_target, labels, g_maps) = if cfg.include_benign {
                let g_ben = gradient_maps(classifier, &x, trn.cfg.norm_mode)?;
                let x_in = concat_batches(&adv.x_adv, &x)?;
                let target = concat_batches(&x, &x)?;
                let maps = concat_batches(&g_adv.maps, &g_ben.maps)?;
                let mut labels = y.clone();
                labels.extend_from_slice(&y);
                (x_in, target, labels, maps)
            } else {
                (adv.x_adv.clone(), x.clone(), y.clone(), g_adv.maps.clone())
            };

            // 3. restoration forward + composite loss
            let mut tape = Tape::new();
            let gv = tape.constant(&g_maps);
            let xv = tape.constant(&x_in);
            let restored = trn.forward_on_tape(&mut tape, gv, xv, true, false)?;
            let target_v = tape.constant(&pixel_target);
            let l_pix = pixel_loss(&mut tape, restored, target_v)?;
            let logits = classifier.forward(&mut tape, restored, false)?;
            let l_smt = semantic_loss(&mut tape, logits, &labels)?;
            let weighted_pix = tape.mul_scalar(l_pix, T::from_f64(cfg.w_pix));
            let weighted_smt = tape.mul_scalar(l_smt, T::from_f64(cfg.w_smt));
            let total = tape.add(weighted_pix, weighted_smt)?;

            let pix_value = tape.scalar_value(l_pix);
            let smt_value = tape.scalar_value(l_smt);
            let total_value = tape.scalar_value(total);
            if !total_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "restoration training diverged at epoch {epoch}"
                )));
            }
            debug_assert!(
                (total_value - (cfg.w_pix * pix_value + cfg.w_smt * smt_value)).abs() <= 1e-6,
                "loss composition drifted"
            );
            pix_sum += pix_value;
            smt_sum += smt_value;
            batches += 1;

            // 4. update θ only
            let grads = tape.backward(total)?;
            drop(tape);
            let mut params = trn.named_params_mut();
            for (_, p) in params.iter_mut() {
                grads.store_into(p);
            }
            adam.step(&mut params)?;
        }

        if classifier.params_checksum() != checksum_before {
            return Err(Error::Contract(
                "classifier parameters changed during restoration training".into(),
            ));
        }

        let clean_acc = defended_accuracy(classifier, trn, &val_x, &val_y, None)?;
        let adv_acc =
            defended_accuracy(classifier, trn, &val_x, &val_y, Some((&cfg.attack_method, &cfg.attack)))?;
        report.epochs.push(EpochRecord {
            epoch,
            lr,
            loss_pix: pix_sum / batches.max(1) as f64,
            loss_smt: smt_sum / batches.max(1) as f64,
            clean_acc,
            adv_acc: Some(adv_acc),
            wall_ms: start.elapsed().as_millis(),
        });
        report.final_accuracy = adv_acc;

        if cfg.early_stop_patience > 0 {
            if adv_acc > best_adv + EARLY_STOP_MIN_DELTA {
                best_adv = adv_acc;
                stale_epochs = 0;
            } else {
                stale_epochs += 1;
                if stale_epochs >= cfg.early_stop_patience {
                    break;
                }
            }
        }
    }
    Ok(report)
}

/// Stacks two batches along the sample axis.
fn concat_batches<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa[1..] != sb[1..] {
        return Err(Error::shape(
            "concat_batches",
            format!("per-sample shapes differ: {:?} vs {:?}", &sa[1..], &sb[1..]),
        ));
    }
    let mut shape = sa.to_vec();
    shape[0] = sa[0] + sb[0];
    let mut values = Vec::with_capacity(a.numel() + b.numel());
    values.extend_from_slice(a.values());
    values.extend_from_slice(b.values());
    Tensor::from_vec(shape, values)
}
