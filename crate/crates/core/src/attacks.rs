//! Gradient-based adversarial example generation under a shared ℓ∞-budget
//! contract.
//!
//! All methods run through one iterated sign-step loop that differs only in
//! initialization, iteration count, step size, and momentum. Projection
//! order is fixed: first the ε-ball clamp around the clean image, then the
//! [0, 1] pixel clamp — the two do not commute in general, and this order
//! repeated is idempotent. Update steps (sign, clamp) happen outside any
//! tape; the backward pass only ever materializes the input gradient.
//!
//! The single-step method is the degenerate loop (one step of size ε), so
//! the collapse identities hold bit-exactly by construction:
//! `fgsm == bim(T=1, α=ε)`, `pgd(random_init=false) == bim`, and
//! `mim(μ=0) == bim` (positive per-sample scaling never flips a sign).

use crate::error::{Error, Result};
use crate::gmem::gradient_maps;
use crate::models::{argmax_rows, Classifier};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trn::TrnModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Bim,
    Pgd,
    Mim,
    Ffgsm,
    Bpda,
}

impl AttackMethod {
    pub fn name(self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Bim => "bim",
            AttackMethod::Pgd => "pgd",
            AttackMethod::Mim => "mim",
            AttackMethod::Ffgsm => "ffgsm",
            AttackMethod::Bpda => "bpda",
        }
    }
}

impl std::str::FromStr for AttackMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackMethod::Fgsm),
            "bim" => Ok(AttackMethod::Bim),
            "pgd" => Ok(AttackMethod::Pgd),
            "mim" => Ok(AttackMethod::Mim),
            "ffgsm" => Ok(AttackMethod::Ffgsm),
            "bpda" => Ok(AttackMethod::Bpda),
            other => Err(Error::Config(format!("unknown attack method {other:?}"))),
        }
    }
}

/// Shared attack parameters, in pixel units. ε = 0 is the degenerate no-op
/// attack (useful for ablations); α may exceed ε (the fast single-step
/// method defaults to 1.25·ε), since the ball projection re-establishes the
/// budget after every step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub momentum_decay: f64,
    pub random_init: bool,
    pub seed: u64,
    /// Random restarts; the best (misclassified, then highest-loss)
    /// adversarial example is kept per sample.
    pub restarts: usize,
}

impl AttackConfig {
    /// Iterative defaults: ε = 8/255, α = 1/255, T = 10, μ = 1.
    pub fn iterative_default(seed: u64) -> Self {
        AttackConfig {
            epsilon: 8.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 10,
            momentum_decay: 1.0,
            random_init: true,
            seed,
            restarts: 1,
        }
    }

    /// Fast single-step defaults: random start, one step of 1.25·ε.
    pub fn ffgsm_default(seed: u64) -> Self {
        let epsilon = 8.0 / 255.0;
        AttackConfig {
            epsilon,
            alpha: 1.25 * epsilon,
            iterations: 1,
            momentum_decay: 0.0,
            random_init: true,
            seed,
            restarts: 1,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64, alpha: f64) -> Self {
        self.epsilon = epsilon;
        self.alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Validation(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        if self.alpha < 0.0 || !self.alpha.is_finite() {
            return Err(Error::Validation(format!("alpha {} must be ≥ 0", self.alpha)));
        }
        if self.iterations < 1 {
            return Err(Error::Validation("iterations must be ≥ 1".into()));
        }
        if self.momentum_decay < 0.0 {
            return Err(Error::Validation("momentum decay must be ≥ 0".into()));
        }
        if self.restarts < 1 {
            return Err(Error::Validation("restart count must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct AdversarialBatch<T: Scalar> {
    pub x_adv: Tensor<T>,
    pub x_clean: Tensor<T>,
    pub labels: Vec<usize>,
    pub config: AttackConfig,
    pub method: AttackMethod,
    /// Mean cross-entropy at each iterate of the first restart, x′₀ .. x′_T.
    pub loss_per_iter: Vec<f64>,
}

impl<T: Scalar> AdversarialBatch<T> {
    fn checked(self) -> Result<Self> {
        let dist = self.x_adv.linf_distance(&self.x_clean)?;
        if dist > self.config.epsilon + 1e-6 {
            return Err(Error::Contract(format!(
                "budget violated: ℓ∞ distance {} exceeds ε {}",
                dist, self.config.epsilon
            )));
        }
        if !self
            .x_adv
            .values()
            .iter()
            .all(|&v| v >= T::ZERO && v <= T::ONE)
        {
            return Err(Error::Contract("adversarial pixels left [0, 1]".into()));
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// Gradient and evaluation closures
// ---------------------------------------------------------------------------

/// Input gradient of the mean cross-entropy of the bare classifier.
fn classifier_grad<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(Vec<T>, f64)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let logits = model.forward(&mut tape, xv, false)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.scalar_value(loss);
    let mut grads = tape.backward(loss)?;
    let g = grads
        .take_wrt(x)
        .unwrap_or_else(|| vec![T::ZERO; x.numel()]);
    Ok((g, loss_value))
}

/// Input gradient of the defended pipeline under the image-stream backward
/// approximation: the forward pass is the honest C(TRN(G(x′), x′)), the
/// backward pass treats the gradient stream (and the map computation) as
/// constants.
fn bpda_grad<T: Scalar>(
    defense: &TrnModel<T>,
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
) -> Result<(Vec<T>, f64)> {
    let maps = gradient_maps(model, x, defense.cfg.norm_mode)?;
    let mut tape = Tape::new();
    let xv = tape.leaf(x, true);
    let gv = tape.constant(&maps.maps);
    let restored = defense.forward_on_tape(&mut tape, gv, xv, false, true)?;
    let logits = model.forward(&mut tape, restored, false)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let loss_value = tape.scalar_value(loss);
    let mut grads = tape.backward(loss)?;
    let g = grads
        .take_wrt(x)
        .unwrap_or_else(|| vec![T::ZERO; x.numel()]);
    Ok((g, loss_value))
}

/// Per-sample cross-entropy and predictions from logits, in f64.
fn per_sample_losses_and_preds<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> (Vec<f64>, Vec<usize>) {
    let preds = argmax_rows(logits);
    let k = logits.shape()[1];
    let vals = logits.values();
    let losses = labels
        .iter()
        .enumerate()
        .map(|(row, &y)| {
            let zr = &vals[row * k..(row + 1) * k];
            let m = zr.iter().fold(f64::MIN, |acc, v| acc.max(v.to_f64()));
            let lse = zr.iter().map(|v| (v.to_f64() - m).exp()).sum::<f64>().ln();
            lse - (zr[y].to_f64() - m)
        })
        .collect();
    (losses, preds)
}

// ---------------------------------------------------------------------------
// The shared loop
// ---------------------------------------------------------------------------

struct LoopSpec {
    iterations: usize,
    step: f64,
    random_init: bool,
    /// Momentum decay μ with per-sample ℓ1 gradient normalization.
    momentum: Option<f64>,
}

/// Projects candidate pixels into the ε-ball around the clean image and
/// then into [0, 1], in place.
fn project<T: Scalar>(candidate: &mut [T], clean: &[T], eps: T) {
    for (v, &x) in candidate.iter_mut().zip(clean) {
        let lo = x - eps;
        let hi = x + eps;
        let ball = (*v).max_s(lo).min_s(hi);
        *v = ball.max_s(T::ZERO).min_s(T::ONE);
    }
}

fn run_sign_attack<T, G, E>(
    method: AttackMethod,
    x_clean: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
    spec: LoopSpec,
    grad_fn: G,
    eval_fn: E,
) -> Result<AdversarialBatch<T>>
where
    T: Scalar,
    G: Fn(&Tensor<T>) -> Result<(Vec<T>, f64)>,
    E: Fn(&Tensor<T>) -> Result<Tensor<T>>,
{
    cfg.validate()?;
    if !x_clean
        .values()
        .iter()
        .all(|&v| v >= T::ZERO && v <= T::ONE)
    {
        return Err(Error::Validation("clean inputs must lie in [0, 1]".into()));
    }
    let shape = x_clean.shape().to_vec();
    let n = shape[0];
    if labels.len() != n {
        return Err(Error::Validation(format!(
            "{} labels for batch of {}",
            labels.len(),
            n
        )));
    }
    let plane = x_clean.numel() / n;
    let eps = T::from_f64(cfg.epsilon);
    let step = T::from_f64(spec.step);
    let clean = x_clean.values();

    // best-per-sample across restarts: (misclassified, loss) lexicographic
    let mut best_pixels: Vec<T> = clean.to_vec();
    let mut best_score: Vec<(bool, f64)> = vec![(false, f64::NEG_INFINITY); n];
    let mut first_trace: Vec<f64> = Vec::new();

    for restart in 0..cfg.restarts {
        let mut rng = Rng::derive(cfg.seed, restart as u64);
        let mut current: Vec<T> = clean.to_vec();
        if spec.random_init {
            for v in current.iter_mut() {
                *v += rng.uniform_s::<T>(-cfg.epsilon, cfg.epsilon);
            }
            project(&mut current, clean, eps);
        }
        let mut momentum_buf: Vec<T> = Vec::new();
        let mut trace = Vec::with_capacity(spec.iterations + 1);

        for _ in 0..spec.iterations {
            let x_t = Tensor::from_vec(shape.clone(), current.clone())?;
            let (grad, mean_loss) = grad_fn(&x_t)?;
            trace.push(mean_loss);

            let direction: &[T] = if let Some(mu) = spec.momentum {
                if momentum_buf.is_empty() {
                    momentum_buf = vec![T::ZERO; grad.len()];
                }
                let mu = T::from_f64(mu);
                for s in 0..n {
                    let seg = &grad[s * plane..(s + 1) * plane];
                    let mut l1 = T::ZERO;
                    for &g in seg {
                        l1 += g.abs();
                    }
                    // a zero-gradient sample skips normalization
                    let inv = if l1 > T::ZERO { T::ONE / l1 } else { T::ONE };
                    let mseg = &mut momentum_buf[s * plane..(s + 1) * plane];
                    for (m, &g) in mseg.iter_mut().zip(seg) {
                        *m = mu * *m + g * inv;
                    }
                }
                &momentum_buf
            } else {
                &grad
            };

            for (i, v) in current.iter_mut().enumerate() {
                let d = direction[i];
                let s = if d > T::ZERO {
                    T::ONE
                } else if d < T::ZERO {
                    -T::ONE
                } else {
                    T::ZERO
                };
                *v += step * s;
            }
            project(&mut current, clean, eps);

            #[cfg(debug_assertions)]
            {
                let worst = current
                    .iter()
                    .zip(clean)
                    .map(|(&a, &b)| (a - b).abs().to_f64())
                    .fold(0.0f64, f64::max);
                debug_assert!(worst <= cfg.epsilon + 1e-6, "budget violated mid-loop");
                debug_assert!(
                    current.iter().all(|&v| v >= T::ZERO && v <= T::ONE),
                    "pixels left [0,1] mid-loop"
                );
            }
        }

        // final evaluation of this restart
        let x_final = Tensor::from_vec(shape.clone(), current.clone())?;
        let logits = eval_fn(&x_final)?;
        let (losses, preds) = per_sample_losses_and_preds(&logits, labels);
        trace.push(losses.iter().sum::<f64>() / n.max(1) as f64);
        if restart == 0 {
            first_trace = trace;
        }
        for s in 0..n {
            let score = (preds[s] != labels[s], losses[s]);
            if score > best_score[s] {
                best_score[s] = score;
                best_pixels[s * plane..(s + 1) * plane]
                    .copy_from_slice(&current[s * plane..(s + 1) * plane]);
            }
        }
    }

    AdversarialBatch {
        x_adv: Tensor::from_vec(shape, best_pixels)?,
        x_clean: x_clean.clone(),
        labels: labels.to_vec(),
        config: cfg.clone(),
        method,
        loss_per_iter: first_trace,
    }
    .checked()
}

// ---------------------------------------------------------------------------
// Public attack entry points
// ---------------------------------------------------------------------------

fn check_labels<T: Scalar>(model: &Classifier<T>, labels: &[usize]) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.num_classes) {
        return Err(Error::Validation(format!(
            "label {} out of range for {} classes",
            bad, model.num_classes
        )));
    }
    Ok(())
}

/// Single sign step of size ε from the clean image.
pub fn fgsm<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    check_labels(model, labels)?;
    run_sign_attack(
        AttackMethod::Fgsm,
        x,
        labels,
        cfg,
        LoopSpec {
            iterations: 1,
            step: cfg.epsilon,
            random_init: false,
            momentum: None,
        },
        |xt| classifier_grad(model, xt, labels),
        |xt| model.logits(xt),
    )
}

/// T iterated sign steps of size α with ball projection, starting at x.
pub fn bim<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    check_labels(model, labels)?;
    run_sign_attack(
        AttackMethod::Bim,
        x,
        labels,
        cfg,
        LoopSpec {
            iterations: cfg.iterations,
            step: cfg.alpha,
            random_init: false,
            momentum: None,
        },
        |xt| classifier_grad(model, xt, labels),
        |xt| model.logits(xt),
    )
}

/// BIM with uniform random initialization inside the budget (when
/// `random_init` is set) and optional restarts.
pub fn pgd<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    check_labels(model, labels)?;
    run_sign_attack(
        AttackMethod::Pgd,
        x,
        labels,
        cfg,
        LoopSpec {
            iterations: cfg.iterations,
            step: cfg.alpha,
            random_init: cfg.random_init,
            momentum: None,
        },
        |xt| classifier_grad(model, xt, labels),
        |xt| model.logits(xt),
    )
}

/// Momentum-iterative variant: the step direction is the sign of an
/// exponentially accumulated, per-sample ℓ1-normalized gradient.
pub fn mim<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    check_labels(model, labels)?;
    run_sign_attack(
        AttackMethod::Mim,
        x,
        labels,
        cfg,
        LoopSpec {
            iterations: cfg.iterations,
            step: cfg.alpha,
            random_init: false,
            momentum: Some(cfg.momentum_decay),
        },
        |xt| classifier_grad(model, xt, labels),
        |xt| model.logits(xt),
    )
}

/// Fast single-step method: random start, one sign step of size α
/// (conventionally 1.25·ε), projected back into the budget.
pub fn ffgsm<T: Scalar>(
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    check_labels(model, labels)?;
    run_sign_attack(
        AttackMethod::Ffgsm,
        x,
        labels,
        cfg,
        LoopSpec {
            iterations: 1,
            step: cfg.alpha,
            random_init: true,
            momentum: None,
        },
        |xt| classifier_grad(model, xt, labels),
        |xt| model.logits(xt),
    )
}

/// Bypass attack on the defended pipeline: iterates like the random-start
/// attack but differentiates through the image stream only, while every
/// forward evaluation runs the full two-stream defense honestly.
pub fn bpda_attack<T: Scalar>(
    defense: &TrnModel<T>,
    model: &Classifier<T>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    check_labels(model, labels)?;
    run_sign_attack(
        AttackMethod::Bpda,
        x,
        labels,
        cfg,
        LoopSpec {
            iterations: cfg.iterations,
            step: cfg.alpha,
            random_init: cfg.random_init,
            momentum: None,
        },
        |xt| bpda_grad(defense, model, xt, labels),
        |xt| {
            let maps = gradient_maps(model, xt, defense.cfg.norm_mode)?;
            let restored = defense.restore(&maps, xt)?;
            model.logits(&restored)
        },
    )
}

/// Dispatch by method name; the bypass attack needs the defense.
pub fn run_attack<T: Scalar>(
    method: AttackMethod,
    model: &Classifier<T>,
    defense: Option<&TrnModel<T>>,
    x: &Tensor<T>,
    labels: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch<T>> {
    match method {
        AttackMethod::Fgsm => fgsm(model, x, labels, cfg),
        AttackMethod::Bim => bim(model, x, labels, cfg),
        AttackMethod::Pgd => pgd(model, x, labels, cfg),
        AttackMethod::Mim => mim(model, x, labels, cfg),
        AttackMethod::Ffgsm => ffgsm(model, x, labels, cfg),
        AttackMethod::Bpda => {
            let defense = defense.ok_or_else(|| {
                Error::Config("the bypass attack needs a restoration network".into())
            })?;
            bpda_attack(defense, model, x, labels, cfg)
        }
    }
}
