//! Gradient map estimation: per-class input gradients of a frozen
//! classifier, stacked along the channel axis in class order.
//!
//! The defender never sees the true label, so the estimator computes the
//! cross-entropy input gradient for every candidate class — there is no
//! label parameter anywhere in this module's API. One forward pass is
//! recorded and all class losses branch off the shared logits node, so a
//! batch costs one forward plus n backward sweeps; the counts are reported
//! so the harness can log and assert them.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::Classifier;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Scaling applied to raw per-class gradients before they enter the
/// restoration network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Divide each class map by its per-sample standard deviation (+1e-8).
    /// Raw cross-entropy gradients differ by orders of magnitude between the
    /// adversarial class and the rest, which destabilizes single-precision
    /// training; this keeps the sign structure and spatial patterns.
    PerMapStd,
    /// Elementwise sign.
    Sign,
    /// Identity: the literal per-class gradient.
    None,
}

impl NormMode {
    pub fn name(self) -> &'static str {
        match self {
            NormMode::PerMapStd => "per-map-std",
            NormMode::Sign => "sign",
            NormMode::None => "none",
        }
    }
}

impl std::str::FromStr for NormMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-map-std" => Ok(NormMode::PerMapStd),
            "sign" => Ok(NormMode::Sign),
            "none" => Ok(NormMode::None),
            other => Err(Error::Config(format!("unknown normalization mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientMaps<T: Scalar> {
    /// N×(n·C)×H×W, class maps stacked in ascending class order.
    pub maps: Tensor<T>,
    pub class_count: usize,
    pub normalization: NormMode,
}

/// Forward/backward pass bookkeeping for one estimator call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GmemCost {
    pub forward_passes: usize,
    pub backward_passes: usize,
}

pub fn gradient_maps<T: Scalar>(
    model: &Classifier<T>,
    x_adv: &Tensor<T>,
    mode: NormMode,
) -> Result<GradientMaps<T>> {
    gradient_maps_with_cost(model, x_adv, mode).map(|(maps, _)| maps)
}

pub fn gradient_maps_with_cost<T: Scalar>(
    model: &Classifier<T>,
    x_adv: &Tensor<T>,
    mode: NormMode,
) -> Result<(GradientMaps<T>, GmemCost)> {
    let shape = x_adv.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "gradient_maps",
            format!("expected N×C×H×W, got {shape:?}"),
        ));
    }
    if !x_adv.is_all_finite() {
        return Err(Error::Numeric("gradient_maps input contains non-finite values".into()));
    }
    let (n_batch, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let classes = model.num_classes;
    let plane = c * h * w;

    // One recorded forward; every class loss branches off the same logits.
    let mut tape = Tape::new();
    let x = x_adv.clone();
    let xv = tape.leaf(&x, true);
    let logits = model.forward(&mut tape, xv, false)?;
    let class_losses: Vec<_> = (0..classes)
        .map(|i| tape.softmax_cross_entropy(logits, &vec![i; n_batch]))
        .collect::<Result<_>>()?;

    // Independent backward sweeps over the shared tape, in parallel.
    let per_class: Vec<Vec<T>> = class_losses
        .par_iter()
        .map(|&loss| -> Result<Vec<T>> {
            let mut grads = tape.backward(loss)?;
            Ok(grads
                .take_wrt(&x)
                .expect("input is a gradient-bearing leaf"))
        })
        .collect::<Result<_>>()?;

    for (i, g) in per_class.iter().enumerate() {
        if !g.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite gradient in class-{i} map"
            )));
        }
    }

    // Stack: out[s, i·C + c, h, w] = grad_i[s, c, h, w]
    let mut stacked = vec![T::ZERO; n_batch * classes * plane];
    for (i, g) in per_class.iter().enumerate() {
        for s in 0..n_batch {
            let dst = (s * classes + i) * plane;
            stacked[dst..dst + plane].copy_from_slice(&g[s * plane..(s + 1) * plane]);
        }
    }
    let raw = Tensor::from_vec(vec![n_batch, classes * c, h, w], stacked)?;
    let maps = normalize_maps(&raw, mode, classes)?;
    Ok((
        GradientMaps {
            maps,
            class_count: classes,
            normalization: mode,
        },
        GmemCost {
            forward_passes: 1,
            backward_passes: classes,
        },
    ))
}

/// Applies the chosen scaling to a stacked N×(n·C)×H×W map tensor.
pub fn normalize_maps<T: Scalar>(raw: &Tensor<T>, mode: NormMode, class_count: usize) -> Result<Tensor<T>> {
    let shape = raw.shape();
    if shape.len() != 4 {
        return Err(Error::shape(
            "normalize_maps",
            format!("expected N×(n·C)×H×W, got {shape:?}"),
        ));
    }
    if !shape[1].is_multiple_of(class_count) {
        return Err(Error::shape(
            "normalize_maps",
            format!(
                "channel dim {} is not a multiple of class count {}",
                shape[1], class_count
            ),
        ));
    }
    match mode {
        NormMode::None => Ok(raw.clone()),
        NormMode::Sign => Ok(raw.sign()),
        NormMode::PerMapStd => {
            let (n, nc, h, w) = (shape[0], shape[1], shape[2], shape[3]);
            let c = nc / class_count;
            let block = c * h * w;
            let eps = T::from_f64(1e-8);
            let mut out = raw.to_vec();
            for s in 0..n {
                for i in 0..class_count {
                    let seg = &mut out[(s * class_count + i) * block..][..block];
                    let inv_len = T::from_f64(1.0 / block as f64);
                    let mut mean = T::ZERO;
                    for &v in seg.iter() {
                        mean += v;
                    }
                    mean *= inv_len;
                    let mut var = T::ZERO;
                    for &v in seg.iter() {
                        let d = v - mean;
                        var += d * d;
                    }
                    let std = (var * inv_len).sqrt();
                    let inv = T::ONE / (std + eps);
                    for v in seg.iter_mut() {
                        *v *= inv;
                    }
                }
            }
            Tensor::from_vec(shape.to_vec(), out)
        }
    }
}

/// Extracts the class-`i` slice (N×C×H×W) from stacked maps.
pub fn class_slice<T: Scalar>(maps: &GradientMaps<T>, class: usize, image_channels: usize) -> Tensor<T> {
    let shape = maps.maps.shape();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let block = image_channels * h * w;
    let vals = maps.maps.values();
    let mut out = Vec::with_capacity(n * block);
    for s in 0..n {
        let src = (s * maps.class_count + class) * block;
        out.extend_from_slice(&vals[src..src + block]);
    }
    Tensor::from_vec(vec![n, image_channels, h, w], out).expect("slice shape")
}
