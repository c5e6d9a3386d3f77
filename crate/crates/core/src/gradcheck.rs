//! Numerical verification utilities: central-difference gradient checks and
//! independent loop-oracle references.
//!
//! The references here stay deliberately naive — plain nested loops with no
//! shared code paths with the tape kernels — so they can serve as oracles
//! for the optimized implementations. Gradient checks run in `f64`.

use crate::error::Result;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One line of a gradient-check report.
#[derive(Debug, Clone)]
pub struct GradCheckRow {
    pub name: String,
    pub max_rel_err: f64,
    pub points: usize,
    pub pass: bool,
}

impl GradCheckRow {
    pub fn summary(&self) -> String {
        format!(
            "{:<32} points={:<4} max_rel_err={:.3e}  {}",
            self.name,
            self.points,
            self.max_rel_err,
            if self.pass { "ok" } else { "FAIL" }
        )
    }
}

/// How to distribute sampled coordinates over the leaf tensors.
#[derive(Debug, Clone, Copy)]
pub enum PointPlan {
    /// N coordinates total, leaf chosen uniformly per point.
    Total(usize),
    /// N coordinates for every leaf; guarantees each leaf is exercised.
    PerLeaf(usize),
}

/// Scalar function of the leaf tensors.
pub type LossFn<'a> = dyn Fn(&[Tensor<f64>]) -> Result<f64> + 'a;
/// Analytic gradient of a [`LossFn`], one buffer per leaf.
pub type GradFn<'a> = dyn Fn(&[Tensor<f64>]) -> Result<Vec<Vec<f64>>> + 'a;
/// Tape-level builder returning a scalar var from the leaf vars.
pub type TapeBuildFn<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Relative error with a floor: coordinates where both gradients are
/// essentially zero count as exact.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs());
    if denom < 1e-8 {
        0.0
    } else {
        (analytic - numeric).abs() / denom
    }
}

/// Compares analytic gradients against central differences of `f` at
/// randomly sampled coordinates of the given leaves.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    name: &str,
    leaves: &[Tensor<f64>],
    f: &LossFn,
    analytic: &GradFn,
    plan: PointPlan,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckRow> {
    let grads = analytic(leaves)?;
    assert_eq!(grads.len(), leaves.len(), "one gradient per leaf");

    let mut rng = Rng::new(seed);
    let mut coords: Vec<(usize, usize)> = Vec::new();
    match plan {
        PointPlan::Total(n) => {
            for _ in 0..n {
                let li = rng.below(leaves.len());
                coords.push((li, rng.below(leaves[li].numel())));
            }
        }
        PointPlan::PerLeaf(n) => {
            for (li, leaf) in leaves.iter().enumerate() {
                for _ in 0..n {
                    coords.push((li, rng.below(leaf.numel())));
                }
            }
        }
    }

    let mut max_err = 0.0f64;
    for (li, ci) in coords.iter().copied() {
        let numeric = central_diff_at(leaves, f, li, ci, step)?;
        let err = rel_err(grads[li][ci], numeric);
        if err > max_err {
            max_err = err;
        }
    }
    Ok(GradCheckRow {
        name: name.to_string(),
        points: coords.len(),
        max_rel_err: max_err,
        pass: max_err < tol,
    })
}

fn central_diff_at(
    leaves: &[Tensor<f64>],
    f: &LossFn,
    leaf: usize,
    coord: usize,
    step: f64,
) -> Result<f64> {
    let eval = |delta: f64| -> Result<f64> {
        let mut perturbed: Vec<Tensor<f64>> = leaves.to_vec();
        let mut vals = perturbed[leaf].to_vec();
        vals[coord] += delta;
        perturbed[leaf] = Tensor::from_vec(perturbed[leaf].shape().to_vec(), vals)?;
        f(&perturbed)
    };
    Ok((eval(step)? - eval(-step)?) / (2.0 * step))
}

/// Gradient check for a function assembled from tape operations. The builder
/// receives one var per leaf, in order, and must return a scalar.
pub fn check_tape_fn(
    name: &str,
    leaves: &[Tensor<f64>],
    build: &TapeBuildFn,
    plan: PointPlan,
    step: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckRow> {
    type Recorded = (f64, Tape<f64>, Vec<Tensor<f64>>, Var);
    let run = |ts: &[Tensor<f64>]| -> Result<Recorded> {
        let mut tape = Tape::new();
        let owned: Vec<Tensor<f64>> = ts.to_vec();
        let vars: Vec<Var> = owned.iter().map(|t| tape.leaf(t, true)).collect();
        let loss = build(&mut tape, &vars)?;
        let v = tape.scalar_value(loss);
        Ok((v, tape, owned, loss))
    };

    let f = |ts: &[Tensor<f64>]| -> Result<f64> { run(ts).map(|(v, _, _, _)| v) };
    let analytic = |ts: &[Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
        let (_, tape, owned, loss) = run(ts)?;
        let mut grads = tape.backward(loss)?;
        Ok(owned
            .iter()
            .map(|t| grads.take_wrt(t).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect())
    };
    check_gradients(name, leaves, &f, &analytic, plan, step, tol, seed)
}

/// Shifts values with |v| < threshold away from the kink at zero, so ReLU
/// and sign-sensitive checks sample differentiable neighborhoods.
pub fn nudge_from_zero(t: &Tensor<f64>, threshold: f64) -> Tensor<f64> {
    let vals = t
        .to_vec()
        .into_iter()
        .map(|v| {
            if v.abs() < threshold {
                if v >= 0.0 {
                    v + 2.0 * threshold
                } else {
                    v - 2.0 * threshold
                }
            } else {
                v
            }
        })
        .collect();
    Tensor::from_vec(t.shape().to_vec(), vals).expect("same shape")
}

// ---------------------------------------------------------------------------
// Loop oracles
// ---------------------------------------------------------------------------

/// Direct 6-nested-loop convolution (7 with the batch loop), zero padding.
/// Independent of the im2col path; used to validate it.
#[allow(clippy::too_many_arguments)]
pub fn reference_conv2d<T: Scalar>(
    input: &[T],
    kernel: &[T],
    bias: &[T],
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> Vec<T> {
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![T::ZERO; n * cout * oh * ow];
    for s in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias[oc];
                    for c in 0..cin {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - padding as isize;
                                let ix = (ox * stride + kj) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let iv = input
                                    [((s * cin + c) * h + iy as usize) * w + ix as usize];
                                let kv = kernel[((oc * cin + c) * kh + ki) * kw + kj];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((s * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Naive triple-loop matrix product with bias, the dense-layer oracle.
pub fn reference_dense<T: Scalar>(
    x: &[T],
    w: &[T],
    b: &[T],
    n: usize,
    f: usize,
    k: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; n * k];
    for s in 0..n {
        for j in 0..k {
            let mut acc = b[j];
            for fi in 0..f {
                acc += x[s * f + fi] * w[fi * k + j];
            }
            out[s * k + j] = acc;
        }
    }
    out
}

/// Per-channel spatial mean, the pooling oracle.
pub fn reference_global_avg_pool<T: Scalar>(
    x: &[T],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let mut out = vec![T::ZERO; n * c];
    for i in 0..n * c {
        let mut acc = T::ZERO;
        for &v in &x[i * h * w..(i + 1) * h * w] {
            acc += v;
        }
        out[i] = acc * T::from_f64(1.0 / (h * w) as f64);
    }
    out
}

// ---------------------------------------------------------------------------
// Standard per-op check suite
// ---------------------------------------------------------------------------

pub const GRADCHECK_STEP: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Runs the central-difference suite over every differentiable tape op.
/// Ten random coordinates per op, step 1e-5, tolerance 1e-4, f64.
pub fn op_suite(seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = Rng::new(seed);
    let mut rows = Vec::new();
    let plan = PointPlan::Total(10);
    let check = |name: &str,
                     leaves: &[Tensor<f64>],
                     build: &TapeBuildFn,
                     rows: &mut Vec<GradCheckRow>,
                     seed: u64|
     -> Result<()> {
        rows.push(check_tape_fn(
            name,
            leaves,
            build,
            plan,
            GRADCHECK_STEP,
            GRADCHECK_TOL,
            seed,
        )?);
        Ok(())
    };

    let rand = |rng: &mut Rng, shape: Vec<usize>| Tensor::rand_uniform(rng, shape, -1.0, 1.0);

    // Reductions to a scalar go through l2_loss against a fixed target; the
    // l2 gradient itself is validated first, directly.
    let a = rand(&mut rng, vec![2, 3]);
    let b = rand(&mut rng, vec![2, 3]);
    check(
        "l2_loss",
        &[a, b],
        &|t, v| t.l2_loss(v[0], v[1]),
        &mut rows,
        11,
    )?;

    let x = rand(&mut rng, vec![4, 5]);
    let tgt = rand(&mut rng, vec![4, 5]);
    check(
        "add",
        &[x, tgt.clone()],
        &|t, v| {
            let s = t.add(v[0], v[1])?;
            let z = t.constant(&Tensor::zeros(vec![4, 5]));
            t.l2_loss(s, z)
        },
        &mut rows,
        12,
    )?;

    let x = rand(&mut rng, vec![3, 4]);
    check(
        "scalar_mul",
        &[x],
        &|t, v| {
            let s = t.mul_scalar(v[0], 0.37);
            let z = t.constant(&Tensor::zeros(vec![3, 4]));
            t.l2_loss(s, z)
        },
        &mut rows,
        13,
    )?;

    let x = nudge_from_zero(&rand(&mut rng, vec![4, 6]), 0.05);
    let target = rand(&mut rng, vec![4, 6]);
    check(
        "relu",
        &[x],
        &|t, v| {
            let r = t.relu(v[0]);
            let c = t.constant(&target);
            t.l2_loss(r, c)
        },
        &mut rows,
        14,
    )?;

    let x = rand(&mut rng, vec![4, 6]);
    let target = rand(&mut rng, vec![4, 6]);
    check(
        "sigmoid",
        &[x],
        &|t, v| {
            let r = t.sigmoid(v[0]);
            let c = t.constant(&target);
            t.l2_loss(r, c)
        },
        &mut rows,
        15,
    )?;

    // clamp01 kinks sit at 0 and 1; sample inside (0,1) away from both.
    let vals: Vec<f64> = (0..24).map(|_| rng.uniform(0.05, 0.95)).collect();
    let x = Tensor::from_vec(vec![4, 6], vals)?;
    let target = rand(&mut rng, vec![4, 6]);
    check(
        "clamp01",
        &[x],
        &|t, v| {
            let r = t.clamp01(v[0]);
            let c = t.constant(&target);
            t.l2_loss(r, c)
        },
        &mut rows,
        16,
    )?;

    for (name, stride, padding, seed) in [
        ("conv2d_s1_p1", 1usize, 1usize, 17u64),
        ("conv2d_s2_p1", 2, 1, 18),
        ("conv2d_s1_p0", 1, 0, 19),
    ] {
        let input = rand(&mut rng, vec![2, 3, 6, 6]);
        let kernel = rand(&mut rng, vec![4, 3, 3, 3]);
        let bias = rand(&mut rng, vec![4]);
        let oh = (6 + 2 * padding - 3) / stride + 1;
        let target = rand(&mut rng, vec![2, 4, oh, oh]);
        check(
            name,
            &[input, kernel, bias],
            &|t, v| {
                let c = t.conv2d(v[0], v[1], v[2], stride, padding)?;
                let tc = t.constant(&target);
                t.l2_loss(c, tc)
            },
            &mut rows,
            seed,
        )?;
    }

    let x = rand(&mut rng, vec![3, 5]);
    let w = rand(&mut rng, vec![5, 4]);
    let b = rand(&mut rng, vec![4]);
    let target = rand(&mut rng, vec![3, 4]);
    check(
        "dense",
        &[x, w, b],
        &|t, v| {
            let d = t.dense(v[0], v[1], v[2])?;
            let tc = t.constant(&target);
            t.l2_loss(d, tc)
        },
        &mut rows,
        20,
    )?;

    let p1 = rand(&mut rng, vec![2, 2, 3, 3]);
    let p2 = rand(&mut rng, vec![2, 3, 3, 3]);
    let target = rand(&mut rng, vec![2, 5, 3, 3]);
    check(
        "concat_channels",
        &[p1, p2],
        &|t, v| {
            let c = t.concat_channels(&[v[0], v[1]])?;
            let tc = t.constant(&target);
            t.l2_loss(c, tc)
        },
        &mut rows,
        21,
    )?;

    let x = rand(&mut rng, vec![2, 3, 4, 4]);
    let target = rand(&mut rng, vec![2, 3]);
    check(
        "global_avg_pool",
        &[x],
        &|t, v| {
            let g = t.global_avg_pool(v[0])?;
            let tc = t.constant(&target);
            t.l2_loss(g, tc)
        },
        &mut rows,
        22,
    )?;

    let x = rand(&mut rng, vec![2, 3, 4, 4]);
    let gates = rand(&mut rng, vec![2, 3]);
    let target = rand(&mut rng, vec![2, 3, 4, 4]);
    check(
        "scale_channels",
        &[x, gates],
        &|t, v| {
            let s = t.scale_channels(v[0], v[1])?;
            let tc = t.constant(&target);
            t.l2_loss(s, tc)
        },
        &mut rows,
        23,
    )?;

    let logits = rand(&mut rng, vec![4, 7]);
    let labels = vec![0usize, 3, 6, 2];
    check(
        "softmax_cross_entropy",
        &[logits],
        &|t, v| t.softmax_cross_entropy(v[0], &labels),
        &mut rows,
        24,
    )?;

    Ok(rows)
}
