//! Experiment orchestration: accuracy evaluation under attack/defense
//! combinations, matrix runs with CSV/JSON reports, the bypass-attack gap,
//! and the composite gradient-check suite.
//!
//! Evaluation attacks target the bare classifier (gray-box) and are then
//! scored through the defense; the bypass attack is the exception and
//! targets the defended pipeline. Matrix cells run over frozen models and
//! record per-cell sample counts; a failing cell is recorded and the run
//! continues.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::attacks::{run_attack, AttackConfig, AttackMethod};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::gmem::gradient_maps;
use crate::gradcheck::{check_gradients, GradCheckRow, PointPlan, GRADCHECK_STEP, GRADCHECK_TOL};
use crate::models::Classifier;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::trn::{StreamMode, TrnConfig, TrnModel};

// ---------------------------------------------------------------------------
// Accuracy evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalOutcome {
    pub accuracy: f64,
    pub samples: usize,
}

/// Classification accuracy (percent) of the optionally defended classifier
/// over a split, under an optional attack. `max_samples` caps the evaluated
/// prefix; the sample count actually used is reported back.
pub fn evaluate_accuracy<T: Scalar>(
    classifier: &Classifier<T>,
    defense: Option<&TrnModel<T>>,
    attack: Option<(AttackMethod, &AttackConfig)>,
    ds: &Dataset<T>,
    split: Split,
    batch_size: usize,
    max_samples: Option<usize>,
) -> Result<EvalOutcome> {
    if ds.split_len(split) == 0 {
        return Err(Error::Validation(format!("{} split is empty", split.name())));
    }
    if let Some((AttackMethod::Bpda, _)) = attack {
        if defense.is_none() {
            return Err(Error::Config(
                "the bypass attack evaluates the defended pipeline; no defense given".into(),
            ));
        }
    }
    let mut correct = 0usize;
    let mut seen = 0usize;
    for (batch_idx, (x, y)) in ds.batches(split, batch_size, None).enumerate() {
        if let Some(cap) = max_samples {
            if seen >= cap {
                break;
            }
        }
        let x_eval = match attack {
            Some((method, cfg)) => {
                let mut cfg = cfg.clone();
                cfg.seed = Rng::derive(cfg.seed, batch_idx as u64).next_u64();
                // gray-box: craft against the bare classifier, except the
                // bypass attack which sees the pipeline
                let target_defense = match method {
                    AttackMethod::Bpda => defense,
                    _ => None,
                };
                run_attack(method, classifier, target_defense, &x, &y, &cfg)?.x_adv
            }
            None => x,
        };
        let x_final = match defense {
            Some(trn) => {
                let maps = gradient_maps(classifier, &x_eval, trn.cfg.norm_mode)?;
                trn.restore(&maps, &x_eval)?
            }
            None => x_eval,
        };
        let preds = classifier.predict(&x_final)?;
        correct += preds.iter().zip(&y).filter(|(p, y)| p == y).count();
        seen += y.len();
    }
    Ok(EvalOutcome {
        accuracy: 100.0 * correct as f64 / seen.max(1) as f64,
        samples: seen,
    })
}

// ---------------------------------------------------------------------------
// Matrix runs and reports
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct DefenseVariant<T: Scalar> {
    pub label: String,
    pub trn: Option<TrnModel<T>>,
}

#[derive(Debug, Clone)]
pub struct AttackVariant {
    pub label: String,
    /// None is the clean column.
    pub attack: Option<(AttackMethod, AttackConfig)>,
}

#[derive(Debug, Clone)]
pub struct MatrixConfig {
    pub split: Split,
    pub batch_size: usize,
    pub max_samples: Option<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum Cell {
    Ok { accuracy: f64, samples: usize },
    Failed { message: String },
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportRow {
    pub defense: String,
    pub cells: Vec<Cell>,
    /// max − min accuracy over the attack columns (clean column excluded).
    pub variation: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ReportMeta {
    pub dataset: String,
    pub split: String,
    pub seed: u64,
    pub version: String,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub attack_labels: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMeta,
}

impl Report {
    pub fn any_failed(&self) -> bool {
        self.rows
            .iter()
            .any(|r| r.cells.iter().any(|c| matches!(c, Cell::Failed { .. })))
    }

    pub fn cell(&self, defense: &str, attack: &str) -> Option<&Cell> {
        let col = self.attack_labels.iter().position(|l| l == attack)?;
        self.rows
            .iter()
            .find(|r| r.defense == defense)
            .map(|r| &r.cells[col])
    }

    pub fn accuracy(&self, defense: &str, attack: &str) -> Option<f64> {
        match self.cell(defense, attack)? {
            Cell::Ok { accuracy, .. } => Some(*accuracy),
            Cell::Failed { .. } => None,
        }
    }

    /// CSV mirror of the table structure. Wall time is deliberately absent
    /// so identical runs produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("defense");
        for label in &self.attack_labels {
            out.push(',');
            out.push_str(label);
        }
        out.push_str(",variation\n");
        for row in &self.rows {
            out.push_str(&row.defense);
            for cell in &row.cells {
                out.push(',');
                match cell {
                    Cell::Ok { accuracy, .. } => out.push_str(&format!("{accuracy:.2}")),
                    Cell::Failed { .. } => out.push_str("error"),
                }
            }
            match row.variation {
                Some(v) => out.push_str(&format!(",{v:.2}\n")),
                None => out.push_str(",\n"),
            }
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("report serialization failed: {e}")))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

/// Evaluates every (defense, attack) cell. Cell failures are recorded and
/// the run continues; check [`Report::any_failed`] for the exit status.
pub fn run_matrix<T: Scalar>(
    classifier: &Classifier<T>,
    defenses: &[DefenseVariant<T>],
    attacks: &[AttackVariant],
    ds: &Dataset<T>,
    cfg: &MatrixConfig,
) -> Report {
    let start = Instant::now();
    let mut rows = Vec::with_capacity(defenses.len());
    for defense in defenses {
        let mut cells = Vec::with_capacity(attacks.len());
        let mut attacked_accs: Vec<f64> = Vec::new();
        for attack in attacks {
            let outcome = evaluate_accuracy(
                classifier,
                defense.trn.as_ref(),
                attack.attack.as_ref().map(|(m, c)| (*m, c)),
                ds,
                cfg.split,
                cfg.batch_size,
                cfg.max_samples,
            );
            match outcome {
                Ok(o) => {
                    if attack.attack.is_some() {
                        attacked_accs.push(o.accuracy);
                    }
                    cells.push(Cell::Ok {
                        accuracy: o.accuracy,
                        samples: o.samples,
                    });
                }
                Err(e) => cells.push(Cell::Failed {
                    message: e.to_string(),
                }),
            }
        }
        let variation = if attacked_accs.is_empty() {
            None
        } else {
            let max = attacked_accs.iter().cloned().fold(f64::MIN, f64::max);
            let min = attacked_accs.iter().cloned().fold(f64::MAX, f64::min);
            Some(max - min)
        };
        rows.push(ReportRow {
            defense: defense.label.clone(),
            cells,
            variation,
        });
    }
    Report {
        attack_labels: attacks.iter().map(|a| a.label.clone()).collect(),
        rows,
        metadata: ReportMeta {
            dataset: ds.source.clone(),
            split: cfg.split.name().to_string(),
            seed: cfg.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_ms: start.elapsed().as_millis(),
        },
    }
}

// ---------------------------------------------------------------------------
// Bypass-attack gap
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BpdaGapReport {
    pub pgd_acc: f64,
    pub bpda_acc: f64,
    pub gap: f64,
    pub samples: usize,
}

/// Defended accuracy under the random-start iterative attack versus the
/// bypass attack, and their gap.
pub fn bpda_gap<T: Scalar>(
    classifier: &Classifier<T>,
    trn: &TrnModel<T>,
    ds: &Dataset<T>,
    split: Split,
    cfg: &AttackConfig,
    batch_size: usize,
    max_samples: Option<usize>,
) -> Result<BpdaGapReport> {
    let pgd = evaluate_accuracy(
        classifier,
        Some(trn),
        Some((AttackMethod::Pgd, cfg)),
        ds,
        split,
        batch_size,
        max_samples,
    )?;
    let bpda = evaluate_accuracy(
        classifier,
        Some(trn),
        Some((AttackMethod::Bpda, cfg)),
        ds,
        split,
        batch_size,
        max_samples,
    )?;
    Ok(BpdaGapReport {
        pgd_acc: pgd.accuracy,
        bpda_acc: bpda.accuracy,
        gap: pgd.accuracy - bpda.accuracy,
        samples: pgd.samples,
    })
}

// ---------------------------------------------------------------------------
// Attack spec and pixel-value parsing (CLI and config files)
// ---------------------------------------------------------------------------

/// Parses a pixel quantity that is either a decimal or an exact rational
/// like `8/255`.
pub fn parse_pixel_value(s: &str) -> Result<f64> {
    let bad = || Error::Config(format!("cannot parse pixel value {s:?}"));
    if let Some((num, den)) = s.split_once('/') {
        let n: f64 = num.trim().parse().map_err(|_| bad())?;
        let d: f64 = den.trim().parse().map_err(|_| bad())?;
        if d == 0.0 {
            return Err(bad());
        }
        Ok(n / d)
    } else {
        s.trim().parse().map_err(|_| bad())
    }
}

/// Parses `method=pgd,eps=8/255,alpha=1/255,iters=10,mu=1.0,seed=3,
/// init=true,restarts=1` into a method and config. Omitted keys take the
/// iterative defaults; `method=ffgsm` defaults α to 1.25·ε when alpha is
/// not given.
pub fn parse_attack_spec(spec: &str, default_seed: u64) -> Result<(AttackMethod, AttackConfig)> {
    let mut method: Option<AttackMethod> = None;
    let mut cfg = AttackConfig::iterative_default(default_seed);
    let mut alpha_given = false;
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("malformed attack entry {part:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        match k {
            "method" => method = Some(v.parse()?),
            "eps" => cfg.epsilon = parse_pixel_value(v)?,
            "alpha" => {
                cfg.alpha = parse_pixel_value(v)?;
                alpha_given = true;
            }
            "iters" => {
                cfg.iterations = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad iters {v:?}")))?
            }
            "mu" => {
                cfg.momentum_decay = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad mu {v:?}")))?
            }
            "seed" => {
                cfg.seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad seed {v:?}")))?
            }
            "init" => {
                cfg.random_init = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad init flag {v:?}")))?
            }
            "restarts" => {
                cfg.restarts = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad restarts {v:?}")))?
            }
            other => return Err(Error::Config(format!("unknown attack key {other:?}"))),
        }
    }
    let method = method.ok_or_else(|| Error::Config("attack spec needs method=…".into()))?;
    match method {
        AttackMethod::Ffgsm => {
            if !alpha_given {
                cfg.alpha = 1.25 * cfg.epsilon;
            }
            cfg.random_init = true;
        }
        AttackMethod::Bim => cfg.random_init = false,
        AttackMethod::Mim => cfg.random_init = false,
        _ => {}
    }
    cfg.validate()?;
    Ok((method, cfg))
}

// ---------------------------------------------------------------------------
// Experiment spec files: a line-oriented `key = value` format, with
// repeated `defense.<label>` and `attack.<label>` entries.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub dataset: String,
    pub classifier: PathBuf,
    pub defenses: Vec<(String, Option<PathBuf>)>,
    pub attacks: Vec<(String, Option<String>)>,
    pub split: Split,
    pub batch_size: usize,
    pub max_samples: Option<usize>,
    pub seed: u64,
    pub out_csv: Option<PathBuf>,
    pub out_json: Option<PathBuf>,
}

pub fn parse_experiment_spec(text: &str, origin: &str) -> Result<ExperimentSpec> {
    let mut dataset = None;
    let mut classifier = None;
    let mut defenses = Vec::new();
    let mut attacks = Vec::new();
    let mut split = Split::Test;
    let mut batch_size = 100usize;
    let mut max_samples = None;
    let mut seed = 7u64;
    let mut out_csv = None;
    let mut out_json = None;

    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::format(origin, format!("line {}: expected key = value", lineno + 1))
        })?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| Error::format(origin, format!("line {}: bad {what}", lineno + 1));
        match key {
            "dataset" => dataset = Some(value.to_string()),
            "classifier" => classifier = Some(PathBuf::from(value)),
            "split" => split = value.parse()?,
            "batch" => batch_size = value.parse().map_err(|_| bad("batch"))?,
            "max_samples" => max_samples = Some(value.parse().map_err(|_| bad("max_samples"))?),
            "seed" => seed = value.parse().map_err(|_| bad("seed"))?,
            "out_csv" => out_csv = Some(PathBuf::from(value)),
            "out_json" => out_json = Some(PathBuf::from(value)),
            _ if key.starts_with("defense.") => {
                let label = key.trim_start_matches("defense.").to_string();
                let path = (!value.is_empty()).then(|| PathBuf::from(value));
                defenses.push((label, path));
            }
            _ if key.starts_with("attack.") => {
                let label = key.trim_start_matches("attack.").to_string();
                let spec = (!value.is_empty()).then(|| value.to_string());
                attacks.push((label, spec));
            }
            other => {
                return Err(Error::format(
                    origin,
                    format!("line {}: unknown key {other:?}", lineno + 1),
                ))
            }
        }
    }
    Ok(ExperimentSpec {
        dataset: dataset.ok_or_else(|| Error::format(origin, "missing dataset ="))?,
        classifier: classifier.ok_or_else(|| Error::format(origin, "missing classifier ="))?,
        defenses,
        attacks,
        split,
        batch_size,
        max_samples,
        seed,
        out_csv,
        out_json,
    })
}

// ---------------------------------------------------------------------------
// Composite gradient checks
// ---------------------------------------------------------------------------

/// Central-difference check of a classifier composite: gradients w.r.t. the
/// input and every parameter of a reduced-width instance of the production
/// architecture, through conv/relu/residual/pool/dense/cross-entropy.
pub fn classifier_composite_gradcheck(seed: u64) -> Result<GradCheckRow> {
    let mut rng = Rng::new(seed);
    let mut model = Classifier::<f64>::new(&mut rng, (1, 12, 12), &[4, 6, 8], 5)?;
    model.head = crate::models::DenseLayer::he(&mut rng, 8, 5);
    let labels = vec![1usize, 4];
    let x = Tensor::rand_uniform(&mut rng, vec![2, 1, 12, 12], 0.1, 0.9);

    let mut leaves: Vec<Tensor<f64>> = vec![x];
    for (_, p) in model.named_params() {
        leaves.push(p.clone());
    }

    let assemble = |ts: &[Tensor<f64>]| -> Result<(Tape<f64>, crate::tape::Var, Vec<Tensor<f64>>)> {
        let mut m = model.clone();
        {
            let mut slots = m.named_params_mut();
            for (i, (_, slot)) in slots.iter_mut().enumerate() {
                **slot = ts[i + 1].clone();
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(&ts[0], true);
        let logits = m.forward(&mut tape, xv, true)?;
        let loss = tape.softmax_cross_entropy(logits, &labels)?;
        Ok((tape, loss, ts.to_vec()))
    };
    let f = |ts: &[Tensor<f64>]| -> Result<f64> {
        let (tape, loss, _) = assemble(ts)?;
        Ok(tape.scalar_value(loss))
    };
    let analytic = |ts: &[Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
        let (tape, loss, owned) = assemble(ts)?;
        let mut grads = tape.backward(loss)?;
        Ok(owned
            .iter()
            .map(|t| grads.take_wrt(t).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect())
    };
    check_gradients(
        "classifier composite",
        &leaves.clone(),
        &f,
        &analytic,
        PointPlan::PerLeaf(2),
        GRADCHECK_STEP,
        GRADCHECK_TOL,
        seed ^ 0xABCD,
    )
}

/// Central-difference check of the full defended-training composite: the
/// restoration network (both streams, channel attention, clamp) feeding the
/// frozen classifier, under the summed pixel + semantic loss. Gradients are
/// checked w.r.t. every restoration parameter and the adversarial image.
pub fn trn_composite_gradcheck(seed: u64) -> Result<GradCheckRow> {
    let mut rng = Rng::new(seed);
    let mut classifier = Classifier::<f64>::new(&mut rng, (1, 8, 8), &[4, 6], 4)?;
    classifier.head = crate::models::DenseLayer::he(&mut rng, 6, 4);
    let cfg = TrnConfig {
        blocks: 2,
        feature_width: 8,
        growth: 4,
        ca_reduction: 4,
        stream: StreamMode::TwoStream,
        norm_mode: crate::gmem::NormMode::None,
        per_block_image_residual: false,
        image_shape: (1, 8, 8),
        class_count: 4,
    };
    let mut trn = TrnModel::<f64>::new(&mut rng, cfg)?;
    // non-zero head so no parameter is dead, scaled small so the clamp
    // stays strictly interior
    for (name, p) in trn.named_params_mut() {
        if name.starts_with("head") {
            let mut r = Rng::derive(seed, 0xF00D);
            let small: Vec<f64> = (0..p.numel()).map(|_| r.uniform(-0.02, 0.02)).collect();
            p.set_values(small)?;
        }
    }
    let labels = vec![2usize, 0];
    let x_adv = Tensor::rand_uniform(&mut rng, vec![2, 1, 8, 8], 0.15, 0.85);
    let x_clean = Tensor::rand_uniform(&mut rng, vec![2, 1, 8, 8], 0.1, 0.9);
    let maps = Tensor::rand_uniform(&mut rng, vec![2, 4, 8, 8], -1.0, 1.0);

    let mut leaves: Vec<Tensor<f64>> = vec![x_adv];
    for (_, p) in trn.named_params() {
        leaves.push(p.clone());
    }

    let assemble = |ts: &[Tensor<f64>]| -> Result<(Tape<f64>, crate::tape::Var)> {
        let mut net = trn.clone();
        {
            let mut slots = net.named_params_mut();
            for (i, (_, slot)) in slots.iter_mut().enumerate() {
                **slot = ts[i + 1].clone();
            }
        }
        let mut tape = Tape::new();
        let xv = tape.leaf(&ts[0], true);
        let gv = tape.constant(&maps);
        let restored = net.forward_on_tape(&mut tape, gv, xv, true, false)?;
        let cv = tape.constant(&x_clean);
        let l_pix = tape.l2_loss(restored, cv)?;
        let logits = classifier.forward(&mut tape, restored, false)?;
        let l_smt = tape.softmax_cross_entropy(logits, &labels)?;
        let total = tape.add(l_pix, l_smt)?;
        Ok((tape, total))
    };
    let f = |ts: &[Tensor<f64>]| -> Result<f64> {
        let (tape, loss) = assemble(ts)?;
        Ok(tape.scalar_value(loss))
    };
    let analytic = |ts: &[Tensor<f64>]| -> Result<Vec<Vec<f64>>> {
        let (tape, loss) = assemble(ts)?;
        let mut grads = tape.backward(loss)?;
        Ok(ts
            .iter()
            .map(|t| grads.take_wrt(t).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect())
    };
    check_gradients(
        "restoration composite",
        &leaves.clone(),
        &f,
        &analytic,
        PointPlan::PerLeaf(2),
        GRADCHECK_STEP,
        GRADCHECK_TOL,
        seed ^ 0xBEEF,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_dataset_with_split;
    use crate::data::{SynthSplit, SynthStyle};
    use crate::gmem::NormMode;
    use crate::models::DenseLayer;

    fn tiny_setup() -> (Dataset<f32>, Classifier<f32>) {
        let ds = synth_dataset_with_split(
            21,
            SynthSplit {
                train_per_class: 4,
                val_per_class: 1,
                test_per_class: 3,
            },
            4,
            (1, 8, 8),
            SynthStyle {
                noise: 0.08,
                ..SynthStyle::default()
            },
        )
        .unwrap();
        let mut rng = Rng::new(33);
        let mut clf = Classifier::new(&mut rng, (1, 8, 8), &[4, 6], 4).unwrap();
        clf.head = DenseLayer::he(&mut rng, 6, 4);
        (ds, clf)
    }

    fn identity_trn() -> TrnModel<f32> {
        TrnModel::new(
            &mut Rng::new(5),
            TrnConfig {
                blocks: 1,
                feature_width: 8,
                growth: 4,
                ca_reduction: 4,
                stream: StreamMode::TwoStream,
                norm_mode: NormMode::PerMapStd,
                per_block_image_residual: false,
                image_shape: (1, 8, 8),
                class_count: 4,
            },
        )
        .unwrap()
    }

    #[test]
    fn chance_level_accuracy_for_zero_head() {
        let ds = synth_dataset_with_split(
            9,
            SynthSplit {
                train_per_class: 0,
                val_per_class: 0,
                test_per_class: 120,
            },
            4,
            (1, 8, 8),
            SynthStyle::default(),
        )
        .unwrap();
        let mut rng = Rng::new(1);
        let clf = Classifier::<f32>::new(&mut rng, (1, 8, 8), &[4], 4).unwrap();
        let out = evaluate_accuracy(&clf, None, None, &ds, Split::Test, 64, None).unwrap();
        // all-zero logits ⇒ argmax ties to class 0 ⇒ exactly 1/n on a
        // class-balanced split
        assert_eq!(out.samples, 480);
        assert!((out.accuracy - 25.0).abs() < 5.0, "{}", out.accuracy);
    }

    #[test]
    fn identity_defense_changes_nothing() {
        let (ds, clf) = tiny_setup();
        let trn = identity_trn();
        let clean = evaluate_accuracy(&clf, None, None, &ds, Split::Test, 16, None).unwrap();
        let defended = evaluate_accuracy(&clf, Some(&trn), None, &ds, Split::Test, 16, None).unwrap();
        assert_eq!(clean.accuracy, defended.accuracy);
    }

    #[test]
    fn bpda_gap_is_exactly_zero_for_identity_defense() {
        let (ds, clf) = tiny_setup();
        let trn = identity_trn();
        let cfg = AttackConfig {
            iterations: 3,
            ..AttackConfig::iterative_default(11)
        };
        let report = bpda_gap(&clf, &trn, &ds, Split::Test, &cfg, 8, Some(8)).unwrap();
        assert_eq!(report.gap, 0.0, "{report:?}");
    }

    #[test]
    fn matrix_covers_every_cell_with_counts_and_variation() {
        let (ds, clf) = tiny_setup();
        let defenses = vec![
            DefenseVariant {
                label: "none".into(),
                trn: None,
            },
            DefenseVariant {
                label: "identity".into(),
                trn: Some(identity_trn()),
            },
        ];
        let fast = AttackConfig {
            iterations: 2,
            ..AttackConfig::iterative_default(3)
        };
        let attacks = vec![
            AttackVariant {
                label: "none".into(),
                attack: None,
            },
            AttackVariant {
                label: "fgsm".into(),
                attack: Some((AttackMethod::Fgsm, fast.clone())),
            },
            AttackVariant {
                label: "pgd".into(),
                attack: Some((AttackMethod::Pgd, fast)),
            },
        ];
        let report = run_matrix(
            &clf,
            &defenses,
            &attacks,
            &ds,
            &MatrixConfig {
                split: Split::Test,
                batch_size: 8,
                max_samples: None,
                seed: 3,
            },
        );
        assert!(!report.any_failed());
        assert_eq!(report.rows.len(), 2);
        for row in &report.rows {
            assert_eq!(row.cells.len(), 3);
            assert!(row.variation.is_some());
            for cell in &row.cells {
                match cell {
                    Cell::Ok { samples, .. } => assert_eq!(*samples, 12),
                    Cell::Failed { message } => panic!("cell failed: {message}"),
                }
            }
        }
        // single cell matches a direct evaluation
        let direct = evaluate_accuracy(&clf, None, None, &ds, Split::Test, 8, None).unwrap();
        assert_eq!(report.accuracy("none", "none"), Some(direct.accuracy));
    }

    #[test]
    fn variation_of_constant_row_is_zero() {
        let (ds, clf) = tiny_setup();
        let defenses = vec![DefenseVariant::<f32> {
            label: "none".into(),
            trn: None,
        }];
        // two degenerate attacks with ε = 0 produce identical accuracy
        let noop = AttackConfig {
            epsilon: 0.0,
            alpha: 0.0,
            iterations: 1,
            ..AttackConfig::iterative_default(1)
        };
        let attacks = vec![
            AttackVariant {
                label: "a".into(),
                attack: Some((AttackMethod::Fgsm, noop.clone())),
            },
            AttackVariant {
                label: "b".into(),
                attack: Some((AttackMethod::Bim, noop)),
            },
        ];
        let report = run_matrix(
            &clf,
            &defenses,
            &attacks,
            &ds,
            &MatrixConfig {
                split: Split::Test,
                batch_size: 8,
                max_samples: None,
                seed: 3,
            },
        );
        assert_eq!(report.rows[0].variation, Some(0.0));
    }

    #[test]
    fn failed_cells_are_recorded_and_the_run_continues() {
        let (ds, clf) = tiny_setup();
        let defenses = vec![DefenseVariant::<f32> {
            label: "none".into(),
            trn: None,
        }];
        let attacks = vec![
            AttackVariant {
                // bypass attack without a defense must fail in-cell
                label: "bpda".into(),
                attack: Some((AttackMethod::Bpda, AttackConfig::iterative_default(1))),
            },
            AttackVariant {
                label: "none".into(),
                attack: None,
            },
        ];
        let report = run_matrix(
            &clf,
            &defenses,
            &attacks,
            &ds,
            &MatrixConfig {
                split: Split::Test,
                batch_size: 8,
                max_samples: None,
                seed: 3,
            },
        );
        assert!(report.any_failed());
        assert!(matches!(report.cell("none", "bpda"), Some(Cell::Failed { .. })));
        assert!(matches!(report.cell("none", "none"), Some(Cell::Ok { .. })));
    }

    #[test]
    fn csv_bytes_are_reproducible() {
        let (ds, clf) = tiny_setup();
        let defenses = vec![DefenseVariant::<f32> {
            label: "none".into(),
            trn: None,
        }];
        let attacks = vec![AttackVariant {
            label: "pgd".into(),
            attack: Some((
                AttackMethod::Pgd,
                AttackConfig {
                    iterations: 2,
                    ..AttackConfig::iterative_default(9)
                },
            )),
        }];
        let cfg = MatrixConfig {
            split: Split::Test,
            batch_size: 8,
            max_samples: None,
            seed: 9,
        };
        let a = run_matrix(&clf, &defenses, &attacks, &ds, &cfg).to_csv();
        let b = run_matrix(&clf, &defenses, &attacks, &ds, &cfg).to_csv();
        assert_eq!(a, b);
    }

    #[test]
    fn pixel_values_parse_rationals_exactly() {
        assert_eq!(parse_pixel_value("8/255").unwrap(), 8.0 / 255.0);
        assert_eq!(parse_pixel_value("0.25").unwrap(), 0.25);
        assert!(parse_pixel_value("x/255").is_err());
        assert!(parse_pixel_value("1/0").is_err());
    }

    #[test]
    fn attack_specs_parse_with_defaults() {
        let (method, cfg) = parse_attack_spec("method=pgd,eps=8/255,alpha=1/255,iters=10", 5).unwrap();
        assert_eq!(method, AttackMethod::Pgd);
        assert_eq!(cfg.epsilon, 8.0 / 255.0);
        assert_eq!(cfg.iterations, 10);
        assert!(cfg.random_init);

        let (m2, c2) = parse_attack_spec("method=ffgsm,eps=8/255", 5).unwrap();
        assert_eq!(m2, AttackMethod::Ffgsm);
        assert!((c2.alpha - 1.25 * 8.0 / 255.0).abs() < 1e-12);

        assert!(parse_attack_spec("eps=8/255", 5).is_err());
        assert!(parse_attack_spec("method=pgd,warp=1", 5).is_err());
    }

    #[test]
    fn experiment_spec_files_parse() {
        let text = "\
# comment
dataset = synth://seed=3,n=10,per_class=20
classifier = out/clf.gsck
defense.none =
defense.two-stream = out/trn.gsck
attack.none =
attack.pgd = method=pgd,eps=8/255,alpha=1/255,iters=10
split = test
batch = 50
seed = 11
out_csv = out/matrix.csv
";
        let spec = parse_experiment_spec(text, "test.cfg").unwrap();
        assert_eq!(spec.dataset, "synth://seed=3,n=10,per_class=20");
        assert_eq!(spec.defenses.len(), 2);
        assert_eq!(spec.defenses[0], ("none".to_string(), None));
        assert_eq!(spec.attacks.len(), 2);
        assert_eq!(spec.batch_size, 50);
        assert!(spec.out_json.is_none());

        assert!(parse_experiment_spec("dataset = x", "t").is_err()); // missing classifier
        assert!(parse_experiment_spec("nonsense line", "t").is_err());
    }

    #[test]
    fn composite_gradchecks_pass() {
        let row = classifier_composite_gradcheck(2025).unwrap();
        assert!(row.pass, "{}", row.summary());
        let row = trn_composite_gradcheck(2026).unwrap();
        assert!(row.pass, "{}", row.summary());
    }
}
