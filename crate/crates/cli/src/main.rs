//! Experiment harness CLI.
//!
//! Subcommands: train-classifier, train-trn, attack, evaluate, matrix,
//! bpda, gradcheck. Dataset references are `synth://…`, `idx://…` or
//! `cifar://…`; relative dataset paths resolve against
//! `$GRADSHIELD_DATA_DIR` when set. Pixel quantities like ε accept exact
//! rationals (`8/255`) or decimals.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use gradshield::attacks::{AttackConfig, AttackMethod};
use gradshield::data::{load_ref, Dataset, Split};
use gradshield::gmem::{gradient_maps_with_cost, NormMode};
use gradshield::harness::{
    bpda_gap, evaluate_accuracy, parse_attack_spec, parse_experiment_spec, parse_pixel_value,
    run_matrix, AttackVariant, DefenseVariant, MatrixConfig,
};
use gradshield::models::{CheckpointMeta, Classifier};
use gradshield::training::{
    train_classifier, train_trn, write_report_jsonl, ClassifierTrainConfig, TrainConfig,
};
use gradshield::trn::{StreamMode, TrnConfig, TrnModel};
use gradshield::Scalar;

#[derive(Parser)]
#[command(name = "gradshield", version, about = "Gradient-map restoration defense experiments")]
struct Cli {
    /// Master seed for dataset generation, initialization and attacks.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Scalar precision for all computation.
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    precision: Precision,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
enum Precision {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Train the miniature residual classifier.
    TrainClassifier(TrainClassifierArgs),
    /// Adversarially train the restoration network against a frozen classifier.
    TrainTrn(TrainTrnArgs),
    /// Craft adversarial examples and report accuracy under the attack.
    Attack(AttackArgs),
    /// Evaluate accuracy of a classifier, optionally defended and attacked.
    Evaluate(EvaluateArgs),
    /// Run an attack × defense accuracy matrix from a spec file.
    Matrix(MatrixArgs),
    /// Compare the random-start iterative attack against the bypass attack
    /// on the defended pipeline and report the gap.
    Bpda(BpdaArgs),
    /// Check analytic gradients against central differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct TrainClassifierArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// JSON-lines training report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct TrainTrnArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training attack method.
    #[arg(long, default_value = "mim")]
    attack: String,
    #[arg(long, default_value = "8/255")]
    eps: String,
    #[arg(long, default_value = "1/255")]
    alpha: String,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long, default_value_t = 2)]
    epochs: usize,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 2)]
    blocks: usize,
    #[arg(long, default_value = "two-stream")]
    stream: String,
    #[arg(long, default_value = "per-map-std")]
    norm: String,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long, default_value_t = 16)]
    growth: usize,
    #[arg(long, default_value_t = 4)]
    ca_reduction: usize,
    /// Mix benign pairs 1:1 into every training batch.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    include_benign: bool,
    #[arg(long, default_value_t = 1.0)]
    w_pix: f64,
    #[arg(long, default_value_t = 1.0)]
    w_smt: f64,
    /// Cap on training samples per epoch.
    #[arg(long)]
    train_subset: Option<usize>,
    /// Validation samples for per-epoch defended accuracy.
    #[arg(long, default_value_t = 200)]
    eval_subset: usize,
    /// Early-stop patience in epochs (0 disables).
    #[arg(long, default_value_t = 10)]
    patience: usize,
    /// Per-block image-space residual heads instead of one network head.
    #[arg(long, default_value_t = false)]
    per_block_image_residual: bool,
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    method: String,
    #[arg(long)]
    data: String,
    #[arg(long)]
    classifier: PathBuf,
    /// Restoration network; required for the bypass attack, otherwise used
    /// to additionally report defended accuracy.
    #[arg(long)]
    trn: Option<PathBuf>,
    #[arg(long, default_value = "8/255")]
    eps: String,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value_t = 1.0)]
    mu: f64,
    #[arg(long)]
    init: Option<bool>,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long)]
    max_samples: Option<usize>,
    /// Dump the first batch's per-class gradient maps as .gtns blobs.
    #[arg(long)]
    dump_gradmaps: Option<PathBuf>,
    /// Save the first batch's adversarial images as a .gtns blob.
    #[arg(long)]
    save_adv: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    trn: Option<PathBuf>,
    /// Attack spec, e.g. `method=pgd,eps=8/255,alpha=1/255,iters=10`.
    #[arg(long)]
    attack: Option<String>,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 100)]
    batch: usize,
    #[arg(long)]
    max_samples: Option<usize>,
}

#[derive(Args)]
struct MatrixArgs {
    /// Experiment spec file (key = value lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the spec's CSV output path.
    #[arg(long)]
    out_csv: Option<PathBuf>,
    /// Override the spec's JSON output path.
    #[arg(long)]
    out_json: Option<PathBuf>,
}

#[derive(Args)]
struct BpdaArgs {
    #[arg(long)]
    data: String,
    #[arg(long)]
    classifier: PathBuf,
    #[arg(long)]
    trn: PathBuf,
    #[arg(long, default_value = "8/255")]
    eps: String,
    #[arg(long, default_value = "1/255")]
    alpha: String,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long, default_value_t = 50)]
    batch: usize,
    #[arg(long)]
    max_samples: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Seed for the sampled check points.
    #[arg(long, default_value_t = 2024)]
    check_seed: u64,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("thread pool already initialized")?;
    }
    match cli.precision {
        Precision::F32 => run::<f32>(cli),
        Precision::F64 => run::<f64>(cli),
    }
}

fn data_dir() -> Option<PathBuf> {
    std::env::var_os("GRADSHIELD_DATA_DIR").map(PathBuf::from)
}

fn load_dataset<T: Scalar>(reference: &str) -> Result<Dataset<T>> {
    load_ref(reference, data_dir().as_deref())
        .with_context(|| format!("loading dataset {reference}"))
}

fn load_classifier<T: Scalar>(path: &Path) -> Result<Classifier<T>> {
    let (model, _) = Classifier::load(path)
        .with_context(|| format!("loading classifier {}", path.display()))?;
    Ok(model)
}

fn load_trn<T: Scalar>(path: &Path) -> Result<TrnModel<T>> {
    let (model, _) =
        TrnModel::load(path).with_context(|| format!("loading restoration network {}", path.display()))?;
    Ok(model)
}

fn run<T: Scalar>(cli: Cli) -> Result<()> {
    match cli.command {
        Command::TrainClassifier(args) => cmd_train_classifier::<T>(cli.seed, args),
        Command::TrainTrn(args) => cmd_train_trn::<T>(cli.seed, args),
        Command::Attack(args) => cmd_attack::<T>(cli.seed, args),
        Command::Evaluate(args) => cmd_evaluate::<T>(cli.seed, args),
        Command::Matrix(args) => cmd_matrix::<T>(args),
        Command::Bpda(args) => cmd_bpda::<T>(cli.seed, args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
    }
}

fn cmd_train_classifier<T: Scalar>(seed: u64, args: TrainClassifierArgs) -> Result<()> {
    let ds = load_dataset::<T>(&args.data)?;
    let (c, h, w) = ds.image_shape();
    let mut rng = gradshield::Rng::new(seed);
    let mut model = Classifier::<T>::desk_scale(&mut rng, (c, h, w), ds.class_count);
    let cfg = ClassifierTrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        seed,
    };
    let report = train_classifier(&ds, &mut model, &cfg)?;
    for record in &report.epochs {
        println!(
            "epoch {:>3}  lr {:.1e}  loss {:.4}  val_acc {:.2}%  ({} ms)",
            record.epoch, record.lr, record.loss_smt, record.clean_acc, record.wall_ms
        );
    }
    model.save_with_meta(
        &args.out,
        &CheckpointMeta {
            epochs: Some(args.epochs as u32),
            final_accuracy: Some(report.final_accuracy),
        },
    )?;
    println!("saved classifier to {}", args.out.display());
    if let Some(path) = args.report {
        write_report_jsonl(&path, &report)?;
    }
    Ok(())
}

fn cmd_train_trn<T: Scalar>(seed: u64, args: TrainTrnArgs) -> Result<()> {
    let ds = load_dataset::<T>(&args.data)?;
    let classifier = load_classifier::<T>(&args.classifier)?;
    let (c, h, w) = ds.image_shape();
    let trn_cfg = TrnConfig {
        blocks: args.blocks,
        feature_width: args.width,
        growth: args.growth,
        ca_reduction: args.ca_reduction,
        stream: args.stream.parse::<StreamMode>()?,
        norm_mode: args.norm.parse::<NormMode>()?,
        per_block_image_residual: args.per_block_image_residual,
        image_shape: (c, h, w),
        class_count: ds.class_count,
    };
    let mut rng = gradshield::Rng::new(seed ^ 0x7124);
    let mut trn = TrnModel::<T>::new(&mut rng, trn_cfg)?;

    let attack_method: AttackMethod = args.attack.parse()?;
    let epsilon = parse_pixel_value(&args.eps)?;
    let alpha = parse_pixel_value(&args.alpha)?;
    let attack = AttackConfig {
        epsilon,
        alpha,
        iterations: args.iters,
        momentum_decay: args.mu,
        random_init: matches!(attack_method, AttackMethod::Pgd | AttackMethod::Ffgsm),
        seed,
        restarts: 1,
    };
    let cfg = TrainConfig {
        epochs: args.epochs,
        batch_size: args.batch,
        lr: args.lr,
        attack_method,
        attack,
        include_benign: args.include_benign,
        w_pix: args.w_pix,
        w_smt: args.w_smt,
        seed,
        train_subset: args.train_subset,
        eval_subset: args.eval_subset,
        early_stop_patience: args.patience,
    };
    let report = train_trn(&ds, &classifier, &mut trn, &cfg)?;
    for record in &report.epochs {
        println!(
            "epoch {:>3}  lr {:.1e}  pix {:.5}  smt {:.4}  clean {:.2}%  adv {:.2}%  ({} ms)",
            record.epoch,
            record.lr,
            record.loss_pix,
            record.loss_smt,
            record.clean_acc,
            record.adv_acc.unwrap_or(f64::NAN),
            record.wall_ms
        );
    }
    trn.save_with_meta(
        &args.out,
        &CheckpointMeta {
            epochs: Some(report.epochs.len() as u32),
            final_accuracy: Some(report.final_accuracy),
        },
    )?;
    println!("saved restoration network to {}", args.out.display());
    if let Some(path) = args.report {
        write_report_jsonl(&path, &report)?;
    }
    Ok(())
}

fn attack_config_from(args: &AttackArgs, method: AttackMethod, seed: u64) -> Result<AttackConfig> {
    let epsilon = parse_pixel_value(&args.eps)?;
    let alpha = match &args.alpha {
        Some(a) => parse_pixel_value(a)?,
        None => match method {
            AttackMethod::Ffgsm => 1.25 * epsilon,
            AttackMethod::Fgsm => epsilon,
            _ => 1.0 / 255.0,
        },
    };
    let random_init = args
        .init
        .unwrap_or(matches!(method, AttackMethod::Pgd | AttackMethod::Ffgsm | AttackMethod::Bpda));
    let cfg = AttackConfig {
        epsilon,
        alpha,
        iterations: args.iters,
        momentum_decay: args.mu,
        random_init,
        seed,
        restarts: args.restarts,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_attack<T: Scalar>(seed: u64, args: AttackArgs) -> Result<()> {
    let method: AttackMethod = args.method.parse()?;
    let ds = load_dataset::<T>(&args.data)?;
    let classifier = load_classifier::<T>(&args.classifier)?;
    let trn = args.trn.as_deref().map(load_trn::<T>).transpose()?;
    if method == AttackMethod::Bpda && trn.is_none() {
        bail!("--method bpda requires --trn");
    }
    let split: Split = args.split.parse()?;
    let cfg = attack_config_from(&args, method, seed)?;

    // optional artifacts from the first batch
    if args.dump_gradmaps.is_some() || args.save_adv.is_some() {
        if let Some((x, y)) = ds.batches(split, args.batch, None).next() {
            let adv =
                gradshield::attacks::run_attack(method, &classifier, trn.as_ref(), &x, &y, &cfg)?;
            if let Some(dir) = &args.dump_gradmaps {
                std::fs::create_dir_all(dir)
                    .with_context(|| format!("creating {}", dir.display()))?;
                let mode = trn.as_ref().map(|t| t.cfg.norm_mode).unwrap_or(NormMode::PerMapStd);
                let (maps, cost) = gradient_maps_with_cost(&classifier, &adv.x_adv, mode)?;
                println!(
                    "gradient maps: {} forward, {} backward passes for {} samples",
                    cost.forward_passes,
                    cost.backward_passes,
                    y.len()
                );
                maps.maps.save(&dir.join("gradmaps_batch0.gtns"))?;
                adv.x_adv.save(&dir.join("adversarial_batch0.gtns"))?;
                println!("dumped gradient maps to {}", dir.display());
            }
            if let Some(path) = &args.save_adv {
                adv.x_adv.save(path)?;
                println!("saved adversarial batch to {}", path.display());
            }
        }
    }

    let undefended = evaluate_accuracy(
        &classifier,
        if method == AttackMethod::Bpda { trn.as_ref() } else { None },
        Some((method, &cfg)),
        &ds,
        split,
        args.batch,
        args.max_samples,
    )?;
    println!(
        "{} accuracy under {}: {:.2}% ({} samples, eps={:.5}, alpha={:.5}, T={})",
        if method == AttackMethod::Bpda { "defended" } else { "undefended" },
        method.name(),
        undefended.accuracy,
        undefended.samples,
        cfg.epsilon,
        cfg.alpha,
        cfg.iterations
    );
    if let (Some(trn), false) = (trn.as_ref(), method == AttackMethod::Bpda) {
        let defended = evaluate_accuracy(
            &classifier,
            Some(trn),
            Some((method, &cfg)),
            &ds,
            split,
            args.batch,
            args.max_samples,
        )?;
        println!(
            "defended accuracy under {}: {:.2}% ({} samples)",
            method.name(),
            defended.accuracy,
            defended.samples
        );
    }
    Ok(())
}

fn cmd_evaluate<T: Scalar>(seed: u64, args: EvaluateArgs) -> Result<()> {
    let ds = load_dataset::<T>(&args.data)?;
    let classifier = load_classifier::<T>(&args.classifier)?;
    let trn = args.trn.as_deref().map(load_trn::<T>).transpose()?;
    let split: Split = args.split.parse()?;
    let attack = args
        .attack
        .as_deref()
        .map(|spec| parse_attack_spec(spec, seed))
        .transpose()?;
    let outcome = evaluate_accuracy(
        &classifier,
        trn.as_ref(),
        attack.as_ref().map(|(m, c)| (*m, c)),
        &ds,
        split,
        args.batch,
        args.max_samples,
    )?;
    println!(
        "accuracy: {:.2}% ({} samples, defense={}, attack={})",
        outcome.accuracy,
        outcome.samples,
        if trn.is_some() { "trn" } else { "none" },
        attack.map(|(m, _)| m.name()).unwrap_or("none"),
    );
    Ok(())
}

fn cmd_matrix<T: Scalar>(args: MatrixArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.config)
        .with_context(|| format!("reading {}", args.config.display()))?;
    let spec = parse_experiment_spec(&text, &args.config.display().to_string())?;
    let ds = load_dataset::<T>(&spec.dataset)?;
    let classifier = load_classifier::<T>(&spec.classifier)?;
    let mut defenses = Vec::new();
    for (label, path) in &spec.defenses {
        defenses.push(DefenseVariant {
            label: label.clone(),
            trn: path.as_deref().map(load_trn::<T>).transpose()?,
        });
    }
    let mut attacks = Vec::new();
    for (label, attack_spec) in &spec.attacks {
        attacks.push(AttackVariant {
            label: label.clone(),
            attack: attack_spec
                .as_deref()
                .map(|s| parse_attack_spec(s, spec.seed))
                .transpose()?,
        });
    }
    let report = run_matrix(
        &classifier,
        &defenses,
        &attacks,
        &ds,
        &MatrixConfig {
            split: spec.split,
            batch_size: spec.batch_size,
            max_samples: spec.max_samples,
            seed: spec.seed,
        },
    );
    print!("{}", report.to_csv());
    if let Some(path) = args.out_csv.or(spec.out_csv) {
        report.write_csv(&path)?;
        println!("wrote {}", path.display());
    }
    if let Some(path) = args.out_json.or(spec.out_json) {
        report.write_json(&path)?;
        println!("wrote {}", path.display());
    }
    if report.any_failed() {
        std::process::exit(2);
    }
    Ok(())
}

fn cmd_bpda<T: Scalar>(seed: u64, args: BpdaArgs) -> Result<()> {
    let ds = load_dataset::<T>(&args.data)?;
    let classifier = load_classifier::<T>(&args.classifier)?;
    let trn = load_trn::<T>(&args.trn)?;
    let split: Split = args.split.parse()?;
    let cfg = AttackConfig {
        epsilon: parse_pixel_value(&args.eps)?,
        alpha: parse_pixel_value(&args.alpha)?,
        iterations: args.iters,
        momentum_decay: 1.0,
        random_init: true,
        seed,
        restarts: 1,
    };
    let report = bpda_gap(&classifier, &trn, &ds, split, &cfg, args.batch, args.max_samples)?;
    println!(
        "pgd_acc {:.2}%  bpda_acc {:.2}%  gap {:.2} ({} samples)",
        report.pgd_acc, report.bpda_acc, report.gap, report.samples
    );
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let mut all_pass = true;
    for row in gradshield::gradcheck::op_suite(args.check_seed)? {
        println!("{}", row.summary());
        all_pass &= row.pass;
    }
    let row = gradshield::harness::classifier_composite_gradcheck(args.check_seed ^ 1)?;
    println!("{}", row.summary());
    all_pass &= row.pass;
    let row = gradshield::harness::trn_composite_gradcheck(args.check_seed ^ 2)?;
    println!("{}", row.summary());
    all_pass &= row.pass;
    if !all_pass {
        bail!("gradient checks failed");
    }
    println!("all gradient checks passed");
    Ok(())
}
