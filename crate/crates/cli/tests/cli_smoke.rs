//! End-to-end smoke tests of the binary over a miniature synthetic task.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gradshield"))
}

const TINY_DS: &str = "synth://seed=3,n=10,train=8,val=4,test=4,amp=0.3";

fn train_tiny_classifier(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("clf.gsck");
    let status = bin()
        .args([
            "train-classifier",
            "--data",
            TINY_DS,
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch",
            "16",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    out
}

#[test]
fn gradcheck_subcommand_passes() {
    let output = bin().arg("gradcheck").output().unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stdout));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("all gradient checks passed"));
}

#[test]
fn train_evaluate_attack_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let clf = train_tiny_classifier(dir.path());

    let output = bin()
        .args(["evaluate", "--data", TINY_DS, "--classifier", clf.to_str().unwrap(), "--split", "test"])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("accuracy:"));

    let output = bin()
        .args([
            "attack",
            "--method",
            "fgsm",
            "--eps",
            "8/255",
            "--data",
            TINY_DS,
            "--classifier",
            clf.to_str().unwrap(),
            "--split",
            "test",
        ])
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(String::from_utf8_lossy(&output.stdout).contains("undefended accuracy under fgsm"));
}

#[test]
fn train_trn_and_bpda_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let clf = train_tiny_classifier(dir.path());
    let trn = dir.path().join("trn.gsck");
    let status = bin()
        .args([
            "train-trn",
            "--data",
            TINY_DS,
            "--classifier",
            clf.to_str().unwrap(),
            "--out",
            trn.to_str().unwrap(),
            "--epochs",
            "1",
            "--batch",
            "16",
            "--iters",
            "2",
            "--blocks",
            "1",
            "--width",
            "8",
            "--growth",
            "4",
            "--eval-subset",
            "8",
        ])
        .status()
        .unwrap();
    assert!(status.success());

    let output = bin()
        .args([
            "bpda",
            "--data",
            TINY_DS,
            "--classifier",
            clf.to_str().unwrap(),
            "--trn",
            trn.to_str().unwrap(),
            "--iters",
            "2",
            "--max-samples",
            "8",
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("gap"), "{stdout}");
}

#[test]
fn matrix_subcommand_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let clf = train_tiny_classifier(dir.path());
    let cfg = dir.path().join("exp.cfg");
    let csv = dir.path().join("matrix.csv");
    let json = dir.path().join("matrix.json");
    std::fs::write(
        &cfg,
        format!(
            "dataset = {TINY_DS}\nclassifier = {}\ndefense.none =\nattack.none =\nattack.fgsm = method=fgsm,eps=8/255\nbatch = 16\nseed = 3\nout_csv = {}\nout_json = {}\n",
            clf.display(),
            csv.display(),
            json.display()
        ),
    )
    .unwrap();
    let output = bin()
        .args(["matrix", "--config", cfg.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let csv_text = std::fs::read_to_string(&csv).unwrap();
    assert!(csv_text.starts_with("defense,none,fgsm,variation"));
    let json_text = std::fs::read_to_string(&json).unwrap();
    let parsed: serde_json::Value = serde_json::from_str(&json_text).unwrap();
    assert_eq!(parsed["rows"][0]["defense"], "none");
    assert!(parsed["rows"][0]["cells"][0]["samples"].is_number());
}

#[test]
fn precision_flag_switches_scalar_type() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("clf64.gsck");
    let status = bin()
        .args([
            "--precision",
            "f64",
            "train-classifier",
            "--data",
            TINY_DS,
            "--out",
            out.to_str().unwrap(),
            "--epochs",
            "1",
        ])
        .status()
        .unwrap();
    assert!(status.success());
    // f32 load of an f64 checkpoint must fail with a format error
    let output = bin()
        .args(["evaluate", "--data", TINY_DS, "--classifier", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(!output.status.success());
    // while the matching precision succeeds
    let output = bin()
        .args(["--precision", "f64", "evaluate", "--data", TINY_DS, "--classifier", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
}

#[test]
fn dump_gradmaps_writes_blobs() {
    let dir = tempfile::tempdir().unwrap();
    let clf = train_tiny_classifier(dir.path());
    let maps_dir = dir.path().join("maps");
    let output = bin()
        .args([
            "attack",
            "--method",
            "fgsm",
            "--eps",
            "8/255",
            "--data",
            TINY_DS,
            "--classifier",
            clf.to_str().unwrap(),
            "--dump-gradmaps",
            maps_dir.to_str().unwrap(),
            "--max-samples",
            "8",
        ])
        .output()
        .unwrap();
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    let maps = gradshield::Tensor::<f32>::load(&maps_dir.join("gradmaps_batch0.gtns")).unwrap();
    // 10 classes × 1 channel stacked along the channel axis
    assert_eq!(maps.shape()[1], 10);
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("1 forward, 10 backward"));
}
