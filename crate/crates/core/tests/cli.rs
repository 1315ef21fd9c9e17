use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vesselgrade::evaluation::SummaryRow;
use vesselgrade::io::file_sha256;

const TINY: &str = "\
[model]
conv_channels = [2, 4]
feature_dim = 4
head_hidden = 4

[training]
learning_rate = 0.001
batch_size = 4
pretrain_batch_size = 4
epochs_pretrain = 1
epochs_full = 1
";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_vesselgrade"));
    c.env_remove("VESSELGRADE_SEED");
    c
}

fn run(c: &mut Command) -> Output {
    c.output().expect("binary runs")
}

fn ok(c: &mut Command) -> Output {
    let out = run(c);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(c: &mut Command) -> i32 {
    run(c).status.code().expect("exit code")
}

fn synth(dir: &Path, name: &str, count: usize, seed: u64, profile: &str) -> PathBuf {
    let p = dir.join(name);
    ok(bin()
        .args([
            "synth",
            "--profile",
            profile,
            "--count",
            &count.to_string(),
            "--seed",
            &seed.to_string(),
            "--out",
        ])
        .arg(&p));
    p
}

fn config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("config.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn train(data: &Path, cfg: &Path, out: &Path, extra: &[&str]) -> Command {
    let mut c = bin();
    c.arg("train")
        .arg("--data")
        .arg(data)
        .arg("--config")
        .arg(cfg)
        .arg("--out")
        .arg(out)
        .args(extra);
    c
}

fn eval(run: &Path, data: &Path, out: &Path) -> Command {
    let mut c = bin();
    c.arg("eval")
        .arg("--run")
        .arg(run)
        .arg("--data")
        .arg(data)
        .arg("--out")
        .arg(out);
    c
}

#[test]
fn synth_is_reproducible_and_validates_profiles() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.vgd", 5, 7, "easy");
    let b = synth(dir.path(), "b.vgd", 5, 7, "easy");
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(dir.path().join("a.vgd.manifest.json").is_file());

    let empty = synth(dir.path(), "empty.vgd", 0, 1, "default");
    assert_eq!(vesselgrade::phantom::DatasetFile::open(&empty).unwrap().header.count, 0);

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "cadrads_priors = [0.0, 0.0, 0.0, 0.0, 0.0, 0.0]\n").unwrap();
    let mut c = bin();
    c.args(["synth", "--count", "3", "--profile"])
        .arg(&bad)
        .arg("--out")
        .arg(dir.path().join("x.vgd"));
    assert_eq!(code(&mut c), 2);

    let mut c = bin();
    c.args(["synth", "--count", "1", "--out"])
        .arg(dir.path().join("missing/dir/x.vgd"));
    assert_eq!(code(&mut c), 2);
}

#[test]
fn pipeline_is_deterministic_and_guards_stale_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, "d.vgd", 30, 3, "easy");
    let cfg = config(d, TINY);

    ok(&mut train(&data, &cfg, &d.join("r1"), &["--folds", "2", "--jobs", "2"]));
    ok(&mut train(&data, &cfg, &d.join("r2"), &["--folds", "2"]));
    for f in ["fold0.vgck", "fold1.vgck", "loss_pretrain.csv", "loss_full.csv"] {
        assert_eq!(
            file_sha256(&d.join("r1").join(f)).unwrap(),
            file_sha256(&d.join("r2").join(f)).unwrap(),
            "{f}"
        );
    }
    assert!(!d.join("r1/fold2.vgck").exists());
    let losses = std::fs::read_to_string(d.join("r1/loss_full.csv")).unwrap();
    assert!(losses.starts_with("epoch,fold,train_loss,val_loss\n"));

    let out = ok(&mut eval(&d.join("r1"), &data, &d.join("e1")));
    ok(&mut eval(&d.join("r2"), &data, &d.join("e2")));
    let m1 = std::fs::read(d.join("e1/metrics.csv")).unwrap();
    assert_eq!(m1, std::fs::read(d.join("e2/metrics.csv")).unwrap());
    let summary = String::from_utf8(out.stdout).unwrap();
    assert!(summary.contains("CAD-RADS+sten+Ca"));
    for f in [
        "attribution.csv",
        "roc_rule_out_0.csv",
        "roc_hold_out_mean.csv",
        "confusion_cadrads_1.csv",
    ] {
        assert!(d.join("e1").join(f).is_file(), "{f}");
    }

    let report = ok(bin().arg("report").arg("--eval").arg(d.join("e1")).arg(d.join("e2")));
    let table = String::from_utf8(report.stdout).unwrap();
    assert!(table.contains("Rule-out") && table.contains("AUC"));

    let other = synth(d, "other.vgd", 20, 4, "easy");
    assert_eq!(code(&mut eval(&d.join("r1"), &other, &d.join("e3"))), 4);

    let mut ckpt = std::fs::read(d.join("r2/fold1.vgck")).unwrap();
    let n = ckpt.len();
    ckpt[n - 20] ^= 1;
    std::fs::write(d.join("r2/fold1.vgck"), ckpt).unwrap();
    assert_eq!(code(&mut eval(&d.join("r2"), &data, &d.join("e4"))), 4);

    std::fs::write(d.join("e2/metrics.csv"), b"task,fold,metric,value\n").unwrap();
    assert_eq!(
        code(bin().arg("report").arg("--eval").arg(d.join("e1")).arg(d.join("e2"))),
        4
    );

    let mut c = bin();
    c.arg("eval")
        .arg("--checkpoint")
        .arg(d.join("r1/fold0.vgck"))
        .arg(d.join("r2/fold0.vgck"))
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(d.join("e5"));
    ok(&mut c);
}

#[test]
fn seed_variable_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = synth(d, "d.vgd", 20, 5, "easy");
    let cfg = config(d, TINY);
    ok(&mut train(
        &data,
        &cfg,
        &d.join("a"),
        &["--folds", "1", "--targets", "cadrads"],
    ));
    ok(train(&data, &cfg, &d.join("b"), &["--folds", "1", "--targets", "cadrads"]).env("VESSELGRADE_SEED", "0"));
    ok(train(&data, &cfg, &d.join("c"), &["--folds", "1", "--targets", "cadrads"]).env("VESSELGRADE_SEED", "9"));
    let sum = |r: &str| file_sha256(&d.join(r).join("fold0.vgck")).unwrap();
    assert_eq!(sum("a"), sum("b"));
    assert_ne!(sum("a"), sum("c"));
    let manifest = std::fs::read_to_string(d.join("c/manifest.json")).unwrap();
    assert!(manifest.contains("\"base\": 9"));
}

#[test]
fn failures_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = config(d, TINY);
    assert_eq!(code(&mut train(&d.join("none.vgd"), &cfg, &d.join("r"), &[])), 2);

    let data = synth(d, "d.vgd", 20, 6, "easy");
    assert_eq!(
        code(&mut train(&data, &cfg, &d.join("r"), &["--targets", "everything"])),
        2
    );
    assert_eq!(code(&mut train(&data, &cfg, &d.join("r"), &["--folds", "9"])), 2);

    let exploding = config(d, &TINY.replace("learning_rate = 0.001", "learning_rate = 1e300"));
    assert_eq!(code(&mut train(&data, &exploding, &d.join("r"), &["--folds", "1"])), 3);

    assert_eq!(code(bin().arg("report").arg("--eval").arg(d.join("nowhere"))), 2);
}

#[test]
fn untrained_checkpoint_scores_at_chance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let profile = d.join("balanced.toml");
    std::fs::write(
        &profile,
        "cadrads_priors = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0]\nnoise_sigma_hu = 20.0\n",
    )
    .unwrap();
    let p = profile.to_str().unwrap();
    let data = synth(d, "d.vgd", 60, 8, p);
    let cfg = config(
        d,
        &TINY
            .replace("epochs_pretrain = 1", "epochs_pretrain = 0")
            .replace("epochs_full = 1", "epochs_full = 0"),
    );
    ok(&mut train(
        &data,
        &cfg,
        &d.join("r"),
        &["--folds", "1", "--targets", "cadrads"],
    ));
    ok(&mut eval(&d.join("r"), &data, &d.join("e")));
    let row =
        SummaryRow::from_metrics_csv("untrained", &std::fs::read_to_string(d.join("e/metrics.csv")).unwrap()).unwrap();
    for task in ["rule_out", "hold_out"] {
        let auc = row.means[task]["auc"];
        assert!((auc - 0.5).abs() <= 0.1, "{task} auc {auc}");
    }
}
