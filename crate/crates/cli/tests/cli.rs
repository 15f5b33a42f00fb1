use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn haug(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_haug")).current_dir(dir).args(args).output().expect("spawn haug")
}

const TINY: &str = "\
[data]
train = d.bin
test = d.bin

[model]
channels = 4,8,8,16
embed_dim = 8
proj_dim = 8
pred_hidden = 4

[augment]
mode = hierarchical
out_size = 16

[train]
batch_size = 64
epochs = 1

[eval]
probe_epochs = 2
aug_probe_train = 40
aug_probe_test = 20
invariance_samples = 16
";

#[test]
fn no_arguments_prints_usage_and_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = haug(dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let text = String::from_utf8_lossy(&out.stderr).to_string() + &String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("Usage"), "{text}");
}

#[test]
fn unknown_subcommand_and_flag_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(haug(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(haug(dir.path(), &["pretrain", "--bogus"]).status.code(), Some(2));
}

#[test]
fn bad_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = haug(dir.path(), &["pretrain", "--set", "train.nonsense=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonsense"));
}

#[test]
fn gen_data_then_pretrain_writes_checkpoint_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = haug(d, &["gen-data", "--n", "640", "--classes", "10", "--seed", "7", "--out", "d.bin"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::metadata(d.join("d.bin")).unwrap().len(), 640 * 3073);
    assert!(d.join("d.bin.manifest.csv").exists());

    fs::write(d.join("c.cfg"), TINY).unwrap();
    let out = haug(d, &["pretrain", "--config", "c.cfg", "--out", "run", "--ckpt-every", "1"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("run/final.haug").exists());
    let metrics = fs::read_to_string(d.join("run/metrics.csv")).unwrap();
    assert_eq!(metrics.lines().next().unwrap(), "epoch,step,lr,L1,L2,L3,L4,L_overall");
    assert_eq!(metrics.lines().count(), 1 + 10);

    let out = haug(d, &["linear-probe", "--config", "c.cfg", "--ckpt", "run/final.haug", "--out", "lp"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(d.join("lp/linear_probe.csv")).unwrap();
    assert!(csv.starts_with("task,accuracy"));

    let out = haug(d, &["invariance-report", "--config", "c.cfg", "--ckpt", "run/final.haug", "--out", "inv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(d.join("inv/invariance.csv")).unwrap().lines().count(), 5);

    let out = haug(d, &["aug-probe", "--config", "c.cfg", "--ckpt", "run/final.haug", "--out", "aug"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read_to_string(d.join("aug/aug_probe.csv")).unwrap().lines().count(), 3);
}

#[test]
fn set_overrides_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(haug(d, &["gen-data", "--n", "64", "--out", "d.bin"]).status.success());
    fs::write(d.join("c.cfg"), TINY).unwrap();
    let out =
        haug(d, &["pretrain", "--config", "c.cfg", "--set", "augment.mode=uniform", "--seed", "5", "--out", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let used = fs::read_to_string(d.join("run/config.cfg")).unwrap();
    assert!(used.contains("mode = uniform"), "{used}");
    assert!(used.contains("seed = 5"), "{used}");
}

#[test]
fn checkpoint_from_another_architecture_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(haug(d, &["gen-data", "--n", "64", "--out", "d.bin"]).status.success());
    fs::write(d.join("c.cfg"), TINY).unwrap();
    assert!(haug(d, &["pretrain", "--config", "c.cfg", "--out", "run"]).status.success());
    let out = haug(
        d,
        &[
            "linear-probe",
            "--config",
            "c.cfg",
            "--set",
            "model.embed_dim=16",
            "--ckpt",
            "run/final.haug",
            "--out",
            "lp",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
}
