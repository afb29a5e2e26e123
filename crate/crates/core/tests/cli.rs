use std::path::Path;
use std::process::{Command, Output};

fn tnet(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "tnet {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

const CONFIG: &str = "
[data]
kind = cifar
dir = data
channels = 1
size = 8
classes = 4

[model]
layers = 4p,6

[training]
batch_size = 16
epochs = 2
milestones = 1

[experiment]
grid = transnet:2
seeds = 0
out_dir = runs
save_checkpoints = true
";

#[test]
fn end_to_end_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let synth = tnet(
        &["synth-data", "--out", "data", "--n-train", "64", "--n-test", "32", "--size", "8", "--channels", "1"],
        dir,
    );
    assert!(stdout(&synth).contains("64 train / 32 test"));
    assert!(dir.join("data/data_batch_1.bin").exists());
    std::fs::write(dir.join("tiny.conf"), CONFIG).unwrap();

    let train = tnet(&["train", "--config", "tiny.conf"], dir);
    assert!(stdout(&train).contains("transnet:2 seed 0 ok"), "{}", stdout(&train));
    let ckpt = "runs/transnet-m2/seed0/model.tnet";
    assert!(dir.join(ckpt).exists());

    let eval = stdout(&tnet(&["eval", "--config", "tiny.conf", ckpt, "--predictor", "1"], dir));
    let row: Vec<&str> = eval.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[2], "32");
    let acc: f64 = row[1].parse().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let prune = stdout(&tnet(&["prune", ckpt, "--keep", "1", "--out", "pruned.json"], dir));
    assert!(prune.contains("kept head 1"), "{}", prune);
    // a compiled single head on the raw input agrees with the head it came from
    let pruned = stdout(&tnet(&["eval", "--config", "tiny.conf", "pruned.json", "--predictor", "0"], dir));
    assert_eq!(pruned.lines().nth(1), eval.lines().nth(1));

    let inv = stdout(&tnet(&["invariance", ckpt, "--group", "d4", "--out", "inv"], dir));
    assert!(inv.lines().count() >= 3);
    for f in ["invariance.csv", "invariance_summary.csv", "invariance.json", "invariance_layer0.svg"] {
        assert!(dir.join("inv").join(f).exists(), "missing {}", f);
    }

    let ens = stdout(&tnet(&["ensemble", "--config", "tiny.conf", ckpt, "pruned.json"], dir));
    assert_eq!(ens.lines().next(), Some("instances,accuracy"));
    assert_eq!(ens.lines().count(), 4);

    let report = stdout(&tnet(&["report", "--out", "runs"], dir));
    assert!(report.starts_with("mode,heads,metric"));
}

#[test]
fn bad_arguments_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_tnet"))
        .args(["invariance", "missing.tnet"])
        .current_dir(tmp.path())
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}
