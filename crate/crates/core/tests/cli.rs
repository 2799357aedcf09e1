use std::path::Path;
use std::process::{Command, Output};

fn dbfnet(args: &[&str], cwd: &Path) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_dbfnet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn dbfnet");
    if !out.status.success() {
        eprintln!("stdout:\n{}", String::from_utf8_lossy(&out.stdout));
        eprintln!("stderr:\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_train_evaluate_plot() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    let out = dbfnet(&["synth", "--count", "3", "--size", "32x48", "--seed", "2", "--out", "small"], root);
    assert!(out.status.success());
    assert!(stdout(&out).contains("wrote 3 samples"));
    assert!(root.join("small/images/synth_0000.png").exists());
    assert!(root.join("small/manifest.json").exists());

    let common = ["--preset", "synthetic", "--data", "data", "--seed", "1", "--deterministic"];
    let mut train = common.to_vec();
    train.extend(["--out", "run", "train", "--max-steps", "2", "--epochs", "1"]);
    let out = dbfnet(&train, root);
    assert!(out.status.success());
    assert!(stdout(&out).contains("trained 2 steps"));
    for f in ["runlog.jsonl", "last.safetensors", "config.toml", "loss.png"] {
        assert!(root.join("run").join(f).exists(), "{f}");
    }
    let cfg = std::fs::read_to_string(root.join("run/config.toml")).unwrap();
    assert!(cfg.contains("deterministic = true") && cfg.contains("seed = 1"));

    let mut eval = common.to_vec();
    eval.extend(["--out", "eval", "evaluate", "--checkpoint", "run/last.safetensors"]);
    let out = dbfnet(&eval, root);
    assert!(out.status.success());
    assert!(stdout(&out).contains("DSC"));
    assert!(root.join("eval/metrics.json").exists());

    let out = dbfnet(&["--out", "plots", "plot", "--report", "eval/metrics.json", "--runlog", "run/runlog.jsonl"], root);
    assert!(out.status.success());
    for f in ["pr_synthetic.png", "roc_synthetic.png", "loss.png"] {
        assert!(root.join("plots").join(f).exists(), "{f}");
    }
}

#[test]
fn ablate_with_config_overrides() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::write(root.join("quick.toml"), "max_steps = 1\nmax_epochs = 1\n[model.ffs]\nwidths = [4, 8]\n").unwrap();
    let out = dbfnet(
        &[
            "--preset", "synthetic", "--data", "data", "--config", "quick.toml", "--out", "abl", "ablate", "--grid",
            "ffs_count=0,2;use_ffm=off", "--seeds", "0,1",
        ],
        root,
    );
    assert!(out.status.success());
    let text = stdout(&out);
    assert!(text.contains("ffs_count=0") && text.contains("ffs_count=2"), "{text}");
    for f in ["ablation.md", "lambdas.md", "ablation.json"] {
        assert!(root.join("abl").join(f).exists(), "{f}");
    }
}

#[test]
fn bad_input_fails_with_message() {
    let dir = tempfile::tempdir().unwrap();
    let out = dbfnet(&["--preset", "nope", "train"], dir.path());
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));

    let out = dbfnet(&["synth", "--size", "30x30", "--out", "s"], dir.path());
    assert!(!out.status.success());

    let out = dbfnet(&["--preset", "synthetic", "--data", "d", "ablate", "--grid", "ffs_count=banana"], dir.path());
    assert!(!out.status.success());
}
