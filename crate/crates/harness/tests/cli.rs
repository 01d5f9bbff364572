use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "n_train=8",
    "n_val=4",
    "n_test=4",
    "batch_size=4",
    "epochs=1",
];

fn riskseg(args: &[&str], tiny: bool) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskseg"));
    cmd.args(args).env("RUST_LOG", "warn");
    if tiny {
        for kv in TINY {
            cmd.args(["--set", kv]);
        }
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn train_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = riskseg(&["train", "--out", s(&run)], true);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["last.ckpt", "train_log.txt", "config.toml"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = std::fs::read_to_string(run.join("train_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 2);

    let ckpt = run.join("last.ckpt");
    let mut reports = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("eval{k}"));
        let o = riskseg(&["eval", "--checkpoint", s(&ckpt), "--split", "test", "--out", s(&out)], false);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        reports.push(std::fs::read_to_string(out.join("metrics_test.kv")).unwrap());
        assert!(out.join("report_test.txt").exists());
    }
    assert_eq!(reports[0], reports[1]);
    assert!(reports[0].contains("miou = "));

    // The checkpoint's own config matches; a different one is refused unless forced.
    let o = riskseg(&["eval", "--checkpoint", s(&ckpt), "--config", s(&run.join("config.toml")), "--out", s(&run)], false);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let other = dir.path().join("other.toml");
    std::fs::write(&other, "epochs = 7\n").unwrap();
    let o = riskseg(&["eval", "--checkpoint", s(&ckpt), "--config", s(&other), "--out", s(&run)], false);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    let o = riskseg(&["eval", "--checkpoint", s(&ckpt), "--config", s(&other), "--force", "--out", s(&run)], false);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let exp = dir.path().join("exp");
    let o = riskseg(&["export-unc", "--checkpoint", s(&ckpt), "--ids", "0,1,99", "--out", s(&exp)], false);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for k in [0, 1] {
        for tag in ["input.png", "gt.png", "pred.png", "unc.png", "error.png", "unc.txt"] {
            assert!(exp.join(format!("{k}_{tag}")).exists(), "{k}_{tag}");
        }
    }
    assert!(!exp.join("99_unc.txt").exists());
    assert!(stderr(&o).contains("sample 99 does not exist"));
}

#[test]
fn resume_from_cli_finishes_the_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = riskseg(&["train", "--out", s(&run), "--set", "epochs=2"], true);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Resuming a finished run is a no-op that still reports the same log.
    let before = std::fs::read_to_string(run.join("train_log.txt")).unwrap();
    let o = riskseg(&["train", "--resume", s(&run.join("last.ckpt")), "--out", s(&run)], false);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("train_log.txt")).unwrap(), before);
}

#[test]
fn gen_data_then_train_on_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let o = riskseg(&["gen-data", "--out", s(&data)], true);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let manifests: Vec<_> = std::fs::read_dir(&data).unwrap().collect();
    assert_eq!(manifests.len(), 3);

    let o = riskseg(&["train", "--data", s(&data), "--out", s(&dir.path().join("run"))], true);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    // Manifests from a different generator config are a data error.
    let o = riskseg(&["train", "--data", s(&data), "--out", s(&dir.path().join("run2")), "--set", "noise=0.05"], true);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
}

#[test]
fn errors_map_to_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let o = riskseg(&["train", "--set", "nope=1", "--out", s(&out)], false);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("unknown config key"));
    let o = riskseg(&["ablate", "--seeds", "0,1", "--out", s(&out)], true);
    assert_eq!(code(&o), 2);
    let missing = dir.path().join("missing.ckpt");
    let o = riskseg(&["eval", "--checkpoint", s(&missing), "--out", s(&out)], false);
    assert_eq!(code(&o), 7, "{}", stderr(&o));
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let o = riskseg(&["eval", "--checkpoint", s(&junk), "--out", s(&out)], false);
    assert_eq!(code(&o), 6, "{}", stderr(&o));
    let o = riskseg(&["train", "--set", "lr=1e30", "--out", s(&out)], true);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
}
