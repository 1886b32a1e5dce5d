use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
seed = 3
synth.n = 200
model.d = 16
model.expert_hidden = 16
model.epochs = 3
predictor.proj_dim = 16
predictor.epochs = 2
sweep.budgets = 1, 2
sweep.trials = 2
sweep.channel_draws = 51
sweep.oracle_examples = 5
";

fn pwcmoe(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pwcmoe")).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = pwcmoe(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let p = e.unwrap().path();
            (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("small.conf");
    fs::write(&config, SMALL).unwrap();
    let mut outputs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let base = ["--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()];
        for cmd in ["train", "train-predictor", "sweep-budget"] {
            let mut args = base.to_vec();
            args.push(cmd);
            let stdout = run_ok(&args);
            assert!(stdout.contains("wrote"), "{stdout}");
        }
        outputs.push(files(&out));
    }
    let names: Vec<&str> = outputs[0].iter().map(|(n, _)| n.as_str()).collect();
    for expected in ["model.pwcm", "predictor.pwcp", "budget_sweep.csv", "train_metrics.csv", "run-manifest.txt"] {
        assert!(names.contains(&expected), "{names:?}");
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn channel_probe_prints_the_hand_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_ok(&["--out", dir.path().to_str().unwrap(), "channel-probe", "--deterministic"]);
    assert!(out.contains("PL = 100.004 dB"), "{out}");
    assert!(out.contains("m_ul = 8760"), "{out}");
    let csv = fs::read_to_string(dir.path().join("channel_probe.csv")).unwrap();
    assert!(csv.lines().count() == 2, "{csv}");
}

#[test]
fn user_errors_exit_with_one() {
    let out = pwcmoe(&["--config", "/nonexistent/x.conf", "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());

    let out = pwcmoe(&["--bogus", "train"]);
    assert_eq!(out.status.code(), Some(1));

    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.conf");
    fs::write(&config, "seed = 1\nmodel.vocab_size = 4\n").unwrap();
    let out = pwcmoe(&["--config", config.to_str().unwrap(), "train"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    let out = pwcmoe(&["--out", dir.path().join("empty").to_str().unwrap(), "eval"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn help_exits_cleanly() {
    let out = pwcmoe(&["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("sweep-distance"));
}
