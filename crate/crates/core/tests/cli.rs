use std::path::Path;
use std::process::Command;

use densitypath::io::{read_metrics, Checkpoint};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_densitypath"));
    c.env("RUST_LOG", "warn");
    c
}

const TINY: [&str; 18] = [
    "--set", "architecture.dims=[2, 8, 2]",
    "--set", "quadrature.n=6",
    "--set", "quadrature.m=32",
    "--set", "quadrature.k=1",
    "--set", "optim.epochs=2",
    "--set", "optim.path_steps=3",
    "--set", "optim.coupling_steps=2",
    "--set", "optim.warmup_steps=3",
    "--set", "optim.pretrain.steps=20",
];

fn only_dir(root: &Path) -> std::path::PathBuf {
    let dirs: Vec<_> = std::fs::read_dir(root).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(dirs.len(), 1, "{dirs:?}");
    dirs[0].clone()
}

#[test]
fn config_errors_exit_with_two() {
    let out = bin().args(["run", "no-such-problem"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["run", "scc", "--set", "quadrature.n=1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = bin().args(["verify", "--only", "nonsense"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    std::fs::write(&bad, "seed = 0\n").unwrap();
    let out = bin().args(["run", bad.to_str().unwrap()]).env("DENSITYPATH_OUT", tmp.path()).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    // nothing was computed or written
    assert_eq!(std::fs::read_dir(tmp.path()).unwrap().count(), 1);
}

#[test]
fn list_names_every_problem() {
    let out = bin().arg("list").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for n in ["scc", "vnefi", "gmm", "opinion", "gauss-pair", "scc-momentum"] {
        assert!(text.lines().any(|l| l.split_whitespace().next() == Some(n)), "{n}");
    }
}

#[test]
fn fast_oracles_pass() {
    let out = bin()
        .args(["verify", "--only", "gradient,log-density,score,fisher,spline-order"])
        .output()
        .unwrap();
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 5, "{text}");
}

#[test]
fn pretrain_writes_identical_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for name in ["a.json", "b.json"] {
        let p = tmp.path().join(name);
        let out = bin()
            .args(["pretrain", "gauss-pair", "--boundary", "1", "--set", "optim.pretrain.steps=100", "--out"])
            .arg(&p)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("boundary W2"), "{text}");
        bytes.push(std::fs::read(&p).unwrap());
    }
    assert_eq!(bytes[0], bytes[1]);
    let ck = Checkpoint::read(&tmp.path().join("a.json")).unwrap();
    assert_eq!(ck.tag, "gauss-pair/rho1");
    assert!(ck.single().is_ok());
}

#[test]
fn run_directory_layout_and_replay() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "gauss-pair"])
        .args(TINY)
        .env("DENSITYPATH_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_dir(tmp.path());
    let name = dir.file_name().unwrap().to_string_lossy().to_string();
    assert!(name.starts_with("gauss-pair-") && name.ends_with("-0"), "{name}");
    for f in ["config.toml", "metrics.csv", "trajectory.csv", "controls.csv", "path.json"] {
        assert!(dir.join(f).exists(), "{f}");
    }
    for e in 0..=2 {
        for f in ["controls.json", "metrics.csv", "config.toml"] {
            assert!(dir.join(format!("epoch-{e}")).join(f).exists(), "epoch-{e}/{f}");
        }
    }
    let metrics = read_metrics(&dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.len(), 3);

    let traj = std::fs::read_to_string(dir.join("trajectory.csv")).unwrap();
    let mut lines = traj.lines();
    assert_eq!(lines.next(), Some("time,sample_id,x1,x2"));
    let mut rows = 0;
    for l in lines {
        let vals: Vec<f64> = l.split(',').map(|v| v.parse().unwrap()).collect();
        assert_eq!(vals.len(), 4);
        assert!(vals.iter().all(|v| v.is_finite()));
        rows += 1;
    }
    assert_eq!(rows, 51 * 2000);
    let ctl = std::fs::read_to_string(dir.join("controls.csv")).unwrap();
    assert_eq!(ctl.lines().count(), 3 * 2000 + 1);

    // the snapshot alone reproduces the metrics
    let replay = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run"])
        .arg(dir.join("config.toml"))
        .env("DENSITYPATH_OUT", replay.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let again = read_metrics(&only_dir(replay.path()).join("metrics.csv")).unwrap();
    assert_eq!(format!("{metrics:?}"), format!("{again:?}"));
}

#[test]
fn ablation_writes_one_row_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["run", "gauss-pair", "--ablate-N", "4,6"])
        .args(TINY)
        .env("DENSITYPATH_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let dir = only_dir(tmp.path());
    assert!(dir.to_string_lossy().ends_with("-ablate-N"));
    let table = std::fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("param,value,action_eval"));
    assert!(lines[1].starts_with("N,4,") && lines[2].starts_with("N,6,"));
    assert!(dir.join("N-4/trajectory.csv").exists());

    let out = bin()
        .args(["ablate", "gauss-pair", "--K", "1,2"])
        .args(TINY)
        .env("DENSITYPATH_OUT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
