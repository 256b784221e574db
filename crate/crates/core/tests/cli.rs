use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_featlens"))
}

fn idx(magic: u8, dims: &[u32], body: &[u8]) -> Vec<u8> {
    let mut v = vec![0, 0, 8, magic];
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(body);
    v
}

/// Tiny stand-in for the MNIST directory: a bar whose position encodes the
/// label.
fn fake_mnist(dir: &Path, train: usize, test: usize) {
    fs::create_dir_all(dir).unwrap();
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let mut pixels = vec![0u8; n * 784];
        let labels: Vec<u8> = (0..n).map(|i| (i % 10) as u8).collect();
        for (i, &l) in labels.iter().enumerate() {
            let row = 4 + 2 * l as usize;
            for c in 6..22 {
                pixels[i * 784 + row * 28 + c] = 255;
            }
        }
        fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx(3, &[n as u32, 28, 28], &pixels)).unwrap();
        fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx(1, &[n as u32], &labels)).unwrap();
    }
}

fn run(args: &[&str], root: &Path) -> Output {
    let out = bin()
        .args(args)
        .arg("--out")
        .arg(root.join("runs"))
        .arg("--data")
        .arg(root.join("mnist"))
        .arg("--config")
        .arg(root.join("run.cfg"))
        .output()
        .unwrap();
    if !out.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(bin().output().unwrap().status.code(), Some(1));
    assert_eq!(bin().arg("--frobnicate").output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["train-lens", "--transform", "rot45"]).output().unwrap().status.code(), Some(1));
    assert_eq!(bin().args(["eval", "--filter-angles", "45"]).output().unwrap().status.code(), Some(1));
    let help = bin().arg("--help").output().unwrap();
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("train-lens"));
}

#[test]
fn runtime_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args(["train-host", "--data"])
        .arg(dir.path().join("absent"))
        .arg("--out")
        .arg(dir.path().join("runs"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent"));

    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "groups = 0\n").unwrap();
    let out = bin().arg("report").arg("--config").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn whole_workflow_on_a_tiny_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fake_mnist(&root.join("mnist"), 32, 20);
    fs::write(
        root.join("run.cfg"),
        "batch_size = 16\nhost_train_limit = 32\naux_train_limit = 32\nlens_steps = 2\n\
         rotclf_steps = 2\nxlayer_steps = 2\ntest_limit = 20\ngroups = 2\neval_batch = 10\n",
    )
    .unwrap();
    let ok = |args: &[&str]| assert!(run(args, root).status.success(), "{args:?}");
    ok(&["train-host"]);
    ok(&["train-lens", "--transform", "rot90", "--loss", "mse"]);
    ok(&["train-lens", "--transform", "rot180", "--loss", "mse+tac"]);
    ok(&["train-rotclf"]);
    ok(&["train-baseline", "xlayer"]);
    ok(&["eval", "--method", "host"]);
    ok(&["eval", "--method", "lenses", "--loss", "mse", "--select", "predicted"]);
    ok(&["eval", "--method", "xlayer", "--upright"]);
    ok(&["analyze-correlation", "--loss", "mse"]);
    ok(&["report"]);

    let runs = root.join("runs");
    for f in [
        "host.flns",
        "host_log.csv",
        "lens_rot90_mse.flns",
        "lens_rot180_mse_tac.flns",
        "lens_rot90_mse_log.csv",
        "rotclf.flns",
        "xlayer.flns",
        "results.csv",
        "correlation.csv",
        "report.csv",
        "scatter.svg",
    ] {
        assert!(runs.join(f).exists(), "missing {f}");
    }
    let results = fs::read_to_string(runs.join("results.csv")).unwrap();
    assert_eq!(results.lines().count(), 4);
    assert!(results.contains("lenses-mse,mnist-rot,accuracy-select-predicted,"));
    let corr = fs::read_to_string(runs.join("correlation.csv")).unwrap();
    assert!(corr.contains("lenses-mse,rot90,whole_r,"));
    assert!(!corr.contains("lenses-mse,rot270"));

    // no DataAug host has been trained
    let out = run(&["eval", "--method", "dataaug"], root);
    assert_eq!(out.status.code(), Some(2));
}
