use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pdeinvreg"));
    c.env("RUST_LOG", "warn").env("PDEINVREG_THREADS", "2");
    c
}

fn run(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().unwrap();
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_poisson(dir: &Path) {
    run(dir, &["gen-mesh", "--problem", "poisson", "--n", "6", "--out", "mesh.txt"]);
    run(
        dir,
        &[
            "gen-data", "--mesh", "mesh.txt", "--problem", "poisson", "--dense", "--n-train", "3", "--n-val", "2",
            "--n-test", "4", "--seed", "7", "--out", "data.bin",
        ],
    );
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    small_poisson(dir.path());
    run(
        dir.path(),
        &[
            "gen-data", "--mesh", "mesh.txt", "--problem", "poisson", "--dense", "--n-train", "3", "--n-val", "2",
            "--n-test", "4", "--seed", "7", "--out", "again.bin",
        ],
    );
    let a = fs::read(dir.path().join("data.bin")).unwrap();
    let b = fs::read(dir.path().join("again.bin")).unwrap();
    assert_eq!(a, b);
    assert!(a.starts_with(b"pdeinvreg-data v1 poisson-dense"));
}

#[test]
fn baselines_run_without_checkpoint_and_report_combines_them() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_poisson(d);
    for b in ["laplacian", "zero"] {
        run(
            d,
            &["evaluate", "--mesh", "mesh.txt", "--data", "data.bin", "--baseline", b, "--out", &format!("{b}.csv")],
        );
    }
    let lap = fs::read_to_string(d.join("laplacian.csv")).unwrap();
    assert!(lap.starts_with("row,mse,data_fit\n"));
    assert_eq!(lap.lines().count(), 1 + 4 + 2);
    let out = run(d, &["report", "laplacian.csv", "zero.csv"]);
    let table = String::from_utf8(out.stdout).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "method,mse,data_fit");
    assert!(lines[1].starts_with("laplacian,") && lines[1].contains("(±"));
    assert!(lines[2].starts_with("zero,"));
}

#[test]
fn train_evaluate_reconstruct_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    small_poisson(d);
    let train = [
        "train", "--mesh", "mesh.txt", "--data", "data.bin", "--model", "grand", "--epochs", "2", "--lr", "1e-3",
        "--unroll", "2", "--cgls-iters", "3", "--seed", "1", "--out", "grand.ckpt",
    ];
    run(d, &train);
    let first = fs::read(d.join("grand.ckpt")).unwrap();
    run(d, &train);
    assert_eq!(first, fs::read(d.join("grand.ckpt")).unwrap());
    assert!(fs::read_to_string(d.join("grand.ckpt.config")).unwrap().contains("n_unroll 2"));
    assert_eq!(fs::read_to_string(d.join("grand.ckpt.curve.csv")).unwrap().lines().count(), 3);

    run(
        d,
        &["evaluate", "--mesh", "mesh.txt", "--data", "data.bin", "--checkpoint", "grand.ckpt", "--out", "g.csv"],
    );
    assert!(fs::read_to_string(d.join("g.csv")).unwrap().contains("mean,"));

    run(
        d,
        &[
            "reconstruct", "--mesh", "mesh.txt", "--data", "data.bin", "--sample", "1", "--checkpoint", "grand.ckpt",
            "--out", "x.vec", "--image", "x.pgm", "--image-size", "32",
        ],
    );
    let field = pdeinvreg::pipeline::load_vector(d.join("x.vec")).unwrap();
    assert_eq!(field.len(), pdeinvreg::mesh::Mesh::load(d.join("mesh.txt")).unwrap().num_nodes());
    assert!(fs::read(d.join("x.pgm")).unwrap().starts_with(b"P5"));
}

#[test]
fn errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = bin()
        .current_dir(d)
        .args(["evaluate", "--mesh", "missing.txt", "--data", "missing.bin", "--baseline", "zero"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let out = bin().current_dir(d).args(["train", "--bogus"]).output().unwrap();
    assert!(!out.status.success());
    small_poisson(d);
    let out = bin().current_dir(d).args(["evaluate", "--mesh", "mesh.txt", "--data", "data.bin"]).output().unwrap();
    assert!(!out.status.success());
    let out = bin()
        .current_dir(d)
        .env("PDEINVREG_THREADS", "0")
        .args(["report", "a.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let out = bin()
        .current_dir(d)
        .args(["gen-data", "--mesh", "mesh.txt", "--problem", "eit", "--sparse", "--out", "e.bin"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}
