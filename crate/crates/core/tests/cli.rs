use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn cagem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cagem"))
        .args(args)
        .env("CAGEM_DATA_DIR", data_root())
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout_json(o: &Output) -> serde_json::Value {
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_slice(&o.stdout).unwrap()
}

const TINY: &[&str] = &[
    "--dataset", "mnist10k", "--train-rows", "300", "--valid-rows", "50", "--hidden", "8", "--z1", "4", "--z2",
    "2", "--batch-size", "64",
];

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    cagem(&args)
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&cagem(&["train", "--variant", "vae", "--labels", "100", "--out", out])), 2);
    assert_eq!(code(&cagem(&["train", "--clusters", "1", "--out", out])), 2);
    assert_eq!(code(&cagem(&["train", "--labels", "100", "--clusters", "20", "--out", out])), 2);
    assert_eq!(code(&cagem(&["train", "--dataset", "cifar", "--out", out])), 2);
    assert_eq!(code(&cagem(&["evaluate", "--checkpoint", "x", "--split", "bogus"])), 2);
    assert_eq!(code(&cagem(&["frobnicate"])), 2);
}

#[test]
fn missing_inputs_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.ckpt");
    let o = cagem(&["evaluate", "--checkpoint", missing.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("none.ckpt"));
    let o = cagem(&["train", "--dataset", "omniglot", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
}

#[test]
fn end_to_end_workflow() {
    let dir = tempfile::tempdir().unwrap();
    let run = dir.path().join("run");
    let o = train(&run, &["--labels", "10", "--epochs", "2", "--seed", "3", "--test-iw", "3"]);
    let summary = stdout_json(&o);
    assert_eq!(summary["epochs"], 2);
    assert!(summary["test_iw_bound"].as_f64().unwrap() < 0.0);
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(run.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["model"]["clusters"], 10);
    assert_eq!(cfg["config"]["labels"], 10);
    assert_eq!(cfg["config"]["seed"], 3);
    assert_eq!(cfg["n_unlabelled"], 300);

    let ckpt = run.join("best.ckpt");
    let ck = ckpt.to_str().unwrap();
    let eval = || stdout_json(&cagem(&["evaluate", "--checkpoint", ck, "--iw", "4", "--rows", "20", "--split", "valid"]));
    let e1 = eval();
    assert_eq!(e1, eval());
    assert_eq!(e1["iw"], 4);
    assert_eq!(e1["rows"], 20);

    let c = stdout_json(&cagem(&["classify", "--checkpoint", ck, "--samples", "2", "--rows", "30"]));
    for k in ["error_q", "error_p"] {
        let v = c[k].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let grid = dir.path().join("g.pgm");
    let s = stdout_json(&cagem(&["sample", "--checkpoint", ck, "--class", "3", "--n", "6", "--grid", grid.to_str().unwrap()]));
    assert!(s["y"].as_array().unwrap().iter().all(|y| y == 3));
    let bytes = std::fs::read(&grid).unwrap();
    assert!(bytes.starts_with(b"P5\n173 28\n255\n"), "{:?}", &bytes[..16]);
    assert_eq!(code(&cagem(&["sample", "--checkpoint", ck, "--class", "10", "--grid", grid.to_str().unwrap()])), 2);

    let diag = dir.path().join("diag");
    let d = stdout_json(&cagem(&["diagnose", "--checkpoint", ck, "--rows", "40", "--out", diag.to_str().unwrap()]));
    assert!(d["terms"]["kl_z2"].as_f64().unwrap() >= 0.0);
    let latents = std::fs::read_to_string(diag.join("latents.tsv")).unwrap();
    assert_eq!(latents.lines().count(), 41);
    assert!(std::fs::read_to_string(diag.join("decomposition.tsv")).unwrap().starts_with("term\tnats\n"));

    let r = stdout_json(&cagem(&["resume", "--checkpoint", run.join("last.ckpt").to_str().unwrap(), "--epochs", "3"]));
    assert_eq!(r["epochs"], 3);
}

#[test]
fn unsupervised_variants_and_reproducible_training() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for p in [&a, &b] {
        assert!(train(p, &["--clusters", "20", "--epochs", "1", "--test-iw", "0"]).status.success());
    }
    assert_eq!(std::fs::read(a.join("metrics.jsonl")).unwrap(), std::fs::read(b.join("metrics.jsonl")).unwrap());
    let cfg: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["config"]["model"]["clusters"], 20);

    let v = dir.path().join("v");
    assert!(train(&v, &["--variant", "vae", "--epochs", "1", "--test-iw", "0"]).status.success());
    let ck = v.join("last.ckpt");
    assert_eq!(code(&cagem(&["classify", "--checkpoint", ck.to_str().unwrap()])), 2);
}
