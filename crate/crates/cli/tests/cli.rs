use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn dbn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dbn"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn dbn")
}

fn ok(dir: &Path, args: &[&str]) {
    let out = dbn(dir, args);
    assert!(
        out.status.success(),
        "dbn {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(dir: &Path, args: &[&str]) -> i32 {
    dbn(dir, args).status.code().expect("exit code")
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

fn json(dir: &Path, name: &str) -> serde_json::Value {
    serde_json::from_str(&read(dir, name)).unwrap()
}

/// Tiny dataset, ensemble, two bridges distilled to one step.
fn pipeline(dir: &Path) {
    ok(dir, &["dataset", "--out", "train.csv", "--set", "n=200", "--set", "nuisance=1"]);
    ok(dir, &["dataset", "--out", "test.csv", "--set", "n=100", "--set", "nuisance=1", "--set", "seed=1"]);
    ok(
        dir,
        &["train-ensemble", "--data", "train.csv", "--out", "bundle", "--set", "epochs=5", "--set", "hidden=8,8"],
    );
    for (l, members) in [(0, "0,1,2"), (1, "0,3,4")] {
        let out = format!("b{l}");
        let seed = format!("seed={l}");
        let members = format!("members={members}");
        let args = ["--set", "steps=20", "--set", "batch=16", "--set", "grid_steps=3"];
        let mut a = vec!["train-bridge", "--bundle", "bundle", "--data", "train.csv", "--out", &out, "--set", &members];
        a.extend(args);
        a.extend(["--set", &seed]);
        ok(dir, &a);
        let d = format!("d{l}");
        ok(
            dir,
            &[
                "distill", "--bundle", "bundle", "--data", "train.csv", "--bridge", &out, "--out", &d, "--set",
                "steps=5", "--set", "batch=16",
            ],
        );
    }
}

#[test]
fn dataset_is_deterministic_and_has_manifest() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    ok(dir, &["dataset", "--out", "a.csv", "--set", "n=123", "--set", "nuisance=2"]);
    ok(dir, &["dataset", "--out", "b.csv", "--set", "n=123", "--set", "nuisance=2"]);
    let a = read(dir, "a.csv");
    assert_eq!(a, read(dir, "b.csv"));
    let mut lines = a.lines();
    assert_eq!(lines.next().unwrap(), "f0,f1,f2,f3,label");
    assert_eq!(lines.count(), 123);

    let m = json(dir, "a.csv.manifest.json");
    assert_eq!(m["command"], "dataset");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config"]["n"], "123");
    assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    assert!(m["code_version"].is_string());
}

#[test]
fn config_file_then_overrides() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    std::fs::write(dir.join("d.conf"), "# blobs\ngenerator = blobs\nn = 50\nclasses = 4\n").unwrap();
    ok(dir, &["dataset", "--config", "d.conf", "--out", "d.csv", "--set", "n=30"]);
    let text = read(dir, "d.csv");
    assert_eq!(text.lines().count(), 31);
    for line in text.lines().skip(1) {
        let label: usize = line.rsplit(',').next().unwrap().parse().unwrap();
        assert!(label < 4);
    }
}

#[test]
fn end_to_end_infer_eval_cost() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    pipeline(dir);
    for d in ["bundle", "b0", "d0", "d1"] {
        assert!(dir.join(d).join("manifest.json").exists(), "{d} manifest");
    }
    assert!(dir.join("b0/train_log.csv").exists());
    assert!(read(dir, "d0/round_0/train_log.csv").starts_with("step,loss,lr"));

    // Three rows, features only.
    let rows: Vec<String> = read(dir, "test.csv")
        .lines()
        .take(4)
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect();
    std::fs::write(dir.join("three.csv"), rows.join("\n") + "\n").unwrap();
    ok(
        dir,
        &[
            "infer", "--bundle", "bundle", "--bridge", "d0", "d1", "--input", "three.csv", "--out", "p.csv",
            "--save-predictor", "pred",
        ],
    );
    let pred = read(dir, "p.csv");
    let mut lines = pred.lines();
    assert_eq!(lines.next().unwrap(), "p0,p1,argmax");
    let mut n = 0;
    for line in lines {
        let v: Vec<f64> = line.split(',').map(|s| s.parse().unwrap()).collect();
        let sum = v[0] + v[1];
        assert!((sum - 1.0).abs() < 1e-6, "{line}");
        assert_eq!(v[2] as usize, usize::from(v[1] > v[0]));
        n += 1;
    }
    assert_eq!(n, 3);
    assert!(dir.join("p.csv.manifest.json").exists());

    // Saved predictor reproduces the same probabilities.
    ok(dir, &["infer", "--predictor", "pred", "--input", "three.csv", "--out", "q.csv"]);
    assert_eq!(pred, read(dir, "q.csv"));

    let eval = ["eval", "--predictor", "pred", "--bundle", "bundle", "--data", "test.csv", "--name", "dbn-2"];
    ok(dir, &[&eval[..], &["--out", "r1.json", "--csv", "m.csv"]].concat());
    let first = read(dir, "r1.json");
    ok(dir, &[&eval[..], &["--out", "r1.json", "--csv", "m.csv"]].concat());
    assert_eq!(first, read(dir, "r1.json"));
    let r = json(dir, "r1.json");
    assert_eq!(r["n_examples"], 100);
    assert_eq!(r["bins"].as_array().unwrap().len(), 15);
    let manifest = std::fs::read(dir.join("r1.json.manifest.json")).unwrap();
    assert_eq!(r["manifest_hash"].as_str().unwrap().len(), 64);
    assert!(!manifest.is_empty());
    let table = read(dir, "m.csv");
    assert_eq!(table.lines().count(), 3, "header once, then one row per run");
    assert!(table.starts_with("name,n_examples,acc,nll,brier,ece,dee,dee_kind"));

    ok(dir, &["eval", "--bundle", "bundle", "--ensemble", "3", "--data", "test.csv", "--out", "de3.json"]);
    assert!(json(dir, "de3.json")["nll"].as_f64().unwrap() > 0.0);
    // Ancestral sampling on an undistilled bridge.
    ok(dir, &["eval", "--bundle", "bundle", "--bridge", "b0", "--data", "test.csv", "--out", "anc.json"]);

    ok(dir, &["cost", "--bundle", "bundle", "--bridge", "d0", "d1", "--out", "cost.csv"]);
    let cost = read(dir, "cost.csv");
    let names: Vec<&str> = cost.lines().map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(names, ["name", "source", "de-3", "de-5", "dbn-2"]);
    let de3: Vec<&str> = cost.lines().nth(2).unwrap().split(',').collect();
    assert_eq!(de3[3], "3");
}

#[test]
fn exit_codes() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    // Usage.
    assert_eq!(code(dir, &["dataset", "--out", "x.csv", "--set", "bogus=1"]), 2);
    assert_eq!(code(dir, &["dataset", "--out", "x.csv", "--set", "n=ten"]), 2);
    assert_eq!(code(dir, &["dataset"]), 2);
    assert_eq!(code(dir, &["no-such-command"]), 2);
    assert_eq!(code(dir, &["--help"]), 0);
    // Data.
    assert_eq!(code(dir, &["train-ensemble", "--data", "missing.csv", "--out", "b"]), 3);
    std::fs::write(dir.join("bad.csv"), "f0,f1,label\n1.0,oops,0\n").unwrap();
    assert_eq!(code(dir, &["train-ensemble", "--data", "bad.csv", "--out", "b"]), 3);
    // Numeric.
    ok(dir, &["dataset", "--out", "d.csv", "--set", "n=64"]);
    let diverge = ["train-ensemble", "--data", "d.csv", "--out", "b", "--set", "lr=1e30", "--set", "epochs=2"];
    assert_eq!(code(dir, &diverge), 4);
}

#[test]
fn version_mismatch_is_a_data_error() {
    let t = tempfile::tempdir().unwrap();
    let dir = t.path();
    ok(dir, &["dataset", "--out", "d.csv", "--set", "n=64"]);
    ok(dir, &["train-ensemble", "--data", "d.csv", "--out", "bundle", "--set", "epochs=1", "--set", "seeds=1,2"]);
    let path: PathBuf = dir.join("bundle/bundle.json");
    let text = std::fs::read_to_string(&path).unwrap();
    std::fs::write(&path, text.replace("\"format_version\": \"1\"", "\"format_version\": \"99\"")).unwrap();
    let out = dbn(dir, &["eval", "--bundle", "bundle", "--ensemble", "1", "--data", "d.csv", "--out", "r.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("version"));
}
