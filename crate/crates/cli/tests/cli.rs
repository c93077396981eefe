use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn riskid(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_riskid")).args(args).env_remove("RISKID_DATA_DIR").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = riskid(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn schema(name: &str) -> jsonschema::JSONSchema {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas").join(format!("{name}.schema.json"));
    let value: Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    jsonschema::JSONSchema::compile(&value).unwrap()
}

fn assert_valid(name: &str, doc: &Value) {
    let s = schema(name);
    let msgs: Vec<String> = match s.validate(doc) {
        Ok(()) => return,
        Err(errors) => errors.map(|e| format!("{} at {}", e, e.instance_path)).collect(),
    };
    panic!("{name}: {msgs:?}");
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn lines(path: &Path) -> Vec<Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

/// Small dataset plus a briefly trained checkpoint.
fn fixture(dir: &Path) -> PathBuf {
    ok(&["gen", "--seed", "5", "--train", "24", "--test1", "8", "--test2", "4", "--out", p(dir)]);
    let ckpt = dir.join("model.bin");
    ok(&[
        "train", "--seed", "2", "--data", p(&dir.join("train.jsonl")), "--out", p(&ckpt),
        "--stage1-steps", "3", "--stage2-steps", "2", "--batch-size", "4", "--hidden", "8", "--dim", "6",
    ]);
    ckpt
}

#[test]
fn gen_is_deterministic_and_matches_schema() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for d in [&a, &b] {
        ok(&["gen", "--seed", "7", "--train", "12", "--test1", "5", "--test2", "3", "--out", p(d)]);
    }
    for (split, n) in [("train", 12), ("test1", 5), ("test2", 3)] {
        let file = format!("{split}.jsonl");
        assert_eq!(fs::read(a.join(&file)).unwrap(), fs::read(b.join(&file)).unwrap());
        let rows = lines(&a.join(&file));
        assert_eq!(rows.len(), n);
        for r in &rows {
            assert_valid("scenario", r);
            assert_eq!(r["schema_version"], 1);
        }
    }
    for r in lines(&a.join("test2.jsonl")) {
        assert_eq!(r["truth"]["response"], "Stop");
    }
}

#[test]
fn usage_errors_exit_two() {
    for args in [
        &["fly"][..],
        &["gen", "--seed", "1", "--bogus"],
        &["gen"],
        &["eval", "--mode", "vibes"],
    ] {
        let out = riskid(args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"), "{args:?}");
    }
    assert_eq!(riskid(&["--help"]).status.code(), Some(0));
}

#[test]
fn domain_errors_exit_one_with_json() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("none.bin");
    let cases: [(&[&str], &str); 3] = [
        (&["gen", "--seed", "1", "--train", "0", "--out", p(tmp.path())], "invalid"),
        (&["identify", "--ckpt", p(&missing), "--scenario", "x.json"], "io"),
        (&["gen", "--seed", "1", "--confound-prob", "1.5", "--out", p(tmp.path())], "invalid"),
    ];
    for (args, kind) in cases {
        let out = riskid(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err: Value = serde_json::from_slice(&out.stderr).unwrap();
        assert_eq!(err["error"]["kind"], kind, "{err}");
        assert!(err["error"]["message"].as_str().unwrap().len() > 3);
    }

    let bad = tmp.path().join("bad.bin");
    fs::write(&bad, b"not a checkpoint").unwrap();
    let out = riskid(&["identify", "--ckpt", p(&bad), "--scenario", "x.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert_eq!(err["error"]["kind"], "checkpoint");
}

#[test]
fn pipeline_outputs_validate_and_repeat() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = fixture(dir);
    let again = dir.join("again.bin");
    ok(&[
        "train", "--seed", "2", "--data", p(&dir.join("train.jsonl")), "--out", p(&again),
        "--stage1-steps", "3", "--stage2-steps", "2", "--batch-size", "4", "--hidden", "8", "--dim", "6",
    ]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&again).unwrap());
    let log = fs::read_to_string(dir.join("model.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 3 + 2);

    let mut reports = Vec::new();
    for mode in ["causation", "correlation"] {
        ok(&["--data-dir", p(dir), "eval", "--ckpt", p(&ckpt), "--mode", mode]);
        let json = fs::read_to_string(dir.join(format!("metrics_{mode}.json"))).unwrap();
        let report: Value = serde_json::from_str(&json).unwrap();
        assert_valid("metrics", &report);
        assert!(fs::read_to_string(dir.join(format!("metrics_{mode}.csv"))).unwrap().starts_with("section,"));
        reports.push(report);
    }
    assert_eq!(reports[0]["response"], reports[1]["response"]);
    assert_eq!(reports[0]["mode"], "causation");

    let out = ok(&["assess", "--ckpt", p(&ckpt), "--data", p(&dir.join("test2.jsonl")), "--order", "reverse"]);
    let assessed: Vec<Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(assessed.len(), 4);
    for r in &assessed {
        assert_valid("riskreport", r);
    }

    let test2 = dir.join("test2.jsonl");
    let out = ok(&["identify", "--ckpt", p(&ckpt), "--scenario", p(&test2), "--index", "2", "--order", "parallel"]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_valid("riskreport", &report);
    assert_eq!(report, assessed[2]);

    let graph_file = dir.join("graph.json");
    ok(&["export-graph", "--ckpt", p(&ckpt), "--scenario", p(&test2), "--frame", "4", "--out", p(&graph_file)]);
    let graph: Value = serde_json::from_str(&fs::read_to_string(&graph_file).unwrap()).unwrap();
    assert_valid("graph", &graph);
    assert_eq!(graph["frame"], 4);
    assert_eq!(graph["nodes"].as_array().unwrap().last().unwrap()["id"], "ego");
}

#[test]
fn single_tracklet_scenario_names_that_tracklet() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let ckpt = fixture(dir);
    let mut s = lines(&dir.join("test2.jsonl")).remove(0);
    let keep = s["clip"]["tracklets"][0].clone();
    let id = keep["id"].clone();
    s["clip"]["tracklets"] = Value::Array(vec![keep]);
    s["latent"] = Value::Array(s["latent"].as_array().unwrap().iter().filter(|l| l["id"] == id).cloned().collect());
    let file = dir.join("one.json");
    fs::write(&file, serde_json::to_string_pretty(&s).unwrap()).unwrap();

    let out = ok(&["identify", "--ckpt", p(&ckpt), "--scenario", p(&file)]);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["risk_object_id"], id);
    assert_eq!(report["objects"].as_array().unwrap().len(), 1);
}

#[test]
fn data_dir_comes_from_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_riskid"))
        .args(["gen", "--seed", "3", "--train", "2", "--test1", "2", "--test2", "1"])
        .env("RISKID_DATA_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success());
    for split in ["train", "test1", "test2"] {
        assert!(tmp.path().join(format!("{split}.jsonl")).exists());
    }
}

#[test]
fn wrong_schema_version_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(&["gen", "--seed", "9", "--train", "1", "--test1", "1", "--test2", "1", "--out", p(dir)]);
    let ckpt = dir.join("m.bin");
    ok(&["train", "--seed", "0", "--data", p(&dir.join("train.jsonl")), "--out", p(&ckpt),
        "--stage1-steps", "1", "--stage2-steps", "1", "--batch-size", "1", "--hidden", "4", "--dim", "4"]);
    let mut s = lines(&dir.join("test2.jsonl")).remove(0);
    s["schema_version"] = Value::from(99);
    let file = dir.join("future.json");
    fs::write(&file, s.to_string()).unwrap();
    let out = riskid(&["identify", "--ckpt", p(&ckpt), "--scenario", p(&file)]);
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"]["message"].as_str().unwrap().contains("schema version 99"));
}
