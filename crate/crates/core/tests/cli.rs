mod common;

use std::process::Command;

use common::nodes::{Nodes, BIN};
use predictchain::datastore::synthetic::sine_csv;
use predictchain::net::JsonHttp;
use serde_json::Value;

#[test]
fn cli_commands_over_live_nodes() {
    let n = Nodes::start();

    // Empty queue: nothing printed, success.
    let out = n.cli("alice", &["updates"]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());

    let out = n.cli("alice", &["price", "dataset_upload", "--size", "5000000"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "5000000 microALGO");
    let quote = n.json("alice", &["price", "dataset_upload", "--size", "5000000"]);
    let direct: Value = JsonHttp::new(&n.client_url)
        .get(
            "/api/price",
            &[("kind", "dataset_upload".into()), ("ds_size", "5000000".into())],
        )
        .unwrap();
    assert_eq!(quote, direct);

    let funded = n.json("alice", &["faucet", "alice", "100000000"]);
    assert_eq!(funded["balance"], 100_000_000);
    assert_eq!(n.json("alice", &["account"])["balance"], 100_000_000);

    let csv = n.path("s.csv");
    std::fs::write(&csv, sine_csv(150, 0.1, 2)).unwrap();
    let up = n.json(
        "alice",
        &["upload", csv.to_str().unwrap(), "--name", "s", "--time-attrib", "date"],
    );
    assert_eq!(up["op"], "<UP_DATASET>");
    let updates = n.json("alice", &["updates", "--min", "1", "--timeout", "60"]);
    assert_eq!(updates["updates"][0]["op"], "<DATASET_UP>");
    assert_eq!(updates["updates"][0]["status"], "ok");
    assert_eq!(
        n.json("alice", &["names", "datasets"])["names"],
        serde_json::json!(["s"])
    );

    let broke = n.cli(
        "bob",
        &["train", "lstm", "--dataset", "s", "--name", "m", "--target", "value"],
    );
    assert_eq!(broke.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&broke.stderr).contains("insufficient funds"));
    n.json("bob", &["faucet", "bob", "100000000"]);
    let train = n.json(
        "bob",
        &[
            "train",
            "lstm",
            "--dataset",
            "s",
            "--name",
            "m",
            "--epochs",
            "3",
            "--target",
            "value",
            "--sub-split",
            "none",
        ],
    );
    assert_eq!(train["op"], "<TRAIN_MODEL>");
    let trained = n.json("bob", &["updates", "--min", "1", "--timeout", "120"]);
    let trained = &trained["updates"][0];
    assert_eq!(trained["op"], "<MODEL_TRAINED>", "{trained}");
    assert_eq!(trained["status"], "ok");

    n.json("carol", &["faucet", "carol", "100000000"]);
    n.json("carol", &["query", "m", "--row", "s:120", "--steps", "2"]);
    let got = n.json("carol", &["updates", "--min", "1", "--timeout", "60"]);
    let result = got["updates"]
        .as_array()
        .unwrap()
        .iter()
        .find(|u| u["op"] == "<QUERY_RESULT>")
        .unwrap();
    let output: Vec<f64> = serde_json::from_str(result["args"]["output"].as_str().unwrap()).unwrap();
    assert_eq!(output.len(), 2);

    let history = n.json("carol", &["history"]);
    assert!(history["transactions"].as_array().unwrap().len() >= 3);
    let audit = n.json("carol", &["audit"]);
    assert_eq!(audit["problems"], serde_json::json!([]), "{audit}");
    assert_eq!(n.json("x", &["names", "models"])["names"], serde_json::json!(["m"]));

    // API errors and transport errors are told apart.
    let out = n.cli("alice", &["price", "no_such_kind"]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("api error (400)"));
    let out = n.cli("alice", &["query", "ghost", "--input", "[1,2]"]);
    assert_eq!(out.status.code(), Some(4));
    let out = Command::new(BIN)
        .args(["--url", "http://127.0.0.1:1", "names", "models"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("transport error"));

    // Oracle endpoints answer directly too.
    let info: Value = JsonHttp::new(&n.oracle_url).get("/info", &[]).unwrap();
    assert_eq!(info["address"], "ORACLE");
}

#[test]
fn usage_errors_exit_nonzero() {
    let out = Command::new(BIN).args(["query", "m"]).output().unwrap();
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
    let out = Command::new(BIN)
        .args(["node", "oracle", "--config", "/nonexistent.toml"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonexistent.toml"));
}

#[test]
fn sample_writes_exact_size() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dj.csv");
    let out = Command::new(BIN)
        .args(["--json", "sample", "--bytes", "200000", "--out"])
        .arg(&path)
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["bytes"], 200_000);
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 200_000);
}
