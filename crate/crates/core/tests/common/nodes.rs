//! Oracle and client node processes driven through the CLI binary.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::Value;
use tempfile::TempDir;

pub const BIN: &str = env!("CARGO_BIN_EXE_predictchain");

pub struct Nodes {
    pub dir: TempDir,
    pub client_url: String,
    pub oracle_url: String,
    children: Vec<Child>,
}

fn spawn_node(kind: &str, config: &Path) -> (Child, String) {
    let mut child = Command::new(BIN)
        .args(["node", kind, "--config"])
        .arg(config)
        .stdout(Stdio::piped())
        .stderr(Stdio::inherit())
        .spawn()
        .expect("spawn node");
    let stdout = child.stdout.take().unwrap();
    let mut line = String::new();
    BufReader::new(stdout).read_line(&mut line).unwrap();
    let addr = line
        .trim()
        .strip_prefix("listening ")
        .unwrap_or_else(|| panic!("{kind} node did not start: {line:?}"))
        .to_string();
    (child, format!("http://{addr}"))
}

impl Nodes {
    pub fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let oracle_cfg = dir.path().join("oracle.toml");
        std::fs::write(
            &oracle_cfg,
            "oracle_address = \"ORACLE\"\nstorage_root = \"oracle\"\nlisten = \"127.0.0.1:0\"\npoll_interval_ms = 50\nschedule_path = \"oracle/schedule.txt\"\n",
        )
        .unwrap();
        let (oracle, oracle_url) = spawn_node("oracle", &oracle_cfg);
        let client_cfg = dir.path().join("client.toml");
        std::fs::write(
            &client_cfg,
            format!(
                "oracle_url = \"{oracle_url}\"\nstorage_root = \"client\"\nlisten = \"127.0.0.1:0\"\npoll_interval_ms = 50\n"
            ),
        )
        .unwrap();
        let (client, client_url) = spawn_node("client", &client_cfg);
        Self {
            dir,
            client_url,
            oracle_url,
            children: vec![oracle, client],
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Runs the CLI against the client as `user`.
    pub fn cli(&self, user: &str, args: &[&str]) -> Output {
        Command::new(BIN)
            .args(args)
            .env("PREDICTCHAIN_URL", &self.client_url)
            .env("PREDICTCHAIN_USER", user)
            .output()
            .expect("run cli")
    }

    /// Runs the CLI with `--json`, requires success, and parses the output.
    pub fn json(&self, user: &str, args: &[&str]) -> Value {
        let mut full = vec!["--json"];
        full.extend_from_slice(args);
        let out = self.cli(user, &full);
        assert!(
            out.status.success(),
            "{args:?} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        let text = String::from_utf8(out.stdout).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1, "{args:?} printed {text:?}");
        serde_json::from_str(lines[0]).unwrap_or_else(|e| panic!("{args:?} printed non-JSON {text:?}: {e}"))
    }
}

impl Drop for Nodes {
    fn drop(&mut self) {
        // client first, so it never polls a dead oracle
        for c in self.children.iter_mut().rev() {
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}
