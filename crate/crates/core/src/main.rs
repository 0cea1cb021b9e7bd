use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use predictchain::client::{BlobReceipt, SubmitReceipt, SubmitRequest, Update};
use predictchain::config::{ClientFile, OracleFile};
use predictchain::datastore::synthetic::market_csv_of_size;
use predictchain::monitor::Shutdown;
use predictchain::net::{HttpError, JsonHttp};
use predictchain::node;
use predictchain::protocol::Opcode;

#[derive(Parser)]
#[command(
    name = "predictchain",
    version,
    about = "Marketplace for predictive models over ledger notes"
)]
struct Cli {
    /// Client gateway URL.
    #[arg(
        long,
        global = true,
        env = "PREDICTCHAIN_URL",
        default_value = "http://127.0.0.1:8710"
    )]
    url: String,
    /// User name the client acts for.
    #[arg(long, global = true, env = "PREDICTCHAIN_USER", default_value = "default")]
    user: String,
    /// Print one JSON object per command.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an oracle or client node.
    Node {
        kind: NodeKind,
        #[arg(long)]
        config: PathBuf,
    },
    /// Ask the oracle for a price without touching the chain.
    Price {
        kind: String,
        /// Dataset size in bytes (dataset_upload).
        #[arg(long)]
        size: Option<u64>,
        /// Archetype (train_model).
        #[arg(long)]
        archetype: Option<String>,
        /// Dataset name (train_model).
        #[arg(long)]
        dataset: Option<String>,
        /// Model name (query_model).
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        hidden_dim: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        lookback: Option<usize>,
    },
    /// Upload a CSV dataset through the client.
    Upload {
        file: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long)]
        time_attrib: Option<String>,
        #[arg(long)]
        sub_split_attrib: Option<String>,
        /// Refuse to pay more than this many microALGO.
        #[arg(long)]
        max_price: Option<u64>,
    },
    /// Train a model on an uploaded dataset.
    Train {
        archetype: String,
        #[arg(long)]
        dataset: String,
        #[arg(long)]
        name: String,
        #[arg(long, default_value_t = 70)]
        epochs: u32,
        #[arg(long, default_value_t = 5)]
        hidden_dim: usize,
        #[arg(long, default_value_t = 1)]
        layers: usize,
        #[arg(long, default_value_t = 0)]
        lag: usize,
        #[arg(long, default_value_t = 10)]
        lookback: usize,
        #[arg(long, default_value = "0")]
        sub_split: Option<String>,
        #[arg(long, default_value = "close")]
        target: String,
        #[arg(long)]
        max_price: Option<u64>,
    },
    /// Query a trained model with raw values or a dataset row.
    Query {
        model: String,
        /// JSON array of input values.
        #[arg(long, conflicts_with = "row", required_unless_present = "row")]
        input: Option<String>,
        /// Dataset row reference `ds_name:row_index`.
        #[arg(long)]
        row: Option<String>,
        /// Number of steps to predict.
        #[arg(long)]
        steps: Option<u32>,
        #[arg(long)]
        max_price: Option<u64>,
    },
    /// Fetch and clear queued oracle responses for the user.
    Updates {
        /// Keep polling until at least this many updates arrived.
        #[arg(long, default_value_t = 0)]
        min: usize,
        /// Give up waiting after this many seconds.
        #[arg(long, default_value_t = 60)]
        timeout: u64,
    },
    /// List registered dataset or model names.
    Names { kind: String },
    /// Transactions touching an address, with decoded notes.
    History { address: Option<String> },
    /// Mint test funds (simulated ledger only).
    Faucet { user: String, amount: u64 },
    /// Balance and address of the user.
    Account,
    /// Check the chain against the oracle's registries and reward rules.
    Audit,
    /// Write a seeded synthetic market CSV (Dow Jones column layout).
    Sample {
        #[arg(long)]
        out: PathBuf,
        /// Exact file size in bytes.
        #[arg(long, default_value_t = 5_000_000)]
        bytes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum NodeKind {
    Oracle,
    Client,
}

enum CliError {
    Transport(String),
    Api(u16, String),
    Other(String),
}

impl From<HttpError> for CliError {
    fn from(e: HttpError) -> Self {
        match &e {
            HttpError::Transport(m) => CliError::Transport(m.clone()),
            HttpError::Api { status, .. } => CliError::Api(*status, e.api_message().unwrap_or_default()),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Other(format!("{e:#}"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_env("PREDICTCHAIN_LOG")
                .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("warn")),
        )
        .with_writer(std::io::stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Transport(m)) => {
            eprintln!("transport error: {m}");
            ExitCode::from(3)
        }
        Err(CliError::Api(status, m)) => {
            eprintln!("api error ({status}): {m}");
            ExitCode::from(4)
        }
        Err(CliError::Other(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let http = JsonHttp::new(&cli.url);
    let out = Output { json: cli.json };
    let user = cli.user.clone();
    match cli.command {
        Command::Node { kind, config } => run_node(kind, &config),
        Command::Price {
            kind,
            size,
            archetype,
            dataset,
            model,
            hidden_dim,
            layers,
            lookback,
        } => {
            let mut query = vec![("kind", kind)];
            let mut opt = |k: &'static str, v: Option<String>| {
                if let Some(v) = v {
                    query.push((k, v));
                }
            };
            opt("ds_size", size.map(|v| v.to_string()));
            opt("raw_model", archetype);
            opt("ds_name", dataset);
            opt("model_name", model);
            opt("hidden_dim", hidden_dim.map(|v| v.to_string()));
            opt("num_hidden_layers", layers.map(|v| v.to_string()));
            opt("training_lookback", lookback.map(|v| v.to_string()));
            let quote: Value = http.get("/api/price", &query)?;
            out.emit(&quote, |q| format!("{} microALGO", q["price_microalgo"]));
            Ok(())
        }
        Command::Upload {
            file,
            name,
            time_attrib,
            sub_split_attrib,
            max_price,
        } => {
            let bytes =
                std::fs::read(&file).map_err(|e| CliError::Other(format!("reading {}: {e}", file.display())))?;
            let blob: BlobReceipt = http.post_bytes("/api/blobs", &bytes)?;
            let mut args = BTreeMap::from([
                ("ds_name", name),
                ("ds_link", blob.link),
                ("ds_size", blob.size.to_string()),
            ]);
            if let Some(t) = time_attrib {
                args.insert("time_attrib", t);
            }
            if let Some(s) = sub_split_attrib {
                args.insert("sub_split_attrib", s);
            }
            submit(&http, &out, &user, Opcode::UpDataset, args, max_price)
        }
        Command::Train {
            archetype,
            dataset,
            name,
            epochs,
            hidden_dim,
            layers,
            lag,
            lookback,
            sub_split,
            target,
            max_price,
        } => {
            let mut args = BTreeMap::from([
                ("raw_model", archetype),
                ("ds_name", dataset),
                ("new_model_name", name),
                ("num_epochs", epochs.to_string()),
                ("target_attrib", target),
                ("hidden_dim", hidden_dim.to_string()),
                ("num_hidden_layers", layers.to_string()),
                ("time_lag", lag.to_string()),
                ("training_lookback", lookback.to_string()),
            ]);
            if let Some(s) = sub_split.filter(|s| !s.is_empty() && s != "none") {
                args.insert("sub_split_value", s);
            }
            submit(&http, &out, &user, Opcode::TrainModel, args, max_price)
        }
        Command::Query {
            model,
            input,
            row,
            steps,
            max_price,
        } => {
            let input = input.or(row).unwrap_or_default();
            let mut args = BTreeMap::from([("model_name", model), ("input", input)]);
            if let Some(s) = steps {
                args.insert("steps", s.to_string());
            }
            submit(&http, &out, &user, Opcode::QueryModel, args, max_price)
        }
        Command::Updates { min, timeout } => {
            let deadline = Instant::now() + Duration::from_secs(timeout);
            let mut all: Vec<Update> = Vec::new();
            loop {
                let batch: Vec<Update> = http.get("/api/updates", &[("user", user.clone())])?;
                all.extend(batch);
                if all.len() >= min || Instant::now() >= deadline {
                    break;
                }
                std::thread::sleep(Duration::from_millis(250));
            }
            if out.json {
                println!("{}", json!({ "user": user, "updates": all }));
            } else {
                for u in &all {
                    println!("{}", update_line(u));
                }
            }
            if all.len() < min {
                return Err(CliError::Other(format!(
                    "timed out after {timeout}s with {} of {min} updates",
                    all.len()
                )));
            }
            Ok(())
        }
        Command::Names { kind } => {
            let reply: Value = http.get("/api/names", &[("kind", kind)])?;
            out.emit(&reply, |r| {
                let names: Vec<&str> = r["names"]
                    .as_array()
                    .into_iter()
                    .flatten()
                    .filter_map(Value::as_str)
                    .collect();
                let mut text = names.join("\n");
                if r["stale"] == true {
                    text.push_str("\n(stale: oracle unreachable)");
                }
                text
            });
            Ok(())
        }
        Command::History { address } => {
            let query = match address {
                Some(a) => vec![("address", a)],
                None => vec![("user", user)],
            };
            let entries: Vec<Value> = http.get("/api/history", &query)?;
            if out.json {
                println!("{}", json!({ "transactions": entries }));
            } else {
                for e in &entries {
                    let op = e["decoded"]["op"].as_str().unwrap_or("-");
                    println!(
                        "{} round {} {} -> {} {} {}",
                        e["id"].as_str().unwrap_or_default(),
                        e["round"],
                        e["sender"].as_str().unwrap_or_default(),
                        e["receiver"].as_str().unwrap_or_default(),
                        e["amount"],
                        op
                    );
                }
            }
            Ok(())
        }
        Command::Faucet { user, amount } => {
            let reply: Value = http.post("/api/faucet", &json!({ "user": user, "amount": amount }))?;
            out.emit(&reply, |r| {
                format!(
                    "{} balance {} microALGO",
                    r["address"].as_str().unwrap_or_default(),
                    r["balance"]
                )
            });
            Ok(())
        }
        Command::Account => {
            let reply: Value = http.get("/api/account", &[("user", user)])?;
            out.emit(&reply, |r| {
                format!(
                    "{} balance {} microALGO",
                    r["address"].as_str().unwrap_or_default(),
                    r["balance"]
                )
            });
            Ok(())
        }
        Command::Sample { out: path, bytes, seed } => {
            let csv = market_csv_of_size(bytes, seed)
                .ok_or_else(|| CliError::Other(format!("{bytes} bytes is too small for a market CSV")))?;
            std::fs::write(&path, &csv).map_err(|e| CliError::Other(format!("writing {}: {e}", path.display())))?;
            out.emit(&json!({ "path": path, "bytes": csv.len() }), |_| {
                format!("wrote {} bytes to {}", csv.len(), path.display())
            });
            Ok(())
        }
        Command::Audit => {
            let report: Value = http.get("/api/audit", &[])?;
            let problems = report["problems"].as_array().map_or(0, Vec::len);
            out.emit(&report, |r| {
                let mut text = format!(
                    "transactions {} requests {} responses {} rewards {} problems {}",
                    r["transactions"], r["requests"], r["responses"], r["reward_payments"], problems
                );
                for p in r["problems"].as_array().into_iter().flatten() {
                    text.push_str(&format!("\n  {}", p.as_str().unwrap_or_default()));
                }
                text
            });
            if problems > 0 {
                return Err(CliError::Other(format!("audit found {problems} problem(s)")));
            }
            Ok(())
        }
    }
}

fn run_node(kind: NodeKind, config: &std::path::Path) -> Result<(), CliError> {
    let shutdown = Shutdown::new();
    node::trigger_on_signal(&shutdown);
    let announce = |addr| {
        use std::io::Write;
        println!("listening {addr}");
        let _ = std::io::stdout().flush();
    };
    match kind {
        NodeKind::Oracle => {
            let file = OracleFile::load(config).map_err(|e| CliError::Other(e.to_string()))?;
            node::run_oracle(&file, &shutdown, announce)?;
        }
        NodeKind::Client => {
            let file = ClientFile::load(config).map_err(|e| CliError::Other(e.to_string()))?;
            node::run_client(&file, &shutdown, announce)?;
        }
    }
    Ok(())
}

fn submit(
    http: &JsonHttp,
    out: &Output,
    user: &str,
    op: Opcode,
    args: BTreeMap<&str, String>,
    max_price: Option<u64>,
) -> Result<(), CliError> {
    let req = SubmitRequest {
        user: user.to_string(),
        op: op.as_str().to_string(),
        args: args
            .into_iter()
            .map(|(k, v)| (k.to_string(), Value::String(v)))
            .collect(),
        max_price,
    };
    let receipt: SubmitReceipt = http.post("/api/submit", &req)?;
    let value = serde_json::to_value(&receipt).expect("receipt serializes");
    out.emit(&value, |_| {
        format!(
            "submitted {} {} paid {} microALGO in round {}",
            receipt.op, receipt.txn_id, receipt.price, receipt.round
        )
    });
    Ok(())
}

fn update_line(u: &Update) -> String {
    let mut extras: Vec<String> = Vec::new();
    for key in ["loss", "accuracy", "output", "truth", "reason", "error", "detail"] {
        if let Some(v) = u.args.get(key) {
            extras.push(format!(
                "{key}={}",
                v.as_str().map_or_else(|| v.to_string(), str::to_string)
            ));
        }
    }
    format!(
        "{} {} {} amount={} {}",
        u.op,
        u.name.as_deref().unwrap_or("-"),
        u.status.as_deref().unwrap_or("-"),
        u.amount,
        extras.join(" ")
    )
    .trim_end()
    .to_string()
}

struct Output {
    json: bool,
}

impl Output {
    fn emit(&self, value: &Value, plain: impl FnOnce(&Value) -> String) {
        if self.json {
            println!("{value}");
        } else {
            let text = plain(value);
            if !text.is_empty() {
                println!("{text}");
            }
        }
    }
}
