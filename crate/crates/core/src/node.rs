//! Process wiring for the oracle and client nodes: open the chain, start the
//! node, bind HTTP, and run until shutdown.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use anyhow::{Context, Result};
use axum::Router;
use tracing::info;

use crate::client::{self, Client, HttpOracle};
use crate::config::{ClientFile, LedgerMode, OracleFile};
use crate::ledger::{self, ChainAdapter, RemoteChain, SimLedger, SystemClock};
use crate::monitor::Shutdown;
use crate::oracle::{self, Oracle};

/// Starts the oracle, hosting the simulated ledger under `/chain` when
/// configured, and blocks until `shutdown` fires. `announce` receives the
/// bound address once the listener is up.
pub fn run_oracle(file: &OracleFile, shutdown: &Shutdown, announce: impl FnOnce(SocketAddr)) -> Result<()> {
    let (chain, hosted): (Arc<dyn ChainAdapter>, bool) = match file.ledger {
        LedgerMode::Simulated => {
            std::fs::create_dir_all(&file.storage_root)?;
            let path = file.storage_root.join("ledger.jsonl");
            let ledger = SimLedger::open(&path, Arc::new(SystemClock))
                .with_context(|| format!("opening ledger {}", path.display()))?;
            (Arc::new(ledger), true)
        }
        LedgerMode::Adapter => {
            let url = file.chain_url.as_deref().unwrap_or_default();
            let chain = RemoteChain::connect(url).with_context(|| format!("connecting to chain at {url}"))?;
            (Arc::new(chain), false)
        }
    };
    let oracle = Oracle::start(file.oracle_config()?, Arc::clone(&chain))?;
    let mut app = oracle::http::router(Arc::clone(&oracle));
    if hosted {
        app = app.merge(ledger::http::router(chain));
    }

    let runtime = runtime()?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(&file.listen))
        .with_context(|| format!("binding {}", file.listen))?;
    let addr = listener.local_addr()?;
    info!(%addr, address = %oracle.address(), "oracle listening");
    announce(addr);

    let worker = {
        let oracle = Arc::clone(&oracle);
        let shutdown = shutdown.clone();
        thread::spawn(move || oracle.serve(&shutdown))
    };
    let served = runtime.block_on(serve_until(listener, app, shutdown.clone()));
    shutdown.trigger();
    let worked = worker.join().map_err(|_| anyhow::anyhow!("oracle worker panicked"))?;
    served?;
    worked?;
    Ok(())
}

/// Starts a client gateway against a running oracle and blocks until
/// `shutdown` fires.
pub fn run_client(file: &ClientFile, shutdown: &Shutdown, announce: impl FnOnce(SocketAddr)) -> Result<()> {
    let chain = RemoteChain::connect(file.chain_url())
        .with_context(|| format!("connecting to chain at {}", file.chain_url()))?;
    let oracle = HttpOracle::new(&file.oracle_url);
    let client = Client::start(file.client_config(), Arc::new(chain), Arc::new(oracle))
        .with_context(|| format!("starting client against oracle {}", file.oracle_url))?;

    let runtime = runtime()?;
    let listener = runtime
        .block_on(tokio::net::TcpListener::bind(&file.listen))
        .with_context(|| format!("binding {}", file.listen))?;
    let addr = listener.local_addr()?;
    client.set_public_url(format!("http://{addr}"));
    info!(%addr, "client listening");
    announce(addr);

    let monitors = {
        let client = Arc::clone(&client);
        let shutdown = shutdown.clone();
        thread::spawn(move || client.run_monitors(&shutdown))
    };
    let served = runtime.block_on(serve_until(listener, client::http::router(client), shutdown.clone()));
    shutdown.trigger();
    let _ = monitors.join();
    served?;
    Ok(())
}

/// Triggers `shutdown` on Ctrl-C or SIGTERM.
pub fn trigger_on_signal(shutdown: &Shutdown) {
    let shutdown = shutdown.clone();
    thread::spawn(move || {
        let Ok(rt) = tokio::runtime::Builder::new_current_thread().enable_all().build() else {
            return;
        };
        rt.block_on(async {
            #[cfg(unix)]
            {
                use tokio::signal::unix::{signal, SignalKind};
                match signal(SignalKind::terminate()) {
                    Ok(mut term) => {
                        tokio::select! {
                            _ = tokio::signal::ctrl_c() => {}
                            _ = term.recv() => {}
                        }
                    }
                    Err(_) => {
                        let _ = tokio::signal::ctrl_c().await;
                    }
                }
            }
            #[cfg(not(unix))]
            {
                let _ = tokio::signal::ctrl_c().await;
            }
        });
        shutdown.trigger();
    });
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

async fn serve_until(listener: tokio::net::TcpListener, app: Router, shutdown: Shutdown) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async move {
            let _ = tokio::task::spawn_blocking(move || while !shutdown.wait(Duration::from_millis(250)) {}).await;
        })
        .await
}
