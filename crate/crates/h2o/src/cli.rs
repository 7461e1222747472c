//! Command-line interface. Exit codes: 0 ok, 1 statement or usage error,
//! 2 cluster fault, 3 failed script assertion.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use clap::{Parser, Subcommand};
use h2o_core::cluster::{parse_script, run_script, ScriptError};
use h2o_core::config::ClusterConfig;
use h2o_core::node::msg::SqlResult;
use h2o_core::sql::Value;
use h2o_core::wire::Address;

use crate::client::{self, ClientError};
use crate::net::{serve, Outcome, ServeOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USER: i32 = 1;
pub const EXIT_CLUSTER: i32 = 2;
pub const EXIT_ASSERT: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "h2o", version, about = "Autonomic replicated table store")]
pub struct Cli {
    #[command(subcommand)]
    pub cmd: Cmd,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a fault-injection script on a simulated cluster.
    Sim {
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Write the event log here as JSON lines.
        #[arg(long)]
        log_out: Option<PathBuf>,
    },
    /// Run an instance that listens on ADDR.
    Start {
        #[arg(long)]
        addr: String,
        #[arg(long)]
        bootstrap: Option<String>,
        /// Persistence directory. Defaults to $H2O_DATA_DIR/<addr>.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Execute one statement.
    Sql {
        #[arg(long)]
        node: String,
        statement: String,
    },
    /// Stop an instance abruptly, as if it crashed.
    Kill {
        #[arg(long)]
        node: String,
    },
    /// Ask an instance to hand off its roles and leave.
    Leave {
        #[arg(long)]
        node: String,
    },
    /// Print an instance's view of the cluster.
    Status {
        #[arg(long)]
        node: String,
    },
}

pub fn run(cli: Cli) -> i32 {
    let out = &mut io::stdout().lock();
    match cli.cmd {
        Cmd::Sim { script, config, log_out } => sim(&script, &config, log_out.as_deref(), out),
        Cmd::Start { addr, bootstrap, data_dir, config } => start(addr, bootstrap, data_dir, config.as_deref()),
        Cmd::Sql { node, statement } => match client::sql(&node, &statement) {
            Ok(r) => {
                print_result(&r, out);
                EXIT_OK
            }
            Err(e) => client_failure(&e),
        },
        Cmd::Kill { node } => client::kill(&node).map_or_else(|e| client_failure(&e), |_| EXIT_OK),
        Cmd::Leave { node } => client::leave(&node).map_or_else(|e| client_failure(&e), |_| EXIT_OK),
        Cmd::Status { node } => match client::status(&node) {
            Ok(s) => {
                let _ = writeln!(out, "{}", serde_json::to_string_pretty(&s).unwrap_or_default());
                EXIT_OK
            }
            Err(e) => client_failure(&e),
        },
    }
}

fn client_failure(e: &ClientError) -> i32 {
    eprintln!("error: {e}");
    if e.is_user_error() {
        EXIT_USER
    } else {
        EXIT_CLUSTER
    }
}

pub fn load_config(path: &Path) -> Result<ClusterConfig, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let cfg: ClusterConfig = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    cfg.validate().map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(cfg)
}

fn cell(v: &Value) -> String {
    match v {
        Value::Int(i) => i.to_string(),
        Value::Text(s) => s.clone(),
    }
}

pub fn print_result(r: &SqlResult, out: &mut impl Write) {
    if let Some(plan) = &r.plan {
        let _ = writeln!(out, "{}", serde_json::to_string_pretty(plan).unwrap_or_default());
        return;
    }
    if let Some(n) = r.affected {
        let _ = writeln!(out, "{n} row(s) affected");
        return;
    }
    if r.columns.is_empty() {
        let _ = writeln!(out, "ok");
        return;
    }
    let _ = writeln!(out, "{}", r.columns.join("\t"));
    for row in &r.rows {
        let _ = writeln!(out, "{}", row.iter().map(cell).collect::<Vec<_>>().join("\t"));
    }
}

/// Runs a script and reports per-op answers as JSON lines on `out`.
pub fn sim(script: &Path, config: &Path, log_out: Option<&Path>, out: &mut impl Write) -> i32 {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USER;
        }
    };
    let ops = match fs::read_to_string(script).map_err(|e| e.to_string()).and_then(|t| parse_script(&t).map_err(|e| e.to_string())) {
        Ok(ops) => ops,
        Err(e) => {
            eprintln!("error: {}: {e}", script.display());
            return EXIT_USER;
        }
    };
    let write_log = |text: String| -> bool {
        match log_out {
            Some(p) => fs::write(p, text).map_err(|e| eprintln!("error: {}: {e}", p.display())).is_ok(),
            None => true,
        }
    };
    match run_script(&ops, cfg) {
        Ok(outcome) => {
            let mut code = EXIT_OK;
            for r in &outcome.results {
                let line = match &r.result {
                    Ok(res) => serde_json::json!({ "op": r.index, "ok": res }),
                    Err(e) => {
                        code = code.max(if e.kind.is_user_error() { EXIT_USER } else { EXIT_CLUSTER });
                        serde_json::json!({ "op": r.index, "error": e })
                    }
                };
                let _ = writeln!(out, "{line}");
            }
            if !write_log(outcome.log.to_jsonl()) {
                return EXIT_CLUSTER;
            }
            code
        }
        Err(ScriptError::Assertion { index, message, log }) => {
            eprintln!("assertion failed at op {index}: {message}");
            write_log(log.to_jsonl());
            EXIT_ASSERT
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_USER
        }
    }
}

/// The persistence directory of an instance when none is given.
pub fn default_data_dir(addr: &str) -> PathBuf {
    let root = std::env::var_os("H2O_DATA_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("h2o-data"));
    root.join(addr.replace([':', '/'], "_"))
}

fn start(addr: String, bootstrap: Option<String>, data_dir: Option<PathBuf>, config: Option<&Path>) -> i32 {
    let cfg = match config.map(load_config).transpose() {
        Ok(c) => c.unwrap_or_default(),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_USER;
        }
    };
    let data_dir = data_dir.unwrap_or_else(|| default_data_dir(&addr));
    let opts = ServeOptions { addr: Address::new(addr), bootstrap: bootstrap.map(Address::new), data_dir, cfg };
    match serve(opts, Arc::new(AtomicBool::new(false)), io::stdout()) {
        Ok(Outcome::Departed | Outcome::Stopped | Outcome::Killed) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_CLUSTER
        }
    }
}
