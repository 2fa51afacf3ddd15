//! `convograph` command-line entry point.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use convograph_core::graph::{load_graph_with, validate_graph, DialogGraph, Diagnostic, LoadOptions};
use convograph_core::host::Host;
use convograph_core::scheduler::SystemClock;
use convograph_core::sim::{parse_script, simulate, SimConfig, EXIT_IO, EXIT_OK, EXIT_VALIDATION};
use convograph_core::store::{duplicate_graph, BotRegistration, ContentStore, DirBackend};
use convograph_server::api;
use convograph_server::config::{bootstrap, ServerConfig};

#[derive(Debug, Parser)]
#[command(name = "convograph", version, about = "Dialog-graph chatbot runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check a graph document and print diagnostics to stderr.
    Validate {
        graph: PathBuf,
        /// Ignore unknown fields in the document.
        #[arg(long)]
        lenient: bool,
    },
    /// Replay a user script against a graph on a virtual clock.
    Simulate {
        #[arg(long)]
        graph: PathBuf,
        /// Bot registration JSON (intents, risk lexicon, program length).
        #[arg(long)]
        bot: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Virtual start instant, RFC 3339.
        #[arg(long)]
        start: Option<DateTime<Utc>>,
        /// User timezone offset from UTC in minutes.
        #[arg(long, default_value_t = 780, allow_hyphen_values = true)]
        utc_offset: i32,
        /// Also write the usage events as NDJSON to this file.
        #[arg(long)]
        events: Option<PathBuf>,
    },
    /// Run the HTTP server.
    Serve {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the port from the config file.
        #[arg(long)]
        port: Option<u16>,
    },
    /// Copy a graph document with every node id rewritten for a new version.
    Duplicate {
        src: PathBuf,
        dst: PathBuf,
        /// Version suffix appended to node ids.
        #[arg(long, default_value = "copy")]
        suffix: String,
    },
    /// Write a bot's usage events from a data directory as NDJSON.
    ExportEvents {
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        bot: String,
        #[arg(long)]
        from: Option<DateTime<Utc>>,
        #[arg(long)]
        to: Option<DateTime<Utc>>,
    },
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Validate { graph, lenient } => run_validate(&graph, lenient),
        Command::Simulate {
            graph,
            bot,
            script,
            seed,
            start,
            utc_offset,
            events,
        } => run_simulate(&graph, &bot, &script, seed, start, utc_offset, events.as_deref()),
        Command::Serve { config, port } => report(run_serve(&config, port)),
        Command::Duplicate { src, dst, suffix } => run_duplicate(&src, &dst, &suffix),
        Command::ExportEvents {
            data_dir,
            bot,
            from,
            to,
        } => report(run_export(&data_dir, &bot, from, to)),
    };
    ExitCode::from(code as u8)
}

fn report(result: anyhow::Result<()>) -> i32 {
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_IO
        }
    }
}

fn print_diagnostics(diagnostics: &[Diagnostic]) {
    for d in diagnostics {
        eprintln!("{d}");
    }
}

/// Reads and loads a graph, mapping failures to CLI exit codes.
fn read_graph(path: &Path, lenient: bool) -> Result<DialogGraph, i32> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        eprintln!("error: reading {}: {e}", path.display());
        EXIT_IO
    })?;
    load_graph_with(&text, LoadOptions { lenient }).map_err(|e| {
        eprintln!("error: {}: {e}", path.display());
        EXIT_VALIDATION
    })
}

fn run_validate(path: &Path, lenient: bool) -> i32 {
    let graph = match read_graph(path, lenient) {
        Ok(g) => g,
        Err(code) => return code,
    };
    let diagnostics = validate_graph(&graph);
    print_diagnostics(&diagnostics);
    let errors = diagnostics.iter().filter(|d| d.is_error()).count();
    eprintln!(
        "{}: {} nodes, {errors} error(s), {} warning(s)",
        path.display(),
        graph.node_count(),
        diagnostics.len() - errors
    );
    if errors > 0 {
        EXIT_VALIDATION
    } else {
        EXIT_OK
    }
}

fn run_simulate(
    graph_path: &Path,
    bot_path: &Path,
    script_path: &Path,
    seed: u64,
    start: Option<DateTime<Utc>>,
    utc_offset: i32,
    events_path: Option<&Path>,
) -> i32 {
    let graph = match read_graph(graph_path, false) {
        Ok(g) => g,
        Err(code) => return code,
    };
    let bot: BotRegistration = match std::fs::read_to_string(bot_path)
        .map_err(anyhow::Error::from)
        .and_then(|t| Ok(serde_json::from_str(&t)?))
    {
        Ok(b) => b,
        Err(e) => {
            eprintln!("error: {}: {e}", bot_path.display());
            return EXIT_IO;
        }
    };
    let script = match std::fs::read_to_string(script_path) {
        Ok(text) => match parse_script(&text) {
            Ok(s) => s,
            Err(e) => {
                eprintln!("error: {}: {e}", script_path.display());
                return EXIT_IO;
            }
        },
        Err(e) => {
            eprintln!("error: reading {}: {e}", script_path.display());
            return EXIT_IO;
        }
    };
    let mut config = SimConfig {
        seed,
        utc_offset_minutes: utc_offset,
        ..SimConfig::default()
    };
    if let Some(start) = start {
        config.start = start;
    }
    match simulate(&graph, bot, &script, &config) {
        Ok(outcome) => {
            print!("{}", outcome.transcript);
            if let Some(path) = events_path {
                let mut ndjson = String::new();
                for e in &outcome.events {
                    ndjson.push_str(&serde_json::to_string(e).expect("event serializes"));
                    ndjson.push('\n');
                }
                if let Err(e) = std::fs::write(path, ndjson) {
                    eprintln!("error: writing {}: {e}", path.display());
                    return EXIT_IO;
                }
            }
            if let Some(fault) = &outcome.fault {
                eprintln!("runtime fault: {fault}");
            }
            outcome.exit_code()
        }
        Err(e) => {
            if let convograph_core::sim::SimError::Validation(diagnostics) = &e {
                print_diagnostics(diagnostics);
            }
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run_duplicate(src: &Path, dst: &Path, suffix: &str) -> i32 {
    let graph = match read_graph(src, false) {
        Ok(g) => g,
        Err(code) => return code,
    };
    let copy = duplicate_graph(&graph, suffix);
    match std::fs::write(dst, copy.to_json_string()) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: writing {}: {e}", dst.display());
            EXIT_IO
        }
    }
}

fn run_export(data_dir: &Path, bot: &str, from: Option<DateTime<Utc>>, to: Option<DateTime<Utc>>) -> anyhow::Result<()> {
    let backend = DirBackend::open(data_dir).with_context(|| format!("opening {}", data_dir.display()))?;
    let store = ContentStore::open(Arc::new(backend), true)?;
    print!("{}", store.export_events(bot, from, to)?);
    Ok(())
}

fn run_serve(config_path: &Path, port: Option<u16>) -> anyhow::Result<()> {
    let config = ServerConfig::load(config_path)?;
    let backend =
        DirBackend::open(&config.data_dir).with_context(|| format!("opening {}", config.data_dir.display()))?;
    let store = Arc::new(ContentStore::open(Arc::new(backend), config.redaction)?);
    let seed = rand_seed();
    let host = Arc::new(Host::new(store, Arc::new(SystemClock), seed)?);
    bootstrap(&host, &config)?;
    let state = api::app_state(host, config.admin_token.clone());
    let port = port.unwrap_or(config.port);
    let tick = Duration::from_secs(config.tick_seconds.max(1));

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(("0.0.0.0", port))
            .await
            .with_context(|| format!("binding port {port}"))?;
        tracing::info!(addr = %listener.local_addr()?, "listening");
        let ticker = tokio::spawn(api::run_ticker(state.clone(), tick));
        axum::serve(listener, api::router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        ticker.abort();
        Ok(())
    })
}

fn rand_seed() -> u64 {
    use std::hash::{BuildHasher, Hasher};
    let mut h = std::collections::hash_map::RandomState::new().build_hasher();
    h.write_u128(Utc::now().timestamp_nanos_opt().unwrap_or_default() as u128);
    h.finish()
}
