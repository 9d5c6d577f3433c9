use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};

use triad::service::{self, ExperimentSpec, ExportKind, NodeConfig};
use triad::sim::RunTrace;
use triad::wire::KeyRing;

#[derive(Parser)]
#[command(
    name = "triad",
    version,
    about = "Trusted timestamps from a trio of clock nodes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a node daemon until it terminates or receives SIGTERM.
    Node {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the loopback external time source.
    External {
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        key_file: PathBuf,
        /// Uncertainty reported with every reading.
        #[arg(long, default_value_t = 0)]
        radius_nanos: u64,
    },
    /// Ask a node for a timestamp.
    Query {
        #[arg(long)]
        server: SocketAddr,
        #[arg(long)]
        key_file: PathBuf,
        /// Client id; must not clash with a node id.
        #[arg(long, default_value_t = 100)]
        id: u32,
        #[arg(long, default_value_t = 1000)]
        timeout_ms: u64,
    },
    /// Run a simulator experiment described by a TOML spec.
    Sim {
        #[arg(long)]
        spec: PathBuf,
    },
    /// Derive plot data from a trace CSV.
    Export {
        #[arg(long)]
        trace: PathBuf,
        /// error-over-time, access-frequency, epoch-length or rtt.
        #[arg(long)]
        kind: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn shutdown_flag() -> Result<Arc<AtomicBool>, String> {
    let flag = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, Arc::clone(&flag)).map_err(|e| e.to_string())?;
    }
    Ok(flag)
}

fn run(cli: Cli) -> Result<u8, String> {
    match cli.command {
        Command::Node { config } => {
            let cfg = NodeConfig::load(&config).map_err(|e| e.to_string())?;
            let flag = shutdown_flag()?;
            let code = service::run_node(&cfg, &flag).map_err(|e| e.to_string())?;
            Ok(code as u8)
        }
        Command::External {
            listen,
            key_file,
            radius_nanos,
        } => {
            let keys = KeyRing::load(&key_file).map_err(|e| e.to_string())?;
            let flag = shutdown_flag()?;
            service::run_external(listen, keys, radius_nanos, &flag).map_err(|e| e.to_string())?;
            Ok(0)
        }
        Command::Query {
            server,
            key_file,
            id,
            timeout_ms,
        } => {
            let keys = KeyRing::load(&key_file).map_err(|e| e.to_string())?;
            let ts = service::query(server, id, &keys, Duration::from_millis(timeout_ms))?;
            println!("{} ±{} ns", ts.nanos, ts.error_bound_nanos);
            Ok(0)
        }
        Command::Sim { spec } => {
            let spec = ExperimentSpec::load(&spec).map_err(|e| e.to_string())?;
            let out = service::run_experiment(&spec).map_err(|e| e.to_string())?;
            print!(
                "{}",
                service::experiment::summary_csv(spec.seed, &out.summary)
            );
            for f in &out.files {
                eprintln!("wrote {}", f.display());
            }
            Ok(0)
        }
        Command::Export { trace, kind, out } => {
            let kind = ExportKind::from_name(&kind).ok_or_else(|| {
                let names: Vec<_> = ExportKind::ALL.iter().map(|k| k.name()).collect();
                format!("unknown kind {kind:?} (known: {})", names.join(", "))
            })?;
            let file =
                std::fs::File::open(&trace).map_err(|e| format!("{}: {e}", trace.display()))?;
            let t = RunTrace::read_csv(std::io::BufReader::new(file))
                .map_err(|e| format!("{}: {e}", trace.display()))?;
            let csv = service::export(&t, kind);
            match out {
                Some(p) => std::fs::write(&p, csv).map_err(|e| format!("{}: {e}", p.display()))?,
                None => print!("{csv}"),
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
