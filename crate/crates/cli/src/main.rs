use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use eaas_agent::{accept_tcp, control, spawn_agent, AgentConfig, Connector, Mode};
use eaas_cli::report;
use eaas_cli::scenario::{self, Scenario, ScenarioError};
use eaas_coordinator::{api, Coordinator, CoordinatorApi, CoordinatorConfig, ErrorCode, HttpCoordinator};
use eaas_core::link::{LinkParams, TcpLinkListener};
use eaas_core::{DeviceProfile, SimClock, TransferParams};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "eaas", version, about = "Peer-to-peer wireless energy sharing")]
struct Cli {
    /// Coordinator base URL used by `agent`, `report` and live scenarios.
    #[arg(long, global = true, default_value = "http://127.0.0.1:8080")]
    coordinator_url: String,
    /// error, warn, info, debug or trace; RUST_LOG overrides it.
    #[arg(long, global = true, default_value = "warn")]
    log_level: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the coordinator until interrupted.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// Directory holding ledger.jsonl; in memory when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Seed for id generation.
        #[arg(long)]
        seed: Option<u64>,
        /// Serve static files (the operator console) from this directory.
        #[arg(long)]
        console: Option<PathBuf>,
    },
    /// Run one device agent with its control API.
    Agent(AgentArgs),
    /// Play a scenario script (a path or a bundled name such as demo_30min).
    Scenario {
        script: String,
        /// Run coordinator and agents in this process on a virtual clock.
        #[arg(long)]
        embedded: bool,
    },
    /// Print a transaction's loss report.
    Report {
        transaction_id: String,
        #[arg(long, default_value_t = 300.0)]
        bucket_s: f64,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Text,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Scripted,
    Interactive,
}

#[derive(clap::Args)]
struct AgentArgs {
    /// Left empty, the coordinator assigns one.
    #[arg(long, default_value = "")]
    device_id: String,
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "m1")]
    microcell: String,
    #[arg(long, default_value_t = 10_000.0)]
    capacity_mwh: f64,
    /// Initial battery level in percent.
    #[arg(long, default_value_t = 50.0)]
    level: f64,
    #[arg(long, default_value_t = 3.0)]
    power_w: f64,
    #[arg(long, default_value_t = 0.6)]
    efficiency: f64,
    #[arg(long, default_value_t = 5.0)]
    sampling_period_s: f64,
    #[arg(long, default_value_t = 20.0)]
    floor_percent: f64,
    #[arg(long, default_value_t = 0)]
    control_port: u16,
    #[arg(long, value_enum, default_value_t = ModeArg::Interactive)]
    mode: ModeArg,
    /// Port other agents open proximity links to.
    #[arg(long, default_value_t = 0)]
    link_port: u16,
    /// Known neighbour, as device_id=host:port. Repeatable.
    #[arg(long = "peer", value_parser = parse_peer)]
    peers: Vec<(String, SocketAddr)>,
    #[arg(long, default_value_t = 20.0)]
    latency_ms: f64,
    /// Simulated seconds per wall second.
    #[arg(long, default_value_t = 1.0)]
    time_acceleration: f64,
}

fn parse_peer(s: &str) -> Result<(String, SocketAddr), String> {
    let (id, addr) = s.split_once('=').ok_or("expected device_id=host:port")?;
    let addr = addr.parse().map_err(|e| format!("bad address {addr}: {e}"))?;
    Ok((id.to_string(), addr))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(&cli.log_level));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .init();

    match cli.command {
        Command::Scenario { script, embedded } => run_scenario(&script, embedded, &cli.coordinator_url),
        command => {
            let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
            rt.block_on(async move {
                match command {
                    Command::Serve {
                        port,
                        host,
                        data,
                        seed,
                        console,
                    } => serve(&host, port, data, seed, console).await,
                    Command::Agent(args) => agent(args, &cli.coordinator_url).await,
                    Command::Report {
                        transaction_id,
                        bucket_s,
                        format,
                    } => report(&cli.coordinator_url, &transaction_id, bucket_s, format).await,
                    Command::Scenario { .. } => unreachable!(),
                }
            })
        }
    }
}

async fn serve(host: &str, port: u16, data: Option<PathBuf>, seed: Option<u64>, console: Option<PathBuf>) -> ExitCode {
    let listener = match tokio::net::TcpListener::bind((host, port)).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot listen on {host}:{port}: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(dir) = &data {
        if let Err(e) = std::fs::create_dir_all(dir) {
            eprintln!("cannot create data directory {}: {e}", dir.display());
            return ExitCode::from(2);
        }
    }
    let config = CoordinatorConfig {
        data_dir: data,
        seed,
        ..Default::default()
    };
    let coord = match Coordinator::open(config, SimClock::wall(1.0)) {
        Ok(c) => Arc::new(c),
        Err(e) => {
            eprintln!("cannot open coordinator: {e}");
            return ExitCode::from(2);
        }
    };
    let app = match &console {
        Some(dir) => api::router_with_static(coord, dir),
        None => api::router(coord),
    };
    match listener.local_addr() {
        Ok(addr) => eprintln!("coordinator listening on http://{addr}"),
        Err(_) => eprintln!("coordinator listening"),
    }
    let shutdown = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    match axum::serve(listener, app).with_graceful_shutdown(shutdown).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("server error: {e}");
            ExitCode::FAILURE
        }
    }
}

async fn agent(args: AgentArgs, coordinator_url: &str) -> ExitCode {
    let clock = SimClock::wall(args.time_acceleration);
    let link = LinkParams {
        latency_ms: args.latency_ms,
        ..Default::default()
    };
    let config = AgentConfig {
        profile: DeviceProfile {
            display_name: args.name.clone().unwrap_or_else(|| args.device_id.clone()),
            device_id: args.device_id,
            capacity_mwh: args.capacity_mwh,
            microcell_id: args.microcell,
        },
        initial_level_percent: args.level,
        params: TransferParams {
            drain_power_w: args.power_w,
            efficiency: args.efficiency,
            sampling_period_s: args.sampling_period_s,
            provider_floor_percent: args.floor_percent,
            time_acceleration: Some(args.time_acceleration),
        },
        mode: match args.mode {
            ModeArg::Scripted => Mode::Scripted,
            ModeArg::Interactive => Mode::Interactive,
        },
    };
    let link_addr = SocketAddr::from(([127, 0, 0, 1], args.link_port));
    let listener = match TcpLinkListener::bind(link_addr, link, clock).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot listen for links on {link_addr}: {e}");
            return ExitCode::from(2);
        }
    };
    let link_local = listener.local_addr().ok();
    let control_listener = match tokio::net::TcpListener::bind(("127.0.0.1", args.control_port)).await {
        Ok(l) => l,
        Err(e) => {
            eprintln!("cannot listen for control on port {}: {e}", args.control_port);
            return ExitCode::from(2);
        }
    };
    let connector = Connector::Tcp {
        peers: args.peers.into_iter().collect::<HashMap<_, _>>(),
        params: link,
        clock,
    };
    let coord: Arc<dyn CoordinatorApi> = Arc::new(HttpCoordinator::new(coordinator_url));
    let handle = match spawn_agent(config, coord, connector, move |_| accept_tcp(listener), clock).await {
        Ok(h) => Arc::new(h),
        Err(e) => {
            eprintln!("agent failed to start: {e}");
            return ExitCode::FAILURE;
        }
    };
    eprintln!(
        "agent {} control on http://{} links on {}",
        handle.device_id(),
        control_listener.local_addr().map(|a| a.to_string()).unwrap_or_default(),
        link_local.map(|a| a.to_string()).unwrap_or_default(),
    );
    let server = tokio::spawn(control::serve(control_listener, Arc::clone(&handle)));
    let watcher = Arc::clone(&handle);
    tokio::select! {
        _ = tokio::signal::ctrl_c() => {}
        _ = async move {
            while !watcher.is_stopped() {
                tokio::time::sleep(std::time::Duration::from_millis(200)).await;
            }
        } => {}
    }
    server.abort();
    ExitCode::SUCCESS
}

async fn report(coordinator_url: &str, transaction_id: &str, bucket_s: f64, format: Format) -> ExitCode {
    let api = HttpCoordinator::new(coordinator_url);
    match api.loss_report(transaction_id, bucket_s).await {
        Ok(r) => {
            let text = match format {
                Format::Csv => report::to_csv(&r),
                Format::Text => report::to_text(transaction_id, &r),
            };
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{e}");
            match e.code {
                ErrorCode::Unavailable => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn run_scenario(script: &str, embedded: bool, coordinator_url: &str) -> ExitCode {
    let text = match std::fs::read_to_string(script) {
        Ok(t) => t,
        Err(e) => match scenario::bundled(script) {
            Some(t) => t.to_string(),
            None => {
                eprintln!("cannot read {script}: {e}");
                return ExitCode::from(2);
            }
        },
    };
    let scn = match Scenario::parse(&text) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
    };
    let outcome = if embedded {
        scenario::run_embedded(&scn)
    } else {
        let rt = tokio::runtime::Runtime::new().expect("tokio runtime");
        rt.block_on(scenario::run_live(&scn, coordinator_url))
    };
    let outcome = match outcome {
        Ok(o) => o,
        Err(e @ (ScenarioError::Parse(_) | ScenarioError::Invalid(_))) => {
            eprintln!("{e}");
            return ExitCode::from(2);
        }
        Err(e) => {
            eprintln!("scenario failed: {e}");
            return ExitCode::FAILURE;
        }
    };
    print!("{}", outcome.table());
    let misses = outcome.check(&scn.expectations);
    if misses.is_empty() {
        ExitCode::SUCCESS
    } else {
        for m in &misses {
            eprintln!("FAILED {m}");
        }
        ExitCode::FAILURE
    }
}
