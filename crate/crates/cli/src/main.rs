use std::fs;
use std::net::{SocketAddr, SocketAddrV4, ToSocketAddrs};
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bdmesh::experiment::{run_birthday_experiment, BirthdayTrialConfig, MIN_TRIALS_FOR_SIGMA};
use bdmesh::probability::PortSpace;
use bdmesh::rendezvous::PunchParams;
use bdmesh::scenario::{ScenarioError, ScenarioFile};
use bdmesh_cli::analyze::{curve_csv, parse_list, simulate_csv, table_csv};
use bdmesh_cli::exit::{CliResult, Context, Exit, Failure};
use bdmesh_cli::service::{run_coordinator, run_node, CoordOptions, NodeOptions};
use clap::{Args, Parser, Subcommand};

/// Birthday-paradox NAT traversal analysis, simulation and mesh services.
#[derive(Parser)]
#[command(name = "bdmesh", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form success probabilities.
    Analyze {
        #[command(subcommand)]
        what: Analyze,
    },
    /// Monte Carlo runs on the simulator.
    Simulate {
        #[command(subcommand)]
        what: Simulate,
    },
    /// Realize a JSON scenario and print the report.
    Scenario {
        file: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the rendezvous coordinator.
    Coord {
        /// TCP control port and first UDP observer.
        #[arg(long, default_value = "0.0.0.0:3478")]
        listen: String,
        /// Second UDP observer.
        #[arg(long, default_value = "0.0.0.0:3479")]
        listen2: String,
        #[command(flatten)]
        punch: PunchArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a node agent.
    Node(NodeArgs),
}

#[derive(Args)]
struct SpaceArgs {
    /// Lowest port of the NAT allocation space.
    #[arg(long, default_value_t = PortSpace::DEFAULT_LO)]
    port_lo: u16,
    #[arg(long, default_value_t = PortSpace::DEFAULT_HI)]
    port_hi: u16,
}

impl SpaceArgs {
    fn space(&self) -> CliResult<PortSpace> {
        PortSpace::new(self.port_lo, self.port_hi).exit_with(Exit::InvalidInput)
    }
}

#[derive(Subcommand)]
enum Analyze {
    /// Probability per probing duration.
    Table {
        #[arg(long, default_value_t = 256)]
        open_ports: u32,
        #[arg(long, default_value_t = 100.0)]
        rate: f64,
        /// Comma-separated durations in seconds; may be empty.
        #[arg(long, default_value = "5,10,15,20", allow_hyphen_values = true)]
        durations: String,
        #[command(flatten)]
        space: SpaceArgs,
    },
    /// Probability against probe count for several open-port counts.
    Curve {
        /// Comma-separated open-port counts.
        #[arg(long, default_value = "128,256,512")]
        open_ports: String,
        #[arg(long, default_value_t = 3000)]
        max_probes: u32,
        #[arg(long, default_value_t = 50)]
        step: u32,
        #[command(flatten)]
        space: SpaceArgs,
    },
}

#[derive(Args, Clone, Copy)]
struct PunchArgs {
    #[arg(long, default_value_t = 256)]
    open_ports: u32,
    #[arg(long, default_value_t = 100)]
    rate: u32,
    #[arg(long, default_value_t = 20)]
    max_seconds: u32,
}

impl PunchArgs {
    fn params(self) -> CliResult<PunchParams> {
        let p = PunchParams {
            open_ports: self.open_ports,
            rate: self.rate,
            max_seconds: self.max_seconds,
        };
        p.to_config(0).validate().exit_with(Exit::InvalidInput)?;
        Ok(p)
    }
}

#[derive(Subcommand)]
enum Simulate {
    /// Seeded birthday punches, easy prober against hard opener.
    Traversal {
        #[arg(long, default_value_t = 256)]
        open_ports: u32,
        #[arg(long, default_value_t = 100)]
        rate: u32,
        #[arg(long, default_value_t = 10)]
        max_seconds: u32,
        #[arg(long, default_value_t = 1000)]
        trials: u64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Loss probability on the prober's access link.
        #[arg(long, default_value_t = 0.0)]
        loss: f64,
        /// Worker threads; results do not depend on it.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

#[derive(Args)]
struct NodeArgs {
    /// Coordinator control address (TCP) and first observer (UDP).
    #[arg(long)]
    coord: String,
    /// Second observer; defaults to the coordinator port plus one.
    #[arg(long)]
    coord2: Option<String>,
    #[arg(long)]
    id: String,
    /// Base64 Ed25519 secret; created if missing.
    #[arg(long)]
    key: PathBuf,
    /// Node to connect to.
    #[arg(long)]
    peer: Option<String>,
    /// Text to echo through the peer once the link is up.
    #[arg(long, requires = "peer")]
    echo: Option<String>,
    /// Stay up for this many seconds.
    #[arg(long)]
    serve_seconds: Option<u64>,
    /// Seconds to wait for the link to the peer.
    #[arg(long, default_value_t = 30)]
    timeout: u64,
    /// Do not punch; use the coordinator relay.
    #[arg(long)]
    force_relay: bool,
    /// Print a JSON summary on exit.
    #[arg(long)]
    json: bool,
}

fn resolve(s: &str) -> CliResult<SocketAddrV4> {
    let addrs = s
        .to_socket_addrs()
        .map_err(|e| Failure::new(Exit::InvalidInput, anyhow::anyhow!("{s}: {e}")))?;
    addrs
        .filter_map(|a| match a {
            SocketAddr::V4(v4) => Some(v4),
            SocketAddr::V6(_) => None,
        })
        .next()
        .ok_or_else(|| Failure::new(Exit::InvalidInput, anyhow::anyhow!("{s}: no IPv4 address")))
}

fn shutdown_flag() -> Arc<AtomicBool> {
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    if let Err(e) = ctrlc::set_handler(move || f.store(true, Ordering::Relaxed)) {
        log::warn!("no Ctrl-C handler: {e}");
    }
    flag
}

fn init_logging() {
    const LEVELS: [&str; 5] = ["error", "warn", "info", "debug", "trace"];
    let level = match std::env::var("BDMESH_LOG") {
        Ok(v) if LEVELS.contains(&v.to_ascii_lowercase().as_str()) => v.to_ascii_lowercase(),
        Ok(v) => {
            eprintln!("BDMESH_LOG={v:?} is not one of {}; using warn", LEVELS.join(", "));
            "warn".into()
        }
        Err(_) => "warn".into(),
    };
    env_logger::Builder::new().parse_filters(&level).format_timestamp_millis().init();
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Analyze { what } => analyze(what),
        Command::Simulate { what } => simulate(what),
        Command::Scenario { file, out } => scenario(file, out),
        Command::Coord {
            listen,
            listen2,
            punch,
            seed,
        } => {
            let opts = CoordOptions {
                listen: resolve(&listen)?,
                listen2: resolve(&listen2)?,
                punch: punch.params()?,
                seed,
            };
            run_coordinator(opts, shutdown_flag()).map_err(|e| Failure::new(e.exit(), e))
        }
        Command::Node(args) => node(args),
    }
}

fn analyze(what: Analyze) -> CliResult<()> {
    match what {
        Analyze::Table {
            open_ports,
            rate,
            durations,
            space,
        } => {
            let durations: Vec<f64> = parse_list(&durations)
                .map_err(|e| Failure::new(Exit::InvalidInput, anyhow::anyhow!("--durations {e}")))?;
            let csv = table_csv(space.space()?, open_ports, rate, &durations).exit_with(Exit::InvalidInput)?;
            print!("{csv}");
        }
        Analyze::Curve {
            open_ports,
            max_probes,
            step,
            space,
        } => {
            let bs: Vec<u32> = parse_list(&open_ports)
                .map_err(|e| Failure::new(Exit::InvalidInput, anyhow::anyhow!("--open-ports {e}")))?;
            let (csv, summary) = curve_csv(space.space()?, &bs, max_probes, step).exit_with(Exit::InvalidInput)?;
            print!("{csv}");
            for line in summary {
                eprintln!("{line}");
            }
        }
    }
    Ok(())
}

fn simulate(what: Simulate) -> CliResult<()> {
    let Simulate::Traversal {
        open_ports,
        rate,
        max_seconds,
        trials,
        seed,
        loss,
        jobs,
    } = what;
    if trials == 0 {
        return Err(Failure::new(Exit::InvalidInput, anyhow::anyhow!("--trials must be >= 1")));
    }
    if !(0.0..=1.0).contains(&loss) {
        return Err(Failure::new(Exit::InvalidInput, anyhow::anyhow!("--loss must lie in [0, 1]")));
    }
    let punch = PunchArgs {
        open_ports,
        rate,
        max_seconds,
    }
    .params()?;
    let cfg = BirthdayTrialConfig {
        punch: punch.to_config(seed),
        loss,
        ..BirthdayTrialConfig::default()
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .exit_with(Exit::InvalidInput)?;
    let summary = pool
        .install(|| run_birthday_experiment(&cfg, trials, seed))
        .exit_with(Exit::SimFailure)?;
    print!("{}", simulate_csv(&summary));
    match summary.within_3_sigma {
        None => {
            eprintln!("note: 3-sigma check skipped below {MIN_TRIALS_FOR_SIGMA} trials");
            Ok(())
        }
        Some(true) => Ok(()),
        Some(false) => Err(Failure::new(
            Exit::SimFailure,
            anyhow::anyhow!(
                "empirical rate {:.7} is {:.1} sigma from the analytic {:.7}",
                summary.empirical_rate,
                summary.delta.abs() / summary.sigma,
                summary.analytic_rate
            ),
        )),
    }
}

fn scenario(file: PathBuf, out: Option<PathBuf>) -> CliResult<()> {
    let text = fs::read_to_string(&file)
        .map_err(|e| Failure::new(Exit::InvalidInput, anyhow::anyhow!("{}: {e}", file.display())))?;
    let classify = |e: ScenarioError| {
        let exit = match e {
            ScenarioError::Invalid { .. } => Exit::InvalidInput,
            ScenarioError::Unsupported(_) => Exit::UnsupportedScheme,
            ScenarioError::Sim(_) => Exit::SimFailure,
        };
        Failure::new(exit, e)
    };
    let sc = ScenarioFile::from_json(&text).map_err(classify)?;
    let report = sc.run().map_err(classify)?;
    for w in &report.realization.warnings {
        eprintln!("warning: {w}");
    }
    let json = report.to_json() + "\n";
    match out {
        Some(path) => fs::write(&path, json)
            .map_err(|e| Failure::new(Exit::InvalidInput, anyhow::anyhow!("{}: {e}", path.display())))?,
        None => print!("{json}"),
    }
    if report.connected() {
        Ok(())
    } else {
        Err(Failure::new(
            Exit::SimFailure,
            anyhow::anyhow!("overlay not connected; dead links: {}", report.realization.dead_links.join(", ")),
        ))
    }
}

fn node(args: NodeArgs) -> CliResult<()> {
    let coord = resolve(&args.coord)?;
    let mut opts = NodeOptions::new(coord, args.id, args.key);
    if let Some(c2) = &args.coord2 {
        opts.coord2 = resolve(c2)?;
    }
    opts.peer = args.peer;
    opts.echo = args.echo;
    opts.serve_for = args.serve_seconds.map(Duration::from_secs);
    opts.timeout = Duration::from_secs(args.timeout);
    opts.force_relay = args.force_relay;
    let summary = run_node(&opts, shutdown_flag()).map_err(|e| Failure::new(e.exit(), e))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    }
    Ok(())
}

fn main() -> ExitCode {
    init_logging();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit.code())
        }
    }
}
