use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fleet_core::TopologyKind;

use crate::commands::{parse_sizes, parse_topologies};

#[derive(Debug, Parser)]
#[command(name = "fleet", version, about = "Robot fleet middleware: server, robots, simulator and benchmarks")]
pub struct Cli {
    /// More log output on stderr (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Cmd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Single,
    Multi,
    Cloud,
}

impl From<Mode> for TopologyKind {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Single => TopologyKind::Sms,
            Mode::Multi => TopologyKind::Mms,
            Mode::Cloud => TopologyKind::Crs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExperimentArg {
    Exp1,
    Exp2,
    Rtt,
}

#[derive(Debug, Subcommand)]
pub enum Cmd {
    /// Run a topology stack and the planner, reachable over sockets.
    Server(ServerArgs),
    /// Run one robot against a server.
    Robot(RobotArgs),
    /// Run a scenario in process on the virtual clock.
    Sim(SimArgs),
    /// Run a traffic experiment and write report files.
    Bench(BenchArgs),
    /// Rebuild final robot cells from a run log.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct ServerArgs {
    #[arg(long, value_enum, default_value = "single")]
    pub mode: Mode,
    /// Server config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Serve the operator console on this port.
    #[arg(long)]
    pub console: Option<u16>,
    /// Write the event log here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Stop after this many seconds.
    #[arg(long)]
    pub duration: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RobotArgs {
    /// Robot name; in cloud mode defaults to the config's robotID.
    #[arg(long)]
    pub name: Option<String>,
    #[arg(long, value_enum, default_value = "single")]
    pub mode: Mode,
    /// Cloud config file (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub start: u32,
    /// Master `host:port` or handshake URL.
    #[arg(long)]
    pub server: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub duration: Option<f64>,
    /// Connection attempts after the first.
    #[arg(long, default_value_t = 5)]
    pub retries: u32,
    /// Control period in seconds.
    #[arg(long, default_value_t = 0.05)]
    pub tick: f64,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// Scenario file or built-in name.
    #[arg(default_value = "fig6")]
    pub scenario: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the scenario's topology.
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    /// Directory for events.jsonl and report files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Serve the operator console on this port and pace the run.
    #[arg(long)]
    pub console: Option<u16>,
    /// Wall seconds per simulated second while a console is attached.
    #[arg(long, default_value_t = 1.0)]
    pub realtime: f64,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(value_enum)]
    pub experiment: ExperimentArg,
    /// all, or a comma list of single, multi, cloud.
    #[arg(long, default_value = "all", value_parser = parse_topologies)]
    pub topology: std::vec::Vec<TopologyKind>,
    /// Payload sizes for rtt, e.g. 1k,10k,100k,1m.
    #[arg(long, value_parser = parse_sizes)]
    pub sizes: Option<std::vec::Vec<usize>>,
    /// Measured seconds for exp1 and exp2.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Trials per size for rtt.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// exp1: every client stream at the rate observed for its topology.
    #[arg(long)]
    pub observed_rates: bool,
    #[arg(long, default_value = "bench-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// events.jsonl from `fleet sim --out` or `fleet server --out`.
    pub log: PathBuf,
}
