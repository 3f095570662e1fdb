//! The `fleet` command line: sockets, config and subcommands over `fleet_core`.

pub mod args;
pub mod commands;
pub mod console;
pub mod error;
pub mod robot;
pub mod server;
pub mod settings;
pub mod transport;

use std::time::Duration;

pub use error::{CliError, CliResult};

use args::{Cli, Cmd, ExperimentArg};
use commands::{BenchOptions, Experiment, SimOptions};
use robot::RobotOptions;
use server::ServerOptions;
use settings::ServerConfig;

fn seconds(flag: &str, v: Option<f64>) -> CliResult<Option<f64>> {
    match v {
        Some(s) if !(s > 0.0 && s.is_finite()) => Err(CliError::Config(format!("{flag} must be positive"))),
        v => Ok(v),
    }
}

/// Runs one subcommand and returns the process exit code.
pub fn run(cli: Cli) -> CliResult<u8> {
    match cli.command {
        Cmd::Server(a) => {
            let mut config = ServerConfig::load(a.config.as_deref())?;
            if let Some(s) = a.seed {
                config.seed = s;
            }
            let limit = seconds("--duration", a.duration)?.map(Duration::from_secs_f64);
            server::cmd_server(
                ServerOptions {
                    mode: a.mode.into(),
                    config,
                    console: a.console,
                    out: a.out,
                },
                limit,
            )?;
            Ok(0)
        }
        Cmd::Robot(a) => {
            robot::cmd_robot(RobotOptions {
                name: a.name,
                mode: a.mode.into(),
                start: a.start,
                config: a.config,
                server: a.server,
                seed: a.seed,
                duration: seconds("--duration", a.duration)?,
                retries: a.retries,
                tick: a.tick,
            })?;
            Ok(0)
        }
        Cmd::Sim(a) => {
            let resolved = commands::cmd_sim(SimOptions {
                scenario: a.scenario,
                seed: a.seed,
                mode: a.mode.map(Into::into),
                out: a.out,
                console: a.console,
                realtime: a.realtime,
            })?;
            if resolved {
                Ok(0)
            } else {
                eprintln!("error: not every goal was resolved");
                Ok(3)
            }
        }
        Cmd::Bench(a) => {
            commands::cmd_bench(BenchOptions {
                experiment: match a.experiment {
                    ExperimentArg::Exp1 => Experiment::Exp1,
                    ExperimentArg::Exp2 => Experiment::Exp2,
                    ExperimentArg::Rtt => Experiment::Rtt,
                },
                topologies: a.topology,
                sizes: a.sizes,
                duration: seconds("--duration", a.duration)?,
                trials: a.trials,
                seed: a.seed,
                observed_rates: a.observed_rates,
                out: a.out,
            })?;
            Ok(0)
        }
        Cmd::Replay(a) => {
            if commands::cmd_replay(&a.log)? {
                Ok(0)
            } else {
                Ok(3)
            }
        }
    }
}
