//! `fleet sim`, `fleet bench` and `fleet replay`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use fleet_core::bench::{
    emit_report, measure_rtt, run_experiment1, run_experiment2, Exp1Config, Exp2Config, MetricsRecord, RttConfig,
    RttSample,
};
use fleet_core::bench::experiments::rtt_medians;
use fleet_core::fleet::events::{parse_jsonl, replay, to_jsonl, EventKind};
use fleet_core::fleet::scenario::Scenario;
use fleet_core::fleet::Sim;
use fleet_core::TopologyKind;

use crate::console::ConsoleHub;
use crate::error::{CliError, CliResult};
use crate::settings::read_file;

pub struct SimOptions {
    /// File path or built-in name.
    pub scenario: String,
    pub seed: Option<u64>,
    pub mode: Option<TopologyKind>,
    pub out: Option<PathBuf>,
    pub console: Option<u16>,
    /// Wall seconds per simulated second when a console is attached.
    pub realtime: f64,
}

/// Appends new events to `events.jsonl` as the run goes.
struct LogSink {
    w: BufWriter<File>,
    written: usize,
}

impl LogSink {
    fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| CliError::Config(format!("{}: {e}", dir.display())))?;
        let p = dir.join("events.jsonl");
        let f = File::create(&p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        Ok(Self {
            w: BufWriter::new(f),
            written: 0,
        })
    }

    fn sync(&mut self, events: &[fleet_core::fleet::events::Event]) -> CliResult<()> {
        if self.written < events.len() {
            self.w
                .write_all(to_jsonl(&events[self.written..]).as_bytes())
                .and_then(|_| self.w.flush())
                .map_err(CliError::runtime)?;
            self.written = events.len();
        }
        Ok(())
    }
}

fn sim_loop(sim: &mut Sim, sink: &mut Option<LogSink>, hub: &mut Option<ConsoleHub>, realtime: f64) -> CliResult<()> {
    let pace = hub.as_ref().map(|_| Duration::from_secs_f64(sim.tick_secs() * realtime));
    let mut next = Instant::now();
    loop {
        let more = sim.step()?;
        if let Some(h) = hub {
            h.pump(sim);
        }
        if let Some(s) = sink {
            s.sync(sim.events())?;
        }
        if !more {
            return Ok(());
        }
        if let Some(p) = pace {
            next += p;
            thread::sleep(next.saturating_duration_since(Instant::now()));
        }
    }
}

/// Runs a scenario. Returns whether every goal was resolved.
pub fn cmd_sim(opts: SimOptions) -> CliResult<bool> {
    let mut scenario = Scenario::load(&opts.scenario)?;
    if let Some(s) = opts.seed {
        scenario.seed = s;
    }
    let kind = opts.mode.unwrap_or(scenario.topology);
    if !(opts.realtime > 0.0 && opts.realtime.is_finite()) {
        return Err(CliError::Config("--realtime must be positive".into()));
    }
    let mut sim = Sim::with_topology(&scenario, kind)?;
    let mut sink = opts.out.as_deref().map(LogSink::create).transpose()?;
    let mut hub = match opts.console {
        Some(p) => {
            let h = ConsoleHub::bind("127.0.0.1", p)?;
            println!("console listening on {}", h.url());
            sim.set_observed(true);
            Some(h)
        }
        None => None,
    };
    println!(
        "running scenario {} on {} (seed {}, {} s)",
        scenario.name,
        kind.label(),
        scenario.seed,
        scenario.duration
    );
    sim_loop(&mut sim, &mut sink, &mut hub, opts.realtime)?;
    let out = sim.finish();
    if let Some(s) = &mut sink {
        s.sync(&out.events)?;
    }
    for e in &out.events {
        match &e.kind {
            EventKind::GoalUnreachable { robot, goal, .. } => println!("{robot}: goal {goal} unreachable"),
            EventKind::Cancel { robot, map_version, .. } => println!("{robot}: cancel at map version {map_version}"),
            _ => {}
        }
    }
    for (robot, cell) in &out.final_cells {
        println!("{robot} final cell {cell}");
    }
    if let Some(dir) = &opts.out {
        emit_report(dir, std::slice::from_ref(&out.record), &[])?;
        println!("wrote {}", dir.display());
    }
    println!("all goals resolved: {}", out.all_resolved);
    Ok(out.all_resolved)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Experiment {
    Exp1,
    Exp2,
    Rtt,
}

pub struct BenchOptions {
    pub experiment: Experiment,
    pub topologies: Vec<TopologyKind>,
    pub sizes: Option<Vec<usize>>,
    pub duration: Option<f64>,
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    /// exp1: publish at the per-topology client rates instead of the defaults.
    pub observed_rates: bool,
    pub out: PathBuf,
}

/// `all` or a comma list of single|multi|cloud (or SMS|MMS|CRS).
pub fn parse_topologies(s: &str) -> Result<Vec<TopologyKind>, String> {
    if s.eq_ignore_ascii_case("all") {
        return Ok(TopologyKind::ALL.to_vec());
    }
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim) {
        let k = match part.to_ascii_lowercase().as_str() {
            "single" | "sms" => TopologyKind::Sms,
            "multi" | "mms" => TopologyKind::Mms,
            "cloud" | "crs" => TopologyKind::Crs,
            _ => return Err(format!("unknown topology {part:?} (expected all, single, multi or cloud)")),
        };
        if !out.contains(&k) {
            out.push(k);
        }
    }
    Ok(out)
}

/// `1k,10k,100k,1m`: decimal multipliers.
pub fn parse_sizes(s: &str) -> Result<Vec<usize>, String> {
    s.split(',')
        .map(str::trim)
        .map(|p| {
            let lower = p.to_ascii_lowercase();
            let (num, mul) = match lower.chars().last() {
                Some('k') => (&lower[..lower.len() - 1], 1_000),
                Some('m') => (&lower[..lower.len() - 1], 1_000_000),
                _ => (lower.as_str(), 1),
            };
            let n: usize = num.parse().map_err(|_| format!("bad size {p:?}"))?;
            match n.checked_mul(mul) {
                Some(v) if v > 0 => Ok(v),
                _ => Err(format!("bad size {p:?}")),
            }
        })
        .collect()
}

fn print_record(r: &MetricsRecord) {
    println!(
        "{} {}: network {} B, hub {} B, total {} B in {} msgs over {:.1} s",
        r.scenario,
        r.topology.label(),
        r.network_bytes,
        r.hub_bytes,
        r.total_bytes,
        r.total_msgs,
        r.duration_s
    );
}

fn print_ordering(records: &[MetricsRecord]) {
    if records.len() < 2 {
        return;
    }
    let mut by: Vec<&MetricsRecord> = records.iter().collect();
    by.sort_by_key(|r| r.network_bytes);
    let order: Vec<String> = by
        .iter()
        .map(|r| format!("{} ({} B)", r.topology.label(), r.network_bytes))
        .collect();
    println!("ordering by network bytes: {}", order.join(" < "));
}

pub fn cmd_bench(opts: BenchOptions) -> CliResult<()> {
    let mut records = Vec::new();
    let mut rtt: Vec<RttSample> = Vec::new();
    match opts.experiment {
        Experiment::Exp1 => {
            for &k in &opts.topologies {
                let mut cfg = if opts.observed_rates {
                    Exp1Config::observed(k)
                } else {
                    Exp1Config::default()
                };
                if let Some(d) = opts.duration {
                    cfg.duration = d;
                }
                if let Some(s) = opts.seed {
                    cfg.seed = s;
                }
                let r = run_experiment1(k, &cfg)?;
                print_record(&r);
                records.push(r);
            }
            print_ordering(&records);
        }
        Experiment::Exp2 => {
            let mut cfg = Exp2Config::default();
            if let Some(d) = opts.duration {
                cfg.duration = d;
            }
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            for &k in &opts.topologies {
                let (r, received) = run_experiment2(k, &cfg)?;
                print_record(&r);
                println!("{}: {received} images received", k.label());
                records.push(r);
            }
            print_ordering(&records);
        }
        Experiment::Rtt => {
            let mut cfg = RttConfig::default();
            if let Some(s) = &opts.sizes {
                cfg.sizes = s.clone();
            }
            if let Some(t) = opts.trials {
                cfg.trials = t;
            }
            if let Some(s) = opts.seed {
                cfg.seed = s;
            }
            for &k in &opts.topologies {
                rtt.extend(measure_rtt(k, &cfg)?);
            }
            for ((k, size), m) in rtt_medians(&rtt) {
                println!("{} {size} B: median rtt {:.3} ms", k.label(), m * 1e3);
            }
        }
    }
    let files = emit_report(&opts.out, &records, &rtt)?;
    println!("wrote {}", files.metrics_csv.display());
    println!("wrote {}", files.rtt_csv.display());
    println!("wrote {}", files.summary_json.display());
    Ok(())
}

/// Rebuilds final cells from a run log. Returns whether they match the
/// cells the run recorded at its end.
pub fn cmd_replay(log: &Path) -> CliResult<bool> {
    let events = parse_jsonl(&read_file(log)?)?;
    let r = replay(&events)?;
    for (robot, cell) in &r.final_cells {
        println!("{robot} final cell {cell}");
    }
    match &r.recorded {
        None => println!("log has no run_end record"),
        Some(_) if r.matches() => println!("replay matches the recorded final cells"),
        Some(rec) => println!("replay differs from the recorded final cells {rec:?}"),
    }
    Ok(r.matches())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_use_decimal_units() {
        assert_eq!(parse_sizes("1k,10k,100k,1m").unwrap(), [1_000, 10_000, 100_000, 1_000_000]);
        assert_eq!(parse_sizes("512").unwrap(), [512]);
        assert!(parse_sizes("1g").is_err());
        assert!(parse_sizes("0").is_err());
        assert!(parse_sizes("").is_err());
    }

    #[test]
    fn topology_names() {
        assert_eq!(parse_topologies("all").unwrap().len(), 3);
        assert_eq!(parse_topologies("cloud,SMS").unwrap(), [TopologyKind::Crs, TopologyKind::Sms]);
        assert!(parse_topologies("mesh").is_err());
    }
}
