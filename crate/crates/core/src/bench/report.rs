//! CSV, summary and plot files for benchmark records.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::experiments::{rtt_medians, RttSample};
use super::metrics::MetricsRecord;
use crate::error::{Error, Result};

pub const SUMMARY_SCHEMA: &str = include_str!("../../../../schemas/summary.schema.json");

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    scenario: &'a str,
    topology: &'a str,
    link: &'a str,
    topic: &'a str,
    bytes: u64,
    msgs: u64,
    rate_hz: f64,
    duration_s: f64,
}

#[derive(Debug, Serialize)]
struct RttRow<'a> {
    topology: &'a str,
    size_bytes: usize,
    trial: usize,
    rtt_s: f64,
}

/// Paths of the files written by [`emit_report`].
#[derive(Debug, Clone)]
pub struct ReportFiles {
    pub metrics_csv: PathBuf,
    pub rtt_csv: PathBuf,
    pub summary_json: PathBuf,
    pub plot_json: PathBuf,
    pub schema_json: PathBuf,
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

fn metrics_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in records {
        for l in &r.links {
            let rate_hz = if r.duration_s > 0.0 {
                l.msgs as f64 / r.duration_s
            } else {
                0.0
            };
            w.serialize(MetricsRow {
                scenario: &r.scenario,
                topology: r.topology.label(),
                link: &l.link,
                topic: &l.topic,
                bytes: l.bytes,
                msgs: l.msgs,
                rate_hz,
                duration_s: r.duration_s,
            })
            .map_err(csv_err)?;
        }
    }
    if records.iter().all(|r| r.links.is_empty()) {
        // header only
        w.write_record([
            "scenario", "topology", "link", "topic", "bytes", "msgs", "rate_hz", "duration_s",
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error().to_string()))
}

fn rtt_csv(samples: &[RttSample]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for s in samples {
        w.serialize(RttRow {
            topology: s.topology.label(),
            size_bytes: s.size_bytes,
            trial: s.trial,
            rtt_s: s.rtt_s,
        })
        .map_err(csv_err)?;
    }
    if samples.is_empty() {
        w.write_record(["topology", "size_bytes", "trial", "rtt_s"])
            .map_err(csv_err)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error().to_string()))
}

pub fn summary(records: &[MetricsRecord], rtt: &[RttSample]) -> serde_json::Value {
    let runs: Vec<_> = records
        .iter()
        .map(|r| {
            json!({
                "scenario": r.scenario,
                "topology": r.topology.label(),
                "duration_s": r.duration_s,
                "total_bytes": r.total_bytes,
                "total_msgs": r.total_msgs,
                "network_bytes": r.network_bytes,
                "hub": r.hub,
                "hub_bytes": r.hub_bytes,
                "cpu_proxy": r.cpu_proxy_total(),
            })
        })
        .collect();
    let medians: Vec<_> = rtt_medians(rtt)
        .into_iter()
        .map(|((k, size), m)| json!({"topology": k.label(), "size_bytes": size, "median_s": m}))
        .collect();
    json!({
        "runs": runs,
        "total_bytes": records.iter().map(|r| r.total_bytes).sum::<u64>(),
        "total_msgs": records.iter().map(|r| r.total_msgs).sum::<u64>(),
        "rtt_samples": rtt.len(),
        "rtt_medians": medians,
    })
}

/// One series per (scenario, topology) with bytes per link, and one per
/// topology with median RTT against payload size.
pub fn plot(records: &[MetricsRecord], rtt: &[RttSample]) -> serde_json::Value {
    let mut series = Vec::new();
    for r in records {
        series.push(json!({
            "name": format!("{} {}", r.scenario, r.topology.label()),
            "kind": "bar",
            "x": r.links.iter().map(|l| format!("{} {}", l.link, l.topic)).collect::<Vec<_>>(),
            "y": r.links.iter().map(|l| l.bytes).collect::<Vec<_>>(),
        }));
    }
    let medians = rtt_medians(rtt);
    let mut kinds: Vec<_> = medians.keys().map(|(k, _)| *k).collect();
    kinds.dedup();
    for k in kinds {
        let pts: Vec<_> = medians.iter().filter(|((kk, _), _)| *kk == k).collect();
        series.push(json!({
            "name": format!("rtt {}", k.label()),
            "kind": "line",
            "x": pts.iter().map(|((_, s), _)| *s).collect::<Vec<_>>(),
            "y": pts.iter().map(|(_, m)| **m).collect::<Vec<_>>(),
        }));
    }
    json!({ "series": series })
}

fn write_atomic(path: &Path, data: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, data)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes metrics.csv, rtt.csv, summary.json, plot.json and the summary
/// schema under `dir`. Nothing is written when there is nothing to report.
pub fn emit_report(dir: &Path, records: &[MetricsRecord], rtt: &[RttSample]) -> Result<ReportFiles> {
    if records.is_empty() && rtt.is_empty() {
        return Err(Error::Config("nothing to report: no records and no rtt samples".into()));
    }
    let m = metrics_csv(records)?;
    let r = rtt_csv(rtt)?;
    let s = serde_json::to_vec_pretty(&summary(records, rtt)).expect("summary serializes");
    let p = serde_json::to_vec_pretty(&plot(records, rtt)).expect("plot serializes");
    let schemas = dir.join("schemas");
    fs::create_dir_all(&schemas)?;
    let files = ReportFiles {
        metrics_csv: dir.join("metrics.csv"),
        rtt_csv: dir.join("rtt.csv"),
        summary_json: dir.join("summary.json"),
        plot_json: dir.join("plot.json"),
        schema_json: schemas.join("summary.schema.json"),
    };
    write_atomic(&files.metrics_csv, &m)?;
    write_atomic(&files.rtt_csv, &r)?;
    write_atomic(&files.summary_json, &s)?;
    write_atomic(&files.plot_json, &p)?;
    write_atomic(&files.schema_json, SUMMARY_SCHEMA.as_bytes())?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::metrics::LinkRow;
    use crate::topology::TopologyKind;
    use std::collections::BTreeMap;

    fn record() -> MetricsRecord {
        MetricsRecord {
            scenario: "s".into(),
            topology: TopologyKind::Mms,
            duration_s: 2.0,
            links: vec![
                LinkRow {
                    link: "a->b".into(),
                    loopback: false,
                    topic: "/x".into(),
                    bytes: 300,
                    msgs: 3,
                },
                LinkRow {
                    link: "a->a".into(),
                    loopback: true,
                    topic: "/x".into(),
                    bytes: 100,
                    msgs: 1,
                },
            ],
            topics: BTreeMap::new(),
            events: BTreeMap::new(),
            cpu_proxy: BTreeMap::new(),
            hub: None,
            hub_bytes: 0,
            network_bytes: 300,
            total_bytes: 400,
            total_msgs: 4,
        }
    }

    #[test]
    fn csv_columns_and_rates() {
        let text = String::from_utf8(metrics_csv(&[record()]).unwrap()).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next(),
            Some("scenario,topology,link,topic,bytes,msgs,rate_hz,duration_s")
        );
        assert_eq!(lines.next(), Some("s,MMS,a->b,/x,300,3,1.5,2.0"));
    }

    #[test]
    fn empty_inputs_write_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(dir.path(), &[], &[]).is_err());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn empty_rtt_keeps_header() {
        let text = String::from_utf8(rtt_csv(&[]).unwrap()).unwrap();
        assert_eq!(text, "topology,size_bytes,trial,rtt_s\n");
    }
}
