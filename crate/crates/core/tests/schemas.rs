use std::path::Path;

use fleet_core::bench::{emit_report, run_experiment1, Exp1Config, RttSample};
use fleet_core::fleet::scenario::builtin;
use fleet_core::fleet::wiring::robot_cloud_config;
use fleet_core::TopologyKind;
use serde_json::Value;

fn repo(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn schema(name: &str) -> jsonschema::Validator {
    let text = std::fs::read_to_string(repo(&format!("schemas/{name}"))).unwrap();
    jsonschema::validator_for(&serde_json::from_str(&text).unwrap()).unwrap()
}

fn errors(v: &jsonschema::Validator, doc: &Value) -> Vec<String> {
    v.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path())).collect()
}

#[test]
fn shipped_scenarios_validate() {
    let v = schema("scenario.schema.json");
    for name in ["fig6", "surprise", "unreachable"] {
        let doc: Value = serde_json::from_str(builtin(name).unwrap()).unwrap();
        assert_eq!(errors(&v, &doc), Vec::<String>::new(), "{name}");
    }
    let bad: Value = serde_json::json!({"name": "x", "seed": 1, "duration": 1, "robots": [], "bogus": 1});
    assert!(!v.is_valid(&bad));
}

#[test]
fn cloud_configs_validate() {
    let v = schema("cloud_config.schema.json");
    let text = std::fs::read_to_string(repo("configs/robot1.config")).unwrap();
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(errors(&v, &doc), Vec::<String>::new());
    let generated = serde_json::to_value(robot_cloud_config("Robot2")).unwrap();
    assert_eq!(errors(&v, &generated), Vec::<String>::new());
}

fn short_exp1() -> Exp1Config {
    Exp1Config {
        duration: 3.0,
        ..Exp1Config::default()
    }
}

#[test]
fn report_matches_its_schema_and_csv_sums() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<_> = TopologyKind::ALL
        .iter()
        .map(|&k| run_experiment1(k, &short_exp1()).unwrap())
        .collect();
    let rtt = vec![RttSample {
        topology: TopologyKind::Sms,
        size_bytes: 1000,
        trial: 0,
        rtt_s: 0.01,
    }];
    let files = emit_report(dir.path(), &records, &rtt).unwrap();
    let summary: Value = serde_json::from_slice(&std::fs::read(&files.summary_json).unwrap()).unwrap();
    let shipped = schema("summary.schema.json");
    assert_eq!(errors(&shipped, &summary), Vec::<String>::new());
    let emitted: Value = serde_json::from_slice(&std::fs::read(&files.schema_json).unwrap()).unwrap();
    assert!(jsonschema::is_valid(&emitted, &summary));

    // recompute totals from the CSV alone
    let mut rdr = csv::Reader::from_path(&files.metrics_csv).unwrap();
    let headers = rdr.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        ["scenario", "topology", "link", "topic", "bytes", "msgs", "rate_hz", "duration_s"]
    );
    let (mut bytes, mut msgs) = (0u64, 0u64);
    for row in rdr.records() {
        let row = row.unwrap();
        bytes += row[4].parse::<u64>().unwrap();
        msgs += row[5].parse::<u64>().unwrap();
    }
    assert_eq!(summary["total_bytes"].as_u64(), Some(bytes));
    assert_eq!(summary["total_msgs"].as_u64(), Some(msgs));

    let plot: Value = serde_json::from_slice(&std::fs::read(&files.plot_json).unwrap()).unwrap();
    for s in plot["series"].as_array().unwrap() {
        assert_eq!(s["x"].as_array().unwrap().len(), s["y"].as_array().unwrap().len());
    }
}

#[test]
fn same_seed_same_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let r = run_experiment1(TopologyKind::Mms, &short_exp1()).unwrap();
        emit_report(d.path(), &[r], &[]).unwrap();
    }
    for f in ["metrics.csv", "rtt.csv", "summary.json", "plot.json"] {
        assert_eq!(
            std::fs::read(a.path().join(f)).unwrap(),
            std::fs::read(b.path().join(f)).unwrap(),
            "{f}"
        );
    }
}
