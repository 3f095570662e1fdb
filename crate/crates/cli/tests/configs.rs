//! Shipped server configs parse and match their schema.

use std::path::Path;

use fleet_cli::settings::{parse_json, ServerConfig};
use serde_json::Value;

fn repo(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

#[test]
fn shipped_server_configs_validate_and_load() {
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(repo("schemas/server_config.schema.json")).unwrap()).unwrap();
    let v = jsonschema::validator_for(&schema).unwrap();
    for name in ["server.single.json", "server.multi.json", "server.cloud.json"] {
        let text = std::fs::read_to_string(repo(&format!("configs/{name}"))).unwrap();
        let doc: Value = serde_json::from_str(&text).unwrap();
        let errs: Vec<String> = v.iter_errors(&doc).map(|e| e.to_string()).collect();
        assert!(errs.is_empty(), "{name}: {errs:?}");
        let cfg: ServerConfig = parse_json(&text, name).unwrap();
        cfg.validate().unwrap();
    }
    let defaults = serde_json::json!({});
    assert!(v.is_valid(&defaults));
    assert!(!v.is_valid(&serde_json::json!({"ports": {"master": 70000}})));
    assert!(!v.is_valid(&serde_json::json!({"domains": ["a/b"]})));
}

#[test]
fn cloud_example_accepts_the_listing_account() {
    let text = std::fs::read_to_string(repo("configs/server.cloud.json")).unwrap();
    let cfg: ServerConfig = parse_json(&text, "cloud").unwrap();
    assert!(cfg.accounts.iter().any(|a| a.user_id == "testUser" && a.password == "testUser"));
}
