//! Built-in behaviors that containers can run, keyed by (pkg, exe).

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BehaviorKind {
    /// Subscribes goal, cancel and map topics; emits motion commands.
    MoveClient,
    /// Republishes every input envelope on an output topic.
    Echo,
}

const REGISTRY: &[(&str, &str, BehaviorKind)] = &[
    ("move_client", "move_client", BehaviorKind::MoveClient),
    ("move_client", "move_client_pthread", BehaviorKind::MoveClient),
    ("echo", "echo", BehaviorKind::Echo),
];

pub fn lookup_behavior(pkg: &str, exe: &str) -> Result<BehaviorKind> {
    REGISTRY
        .iter()
        .find(|(p, e, _)| *p == pkg && *e == exe)
        .map(|(_, _, k)| *k)
        .ok_or_else(|| Error::UnknownBehavior {
            pkg: pkg.to_string(),
            exe: exe.to_string(),
        })
}

pub fn known_behaviors() -> impl Iterator<Item = (&'static str, &'static str)> {
    REGISTRY.iter().map(|(p, e, _)| (*p, *e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoveClientArgs {
    pub goal: String,
    pub cancel: String,
    pub map: String,
}

/// Comma-separated: goal topic, cancel topic, map topic. Whitespace and line
/// breaks around entries are ignored.
pub fn parse_move_client_args(args: &str) -> Result<MoveClientArgs> {
    let parts: Vec<&str> = args
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect();
    match parts.as_slice() {
        [goal, cancel, map] => Ok(MoveClientArgs {
            goal: goal.to_string(),
            cancel: cancel.to_string(),
            map: map.to_string(),
        }),
        _ => Err(Error::Config(format!(
            "move_client expects \"goal, cancel, map\", got {args:?}"
        ))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoArgs {
    pub input: String,
    pub output: String,
}

pub fn parse_echo_args(args: &str) -> Result<EchoArgs> {
    let parts: Vec<&str> = args.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [i, o] if !i.is_empty() && !o.is_empty() && i != o => Ok(EchoArgs {
            input: i.to_string(),
            output: o.to_string(),
        }),
        _ => Err(Error::Config(format!(
            "echo expects \"input, output\" with distinct topics, got {args:?}"
        ))),
    }
}
