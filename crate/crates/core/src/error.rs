use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum Error {
    #[error("type mismatch on {topic}: advertised as {existing}, requested {requested}")]
    TypeMismatch {
        topic: String,
        existing: String,
        requested: String,
    },
    #[error("invalid topic name {0:?}: must begin with '/'")]
    InvalidTopic(String),
    #[error("link down between {from} and {to}")]
    LinkDown { from: String, to: String },
    #[error("master is down or unreachable")]
    MasterDown,
    #[error("name conflict: {0}")]
    NameConflict(String),
    #[error("unknown node {0}")]
    UnknownNode(String),
    #[error("unknown domain {0}")]
    UnknownDomain(String),
    #[error("topic {0} is not advertised locally")]
    NotAdvertised(String),
    #[error("invalid relay: source and destination are both {0}")]
    InvalidRelay(String),
    #[error("authentication failed for user {0}")]
    AuthFailed(String),
    #[error("robot {0} is already connected")]
    AlreadyConnected(String),
    #[error("robot {0} has not completed the handshake")]
    NotConnected(String),
    #[error("unknown behavior {pkg}/{exe}")]
    UnknownBehavior { pkg: String, exe: String },
    #[error("invalid connection {tag}: {reason}")]
    InvalidConnection { tag: String, reason: String },
    #[error("invalid link model: {0}")]
    InvalidLinkModel(String),
    #[error("cell {cell} out of range for a {width}x{height} grid")]
    InvalidCell { cell: i64, width: u32, height: u32 },
    #[error("no path from {from} to {to}")]
    NoPath { from: u32, to: u32 },
    #[error("cell {cell} is occupied by {robot}")]
    OccupiedCell { cell: u32, robot: String },
    #[error("invalid goal {cell} for {robot}: {reason}")]
    InvalidGoal {
        robot: String,
        cell: u32,
        reason: String,
    },
    #[error("unknown robot {0}")]
    UnknownRobot(String),
    #[error("path rejected by {robot}: starts at {start}, robot is at {current}")]
    PathRejected {
        robot: String,
        start: u32,
        current: u32,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
