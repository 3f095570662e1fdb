//! Robot-side cloud configuration document.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum InterfaceType {
    PublisherInterface,
    SubscriberInterface,
    ServiceClientInterface,
    ServiceProviderInterface,
}

impl InterfaceType {
    /// True if an interface of this type can sit on the other end of `other`.
    pub fn pairs_with(self, other: InterfaceType) -> bool {
        use InterfaceType::*;
        matches!(
            (self, other),
            (PublisherInterface, SubscriberInterface)
                | (SubscriberInterface, PublisherInterface)
                | (ServiceClientInterface, ServiceProviderInterface)
                | (ServiceProviderInterface, ServiceClientInterface)
        )
    }

    /// The end where data enters the connection.
    pub fn is_source(self) -> bool {
        matches!(
            self,
            InterfaceType::SubscriberInterface | InterfaceType::ServiceClientInterface
        )
    }
}

impl fmt::Display for InterfaceType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerSpec {
    #[serde(rename = "cTag")]
    pub c_tag: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    #[serde(rename = "cTag")]
    pub c_tag: String,
    #[serde(rename = "nTag")]
    pub n_tag: String,
    pub pkg: String,
    pub exe: String,
    #[serde(default)]
    pub args: String,
    #[serde(default)]
    pub namespace: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterfaceSpec {
    #[serde(rename = "eTag")]
    pub e_tag: String,
    #[serde(rename = "iTag")]
    pub i_tag: String,
    #[serde(rename = "iType")]
    pub i_type: InterfaceType,
    #[serde(rename = "iCls")]
    pub i_cls: String,
    pub addr: String,
}

impl InterfaceSpec {
    /// `eTag/iTag`, the form connections refer to.
    pub fn full_tag(&self) -> String {
        format!("{}/{}", self.e_tag, self.i_tag)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionSpec {
    #[serde(rename = "tagA")]
    pub tag_a: String,
    #[serde(rename = "tagB")]
    pub tag_b: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudConfig {
    #[serde(default)]
    pub url: String,
    #[serde(rename = "userID")]
    pub user_id: String,
    pub password: String,
    #[serde(rename = "robotID")]
    pub robot_id: String,
    #[serde(default)]
    pub containers: Vec<ContainerSpec>,
    #[serde(default)]
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub interfaces: Vec<InterfaceSpec>,
    #[serde(default)]
    pub connections: Vec<ConnectionSpec>,
    /// Keys this implementation does not model. Kept so they can be reported.
    #[serde(flatten)]
    pub extra: BTreeMap<String, serde_json::Value>,
}

/// Splits `endpoint/interface`. The interface tag may not contain '/'.
pub fn split_tag(tag: &str) -> Option<(&str, &str)> {
    let (e, i) = tag.rsplit_once('/')?;
    (!e.is_empty() && !i.is_empty()).then_some((e, i))
}

impl CloudConfig {
    /// Parses and validates. Errors name the offending field path and the
    /// line/column in the source text.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: CloudConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            Error::Config(format!(
                "field `{path}`: {inner} (line {}, column {})",
                inner.line(),
                inner.column()
            ))
        })?;
        for key in cfg.extra.keys() {
            tracing::warn!(robot = %cfg.robot_id, key, "ignoring unmodeled config key");
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn unmodeled_keys(&self) -> Vec<&str> {
        self.extra.keys().map(String::as_str).collect()
    }

    /// Checks that hold for the document alone: tag syntax, unique interface
    /// tags per endpoint, nodes in declared containers, and that every
    /// connection names interfaces declared here. Cross-document references
    /// are checked by the broker when the config is applied.
    pub fn validate(&self) -> Result<()> {
        let containers: BTreeSet<&str> = self.containers.iter().map(|c| c.c_tag.as_str()).collect();
        for c in &self.containers {
            if c.c_tag.is_empty() || c.c_tag.contains('/') {
                return Err(Error::Config(format!("bad container tag {:?}", c.c_tag)));
            }
        }
        for n in &self.nodes {
            if !containers.contains(n.c_tag.as_str()) {
                return Err(Error::Config(format!(
                    "node {} references undeclared container {}",
                    n.n_tag, n.c_tag
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for i in &self.interfaces {
            if i.i_tag.is_empty() || i.i_tag.contains('/') || i.e_tag.is_empty() {
                return Err(Error::Config(format!("bad interface tag {:?}", i.full_tag())));
            }
            if !seen.insert((i.e_tag.as_str(), i.i_tag.as_str())) {
                return Err(Error::NameConflict(format!(
                    "interface {} declared twice",
                    i.full_tag()
                )));
            }
        }
        for c in &self.connections {
            for tag in [&c.tag_a, &c.tag_b] {
                if split_tag(tag).is_none() {
                    return Err(Error::InvalidConnection {
                        tag: tag.clone(),
                        reason: "expected endpointTag/interfaceTag".into(),
                    });
                }
            }
        }
        Ok(())
    }

    pub fn interface(&self, full_tag: &str) -> Option<&InterfaceSpec> {
        let (e, i) = split_tag(full_tag)?;
        self.interfaces.iter().find(|s| s.e_tag == e && s.i_tag == i)
    }
}
