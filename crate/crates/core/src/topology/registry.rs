use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::messaging::{msg_types, NodeId};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct TopicEntry {
    pub publishers: BTreeSet<NodeId>,
    pub subscribers: BTreeSet<NodeId>,
    pub msg_type: String,
}

/// Name-resolution authority for one graph: which nodes exist and which of
/// them publish or subscribe each topic. Once killed, it rejects every
/// mutation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MasterRegistry {
    topics: BTreeMap<String, TopicEntry>,
    nodes: BTreeMap<String, NodeId>,
    alive: bool,
}

impl Default for MasterRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl MasterRegistry {
    pub fn new() -> Self {
        Self {
            topics: BTreeMap::new(),
            nodes: BTreeMap::new(),
            alive: true,
        }
    }

    pub fn is_alive(&self) -> bool {
        self.alive
    }

    /// Returns false if it was already dead.
    pub fn kill(&mut self) -> bool {
        std::mem::replace(&mut self.alive, false)
    }

    fn ensure_alive(&self) -> Result<()> {
        if self.alive {
            Ok(())
        } else {
            Err(Error::MasterDown)
        }
    }

    /// Node names are unique per graph (namespace + name); registering the
    /// same node twice is a no-op.
    pub fn register(&mut self, node: &NodeId) -> Result<()> {
        self.ensure_alive()?;
        let graph = node.graph_name();
        match self.nodes.get(&graph) {
            Some(existing) if existing == node => Ok(()),
            Some(existing) => Err(Error::NameConflict(format!(
                "{graph} is already registered by {existing}"
            ))),
            None => {
                self.nodes.insert(graph, node.clone());
                Ok(())
            }
        }
    }

    pub fn is_registered(&self, node: &NodeId) -> bool {
        self.nodes.get(&node.graph_name()) == Some(node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.nodes.values()
    }

    fn entry_for(&mut self, node: &NodeId, topic: &str, msg_type: &str) -> Result<&mut TopicEntry> {
        self.ensure_alive()?;
        if !self.is_registered(node) {
            return Err(Error::UnknownNode(node.fqn()));
        }
        let entry = self.topics.entry(topic.to_string()).or_insert_with(|| TopicEntry {
            msg_type: msg_type.to_string(),
            ..TopicEntry::default()
        });
        if entry.msg_type == msg_types::ANY {
            entry.msg_type = msg_type.to_string();
        } else if msg_type != msg_types::ANY && entry.msg_type != msg_type {
            return Err(Error::TypeMismatch {
                topic: topic.to_string(),
                existing: entry.msg_type.clone(),
                requested: msg_type.to_string(),
            });
        }
        Ok(entry)
    }

    pub fn add_publisher(&mut self, node: &NodeId, topic: &str, msg_type: &str) -> Result<()> {
        self.entry_for(node, topic, msg_type)?
            .publishers
            .insert(node.clone());
        Ok(())
    }

    pub fn add_subscriber(&mut self, node: &NodeId, topic: &str, msg_type: &str) -> Result<()> {
        self.entry_for(node, topic, msg_type)?
            .subscribers
            .insert(node.clone());
        Ok(())
    }

    pub fn remove_node(&mut self, node: &NodeId) -> Result<()> {
        self.ensure_alive()?;
        if self.is_registered(node) {
            self.nodes.remove(&node.graph_name());
        }
        for e in self.topics.values_mut() {
            e.publishers.remove(node);
            e.subscribers.remove(node);
        }
        self.topics
            .retain(|_, e| !e.publishers.is_empty() || !e.subscribers.is_empty());
        Ok(())
    }

    pub fn topic(&self, topic: &str) -> Option<&TopicEntry> {
        self.topics.get(topic)
    }

    pub fn topics(&self) -> &BTreeMap<String, TopicEntry> {
        &self.topics
    }

    pub fn publishers(&self, topic: &str) -> BTreeSet<NodeId> {
        self.topics
            .get(topic)
            .map(|e| e.publishers.clone())
            .unwrap_or_default()
    }

    pub fn subscribers(&self, topic: &str) -> BTreeSet<NodeId> {
        self.topics
            .get(topic)
            .map(|e| e.subscribers.clone())
            .unwrap_or_default()
    }

    /// Topics with at least one publisher.
    pub fn advertised(&self) -> impl Iterator<Item = (&String, &TopicEntry)> {
        self.topics.iter().filter(|(_, e)| !e.publishers.is_empty())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn namespaces_avoid_conflicts() {
        let mut r = MasterRegistry::new();
        r.register(&NodeId::new("r1", "amcl")).unwrap();
        assert!(matches!(
            r.register(&NodeId::new("r2", "amcl")),
            Err(Error::NameConflict(_))
        ));
        r.register(&NodeId::namespaced("r2", "Robot2", "amcl")).unwrap();
        r.register(&NodeId::new("r1", "amcl")).unwrap();
    }

    #[test]
    fn dead_registry_is_frozen() {
        let mut r = MasterRegistry::new();
        let n = NodeId::new("m", "talker");
        r.register(&n).unwrap();
        r.add_publisher(&n, "/chatter", "Blob").unwrap();
        assert!(r.kill());
        assert!(!r.kill());
        assert_eq!(r.add_subscriber(&n, "/chatter", "Blob"), Err(Error::MasterDown));
        assert_eq!(r.register(&NodeId::new("m", "x")), Err(Error::MasterDown));
        assert_eq!(r.publishers("/chatter").len(), 1);
    }

    #[test]
    fn wildcard_type_adopts_concrete() {
        let mut r = MasterRegistry::new();
        let a = NodeId::new("m", "bridge");
        let b = NodeId::new("m", "amcl");
        r.register(&a).unwrap();
        r.register(&b).unwrap();
        r.add_subscriber(&a, "/pose", msg_types::ANY).unwrap();
        r.add_publisher(&b, "/pose", "PoseMsg").unwrap();
        assert_eq!(r.topic("/pose").unwrap().msg_type, "PoseMsg");
        assert!(r.add_subscriber(&a, "/pose", "Flag").is_err());
    }
}
