//! Prefix tree over entity token sequences.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::corpus::{EntityId, Vocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrieError {
    #[error("cannot build a prefix tree from an empty vocabulary")]
    EmptyVocabulary,
}

/// Index of a node inside a [`PrefixTrie`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub const ROOT: NodeId = NodeId(0);

    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
struct Node {
    children: BTreeMap<String, NodeId>,
    terminal: Option<EntityId>,
    parent: Option<NodeId>,
    depth: usize,
}

/// Valid next steps after a prefix.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Continuations<'a> {
    /// Child tokens, in ascending order.
    pub tokens: Vec<&'a str>,
    /// True when the prefix itself spells a whole entity.
    pub end: bool,
}

/// Immutable arena-backed prefix tree. Node 0 is the root.
#[derive(Debug, Clone)]
pub struct PrefixTrie {
    nodes: Vec<Node>,
    terminals: usize,
}

impl PrefixTrie {
    pub fn build(vocab: &Vocabulary) -> Result<Self, TrieError> {
        if vocab.is_empty() {
            return Err(TrieError::EmptyVocabulary);
        }
        let mut nodes = vec![Node::default()];
        for entity in vocab.entities() {
            let mut cursor = 0usize;
            for token in &entity.tokens {
                cursor = match nodes[cursor].children.get(token) {
                    Some(child) => child.0,
                    None => {
                        let id = nodes.len();
                        let depth = nodes[cursor].depth + 1;
                        nodes.push(Node {
                            depth,
                            parent: Some(NodeId(cursor)),
                            ..Node::default()
                        });
                        nodes[cursor].children.insert(token.clone(), NodeId(id));
                        id
                    }
                };
            }
            // Vocabulary already rejects duplicate token sequences.
            debug_assert!(nodes[cursor].terminal.is_none());
            nodes[cursor].terminal = Some(entity.id.clone());
        }
        Ok(Self {
            nodes,
            terminals: vocab.len(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn terminal_count(&self) -> usize {
        self.terminals
    }

    /// Walks `prefix` from the root; `None` if it leaves the tree.
    pub fn locate<S: AsRef<str>>(&self, prefix: &[S]) -> Option<NodeId> {
        prefix
            .iter()
            .try_fold(NodeId::ROOT, |node, token| self.child(node, token.as_ref()))
    }

    pub fn child(&self, node: NodeId, token: &str) -> Option<NodeId> {
        self.nodes[node.0].children.get(token).copied()
    }

    pub fn children(&self, node: NodeId) -> impl Iterator<Item = (&str, NodeId)> + '_ {
        self.nodes[node.0]
            .children
            .iter()
            .map(|(token, &child)| (token.as_str(), child))
    }

    pub fn terminal(&self, node: NodeId) -> Option<&EntityId> {
        self.nodes[node.0].terminal.as_ref()
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.nodes[node.0].parent
    }

    pub fn depth(&self, node: NodeId) -> usize {
        self.nodes[node.0].depth
    }

    pub fn continuations<S: AsRef<str>>(&self, prefix: &[S]) -> Continuations<'_> {
        match self.locate(prefix) {
            Some(node) => Continuations {
                tokens: self.children(node).map(|(t, _)| t).collect(),
                end: self.terminal(node).is_some(),
            },
            None => Continuations::default(),
        }
    }

    /// Post-order listing of node ids (children before parents).
    pub(crate) fn post_order(&self) -> Vec<NodeId> {
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut stack = vec![(NodeId::ROOT, false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
            } else {
                stack.push((node, true));
                stack.extend(self.children(node).map(|(_, c)| (c, false)));
            }
        }
        order
    }
}
