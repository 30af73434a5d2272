//! Rooted aggregation trees.
//!
//! Nodes are addressed by paths of positive integers: the root is the empty
//! path, and the children of `I` are `(I,1), …, (I,N_I)`. Paths order
//! lexicographically, which is the order used for leaf vectors everywhere in
//! the crate.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TreeError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {node}: children must be numbered 1..={count}, found child {child}")]
    NonContiguousChildren {
        node: NodeId,
        count: usize,
        child: u32,
    },
    #[error("node {0} has no parent in the tree")]
    Orphan(NodeId),
    #[error("tree has no root")]
    MissingRoot,
    #[error("invalid node id '{0}'")]
    Parse(String),
}

/// Path from the root to a node. The empty path is the root.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(Vec<u32>);

impl NodeId {
    pub fn root() -> Self {
        Self(Vec::new())
    }

    /// Builds a node id; every step must be at least 1.
    pub fn new(path: Vec<u32>) -> Result<Self, TreeError> {
        if path.contains(&0) {
            return Err(TreeError::Parse(format!("{path:?}")));
        }
        Ok(Self(path))
    }

    pub fn path(&self) -> &[u32] {
        &self.0
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn child(&self, k: u32) -> Self {
        debug_assert!(k >= 1);
        let mut p = self.0.clone();
        p.push(k);
        Self(p)
    }

    pub fn parent(&self) -> Option<Self> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    /// True if `self` lies in the subtree rooted at `ancestor` (inclusive).
    pub fn descends_from(&self, ancestor: &NodeId) -> bool {
        self.0.starts_with(&ancestor.0)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("root");
        }
        for (i, s) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{s}")?;
        }
        Ok(())
    }
}

impl FromStr for NodeId {
    type Err = TreeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "root" || s.is_empty() {
            return Ok(Self::root());
        }
        let path = s
            .split('.')
            .map(|t| t.parse::<u32>().ok().filter(|&v| v >= 1))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| TreeError::Parse(s.to_string()))?;
        Ok(Self(path))
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Nested description of a tree shape: a node with an ordered list of
/// children. A node without children is a leaf.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct TreeShape {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<TreeShape>,
}

impl TreeShape {
    pub fn leaf() -> Self {
        Self::default()
    }

    pub fn node(children: Vec<TreeShape>) -> Self {
        Self { children }
    }

    /// Node with `k` leaf children.
    pub fn fan(k: usize) -> Self {
        Self::node(vec![Self::leaf(); k])
    }

    /// Perfect binary tree with `levels` levels of branching (2^levels leaves).
    pub fn symmetric_binary(levels: usize) -> Self {
        if levels == 0 {
            Self::leaf()
        } else {
            let sub = Self::symmetric_binary(levels - 1);
            Self::node(vec![sub.clone(), sub])
        }
    }
}

/// A rooted tree with eagerly cached derived sets. Immutable once built.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RootedTree {
    children_count: BTreeMap<NodeId, usize>,
    leaves: Vec<NodeId>,
    branching: Vec<NodeId>,
    leaf_descendants: BTreeMap<NodeId, Vec<NodeId>>,
}

impl RootedTree {
    /// Builds a tree from `N_I` for every node, checking contiguity and
    /// parent links.
    pub fn from_children_counts(counts: BTreeMap<NodeId, usize>) -> Result<Self, TreeError> {
        if !counts.contains_key(&NodeId::root()) {
            return Err(TreeError::MissingRoot);
        }
        for id in counts.keys() {
            if let Some(parent) = id.parent() {
                let Some(&n) = counts.get(&parent) else {
                    return Err(TreeError::Orphan(id.clone()));
                };
                let k = *id.path().last().unwrap();
                if k as usize > n {
                    return Err(TreeError::NonContiguousChildren {
                        node: parent,
                        count: n,
                        child: k,
                    });
                }
            }
        }
        for (id, &n) in &counts {
            for k in 1..=n as u32 {
                if !counts.contains_key(&id.child(k)) {
                    return Err(TreeError::NonContiguousChildren {
                        node: id.clone(),
                        count: n,
                        child: k,
                    });
                }
            }
        }

        let leaves: Vec<NodeId> = counts
            .iter()
            .filter(|(_, &n)| n == 0)
            .map(|(id, _)| id.clone())
            .collect();
        let branching: Vec<NodeId> = counts
            .iter()
            .filter(|(_, &n)| n > 0)
            .map(|(id, _)| id.clone())
            .collect();
        let leaf_descendants = counts
            .keys()
            .map(|id| {
                let lds = leaves
                    .iter()
                    .filter(|l| l.descends_from(id))
                    .cloned()
                    .collect();
                (id.clone(), lds)
            })
            .collect();
        Ok(Self {
            children_count: counts,
            leaves,
            branching,
            leaf_descendants,
        })
    }

    pub fn from_shape(shape: &TreeShape) -> Self {
        fn walk(shape: &TreeShape, id: NodeId, out: &mut BTreeMap<NodeId, usize>) {
            out.insert(id.clone(), shape.children.len());
            for (k, c) in shape.children.iter().enumerate() {
                walk(c, id.child(k as u32 + 1), out);
            }
        }
        let mut counts = BTreeMap::new();
        walk(shape, NodeId::root(), &mut counts);
        Self::from_children_counts(counts).expect("shapes always describe valid trees")
    }

    pub fn to_shape(&self) -> TreeShape {
        fn build(tree: &RootedTree, id: &NodeId) -> TreeShape {
            let n = tree.children_count[id];
            TreeShape::node((1..=n as u32).map(|k| build(tree, &id.child(k))).collect())
        }
        build(self, &NodeId::root())
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.children_count.contains_key(id)
    }

    /// All nodes in lexicographic order.
    pub fn nodes(&self) -> impl Iterator<Item = &NodeId> {
        self.children_count.keys()
    }

    pub fn len(&self) -> usize {
        self.children_count.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn num_children(&self, id: &NodeId) -> Result<usize, TreeError> {
        self.children_count
            .get(id)
            .copied()
            .ok_or_else(|| TreeError::UnknownNode(id.clone()))
    }

    pub fn is_leaf(&self, id: &NodeId) -> Result<bool, TreeError> {
        Ok(self.num_children(id)? == 0)
    }

    /// Leaf nodes, lexicographically ordered.
    pub fn leaves(&self) -> &[NodeId] {
        &self.leaves
    }

    /// Branching nodes, lexicographically ordered.
    pub fn branching(&self) -> &[NodeId] {
        &self.branching
    }

    pub fn children(&self, id: &NodeId) -> Result<Vec<NodeId>, TreeError> {
        let n = self.num_children(id)?;
        Ok((1..=n as u32).map(|k| id.child(k)).collect())
    }

    /// Descendants of `id`, including `id` itself.
    pub fn descendants(&self, id: &NodeId) -> Result<Vec<NodeId>, TreeError> {
        if !self.contains(id) {
            return Err(TreeError::UnknownNode(id.clone()));
        }
        Ok(self
            .children_count
            .range(id.clone()..)
            .take_while(|(k, _)| k.descends_from(id))
            .map(|(k, _)| k.clone())
            .collect())
    }

    pub fn leaf_descendants(&self, id: &NodeId) -> Result<&[NodeId], TreeError> {
        self.leaf_descendants
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| TreeError::UnknownNode(id.clone()))
    }

    /// `M_I`, the number of leaf descendants.
    pub fn leaf_count(&self, id: &NodeId) -> Result<usize, TreeError> {
        Ok(self.leaf_descendants(id)?.len())
    }

    /// Position of each leaf in the lexicographic leaf order.
    pub fn leaf_index(&self, id: &NodeId) -> Option<usize> {
        self.leaves.binary_search(id).ok()
    }

    /// Length of the longest root-to-leaf path (0 for a root-only tree).
    pub fn height(&self) -> usize {
        self.leaves.iter().map(NodeId::depth).max().unwrap_or(0)
    }

    /// Branching nodes ordered so that every node comes after all of its
    /// branching descendants.
    pub fn branching_bottom_up(&self) -> Vec<NodeId> {
        let mut b = self.branching.clone();
        b.sort_by(|a, c| c.depth().cmp(&a.depth()).then_with(|| a.cmp(c)));
        b
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn id(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    fn four_leaf() -> RootedTree {
        RootedTree::from_shape(&TreeShape::node(vec![TreeShape::fan(2), TreeShape::fan(2)]))
    }

    #[test]
    fn four_leaf_tree_sets() {
        let t = four_leaf();
        assert_eq!(t.len(), 7);
        assert_eq!(t.leaves(), &[id("1.1"), id("1.2"), id("2.1"), id("2.2")]);
        assert_eq!(t.branching(), &[NodeId::root(), id("1"), id("2")]);
        assert_eq!(t.children(&NodeId::root()).unwrap(), vec![id("1"), id("2")]);
        assert_eq!(t.descendants(&id("1")).unwrap(), vec![id("1"), id("1.1"), id("1.2")]);
        assert_eq!(t.leaf_count(&NodeId::root()).unwrap(), 4);
        assert_eq!(t.leaf_descendants(&NodeId::root()).unwrap(), t.leaves());
    }

    #[test]
    fn root_only_tree() {
        let t = RootedTree::from_shape(&TreeShape::leaf());
        assert_eq!(t.leaves(), &[NodeId::root()]);
        assert!(t.branching().is_empty());
        assert_eq!(t.height(), 0);
    }

    #[test]
    fn one_level_fan() {
        let t = RootedTree::from_shape(&TreeShape::fan(3));
        assert_eq!(t.leaves(), &[id("1"), id("2"), id("3")]);
    }

    #[test]
    fn unknown_node_errors() {
        let t = four_leaf();
        assert_eq!(t.children(&id("3")), Err(TreeError::UnknownNode(id("3"))));
        assert!(t.descendants(&id("1.1.1")).is_err());
        assert!(t.leaf_count(&id("9")).is_err());
    }

    #[test]
    fn rejects_gaps_and_orphans() {
        let mut m = BTreeMap::new();
        m.insert(NodeId::root(), 2);
        m.insert(id("1"), 0);
        m.insert(id("3"), 0);
        assert!(matches!(
            RootedTree::from_children_counts(m),
            Err(TreeError::NonContiguousChildren { .. })
        ));

        let mut m = BTreeMap::new();
        m.insert(NodeId::root(), 1);
        m.insert(id("1"), 0);
        m.insert(id("2.1"), 0);
        assert!(matches!(RootedTree::from_children_counts(m), Err(TreeError::Orphan(_))));

        let mut m = BTreeMap::new();
        m.insert(id("1"), 0);
        assert_eq!(RootedTree::from_children_counts(m), Err(TreeError::MissingRoot));
    }

    #[test]
    fn node_id_text_round_trip() {
        for s in ["root", "1", "1.2", "3.1.4"] {
            assert_eq!(id(s).to_string(), s);
        }
        assert!("0.1".parse::<NodeId>().is_err());
        assert!("1..2".parse::<NodeId>().is_err());
        assert!(NodeId::new(vec![1, 0]).is_err());
    }

    #[test]
    fn lexicographic_leaf_order() {
        assert!(id("1") < id("1.1"));
        assert!(id("1.2") < id("2"));
        assert!(NodeId::root() < id("1"));
    }

    #[test]
    fn bottom_up_order() {
        let t = four_leaf();
        let order = t.branching_bottom_up();
        assert_eq!(order.last().unwrap(), &NodeId::root());
        assert_eq!(order[0], id("1"));
    }

    #[test]
    fn shape_round_trip() {
        let s = TreeShape::node(vec![TreeShape::fan(3), TreeShape::leaf()]);
        assert_eq!(RootedTree::from_shape(&s).to_shape(), s);
    }
}
