//! The aggregation tree model: a tree, a marginal per leaf, a copula per
//! branching node.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::margins::{CopulaSpec, MarginalSpec};
use crate::tree::{NodeId, RootedTree};

/// One broken model invariant.
#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    LeafWithoutMarginal(NodeId),
    MarginalOnNonLeaf(NodeId),
    BranchingWithoutCopula(NodeId),
    CopulaOnNonBranching(NodeId),
    CopulaDimension { node: NodeId, dim: usize, children: usize },
    InvalidMarginal { node: NodeId, reason: String },
    InvalidCopula { node: NodeId, reason: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::LeafWithoutMarginal(n) => write!(f, "{n}: leaf without marginal"),
            Self::MarginalOnNonLeaf(n) => write!(f, "{n}: marginal given for a node that is not a leaf"),
            Self::BranchingWithoutCopula(n) => write!(f, "{n}: branching node without copula"),
            Self::CopulaOnNonBranching(n) => write!(f, "{n}: copula given for a node that is not branching"),
            Self::CopulaDimension { node, dim, children } => {
                write!(f, "{node}: copula dimension {dim} but node has {children} children")
            }
            Self::InvalidMarginal { node, reason } => write!(f, "{node}: invalid marginal: {reason}"),
            Self::InvalidCopula { node, reason } => write!(f, "{node}: invalid copula: {reason}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid model: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
pub struct ModelError(pub Vec<Violation>);

#[derive(Debug, Clone, PartialEq)]
pub struct AggregationTreeModel {
    pub tree: RootedTree,
    pub marginals: BTreeMap<NodeId, MarginalSpec>,
    pub copulas: BTreeMap<NodeId, CopulaSpec>,
}

impl AggregationTreeModel {
    /// Builds and validates a model.
    pub fn new(
        tree: RootedTree,
        marginals: BTreeMap<NodeId, MarginalSpec>,
        copulas: BTreeMap<NodeId, CopulaSpec>,
    ) -> Result<Self, ModelError> {
        let m = Self { tree, marginals, copulas };
        m.ensure_valid()?;
        Ok(m)
    }

    /// All invariant violations; empty when the model is valid.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        for leaf in self.tree.leaves() {
            match self.marginals.get(leaf) {
                None => out.push(Violation::LeafWithoutMarginal(leaf.clone())),
                Some(m) => {
                    if let Err(e) = m.validate() {
                        out.push(Violation::InvalidMarginal {
                            node: leaf.clone(),
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
        for id in self.marginals.keys() {
            if !matches!(self.tree.is_leaf(id), Ok(true)) {
                out.push(Violation::MarginalOnNonLeaf(id.clone()));
            }
        }
        for node in self.tree.branching() {
            match self.copulas.get(node) {
                None => out.push(Violation::BranchingWithoutCopula(node.clone())),
                Some(c) => {
                    let children = self.tree.num_children(node).unwrap_or(0);
                    if c.dim() != children {
                        out.push(Violation::CopulaDimension {
                            node: node.clone(),
                            dim: c.dim(),
                            children,
                        });
                    } else if let Err(e) = c.validate() {
                        out.push(Violation::InvalidCopula {
                            node: node.clone(),
                            reason: e.to_string(),
                        });
                    }
                }
            }
        }
        for id in self.copulas.keys() {
            if !matches!(self.tree.is_leaf(id), Ok(false)) {
                out.push(Violation::CopulaOnNonBranching(id.clone()));
            }
        }
        out
    }

    pub fn ensure_valid(&self) -> Result<(), ModelError> {
        let v = self.validate();
        if v.is_empty() {
            Ok(())
        } else {
            Err(ModelError(v))
        }
    }

    pub fn marginal(&self, leaf: &NodeId) -> &MarginalSpec {
        &self.marginals[leaf]
    }

    pub fn copula(&self, node: &NodeId) -> &CopulaSpec {
        &self.copulas[node]
    }

    pub fn is_gaussian(&self) -> bool {
        self.marginals.values().all(|m| matches!(m, MarginalSpec::Normal { .. }))
            && self.copulas.values().all(|c| matches!(c, CopulaSpec::Gaussian { .. }))
    }

    pub fn is_discrete(&self) -> bool {
        self.marginals.values().all(MarginalSpec::is_discrete)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tree::TreeShape;

    fn id(s: &str) -> NodeId {
        s.parse().unwrap()
    }

    fn four_leaf_model() -> AggregationTreeModel {
        let tree = RootedTree::from_shape(&TreeShape::node(vec![TreeShape::fan(2), TreeShape::fan(2)]));
        let marginals = tree
            .leaves()
            .iter()
            .map(|l| (l.clone(), MarginalSpec::normal(0.0, 1.0).unwrap()))
            .collect();
        let copulas = tree
            .branching()
            .iter()
            .map(|b| (b.clone(), CopulaSpec::bivariate(0.3).unwrap()))
            .collect();
        AggregationTreeModel { tree, marginals, copulas }
    }

    #[test]
    fn four_marginals_three_copulas_is_valid() {
        let m = four_leaf_model();
        assert!(m.validate().is_empty());
        assert!(m.is_gaussian());
    }

    #[test]
    fn missing_copula_reported() {
        let mut m = four_leaf_model();
        m.copulas.remove(&id("1"));
        let v = m.validate();
        assert_eq!(v, vec![Violation::BranchingWithoutCopula(id("1"))]);
        assert!(v[0].to_string().contains("branching node without copula"));
    }

    #[test]
    fn dimension_mismatch_reported() {
        let mut m = four_leaf_model();
        m.copulas.insert(NodeId::root(), CopulaSpec::independence(3));
        assert_eq!(
            m.validate(),
            vec![Violation::CopulaDimension {
                node: NodeId::root(),
                dim: 3,
                children: 2
            }]
        );
    }

    #[test]
    fn stray_entries_reported() {
        let mut m = four_leaf_model();
        m.marginals.insert(id("1"), MarginalSpec::normal(0.0, 1.0).unwrap());
        m.copulas.insert(id("1.1"), CopulaSpec::independence(2));
        m.marginals.remove(&id("2.2"));
        let v = m.validate();
        assert!(v.contains(&Violation::MarginalOnNonLeaf(id("1"))));
        assert!(v.contains(&Violation::CopulaOnNonBranching(id("1.1"))));
        assert!(v.contains(&Violation::LeafWithoutMarginal(id("2.2"))));
        assert!(m.ensure_valid().is_err());
    }
}
