//! Hierarchical risk aggregation with copula trees.
//!
//! A tree of risks where each leaf carries a marginal distribution and each
//! branching node a copula linking the sums of its children. The crate
//! samples such models (plain and modified reordering), computes the
//! Gaussian tree-dependent law, and explores the set of joint covariances
//! compatible with a tree specification.

pub mod cli;
pub mod experiments;
pub mod feasible;
pub mod gaussian;
pub mod linalg;
pub mod margins;
pub mod model;
pub mod mra;
pub mod numeric;
pub mod output;
pub mod presets;
pub mod reordering;
pub mod stats;
pub mod rng;
pub mod tree;
