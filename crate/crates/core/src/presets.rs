//! Ready-made models used by the experiments and tests.

use std::collections::BTreeMap;
use std::f64::consts::FRAC_1_SQRT_2;

use crate::margins::{CopulaSpec, MarginalSpec};
use crate::model::AggregationTreeModel;
use crate::tree::{NodeId, RootedTree, TreeShape};

fn id(s: &str) -> NodeId {
    s.parse().expect("static node id")
}

fn build(shape: TreeShape, marginals: Vec<(&str, MarginalSpec)>, copulas: Vec<(&str, CopulaSpec)>) -> AggregationTreeModel {
    let tree = RootedTree::from_shape(&shape);
    let marginals: BTreeMap<_, _> = marginals.into_iter().map(|(k, m)| (id(k), m)).collect();
    let copulas: BTreeMap<_, _> = copulas.into_iter().map(|(k, c)| (id(k), c)).collect();
    AggregationTreeModel::new(tree, marginals, copulas).expect("preset models are valid")
}

fn normal(mean: f64, var: f64) -> MarginalSpec {
    MarginalSpec::normal(mean, var).unwrap()
}

fn gauss(rho: f64) -> CopulaSpec {
    CopulaSpec::bivariate(rho).unwrap()
}

/// Tree with two pairs of leaves: `((1.1, 1.2), (2.1, 2.2))`.
pub fn two_pairs() -> TreeShape {
    TreeShape::node(vec![TreeShape::fan(2), TreeShape::fan(2)])
}

/// Tree `((1.1, 1.2), 2)`.
pub fn pair_plus_one() -> TreeShape {
    TreeShape::node(vec![TreeShape::fan(2), TreeShape::leaf()])
}

/// Four normal leaves (means 4, 2, 0, 3; variances 3, 4, 10, 2) in two
/// pairs, Gaussian copulas 0.7 and 0.5 on the pairs and 0.2 at the root.
pub fn gaussian_four_leaf() -> AggregationTreeModel {
    build(
        two_pairs(),
        vec![
            ("1.1", normal(4.0, 3.0)),
            ("1.2", normal(2.0, 4.0)),
            ("2.1", normal(0.0, 10.0)),
            ("2.2", normal(3.0, 2.0)),
        ],
        vec![("1", gauss(0.7)), ("2", gauss(0.5)), ("root", gauss(0.2))],
    )
}

/// Three fair Bernoulli leaves on `((1.1, 1.2), 2)` with Gaussian copulas.
pub fn discrete_three_leaf(rho_pair: f64, rho_root: f64) -> AggregationTreeModel {
    let b = MarginalSpec::bernoulli(0.5).unwrap();
    build(
        pair_plus_one(),
        vec![("1.1", b.clone()), ("1.2", b.clone()), ("2", b)],
        vec![("1", gauss(rho_pair)), ("root", gauss(rho_root))],
    )
}

/// Three fair Bernoulli leaves with independence copulas everywhere.
pub fn independent_three_leaf() -> AggregationTreeModel {
    let b = MarginalSpec::bernoulli(0.5).unwrap();
    build(
        pair_plus_one(),
        vec![("1.1", b.clone()), ("1.2", b.clone()), ("2", b)],
        vec![("1", CopulaSpec::independence(2)), ("root", CopulaSpec::independence(2))],
    )
}

/// Zero-mean normal three-leaf tree `((1.1, 1.2), 2)`.
pub fn gaussian_three_leaf(sd: [f64; 3], rho12: f64, rho_root: f64) -> AggregationTreeModel {
    build(
        pair_plus_one(),
        vec![
            ("1.1", normal(0.0, sd[0] * sd[0])),
            ("1.2", normal(0.0, sd[1] * sd[1])),
            ("2", normal(0.0, sd[2] * sd[2])),
        ],
        vec![("1", gauss(rho12)), ("root", gauss(rho_root))],
    )
}

/// `X` and `Y` grouped first (correlation 0.5), then joined with an
/// independent `Z`. Leaf order X, Y, Z.
pub fn restructured_left() -> (AggregationTreeModel, [&'static str; 3]) {
    let m = build(
        pair_plus_one(),
        vec![("1.1", normal(0.0, 1.0)), ("1.2", normal(0.0, 1.0)), ("2", normal(0.0, 1.0))],
        vec![("1", gauss(0.5)), ("root", gauss(0.0))],
    );
    (m, ["X", "Y", "Z"])
}

/// `X` and `Z` grouped first (independent), then joined with `Y` at
/// correlation 1/(2√2). Leaf order X, Z, Y.
pub fn restructured_right() -> (AggregationTreeModel, [&'static str; 3]) {
    let m = build(
        pair_plus_one(),
        vec![("1.1", normal(0.0, 1.0)), ("1.2", normal(0.0, 1.0)), ("2", normal(0.0, 1.0))],
        vec![("1", gauss(0.0)), ("root", gauss(0.5 * FRAC_1_SQRT_2))],
    );
    (m, ["X", "Z", "Y"])
}

/// First insurer: `(X1, X2)` with correlation −1/√2, sum independent of X3.
/// Leaf order X1, X2, X3.
pub fn insurer_one() -> AggregationTreeModel {
    gaussian_three_leaf([1.0, 2f64.sqrt(), 1.0], -FRAC_1_SQRT_2, 0.0)
}

/// Second insurer: `(X1, X3)` comonotone, sum linked to X2 with −1/√2.
/// Leaf order X1, X3, X2.
pub fn insurer_two() -> AggregationTreeModel {
    gaussian_three_leaf([1.0, 1.0, 2f64.sqrt()], 1.0, -FRAC_1_SQRT_2)
}

/// Perfect binary tree with `2^levels` standard normal leaves and the same
/// Gaussian copula correlation at every node.
pub fn symmetric_binary(levels: usize, rho: f64) -> AggregationTreeModel {
    let shape = TreeShape::symmetric_binary(levels);
    let tree = RootedTree::from_shape(&shape);
    let marginals = tree.leaves().iter().map(|l| (l.clone(), normal(0.0, 1.0))).collect();
    let copulas = tree.branching().iter().map(|b| (b.clone(), gauss(rho))).collect();
    AggregationTreeModel::new(tree, marginals, copulas).expect("preset models are valid")
}
