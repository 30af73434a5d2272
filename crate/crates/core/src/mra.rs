//! Modified reordering: fixed-first-component linking, independent copies
//! per level and diagonal selection, giving i.i.d. joint realizations. Also
//! the exact tree dependent law for discrete binary trees.

use std::collections::BTreeMap;
use std::io::{self, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::margins::{CopulaSpec, MarginalSpec, SpecError};
use crate::model::{AggregationTreeModel, ModelError};
use crate::output::{fmt_f64, write_csv_fields, write_csv_header};
use crate::reordering::SampleBlock;
use crate::rng::{SeedStream, StreamTag};
use crate::tree::NodeId;

pub const DEFAULT_BUDGET: f64 = 1e8;
pub const DEFAULT_SUPPORT_CAP: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MraError {
    #[error("estimated {estimate:.3e} sample generations exceed the budget of {budget:.3e}")]
    BudgetExceeded { estimate: f64, budget: f64 },
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("node {0} has {1} children; the exact law needs a binary tree")]
    NotBinary(NodeId, usize),
    #[error("leaf {0} does not have a discrete marginal")]
    NotDiscrete(NodeId),
    #[error("copula at {0} has no two-dimensional CDF")]
    UnsupportedCopula(NodeId),
    #[error("support size {size} at node {node} exceeds the cap of {cap}")]
    SupportCap { node: NodeId, size: usize, cap: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// Number of random values drawn by [`run_mra`]: a leaf costs `n`, a
/// branching node `n · (Σ child cost + n · N_I)`.
pub fn mra_cost(model: &AggregationTreeModel, n: usize) -> f64 {
    fn cost(model: &AggregationTreeModel, node: &NodeId, n: f64) -> f64 {
        let kids = model.tree.children(node).expect("node from tree");
        if kids.is_empty() {
            return n;
        }
        let inner: f64 = kids.iter().map(|c| cost(model, c, n)).sum();
        n * (inner + n * kids.len() as f64)
    }
    cost(model, &NodeId::root(), n as f64)
}

/// n realizations of a subtree: sums and row-major leaf composition.
struct Realization {
    sums: Vec<f64>,
    comp: Vec<f64>,
    width: usize,
}

fn less(v: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    v[a].total_cmp(&v[b]).then(a.cmp(&b))
}

/// 0-based rank of position `k` in `v` under (value, position) order.
fn rank_of(v: &[f64], k: usize) -> usize {
    (0..v.len()).filter(|&j| less(v, j, k).is_lt()).count()
}

/// Position of the element with 0-based rank `r` in `v`.
fn select(v: &[f64], r: usize, scratch: &mut Vec<usize>) -> usize {
    scratch.clear();
    scratch.extend(0..v.len());
    let (_, nth, _) = scratch.select_nth_unstable_by(r, |&a, &b| less(v, a, b));
    *nth
}

/// Sources of row `ell` of the fixed-first reordering without computing the
/// other rows.
fn fixed_first_row(children: &[Realization], u: &DMatrix<f64>, ell: usize, scratch: &mut Vec<usize>) -> Vec<usize> {
    let r = rank_of(&children[0].sums, ell);
    let col0 = u.column(0);
    let m = select(col0.as_slice(), r, scratch);
    let mut src = vec![ell];
    for (i, child) in children.iter().enumerate().skip(1) {
        let col = u.column(i);
        let ri = rank_of(col.as_slice(), m);
        src.push(select(&child.sums, ri, scratch));
    }
    src
}

fn realize(model: &AggregationTreeModel, node: &NodeId, n: usize, stream: &SeedStream) -> Result<Realization, MraError> {
    let kids = model.tree.children(node).expect("node from tree");
    if kids.is_empty() {
        let sums = model.marginal(node).sample(n, &stream.derive(StreamTag::Marginal, 0));
        return Ok(Realization {
            comp: sums.clone(),
            sums,
            width: 1,
        });
    }
    let copula = model.copula(node);
    let rows: Vec<(f64, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|ell| {
            let s = stream.derive(StreamTag::Copy, ell as u64);
            let children = kids
                .iter()
                .enumerate()
                .map(|(j, c)| realize(model, c, n, &s.derive(StreamTag::Child, j as u64 + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            let u = copula.sample(n, &s.derive(StreamTag::Copula, 0))?;
            let mut scratch = Vec::with_capacity(n);
            let src = fixed_first_row(&children, &u, ell, &mut scratch);
            let mut sum = 0.0;
            let mut comp = Vec::new();
            for (c, &k) in children.iter().zip(&src) {
                sum += c.sums[k];
                comp.extend_from_slice(&c.comp[k * c.width..(k + 1) * c.width]);
            }
            Ok((sum, comp))
        })
        .collect::<Result<_, MraError>>()?;
    let width = rows.first().map_or(0, |r| r.1.len());
    let mut sums = Vec::with_capacity(n);
    let mut comp = Vec::with_capacity(n * width);
    for (s, c) in rows {
        sums.push(s);
        comp.extend(c);
    }
    Ok(Realization { sums, comp, width })
}

/// i.i.d. joint leaf realizations from the modified algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct MraOutput {
    pub leaves: Vec<NodeId>,
    /// `n × M` matrix, one realization per row.
    pub realizations: DMatrix<f64>,
    /// Total sum of each realization.
    pub sums: Vec<f64>,
}

impl MraOutput {
    /// Sum of the leaves below `node` for every realization.
    pub fn node_sums(&self, node: &NodeId) -> Vec<f64> {
        let cols: Vec<usize> = (0..self.leaves.len())
            .filter(|&j| self.leaves[j].descends_from(node))
            .collect();
        (0..self.realizations.nrows())
            .map(|k| cols.iter().map(|&j| self.realizations[(k, j)]).sum())
            .collect()
    }

    pub fn sample_block(&self) -> SampleBlock {
        SampleBlock {
            leaves: self.leaves.clone(),
            data: self.realizations.clone(),
        }
    }
}

pub fn run_mra(model: &AggregationTreeModel, n: usize, stream: &SeedStream, budget: f64) -> Result<MraOutput, MraError> {
    model.ensure_valid()?;
    if n < 2 {
        return Err(MraError::TooFewSamples(n));
    }
    let estimate = mra_cost(model, n);
    if estimate > budget {
        return Err(MraError::BudgetExceeded { estimate, budget });
    }
    let r = realize(model, &NodeId::root(), n, stream)?;
    Ok(MraOutput {
        leaves: model.tree.leaves().to_vec(),
        realizations: DMatrix::from_row_slice(n, r.width, &r.comp),
        sums: r.sums,
    })
}

/// Finite joint law of a leaf vector.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteJointPmf {
    pub leaves: Vec<NodeId>,
    pub support: Vec<Vec<f64>>,
    pub probs: Vec<f64>,
}

fn key(point: &[f64]) -> Vec<u64> {
    point.iter().map(|&x| if x == 0.0 { 0 } else { x.to_bits() }).collect()
}

impl DiscreteJointPmf {
    /// Builds a pmf from weighted points, merging duplicates and ordering
    /// the support lexicographically.
    pub fn from_weighted(leaves: Vec<NodeId>, points: impl IntoIterator<Item = (Vec<f64>, f64)>) -> Self {
        let mut map: BTreeMap<Vec<u64>, (Vec<f64>, f64)> = BTreeMap::new();
        for (p, w) in points {
            map.entry(key(&p)).or_insert_with(|| (p, 0.0)).1 += w;
        }
        let mut entries: Vec<(Vec<f64>, f64)> = map.into_values().collect();
        entries.sort_by(|a, b| {
            a.0.iter()
                .zip(&b.0)
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let (support, probs) = entries.into_iter().unzip();
        Self { leaves, support, probs }
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn prob(&self, point: &[f64]) -> f64 {
        let k = key(point);
        self.support
            .iter()
            .zip(&self.probs)
            .filter(|(s, _)| key(s) == k)
            .map(|(_, p)| *p)
            .sum()
    }

    /// Law of the coordinates `coords` (indices into `leaves`).
    pub fn marginal(&self, coords: &[usize]) -> Self {
        let leaves = coords.iter().map(|&c| self.leaves[c].clone()).collect();
        Self::from_weighted(
            leaves,
            self.support
                .iter()
                .zip(&self.probs)
                .map(|(s, &p)| (coords.iter().map(|&c| s[c]).collect(), p)),
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header: Vec<String> = self.leaves.iter().map(ToString::to_string).collect();
        header.push("prob".into());
        write_csv_header(&mut w, &header)?;
        for (s, p) in self.support.iter().zip(&self.probs) {
            let mut f: Vec<String> = s.iter().map(|&x| fmt_f64(x)).collect();
            f.push(fmt_f64(*p));
            write_csv_fields(&mut w, &f)?;
        }
        Ok(())
    }
}

/// Counting measure of the rows, normalized.
pub fn empirical_joint_pmf(block: &SampleBlock) -> DiscreteJointPmf {
    let n = block.nrows() as f64;
    DiscreteJointPmf::from_weighted(
        block.leaves.clone(),
        (0..block.nrows()).map(|k| (block.data.row(k).iter().copied().collect(), 1.0 / n)),
    )
}

/// Total variation distance `½ Σ |p − q|` over the union of supports.
pub fn tv_distance(p: &DiscreteJointPmf, q: &DiscreteJointPmf) -> f64 {
    let mut diff: BTreeMap<Vec<u64>, f64> = BTreeMap::new();
    for (s, &w) in p.support.iter().zip(&p.probs) {
        *diff.entry(key(s)).or_default() += w;
    }
    for (s, &w) in q.support.iter().zip(&q.probs) {
        *diff.entry(key(s)).or_default() -= w;
    }
    (0.5 * diff.values().map(|d| d.abs()).sum::<f64>()).min(1.0)
}

/// Joint law of a subtree: leaf vectors with probabilities, grouped by the
/// value of their sum.
struct SubtreeLaw {
    /// Distinct sums, ascending, with their probabilities.
    sums: Vec<(f64, f64)>,
    /// For each distinct sum, the leaf vectors with that sum and their
    /// unconditional probabilities.
    groups: Vec<Vec<(Vec<f64>, f64)>>,
}

const SNAP: f64 = 1e-9;

impl SubtreeLaw {
    fn from_points(mut pts: Vec<(Vec<f64>, f64)>) -> Self {
        pts.sort_by(|a, b| a.0.iter().sum::<f64>().total_cmp(&b.0.iter().sum::<f64>()));
        let mut sums: Vec<(f64, f64)> = Vec::new();
        let mut groups: Vec<Vec<(Vec<f64>, f64)>> = Vec::new();
        for (p, w) in pts {
            let s: f64 = p.iter().sum();
            match sums.last_mut() {
                Some(last) if (s - last.0).abs() <= SNAP => {
                    last.1 += w;
                    groups.last_mut().unwrap().push((p, w));
                }
                _ => {
                    sums.push((s, w));
                    groups.push(vec![(p, w)]);
                }
            }
        }
        Self { sums, groups }
    }

    fn size(&self) -> usize {
        self.groups.iter().map(Vec::len).sum()
    }
}

/// Exact law of the tree dependent leaf vector for a binary tree with
/// discrete marginals. Sibling sums are coupled through rectangle
/// probabilities of the node copula, and each side's leaves are drawn
/// conditionally on its sum.
pub fn tree_dependent_pmf(model: &AggregationTreeModel, cap: usize) -> Result<DiscreteJointPmf, MraError> {
    model.ensure_valid()?;
    fn law(model: &AggregationTreeModel, node: &NodeId, cap: usize) -> Result<SubtreeLaw, MraError> {
        let kids = model.tree.children(node).expect("node from tree");
        if kids.is_empty() {
            let MarginalSpec::Discrete { support, probs } = model.marginal(node) else {
                return Err(MraError::NotDiscrete(node.clone()));
            };
            return Ok(SubtreeLaw::from_points(
                support.iter().zip(probs).map(|(&x, &p)| (vec![x], p)).collect(),
            ));
        }
        if kids.len() != 2 {
            return Err(MraError::NotBinary(node.clone(), kids.len()));
        }
        let a = law(model, &kids[0], cap)?;
        let b = law(model, &kids[1], cap)?;
        let size = a.size() * b.size();
        if size > cap {
            return Err(MraError::SupportCap {
                node: node.clone(),
                size,
                cap,
            });
        }
        let copula = model.copula(node);
        let c = |u: f64, v: f64| -> Result<f64, MraError> {
            copula.cdf2(u, v).ok_or_else(|| MraError::UnsupportedCopula(node.clone()))
        };
        let cum = |s: &[(f64, f64)]| -> Vec<f64> {
            let mut acc = 0.0;
            let mut out = vec![0.0];
            for (_, p) in s {
                acc += p;
                out.push(acc.min(1.0));
            }
            *out.last_mut().unwrap() = 1.0;
            out
        };
        let fa = cum(&a.sums);
        let fb = cum(&b.sums);
        // C on the grid of cumulative levels.
        let mut grid = vec![vec![0.0; fb.len()]; fa.len()];
        for i in 0..fa.len() {
            for j in 0..fb.len() {
                grid[i][j] = c(fa[i], fb[j])?;
            }
        }
        let mut pts = Vec::with_capacity(size);
        for i in 0..a.sums.len() {
            for j in 0..b.sums.len() {
                let rect = (grid[i + 1][j + 1] - grid[i][j + 1] - grid[i + 1][j] + grid[i][j]).max(0.0);
                if rect == 0.0 {
                    continue;
                }
                for (va, wa) in &a.groups[i] {
                    for (vb, wb) in &b.groups[j] {
                        let w = rect * (wa / a.sums[i].1) * (wb / b.sums[j].1);
                        let mut v = va.clone();
                        v.extend_from_slice(vb);
                        pts.push((v, w));
                    }
                }
            }
        }
        Ok(SubtreeLaw::from_points(pts))
    }
    let root = law(model, &NodeId::root(), cap)?;
    let total: f64 = root.sums.iter().map(|s| s.1).sum();
    Ok(DiscreteJointPmf::from_weighted(
        model.tree.leaves().to_vec(),
        root.groups.into_iter().flatten().map(|(v, w)| (v, w / total)),
    ))
}

/// Bivariate copula probability of a rectangle `(u0, u1] × (v0, v1]`.
pub fn copula_rectangle(c: &CopulaSpec, u0: f64, u1: f64, v0: f64, v1: f64) -> Option<f64> {
    Some(c.cdf2(u1, v1)? - c.cdf2(u0, v1)? - c.cdf2(u1, v0)? + c.cdf2(u0, v0)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::reordering::{reorder_fixed_first, NodeAtoms};
    use crate::tree::{RootedTree, TreeShape};
    use std::f64::consts::PI;

    #[test]
    fn fast_row_matches_full_reordering() {
        let s = SeedStream::new(17);
        for trial in 0..20 {
            let mut r = s.derive(StreamTag::User, trial).rng();
            let n = 2 + r.index(40);
            // Coarse values so ties occur.
            let x: Vec<f64> = (0..n).map(|_| r.index(5) as f64).collect();
            let y: Vec<f64> = (0..n).map(|_| r.index(7) as f64).collect();
            let u = DMatrix::from_fn(n, 2, |_, _| r.open01());
            let a = NodeAtoms::leaf("1".parse().unwrap(), x.clone(), false);
            let b = NodeAtoms::leaf("2".parse().unwrap(), y.clone(), false);
            let full = reorder_fixed_first(NodeId::root(), &[&a, &b], &u).unwrap();
            let kids = [
                Realization { comp: x.clone(), sums: x.clone(), width: 1 },
                Realization { comp: y.clone(), sums: y.clone(), width: 1 },
            ];
            let mut scratch = Vec::new();
            for ell in 0..n {
                let src = fixed_first_row(&kids, &u, ell, &mut scratch);
                assert_eq!(vec![x[src[0]], y[src[1]]], full.atom(ell));
            }
        }
    }

    #[test]
    fn cost_estimate_and_budget() {
        let m = presets::discrete_three_leaf(0.7, 0.2);
        assert_eq!(mra_cost(&m, 200), 200.0 * (4.0 * 200.0 * 200.0 + 200.0 + 2.0 * 200.0));
        assert!(matches!(
            run_mra(&m, 1000, &SeedStream::new(1), DEFAULT_BUDGET),
            Err(MraError::BudgetExceeded { .. })
        ));
    }

    #[test]
    fn mra_deterministic_and_well_formed() {
        let m = presets::discrete_three_leaf(0.7, 0.2);
        let a = run_mra(&m, 30, &SeedStream::new(5), DEFAULT_BUDGET).unwrap();
        let b = run_mra(&m, 30, &SeedStream::new(5), DEFAULT_BUDGET).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.realizations.shape(), (30, 3));
        for k in 0..30 {
            assert_eq!(a.sums[k], a.realizations.row(k).sum());
        }
        assert!(a.realizations.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn pmf_independent_bernoulli_pair() {
        let b = MarginalSpec::bernoulli(0.5).unwrap();
        let tree = RootedTree::from_shape(&TreeShape::fan(2));
        let m = AggregationTreeModel::new(
            tree,
            [("1".parse().unwrap(), b.clone()), ("2".parse().unwrap(), b)].into(),
            [(NodeId::root(), CopulaSpec::independence(2))].into(),
        )
        .unwrap();
        let p = tree_dependent_pmf(&m, DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(p.support.len(), 4);
        assert!(p.probs.iter().all(|&q| (q - 0.25).abs() < 1e-15));
    }

    #[test]
    fn pmf_point_masses() {
        let d = MarginalSpec::discrete(vec![3.0], vec![1.0]).unwrap();
        let tree = RootedTree::from_shape(&TreeShape::fan(2));
        let m = AggregationTreeModel::new(
            tree,
            [("1".parse().unwrap(), d.clone()), ("2".parse().unwrap(), d)].into(),
            [(NodeId::root(), CopulaSpec::bivariate(0.4).unwrap())].into(),
        )
        .unwrap();
        let p = tree_dependent_pmf(&m, DEFAULT_SUPPORT_CAP).unwrap();
        assert_eq!(p.support, vec![vec![3.0, 3.0]]);
        assert!((p.probs[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pmf_three_leaf_pair_block() {
        let m = presets::discrete_three_leaf(0.7, 0.2);
        let p = tree_dependent_pmf(&m, DEFAULT_SUPPORT_CAP).unwrap();
        assert!((p.total() - 1.0).abs() < 1e-10);
        assert_eq!(p.support.len(), 8);
        let pair = p.marginal(&[0, 1]);
        let c00 = 0.25 + 0.7f64.asin() / (2.0 * PI);
        assert!((pair.prob(&[0.0, 0.0]) - c00).abs() < 1e-10);
        assert!((pair.prob(&[1.0, 1.0]) - c00).abs() < 1e-10);
        assert!((pair.prob(&[0.0, 1.0]) - (0.5 - c00)).abs() < 1e-10);
        for j in 0..3 {
            let mj = p.marginal(&[j]);
            assert!((mj.prob(&[0.0]) - 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn pmf_rejects_non_binary_and_cap() {
        let b = MarginalSpec::bernoulli(0.5).unwrap();
        let tree = RootedTree::from_shape(&TreeShape::fan(3));
        let marg = tree.leaves().iter().map(|l| (l.clone(), b.clone())).collect();
        let m = AggregationTreeModel::new(tree, marg, [(NodeId::root(), CopulaSpec::independence(3))].into()).unwrap();
        assert!(matches!(tree_dependent_pmf(&m, 100), Err(MraError::NotBinary(..))));
        let m = presets::discrete_three_leaf(0.7, 0.2);
        assert!(matches!(tree_dependent_pmf(&m, 5), Err(MraError::SupportCap { .. })));
    }

    #[test]
    fn tv_examples() {
        let l = vec!["1".parse().unwrap()];
        let p = DiscreteJointPmf::from_weighted(l.clone(), vec![(vec![0.0], 0.5), (vec![1.0], 0.5)]);
        let q = DiscreteJointPmf::from_weighted(l.clone(), vec![(vec![0.0], 0.6), (vec![1.0], 0.4)]);
        let r = DiscreteJointPmf::from_weighted(l, vec![(vec![2.0], 1.0)]);
        assert_eq!(tv_distance(&p, &p), 0.0);
        assert!((tv_distance(&p, &q) - 0.1).abs() < 1e-15);
        assert_eq!(tv_distance(&p, &r), 1.0);
    }
}
