//! Sample reordering: independent marginal samples are paired according to
//! the ranks of copula samples, node by node from the leaves up.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::margins::SpecError;
use crate::model::{AggregationTreeModel, ModelError};
use crate::output::{write_csv_header, write_csv_row};
use crate::rng::{SeedStream, StreamTag};
use crate::tree::NodeId;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ReorderError {
    #[error("child {child} has {got} samples, expected {expected}")]
    LengthMismatch { child: usize, got: usize, expected: usize },
    #[error("copula sample has {got} columns, node has {expected} children")]
    DimensionMismatch { got: usize, expected: usize },
    #[error("need at least {min} samples, got {got}")]
    TooFewSamples { min: usize, got: usize },
    #[error("children disagree on composition tracking")]
    MixedComposition,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

/// Ranks 1..=n of a sample; ties are broken by position so the result is
/// always a permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector(Vec<usize>);

impl RankVector {
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `inverse()[r - 1]` is the position holding rank `r`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.0.len()];
        for (k, &r) in self.0.iter().enumerate() {
            inv[r - 1] = k;
        }
        inv
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        for &r in &self.0 {
            if r == 0 || r > seen.len() || seen[r - 1] {
                return false;
            }
            seen[r - 1] = true;
        }
        true
    }
}

/// Positions sorted by value, ties by position.
pub fn sort_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_unstable_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

pub fn ranks(values: &[f64]) -> RankVector {
    let order = sort_order(values);
    let mut r = vec![0; values.len()];
    for (pos, &k) in order.iter().enumerate() {
        r[k] = pos + 1;
    }
    RankVector(r)
}

/// Reordered samples at one node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeAtoms {
    pub node: NodeId,
    /// Samples of the node sum.
    pub sums: Vec<f64>,
    /// `n × N_I` child components of each atom; `None` at leaves.
    pub components: Option<DMatrix<f64>>,
    /// `n × M_I` leaf values behind each atom, columns in `leaf_ids` order.
    pub composition: Option<DMatrix<f64>>,
    pub leaf_ids: Vec<NodeId>,
}

impl NodeAtoms {
    pub fn leaf(node: NodeId, samples: Vec<f64>, track_composition: bool) -> Self {
        let composition = track_composition.then(|| DMatrix::from_column_slice(samples.len(), 1, &samples));
        Self {
            leaf_ids: vec![node.clone()],
            node,
            sums: samples,
            components: None,
            composition,
        }
    }

    pub fn len(&self) -> usize {
        self.sums.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sums.is_empty()
    }

    /// Atom rows: child components at branching nodes, the value itself at
    /// leaves.
    pub fn atom(&self, k: usize) -> Vec<f64> {
        match &self.components {
            Some(c) => c.row(k).iter().copied().collect(),
            None => vec![self.sums[k]],
        }
    }

    pub fn sample_block(&self) -> Option<SampleBlock> {
        self.composition.as_ref().map(|c| SampleBlock {
            leaves: self.leaf_ids.clone(),
            data: c.clone(),
        })
    }
}

fn check_inputs(children: &[&NodeAtoms], u: &DMatrix<f64>) -> Result<usize, ReorderError> {
    let n = u.nrows();
    if u.ncols() != children.len() {
        return Err(ReorderError::DimensionMismatch {
            got: u.ncols(),
            expected: children.len(),
        });
    }
    for (i, c) in children.iter().enumerate() {
        if c.len() != n {
            return Err(ReorderError::LengthMismatch {
                child: i,
                got: c.len(),
                expected: n,
            });
        }
    }
    let tracked = children.iter().filter(|c| c.composition.is_some()).count();
    if tracked != 0 && tracked != children.len() {
        return Err(ReorderError::MixedComposition);
    }
    Ok(n)
}

/// Builds a parent node from child rows `src[k][i]` (the sample of child `i`
/// used in atom `k`).
fn assemble(node: NodeId, children: &[&NodeAtoms], src: &[Vec<usize>]) -> NodeAtoms {
    let n = src.len();
    let nc = children.len();
    let mut components = DMatrix::zeros(n, nc);
    for (k, row) in src.iter().enumerate() {
        for (i, &s) in row.iter().enumerate() {
            components[(k, i)] = children[i].sums[s];
        }
    }
    let sums = (0..n).map(|k| components.row(k).sum()).collect();
    let leaf_ids: Vec<NodeId> = children.iter().flat_map(|c| c.leaf_ids.iter().cloned()).collect();
    let composition = if children.iter().all(|c| c.composition.is_some()) {
        let m = leaf_ids.len();
        let mut comp = DMatrix::zeros(n, m);
        let mut off = 0;
        for (i, c) in children.iter().enumerate() {
            let cc = c.composition.as_ref().unwrap();
            for j in 0..cc.ncols() {
                let col = cc.column(j);
                let mut dst = comp.column_mut(off + j);
                for k in 0..n {
                    dst[k] = col[src[k][i]];
                }
            }
            off += cc.ncols();
        }
        Some(comp)
    } else {
        None
    };
    NodeAtoms {
        node,
        sums,
        components: Some(components),
        composition,
        leaf_ids,
    }
}

/// Pairs order statistics of the children according to the copula ranks:
/// atom `k` takes, from child `i`, the order statistic whose rank is the rank
/// of `u[(k, i)]` in column `i`.
pub fn reorder_children(node: NodeId, children: &[&NodeAtoms], u: &DMatrix<f64>) -> Result<NodeAtoms, ReorderError> {
    let n = check_inputs(children, u)?;
    let orders: Vec<Vec<usize>> = children.iter().map(|c| sort_order(&c.sums)).collect();
    let pranks: Vec<RankVector> = (0..children.len())
        .map(|i| ranks(u.column(i).as_slice()))
        .collect();
    let src: Vec<Vec<usize>> = (0..n)
        .map(|k| (0..children.len()).map(|i| orders[i][pranks[i].0[k] - 1]).collect())
        .collect();
    Ok(assemble(node, children, &src))
}

/// Same atoms as [`reorder_children`], listed so that atom `k` keeps the
/// `k`-th sample of the first child in place.
pub fn reorder_fixed_first(node: NodeId, children: &[&NodeAtoms], u: &DMatrix<f64>) -> Result<NodeAtoms, ReorderError> {
    let n = check_inputs(children, u)?;
    if children.is_empty() {
        return Err(ReorderError::DimensionMismatch { got: 0, expected: 1 });
    }
    let orders: Vec<Vec<usize>> = children.iter().map(|c| sort_order(&c.sums)).collect();
    let pranks: Vec<RankVector> = (0..children.len())
        .map(|i| ranks(u.column(i).as_slice()))
        .collect();
    let q1 = ranks(&children[0].sums);
    let p1_inv = pranks[0].inverse();
    let src: Vec<Vec<usize>> = (0..n)
        .map(|k| {
            let m = p1_inv[q1.0[k] - 1];
            (0..children.len()).map(|i| orders[i][pranks[i].0[m] - 1]).collect()
        })
        .collect();
    Ok(assemble(node, children, &src))
}

/// Fraction of atoms that are componentwise ≤ `x`.
pub fn empirical_g(atoms: &NodeAtoms, x: &[f64]) -> f64 {
    if atoms.is_empty() {
        return 0.0;
    }
    let hits = (0..atoms.len())
        .filter(|&k| atoms.atom(k).iter().zip(x).all(|(a, b)| a <= b))
        .count();
    hits as f64 / atoms.len() as f64
}

/// Output of one reordering run.
#[derive(Debug, Clone)]
pub struct ReorderingRun {
    pub atoms: BTreeMap<NodeId, NodeAtoms>,
}

impl ReorderingRun {
    pub fn root(&self) -> &NodeAtoms {
        &self.atoms[&NodeId::root()]
    }
}

/// Runs the reordering algorithm on a whole tree. Leaf samples use the
/// stream keyed by the leaf, copula samples the stream keyed by the node.
pub fn run_reordering(
    model: &AggregationTreeModel,
    n: usize,
    stream: &SeedStream,
    track_composition: bool,
) -> Result<ReorderingRun, ReorderError> {
    model.ensure_valid()?;
    if n < 2 {
        return Err(ReorderError::TooFewSamples { min: 2, got: n });
    }
    let mut atoms: BTreeMap<NodeId, NodeAtoms> = model
        .tree
        .leaves()
        .par_iter()
        .map(|leaf| {
            let s = stream.for_node(StreamTag::Marginal, leaf);
            (leaf.clone(), NodeAtoms::leaf(leaf.clone(), model.marginal(leaf).sample(n, &s), track_composition))
        })
        .collect();
    for node in model.tree.branching_bottom_up() {
        let u = model
            .copula(&node)
            .sample(n, &stream.for_node(StreamTag::Copula, &node))?;
        let kids = model.tree.children(&node).expect("node from tree");
        let refs: Vec<&NodeAtoms> = kids.iter().map(|c| &atoms[c]).collect();
        let parent = reorder_children(node.clone(), &refs, &u)?;
        atoms.insert(node, parent);
    }
    Ok(ReorderingRun { atoms })
}

/// `n × d` joint leaf realizations with their column labels.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBlock {
    pub leaves: Vec<NodeId>,
    pub data: DMatrix<f64>,
}

impl SampleBlock {
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let header: Vec<String> = self.leaves.iter().map(ToString::to_string).collect();
        write_csv_header(&mut w, &header)?;
        let mut row = vec![0.0; self.data.ncols()];
        for k in 0..self.data.nrows() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.data[(k, j)];
            }
            write_csv_row(&mut w, None, &row)?;
        }
        Ok(())
    }

    /// Reads a block written by [`SampleBlock::write_csv`].
    pub fn read_csv<R: BufRead>(r: R) -> Result<Self, String> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or("empty input")?
            .map_err(|e| e.to_string())?;
        let leaves = header
            .trim_end()
            .split(',')
            .map(|s| s.trim_matches('"').parse::<NodeId>().map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let mut vals = Vec::new();
        let mut rows = 0;
        for (i, line) in lines.enumerate() {
            let line = line.map_err(|e| e.to_string())?;
            let line = line.trim_end();
            if line.is_empty() {
                continue;
            }
            let before = vals.len();
            for f in line.split(',') {
                vals.push(f.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2))?);
            }
            if vals.len() - before != leaves.len() {
                return Err(format!("line {}: expected {} fields", i + 2, leaves.len()));
            }
            rows += 1;
        }
        Ok(Self {
            data: DMatrix::from_row_slice(rows, leaves.len(), &vals),
            leaves,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(id: &str, v: &[f64]) -> NodeAtoms {
        NodeAtoms::leaf(id.parse().unwrap(), v.to_vec(), true)
    }

    /// Worked n = 3 instance: X1 = (1, 4, 2), X2 = (9, 0, 3), copula rows
    /// (0.6, 0.8), (0.3, 0.7), (0.5, 0.1).
    fn worked() -> (NodeAtoms, NodeAtoms, DMatrix<f64>) {
        (
            leaf("1", &[1.0, 4.0, 2.0]),
            leaf("2", &[9.0, 0.0, 3.0]),
            DMatrix::from_row_slice(3, 2, &[0.6, 0.8, 0.3, 0.7, 0.5, 0.1]),
        )
    }

    fn rows(a: &NodeAtoms) -> Vec<Vec<f64>> {
        (0..a.len()).map(|k| a.atom(k)).collect()
    }

    #[test]
    fn rank_examples() {
        assert_eq!(ranks(&[0.6, 0.3, 0.5]).as_slice(), &[3, 1, 2]);
        assert_eq!(ranks(&[9.0, 0.0, 3.0]).as_slice(), &[3, 1, 2]);
        assert_eq!(ranks(&[5.0, 5.0, 5.0]).as_slice(), &[1, 2, 3]);
        assert_eq!(ranks(&[0.6, 0.3, 0.5]).inverse(), vec![1, 2, 0]);
    }

    #[test]
    fn worked_instance_both_orders() {
        let (a, b, u) = worked();
        let r1 = reorder_children(NodeId::root(), &[&a, &b], &u).unwrap();
        assert_eq!(rows(&r1), vec![vec![4.0, 9.0], vec![1.0, 3.0], vec![2.0, 0.0]]);
        let r2 = reorder_fixed_first(NodeId::root(), &[&a, &b], &u).unwrap();
        assert_eq!(rows(&r2), vec![vec![1.0, 3.0], vec![4.0, 9.0], vec![2.0, 0.0]]);
        assert_eq!(r1.sums, vec![13.0, 4.0, 2.0]);
        assert_eq!(r2.composition.unwrap().row(0).iter().copied().collect::<Vec<_>>(), vec![1.0, 3.0]);
    }

    #[test]
    fn identity_ranks_pair_sorted_values() {
        let a = leaf("1", &[3.0, 1.0, 2.0]);
        let b = leaf("2", &[30.0, 20.0, 10.0]);
        let u = DMatrix::from_row_slice(3, 2, &[0.1, 0.1, 0.2, 0.2, 0.3, 0.3]);
        let r = reorder_children(NodeId::root(), &[&a, &b], &u).unwrap();
        assert_eq!(rows(&r), vec![vec![1.0, 10.0], vec![2.0, 20.0], vec![3.0, 30.0]]);
    }

    #[test]
    fn identical_children_identity_ranks_keep_order() {
        let a = leaf("1", &[3.0, 1.0, 2.0]);
        let b = leaf("2", &[3.0, 1.0, 2.0]);
        let u = DMatrix::from_row_slice(3, 2, &[0.1, 0.1, 0.2, 0.2, 0.3, 0.3]);
        let r = reorder_fixed_first(NodeId::root(), &[&a, &b], &u).unwrap();
        assert_eq!(rows(&r), vec![vec![3.0, 3.0], vec![1.0, 1.0], vec![2.0, 2.0]]);
    }

    #[test]
    fn single_sample() {
        let a = leaf("1", &[7.0]);
        let b = leaf("2", &[-1.0]);
        let u = DMatrix::from_row_slice(1, 2, &[0.9, 0.2]);
        let r1 = reorder_children(NodeId::root(), &[&a, &b], &u).unwrap();
        let r2 = reorder_fixed_first(NodeId::root(), &[&a, &b], &u).unwrap();
        assert_eq!(rows(&r1), vec![vec![7.0, -1.0]]);
        assert_eq!(rows(&r1), rows(&r2));
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = leaf("1", &[1.0, 2.0]);
        let b = leaf("2", &[1.0, 2.0, 3.0]);
        let u = DMatrix::from_row_slice(2, 2, &[0.1, 0.2, 0.3, 0.4]);
        assert!(matches!(
            reorder_children(NodeId::root(), &[&a, &b], &u),
            Err(ReorderError::LengthMismatch { child: 1, .. })
        ));
    }

    #[test]
    fn empirical_g_examples() {
        let (a, b, u) = worked();
        let r = reorder_children(NodeId::root(), &[&a, &b], &u).unwrap();
        assert_eq!(empirical_g(&r, &[f64::INFINITY, f64::INFINITY]), 1.0);
        assert_eq!(empirical_g(&r, &[0.0, -1.0]), 0.0);
        // (1,3) and (2,0) are both componentwise <= (2,3).
        assert!((empirical_g(&r, &[2.0, 3.0]) - 2.0 / 3.0).abs() < 1e-15);
        assert!((empirical_g(&r, &[2.0, 2.0]) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn csv_round_trip() {
        let (a, b, u) = worked();
        let r = reorder_children(NodeId::root(), &[&a, &b], &u).unwrap();
        let block = r.sample_block().unwrap();
        let mut buf = Vec::new();
        block.write_csv(&mut buf).unwrap();
        let back = SampleBlock::read_csv(&buf[..]).unwrap();
        assert_eq!(back, block);
    }
}
