//! Second-moment analytics: the tree-dependent covariance of the leaf vector
//! and the closed-form range of the free correlation in three-leaf trees.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{min_eigenvalue, LinalgError};
use crate::model::AggregationTreeModel;
use crate::output::{write_csv_header, write_csv_row};
use crate::tree::{NodeId, RootedTree};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaussError {
    #[error("model is not Gaussian: {0}")]
    NotGaussian(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("ellipse is degenerate when |rho12| = 1")]
    DegenerateEllipse,
    #[error("correlation {value} lies outside the feasible interval [{min}, {max}] (distance {distance:e})")]
    Infeasible {
        value: f64,
        min: f64,
        max: f64,
        distance: f64,
    },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Leaf variances plus node correlation matrices: everything that fixes the
/// covariance structure shared by all mildly tree dependent laws.
#[derive(Debug, Clone, PartialEq)]
pub struct SecondMoments {
    pub tree: RootedTree,
    pub variances: BTreeMap<NodeId, f64>,
    pub correlations: BTreeMap<NodeId, DMatrix<f64>>,
}

impl SecondMoments {
    pub fn from_model(model: &AggregationTreeModel) -> Self {
        Self {
            tree: model.tree.clone(),
            variances: model
                .marginals
                .iter()
                .map(|(k, m)| (k.clone(), m.variance()))
                .collect(),
            correlations: model
                .copulas
                .iter()
                .map(|(k, c)| (k.clone(), c.correlation_matrix()))
                .collect(),
        }
    }

    /// Same correlation `rho` at every branching node, all leaf variances 1.
    pub fn uniform(tree: RootedTree, rho: f64) -> Self {
        let variances = tree.leaves().iter().map(|l| (l.clone(), 1.0)).collect();
        let correlations = tree
            .branching()
            .iter()
            .map(|b| {
                let n = tree.num_children(b).unwrap();
                let r = DMatrix::from_fn(n, n, |i, j| if i == j { 1.0 } else { rho });
                (b.clone(), r)
            })
            .collect();
        Self {
            tree,
            variances,
            correlations,
        }
    }

    /// `Var(S_I)` for every node, computed bottom-up.
    pub fn sum_variances(&self) -> BTreeMap<NodeId, f64> {
        let mut out: BTreeMap<NodeId, f64> = self.variances.clone();
        for node in self.tree.branching_bottom_up() {
            let children = self.tree.children(&node).unwrap();
            let sd: Vec<f64> = children.iter().map(|c| out[c].max(0.0).sqrt()).collect();
            let r = &self.correlations[&node];
            let mut v = 0.0;
            for i in 0..sd.len() {
                for j in 0..sd.len() {
                    v += r[(i, j)] * sd[i] * sd[j];
                }
            }
            out.insert(node, v.max(0.0));
        }
        out
    }

    /// Covariance of the leaf vector under conditional independence given
    /// each node sum, in lexicographic leaf order.
    pub fn tree_dependent_covariance(&self) -> DMatrix<f64> {
        self.block(&NodeId::root())
    }

    fn block(&self, node: &NodeId) -> DMatrix<f64> {
        let children = self.tree.children(node).unwrap();
        if children.is_empty() {
            return DMatrix::from_element(1, 1, self.variances[node]);
        }
        let blocks: Vec<DMatrix<f64>> = children.iter().map(|c| self.block(c)).collect();
        // Cov(X_a, S_i) for leaves a below child i, and Var(S_i).
        let covs: Vec<DVector<f64>> = blocks.iter().map(|b| b.column_sum()).collect();
        let vars: Vec<f64> = covs.iter().map(|c| c.sum()).collect();
        let r = &self.correlations[node];
        let m: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut out = DMatrix::zeros(m, m);
        let offsets: Vec<usize> = blocks
            .iter()
            .scan(0, |acc, b| {
                let o = *acc;
                *acc += b.nrows();
                Some(o)
            })
            .collect();
        for i in 0..blocks.len() {
            let (oi, ni) = (offsets[i], blocks[i].nrows());
            out.view_mut((oi, oi), (ni, ni)).copy_from(&blocks[i]);
            for j in (i + 1)..blocks.len() {
                let (oj, nj) = (offsets[j], blocks[j].nrows());
                let (vi, vj) = (vars[i], vars[j]);
                if vi <= 1e-300 || vj <= 1e-300 {
                    continue;
                }
                let cov_sums = r[(i, j)] * vi.sqrt() * vj.sqrt();
                let scale = cov_sums / (vi * vj);
                for a in 0..ni {
                    for b in 0..nj {
                        let v = covs[i][a] * covs[j][b] * scale;
                        out[(oi + a, oj + b)] = v;
                        out[(oj + b, oi + a)] = v;
                    }
                }
            }
        }
        out
    }
}

/// Mean and covariance of the tree dependent leaf vector of a Gaussian model.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianTreeLaw {
    pub leaves: Vec<NodeId>,
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

pub fn tree_dependent_law(model: &AggregationTreeModel) -> Result<GaussianTreeLaw, GaussError> {
    if !model.is_gaussian() {
        return Err(GaussError::NotGaussian(
            "all marginals must be normal and all copulas Gaussian".into(),
        ));
    }
    let leaves = model.tree.leaves().to_vec();
    let mean = DVector::from_iterator(leaves.len(), leaves.iter().map(|l| model.marginal(l).mean()));
    let covariance = SecondMoments::from_model(model).tree_dependent_covariance();
    Ok(GaussianTreeLaw {
        leaves,
        mean,
        covariance,
    })
}

impl GaussianTreeLaw {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut header = vec!["row".to_string(), "mean".to_string()];
        header.extend(self.leaves.iter().map(ToString::to_string));
        write_csv_header(&mut w, &header)?;
        for (i, leaf) in self.leaves.iter().enumerate() {
            let mut vals = vec![self.mean[i]];
            vals.extend(self.covariance.row(i).iter().copied());
            write_csv_row(&mut w, Some(&leaf.to_string()), &vals)?;
        }
        Ok(())
    }
}

/// Range of attainable values of a correlation together with its value
/// under tree dependence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationInterval {
    pub min: f64,
    pub mid: f64,
    pub half_length: f64,
    pub max: f64,
    pub tree_dep: f64,
    /// Set when the first two leaves cancel exactly and the interval comes
    /// from an eigenvalue scan instead of the closed form.
    pub degenerate: bool,
}

/// Parameters of a three-leaf Gaussian tree: leaves 1 and 2 are siblings
/// with correlation `rho12`, their sum is linked to leaf 3 with `rho_root`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThreeLeaf {
    pub sd: [f64; 3],
    pub rho12: f64,
    pub rho_root: f64,
}

impl ThreeLeaf {
    pub fn new(sd: [f64; 3], rho12: f64, rho_root: f64) -> Result<Self, GaussError> {
        if sd.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(GaussError::InvalidParameter(format!("standard deviations must be positive, got {sd:?}")));
        }
        for (name, r) in [("rho12", rho12), ("rho_root", rho_root)] {
            if !(-1.0..=1.0).contains(&r) {
                return Err(GaussError::InvalidParameter(format!("{name} = {r} outside [-1, 1]")));
            }
        }
        Ok(Self { sd, rho12, rho_root })
    }

    /// Standard deviation of the sum of leaves 1 and 2.
    pub fn sum_sd(&self) -> f64 {
        let [s1, s2, _] = self.sd;
        (s1 * s1 + s2 * s2 + 2.0 * self.rho12 * s1 * s2).max(0.0).sqrt()
    }

    /// Covariance matrix with `corr(X1, X3) = rho13` and `Cov(X2, X3)` fixed
    /// by the aggregate constraint. Not checked for feasibility.
    pub fn covariance_unchecked(&self, rho13: f64) -> DMatrix<f64> {
        let [s1, s2, s3] = self.sd;
        let c13 = rho13 * s1 * s3;
        let c23 = self.rho_root * self.sum_sd() * s3 - c13;
        let c12 = self.rho12 * s1 * s2;
        DMatrix::from_row_slice(3, 3, &[s1 * s1, c12, c13, c12, s2 * s2, c23, c13, c23, s3 * s3])
    }

    fn psd_ok(&self, rho13: f64) -> bool {
        let c = self.covariance_unchecked(rho13);
        let scale = self.sd.iter().map(|s| s * s).fold(0.0, f64::max);
        min_eigenvalue(&c) >= -1e-9 * scale.max(1.0)
    }

    /// Bisection for the end of the feasible set starting from a feasible
    /// `centre` and heading towards `limit`.
    fn scan_edge(&self, centre: f64, limit: f64) -> f64 {
        if self.psd_ok(limit) {
            return limit;
        }
        let (mut ok, mut bad) = (centre, limit);
        for _ in 0..200 {
            let m = 0.5 * (ok + bad);
            if self.psd_ok(m) {
                ok = m;
            } else {
                bad = m;
            }
            if (bad - ok).abs() < 1e-13 {
                break;
            }
        }
        ok
    }
}

/// Closed-form interval of `corr(X1, X3)` over all mildly tree dependent
/// covariances of a three-leaf tree. The tree-dependent value is the
/// midpoint.
pub fn rho13_interval(p: &ThreeLeaf) -> CorrelationInterval {
    let [s1, s2, _] = p.sd;
    let d = p.sum_sd();
    let scale = s1.max(s2);
    if d <= 1e-12 * scale {
        // X1 + X2 is constant: the root constraint only says Cov(X1+X2, X3)
        // = 0, and the range is whatever keeps the matrix PSD.
        let max = p.scan_edge(0.0, 1.0);
        let min = p.scan_edge(0.0, -1.0);
        return CorrelationInterval {
            min,
            mid: 0.5 * (min + max),
            half_length: 0.5 * (max - min),
            max,
            tree_dep: 0.0,
            degenerate: true,
        };
    }
    let mid = p.rho_root * (p.rho12 * s2 + s1) / d;
    let rad = s2 * s2 * (1.0 - p.rho12 * p.rho12) * (1.0 - p.rho_root * p.rho_root);
    let half = if rad < 0.0 { 0.0 } else { rad.sqrt() / d };
    CorrelationInterval {
        min: mid - half,
        mid,
        half_length: half,
        max: mid + half,
        tree_dep: mid,
        degenerate: false,
    }
}

/// Covariance of a mildly tree dependent law with the given `corr(X1, X3)`.
pub fn mildly_covariance(p: &ThreeLeaf, rho13: f64) -> Result<DMatrix<f64>, GaussError> {
    let iv = rho13_interval(p);
    let tol = 1e-12;
    if rho13 < iv.min - tol || rho13 > iv.max + tol {
        let distance = (iv.min - rho13).max(rho13 - iv.max);
        return Err(GaussError::Infeasible {
            value: rho13,
            min: iv.min,
            max: iv.max,
            distance,
        });
    }
    let c = p.covariance_unchecked(rho13);
    let scale = p.sd.iter().map(|s| s * s).fold(1.0, f64::max);
    let lam = min_eigenvalue(&c);
    if lam < -1e-9 * scale {
        return Err(GaussError::Linalg(LinalgError::NotPsd { pivot: 0, value: lam }));
    }
    Ok(c)
}

/// Centre and semi-axes of the ellipse traced by the last Cholesky row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EllipseParameters {
    pub u: f64,
    pub v: f64,
    pub x0: f64,
    pub a: f64,
    pub b: f64,
}

impl EllipseParameters {
    /// Endpoints of the `corr(X1, X3)` range implied by the ellipse.
    pub fn endpoints(&self, p: &ThreeLeaf) -> (f64, f64) {
        let [s1, _, s3] = p.sd;
        (s1 * (self.x0 - self.a) / (s1 * s3), s1 * (self.x0 + self.a) / (s1 * s3))
    }
}

pub fn ellipse_parameters(p: &ThreeLeaf) -> Result<EllipseParameters, GaussError> {
    if p.rho12.abs() >= 1.0 {
        return Err(GaussError::DegenerateEllipse);
    }
    let [s1, s2, s3] = p.sd;
    let l11 = s1;
    let l21 = p.rho12 * s2;
    let l22 = s2 * (1.0 - p.rho12 * p.rho12).sqrt();
    // Cov(X1 + X2, X3) = rho_root * sd(X1 + X2) * sd(X3).
    let u = p.rho_root * p.sum_sd() * s3 / l22;
    let v = (l11 + l21) / l22;
    let w = 1.0 + v * v;
    let x0 = u * v / w;
    let a = ((s3 * s3 - u * u) / w + x0 * x0).max(0.0).sqrt();
    let b = (s3 * s3 - u * u + (u * v) * (u * v) / w).max(0.0).sqrt();
    Ok(EllipseParameters { u, v, x0, a, b })
}

/// Intervals over a `(rho12, rho_root)` grid.
pub fn interval_grid(sd: [f64; 3], rho12s: &[f64], roots: &[f64]) -> Result<Vec<(f64, f64, CorrelationInterval)>, GaussError> {
    let mut out = Vec::with_capacity(rho12s.len() * roots.len());
    for &r12 in rho12s {
        for &r0 in roots {
            out.push((r12, r0, rho13_interval(&ThreeLeaf::new(sd, r12, r0)?)));
        }
    }
    Ok(out)
}

pub fn write_interval_grid_csv<W: Write>(mut w: W, rows: &[(f64, f64, CorrelationInterval)]) -> std::io::Result<()> {
    write_csv_header(&mut w, &["rho12", "rho_root", "min", "mid", "max", "tree_dep"])?;
    for (r12, r0, iv) in rows {
        write_csv_row(&mut w, None, &[*r12, *r0, iv.min, iv.mid, iv.max, iv.tree_dep])?;
    }
    Ok(())
}
