//! Covariances compatible with a tree specification: the linear constraints
//! every mildly tree dependent law satisfies, PSD feasibility, and extremal
//! values of a single correlation found by bisection with alternating
//! projections.

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rayon::prelude::*;
use thiserror::Error;

use crate::gaussian::SecondMoments;
use crate::linalg::{min_eigenvalue, project_psd};
use crate::output::{fmt_f64, write_csv_fields, write_csv_header};
use crate::tree::{NodeId, RootedTree, TreeShape};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeasibleError {
    #[error("entry ({0},{1}) is not an off-diagonal entry of a {2}x{2} matrix")]
    BadEntry(usize, usize, usize),
    #[error("no objective entry selected")]
    NoObjective,
    #[error("inconsistent fixed entry ({0},{1}): {2} vs {3}")]
    Inconsistent(usize, usize, f64, f64),
    #[error("missing second-moment input for node {0}")]
    Missing(NodeId),
    #[error("the tree-dependent covariance is not PSD (min eigenvalue {0:e})")]
    StartNotFeasible(f64),
}

/// One aggregate constraint: the entries `(a, b)`, `a < b`, between the
/// leaves of two sibling subtrees sum to `rhs`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSum {
    pub node: NodeId,
    pub children: (usize, usize),
    pub entries: Vec<(usize, usize)>,
    pub rhs: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceConstraintSet {
    pub leaves: Vec<NodeId>,
    /// Diagonal entries and covariances between sibling leaves, keyed with
    /// `i ≤ j`.
    pub fixed: BTreeMap<(usize, usize), f64>,
    pub sums: Vec<LinearSum>,
    pub objective: Option<(usize, usize)>,
    /// Tree-dependent covariance, which satisfies every constraint.
    pub start: DMatrix<f64>,
}

fn ordered(i: usize, j: usize) -> (usize, usize) {
    if i <= j {
        (i, j)
    } else {
        (j, i)
    }
}

/// Constraints shared by all mildly tree dependent covariances.
pub fn build_constraints(sm: &SecondMoments) -> Result<CovarianceConstraintSet, FeasibleError> {
    let tree = &sm.tree;
    let leaves = tree.leaves().to_vec();
    for l in &leaves {
        if !sm.variances.contains_key(l) {
            return Err(FeasibleError::Missing(l.clone()));
        }
    }
    for b in tree.branching() {
        if !sm.correlations.contains_key(b) {
            return Err(FeasibleError::Missing(b.clone()));
        }
    }
    let var = sm.sum_variances();
    let mut fixed = BTreeMap::new();
    for (i, l) in leaves.iter().enumerate() {
        fixed.insert((i, i), sm.variances[l]);
    }
    let mut sums = Vec::new();
    for node in tree.branching() {
        let kids = tree.children(node).expect("node from tree");
        let r = &sm.correlations[node];
        for ci in 0..kids.len() {
            for cj in (ci + 1)..kids.len() {
                let rhs = r[(ci, cj)] * var[&kids[ci]].sqrt() * var[&kids[cj]].sqrt();
                let la: Vec<usize> = tree.leaf_descendants(&kids[ci]).unwrap().iter().map(|l| tree.leaf_index(l).unwrap()).collect();
                let lb: Vec<usize> = tree.leaf_descendants(&kids[cj]).unwrap().iter().map(|l| tree.leaf_index(l).unwrap()).collect();
                let entries: Vec<(usize, usize)> = la.iter().flat_map(|&a| lb.iter().map(move |&b| ordered(a, b))).collect();
                if entries.len() == 1 {
                    let e = entries[0];
                    if let Some(&old) = fixed.get(&e) {
                        if (old - rhs).abs() > 1e-12 {
                            return Err(FeasibleError::Inconsistent(e.0, e.1, old, rhs));
                        }
                    }
                    fixed.insert(e, rhs);
                } else {
                    sums.push(LinearSum {
                        node: node.clone(),
                        children: (ci + 1, cj + 1),
                        entries,
                        rhs,
                    });
                }
            }
        }
    }
    Ok(CovarianceConstraintSet {
        leaves,
        fixed,
        sums,
        objective: None,
        start: sm.tree_dependent_covariance(),
    })
}

/// Result of a PSD check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub min_eigenvalue: f64,
}

/// PSD check of a candidate covariance (`λ_min ≥ −1e−9`).
pub fn psd_feasible(candidate: &DMatrix<f64>) -> FeasibilityReport {
    let lam = min_eigenvalue(candidate);
    FeasibilityReport {
        feasible: lam >= -1e-9,
        min_eigenvalue: lam,
    }
}

impl CovarianceConstraintSet {
    pub fn dim(&self) -> usize {
        self.leaves.len()
    }

    pub fn with_objective(mut self, i: usize, j: usize) -> Result<Self, FeasibleError> {
        let d = self.dim();
        if i == j || i >= d || j >= d {
            return Err(FeasibleError::BadEntry(i, j, d));
        }
        self.objective = Some(ordered(i, j));
        Ok(self)
    }

    pub fn sd(&self, i: usize) -> f64 {
        self.fixed[&(i, i)].sqrt()
    }

    /// Number of free off-diagonal entries, after the sum constraints.
    pub fn free_dimension(&self) -> usize {
        self.sums.iter().map(|s| s.entries.len() - 1).sum()
    }

    /// Largest violation of the fixed entries and sum constraints.
    pub fn constraint_residual(&self, m: &DMatrix<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for (&(i, j), &v) in &self.fixed {
            worst = worst.max((m[(i, j)] - v).abs()).max((m[(j, i)] - v).abs());
        }
        for s in &self.sums {
            let tot: f64 = s.entries.iter().map(|&(a, b)| m[(a, b)]).sum();
            worst = worst.max((tot - s.rhs).abs());
        }
        worst
    }

    /// Euclidean projection onto the affine set, with the objective entry
    /// pinned to `pin` when given.
    fn project_affine(&self, m: &mut DMatrix<f64>, pin: Option<((usize, usize), f64)>) {
        for (&(i, j), &v) in &self.fixed {
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
        for s in &self.sums {
            let pinned = pin.filter(|(e, _)| s.entries.contains(e));
            let mut total = 0.0;
            let mut count = 0usize;
            for &e in &s.entries {
                if let Some((pe, pv)) = pinned {
                    if e == pe {
                        m[(e.0, e.1)] = pv;
                        m[(e.1, e.0)] = pv;
                        continue;
                    }
                }
                total += m[(e.0, e.1)];
                count += 1;
            }
            let target = s.rhs - pinned.map_or(0.0, |(_, v)| v);
            if count == 0 {
                continue;
            }
            let corr = (target - total) / count as f64;
            for &e in &s.entries {
                if pinned.is_some_and(|(pe, _)| pe == e) {
                    continue;
                }
                let v = m[(e.0, e.1)] + corr;
                m[(e.0, e.1)] = v;
                m[(e.1, e.0)] = v;
            }
        }
    }

    /// Sum group containing `e`, if any.
    fn group_of(&self, e: (usize, usize)) -> Option<&LinearSum> {
        self.sums.iter().find(|s| s.entries.contains(&e))
    }
}

/// Outcome of an extremal search.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    BudgetExhausted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Max,
    Min,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Log-barrier path following over the free entries, falling back to
    /// bisection when the constraint set has no interior point.
    Barrier,
    /// Bisection on the objective entry, each pin tested by alternating
    /// projections.
    Bisection,
}

/// Knobs of the extremal search. The defaults are the documented ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub method: Method,
    /// Stop when the bisection bracket or the barrier duality gap is this
    /// narrow, in correlation units.
    pub bracket_tol: f64,
    /// A pin is feasible when the distance between the projections drops
    /// below this, relative to the largest variance.
    pub residual_tol: f64,
    /// Projection steps allowed per pin, and Newton steps allowed overall.
    pub max_steps: usize,
    /// A pin is infeasible when the residual has not dropped by at least
    /// `stall_ratio` over `stall_window` steps.
    pub stall_window: usize,
    pub stall_ratio: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            method: Method::Barrier,
            bracket_tol: 1e-6,
            residual_tol: 1e-8,
            max_steps: 50_000,
            stall_window: 2000,
            stall_ratio: 0.999,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtremalResult {
    /// Extremal correlation of the objective pair.
    pub value: f64,
    /// Feasible covariance attaining `value` (up to the bracket).
    pub witness: DMatrix<f64>,
    pub status: SolveStatus,
    /// Final bracket in correlation units: `(attained, bound)` for the
    /// barrier, `(feasible, infeasible)` for bisection.
    pub bracket: (f64, f64),
    pub method: Method,
    /// Newton or projection steps.
    pub steps: usize,
    /// Human-readable description of the termination rule.
    pub stall_rule: String,
}

enum PinOutcome {
    Feasible(DMatrix<f64>),
    Infeasible,
    Exhausted,
}

fn scale_of(set: &CovarianceConstraintSet) -> f64 {
    set.fixed.iter().filter(|((i, j), _)| i == j).map(|(_, v)| v.abs()).fold(1.0, f64::max)
}

/// Alternating projections between the pinned affine set and the PSD cone,
/// with Dykstra's correction on the cone step.
fn test_pin(
    set: &CovarianceConstraintSet,
    e: (usize, usize),
    value: f64,
    warm: &DMatrix<f64>,
    opts: &SolverOptions,
    steps: &mut usize,
) -> PinOutcome {
    let scale = scale_of(set);
    let tol = opts.residual_tol * scale;
    let mut x = warm.clone();
    set.project_affine(&mut x, Some((e, value)));
    let pinned_point = set.group_of(e).is_none_or(|g| g.entries.len() <= 2) && set.free_dimension() <= 1;
    if pinned_point {
        // The pinned affine set is a single matrix.
        *steps += 1;
        return if min_eigenvalue(&x) >= -tol {
            PinOutcome::Feasible(x)
        } else {
            PinOutcome::Infeasible
        };
    }
    let d = set.dim();
    let mut q = DMatrix::<f64>::zeros(d, d);
    let mut history: Vec<f64> = Vec::with_capacity(opts.max_steps / opts.stall_window + 2);
    for it in 0..opts.max_steps {
        *steps += 1;
        let y = &x + &q;
        let z = project_psd(&y);
        q = y - &z;
        let mut a = z.clone();
        set.project_affine(&mut a, Some((e, value)));
        let residual = (&a - &z).norm();
        if residual <= tol {
            let lam = min_eigenvalue(&a);
            if lam >= -1e-7 * scale {
                return PinOutcome::Feasible(a);
            }
        }
        if it % opts.stall_window == 0 {
            if let Some(&prev) = history.last() {
                if residual > tol && residual > opts.stall_ratio * prev {
                    return PinOutcome::Infeasible;
                }
            }
            history.push(residual);
        }
        x = a;
    }
    PinOutcome::Exhausted
}

fn bisection(set: &CovarianceConstraintSet, e: (usize, usize), sign: f64, opts: &SolverOptions) -> ExtremalResult {
    let norm = set.sd(e.0) * set.sd(e.1);
    let stall_rule = format!(
        "bisection; pin infeasible when residual > {} x its value {} steps earlier; feasible at residual <= {:e}; {} steps per pin",
        opts.stall_ratio, opts.stall_window, opts.residual_tol, opts.max_steps
    );
    let mut steps = 0;
    let mut witness = set.start.clone();
    let mut lo = set.start[(e.0, e.1)] / norm;
    let mut hi = sign;
    let mut status = SolveStatus::Optimal;
    // The bound itself is often attainable.
    match test_pin(set, e, hi * norm, &witness, opts, &mut steps) {
        PinOutcome::Feasible(w) => {
            return ExtremalResult {
                value: hi,
                witness: w,
                status,
                bracket: (hi, hi),
                method: Method::Bisection,
                steps,
                stall_rule,
            }
        }
        PinOutcome::Exhausted => status = SolveStatus::BudgetExhausted,
        PinOutcome::Infeasible => {}
    }
    while (hi - lo).abs() > opts.bracket_tol {
        let mid = 0.5 * (lo + hi);
        match test_pin(set, e, mid * norm, &witness, opts, &mut steps) {
            PinOutcome::Feasible(w) => {
                lo = mid;
                witness = w;
            }
            PinOutcome::Infeasible => hi = mid,
            PinOutcome::Exhausted => {
                status = SolveStatus::BudgetExhausted;
                hi = mid;
            }
        }
    }
    ExtremalResult {
        value: lo,
        witness,
        status,
        bracket: (lo, hi),
        method: Method::Bisection,
        steps,
        stall_rule,
    }
}

/// Affine family `A0 + Σ z_k C_k` of symmetric matrices.
struct AffineFamily {
    a0: DMatrix<f64>,
    dirs: Vec<DMatrix<f64>>,
}

impl AffineFamily {
    fn at(&self, z: &[f64]) -> DMatrix<f64> {
        let mut x = self.a0.clone();
        for (c, &zk) in self.dirs.iter().zip(z) {
            if zk != 0.0 {
                x += c * zk;
            }
        }
        x
    }
}

enum BarrierStop {
    Converged,
    Early,
    Budget,
    Stuck,
}

/// Maximizes `w·z` over `{z : A(z) ≻ 0}` from a strictly feasible `z`,
/// stopping early once `early(z)` holds. Returns the duality gap of the
/// last completed centering.
fn barrier_maximize(
    fam: &AffineFamily,
    w: &[f64],
    z: &mut [f64],
    gap_tol: f64,
    max_steps: usize,
    steps: &mut usize,
    early: impl Fn(&[f64]) -> bool,
) -> (BarrierStop, f64) {
    let d = fam.a0.nrows() as f64;
    let p = z.len();
    let mut t = 1.0;
    let mut gap = f64::INFINITY;
    loop {
        // Centering by damped Newton.
        for _ in 0..200 {
            if *steps >= max_steps {
                return (BarrierStop::Budget, gap);
            }
            *steps += 1;
            let x = fam.at(z);
            let Some(ch) = x.clone().cholesky() else {
                return (BarrierStop::Stuck, gap);
            };
            let winv = ch.inverse();
            let m: Vec<DMatrix<f64>> = fam.dirs.iter().map(|c| &winv * c).collect();
            let g = nalgebra::DVector::from_fn(p, |k, _| t * w[k] + m[k].trace());
            let h = DMatrix::from_fn(p, p, |k, l| m[k].component_mul(&m[l].transpose()).sum());
            let Some(hc) = h.clone().cholesky() else {
                return (BarrierStop::Stuck, gap);
            };
            let delta = hc.solve(&g);
            let dec = g.dot(&delta);
            if dec <= 1e-10 {
                break;
            }
            let phi = |zz: &[f64]| -> Option<f64> {
                let xx = fam.at(zz);
                let c = xx.cholesky()?;
                let logdet: f64 = 2.0 * c.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                Some(t * w.iter().zip(zz).map(|(a, b)| a * b).sum::<f64>() + logdet)
            };
            let base = phi(z).unwrap_or(f64::NEG_INFINITY);
            let mut alpha = 1.0;
            let mut moved = false;
            while alpha > 1e-14 {
                let trial: Vec<f64> = z.iter().zip(delta.iter()).map(|(a, b)| a + alpha * b).collect();
                if let Some(v) = phi(&trial) {
                    if v >= base + 0.25 * alpha * dec {
                        z.copy_from_slice(&trial);
                        moved = true;
                        break;
                    }
                }
                alpha *= 0.5;
            }
            if early(z) {
                return (BarrierStop::Early, gap);
            }
            if !moved {
                break;
            }
        }
        gap = d / t;
        if gap <= gap_tol {
            return (BarrierStop::Converged, gap);
        }
        t *= 8.0;
    }
}

/// Free directions of the constraint set: within each sum group, moving
/// mass from the last entry to another one.
fn free_directions(set: &CovarianceConstraintSet) -> Vec<DMatrix<f64>> {
    let d = set.dim();
    let mut dirs = Vec::new();
    for s in &set.sums {
        let (last, rest) = s.entries.split_last().expect("non-empty group");
        for &(a, b) in rest {
            let mut c = DMatrix::<f64>::zeros(d, d);
            c[(a, b)] = 1.0;
            c[(b, a)] = 1.0;
            c[(last.0, last.1)] = -1.0;
            c[(last.1, last.0)] = -1.0;
            dirs.push(c);
        }
    }
    dirs
}

/// Strictly feasible point of the constraint set, if one exists.
fn interior_point(set: &CovarianceConstraintSet, dirs: &[DMatrix<f64>], steps: &mut usize, max_steps: usize) -> Option<DMatrix<f64>> {
    let scale = scale_of(set);
    let lam = min_eigenvalue(&set.start);
    if lam > 1e-9 * scale {
        return Some(set.start.clone());
    }
    let d = set.dim();
    // Maximize s subject to X(y) − s I ≻ 0.
    let mut all = dirs.to_vec();
    all.push(-DMatrix::<f64>::identity(d, d));
    let fam = AffineFamily { a0: set.start.clone(), dirs: all };
    let p = fam.dirs.len();
    let mut z = vec![0.0; p];
    z[p - 1] = lam - 0.1 * scale;
    let mut w = vec![0.0; p];
    w[p - 1] = 1.0;
    let target = 1e-9 * scale;
    barrier_maximize(&fam, &w, &mut z, 1e-13 * scale, max_steps, steps, |zz| zz[p - 1] > target);
    if z[p - 1] > target {
        z[p - 1] = 0.0;
        Some(fam.at(&z))
    } else {
        None
    }
}

fn barrier(set: &CovarianceConstraintSet, e: (usize, usize), sign: f64, opts: &SolverOptions) -> Option<ExtremalResult> {
    let norm = set.sd(e.0) * set.sd(e.1);
    let dirs = free_directions(set);
    let mut steps = 0;
    let a0 = interior_point(set, &dirs, &mut steps, opts.max_steps)?;
    let w: Vec<f64> = dirs.iter().map(|c| sign * c[(e.0, e.1)] / norm).collect();
    let fam = AffineFamily { a0, dirs };
    let mut z = vec![0.0; w.len()];
    let (stop, gap) = barrier_maximize(&fam, &w, &mut z, opts.bracket_tol * 1e-3, opts.max_steps, &mut steps, |_| false);
    let witness = fam.at(&z);
    let value = witness[(e.0, e.1)] / norm;
    let bound = (value + sign * gap).clamp(-1.0, 1.0);
    let status = match stop {
        BarrierStop::Converged => SolveStatus::Optimal,
        BarrierStop::Stuck | BarrierStop::Early if gap <= opts.bracket_tol => SolveStatus::Optimal,
        _ => SolveStatus::BudgetExhausted,
    };
    Some(ExtremalResult {
        value,
        witness,
        status,
        bracket: (value, bound),
        method: Method::Barrier,
        steps,
        stall_rule: format!(
            "log-barrier path following; stop at duality gap <= {:e}; {} Newton steps",
            opts.bracket_tol * 1e-3,
            opts.max_steps
        ),
    })
}

/// Largest or smallest attainable correlation of the objective pair.
pub fn extremal_correlation(
    set: &CovarianceConstraintSet,
    direction: Direction,
    opts: &SolverOptions,
) -> Result<ExtremalResult, FeasibleError> {
    let e = set.objective.ok_or(FeasibleError::NoObjective)?;
    let norm = set.sd(e.0) * set.sd(e.1);
    let lam = min_eigenvalue(&set.start);
    if lam < -1e-9 * norm.max(1.0) {
        return Err(FeasibleError::StartNotFeasible(lam));
    }
    if let Some(&v) = set.fixed.get(&e) {
        return Ok(ExtremalResult {
            value: v / norm,
            witness: set.start.clone(),
            status: SolveStatus::Optimal,
            bracket: (v / norm, v / norm),
            method: opts.method,
            steps: 0,
            stall_rule: "entry fixed by the constraints".into(),
        });
    }
    let sign = match direction {
        Direction::Max => 1.0,
        Direction::Min => -1.0,
    };
    if opts.method == Method::Barrier {
        if let Some(r) = barrier(set, e, sign, opts) {
            return Ok(r);
        }
    }
    Ok(bisection(set, e, sign, opts))
}

/// Tree-dependent correlation of two leaves whose closest common ancestor
/// is `k` levels up in a symmetric binary tree with common correlation `rho`.
pub fn symmetric_tree_dep_corr(k: u32, rho: f64) -> f64 {
    assert!(k >= 1);
    rho * ((1.0 + rho) / 2.0).powi(k as i32 - 1)
}

/// One row of the symmetric-tree grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricGridRow {
    pub rho: f64,
    /// Leaf pair, 1-based positions in leaf order.
    pub pair: (usize, usize),
    pub min: ExtremalResult,
    pub max: ExtremalResult,
    pub tree_dep: f64,
}

/// Extremal intervals for the given leaf pairs of the `2^levels`-leaf
/// symmetric tree over a grid of `rho`.
pub fn symmetric_grid(
    levels: usize,
    rhos: &[f64],
    pairs: &[(usize, usize)],
    opts: &SolverOptions,
) -> Result<Vec<SymmetricGridRow>, FeasibleError> {
    let tree = RootedTree::from_shape(&TreeShape::symmetric_binary(levels));
    let jobs: Vec<(f64, (usize, usize))> = rhos.iter().flat_map(|&r| pairs.iter().map(move |&p| (r, p))).collect();
    jobs.par_iter()
        .map(|&(rho, (a, b))| {
            let sm = SecondMoments::uniform(tree.clone(), rho);
            let set = build_constraints(&sm)?.with_objective(a - 1, b - 1)?;
            let tree_dep = set.start[(a - 1, b - 1)];
            Ok(SymmetricGridRow {
                rho,
                pair: (a, b),
                min: extremal_correlation(&set, Direction::Min, opts)?,
                max: extremal_correlation(&set, Direction::Max, opts)?,
                tree_dep,
            })
        })
        .collect()
}

pub fn write_symmetric_grid_csv<W: Write>(mut w: W, rows: &[SymmetricGridRow]) -> std::io::Result<()> {
    write_csv_header(&mut w, &["rho", "pair", "min", "max", "tree_dep"])?;
    for r in rows {
        write_csv_fields(
            &mut w,
            &[
                fmt_f64(r.rho),
                format!("{}-{}", r.pair.0, r.pair.1),
                fmt_f64(r.min.value),
                fmt_f64(r.max.value),
                fmt_f64(r.tree_dep),
            ],
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{rho13_interval, ThreeLeaf};
    use crate::presets;

    fn three_leaf(r12: f64, r0: f64) -> CovarianceConstraintSet {
        let m = presets::gaussian_three_leaf([1.0, 1.0, 1.0], r12, r0);
        build_constraints(&SecondMoments::from_model(&m)).unwrap()
    }

    #[test]
    fn three_leaf_single_constraint() {
        let set = three_leaf(0.3, 0.5);
        assert_eq!(set.sums.len(), 1);
        let s = &set.sums[0];
        assert_eq!(s.entries, vec![(0, 2), (1, 2)]);
        assert!((s.rhs - 0.5 * (2.0f64 + 0.6).sqrt()).abs() < 1e-15);
        assert_eq!(set.fixed[&(0, 1)], 0.3);
        assert_eq!(set.fixed.len(), 4);
    }

    #[test]
    fn symmetric_eight_leaf_constraints() {
        let rho = 0.4;
        let set = build_constraints(&SecondMoments::uniform(RootedTree::from_shape(&TreeShape::symmetric_binary(3)), rho)).unwrap();
        // 8 variances + 4 sibling covariances fixed.
        assert_eq!(set.fixed.len(), 12);
        assert!(set.fixed.iter().filter(|((i, j), _)| i != j).all(|(_, &v)| v == rho));
        let mid: Vec<&LinearSum> = set.sums.iter().filter(|s| s.entries.len() == 4).collect();
        let root: Vec<&LinearSum> = set.sums.iter().filter(|s| s.entries.len() == 16).collect();
        assert_eq!((mid.len(), root.len(), set.sums.len()), (2, 1, 3));
        for s in mid {
            assert!((s.rhs - rho * 2.0 * (1.0 + rho)).abs() < 1e-14);
        }
        assert!((root[0].rhs - rho * 4.0 * (1.0 + rho).powi(2)).abs() < 1e-13);
        assert_eq!(set.constraint_residual(&set.start), 0.0_f64.max(set.constraint_residual(&set.start)));
        assert!(set.constraint_residual(&set.start) < 1e-12);
    }

    #[test]
    fn single_level_tree_is_fully_fixed() {
        let tree = RootedTree::from_shape(&TreeShape::fan(4));
        let set = build_constraints(&SecondMoments::uniform(tree, 0.2)).unwrap();
        assert!(set.sums.is_empty());
        assert_eq!(set.free_dimension(), 0);
        let r = extremal_correlation(&set.with_objective(0, 3).unwrap(), Direction::Max, &SolverOptions::default()).unwrap();
        assert_eq!(r.value, 0.2);
    }

    #[test]
    fn psd_check_examples() {
        let id = DMatrix::<f64>::identity(3, 3);
        let r = psd_feasible(&id);
        assert!(r.feasible && (r.min_eigenvalue - 1.0).abs() < 1e-15);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 1.2, 1.2, 1.0]);
        let r = psd_feasible(&bad);
        assert!(!r.feasible && (r.min_eigenvalue + 0.2).abs() < 1e-12);
        let p = ThreeLeaf::new([1.0, 1.0, 1.0], 0.2, 0.3).unwrap();
        let iv = rho13_interval(&p);
        assert!(!psd_feasible(&p.covariance_unchecked(iv.max + 1e-3)).feasible);
    }

    #[test]
    fn three_leaf_extremes_match_closed_form() {
        for &(r12, r0) in &[(0.0, 0.0), (-0.45, 0.45), (0.9, -0.9)] {
            let set = three_leaf(r12, r0).with_objective(0, 2).unwrap();
            let iv = rho13_interval(&ThreeLeaf::new([1.0, 1.0, 1.0], r12, r0).unwrap());
            let opts = SolverOptions::default();
            let hi = extremal_correlation(&set, Direction::Max, &opts).unwrap();
            let lo = extremal_correlation(&set, Direction::Min, &opts).unwrap();
            assert!((hi.value - iv.max).abs() < 1e-6, "{r12} {r0}: {} vs {}", hi.value, iv.max);
            assert!((lo.value - iv.min).abs() < 1e-6);
            assert_eq!(hi.status, SolveStatus::Optimal);
        }
    }

    #[test]
    fn barrier_agrees_with_bisection() {
        let tree = RootedTree::from_shape(&TreeShape::symmetric_binary(3));
        let bis = SolverOptions {
            method: Method::Bisection,
            ..SolverOptions::default()
        };
        for &(rho, pair, dir) in &[(0.6, (0, 2), Direction::Min), (0.9, (0, 7), Direction::Min), (0.9, (0, 2), Direction::Min)] {
            let set = build_constraints(&SecondMoments::uniform(tree.clone(), rho)).unwrap().with_objective(pair.0, pair.1).unwrap();
            let a = extremal_correlation(&set, dir, &SolverOptions::default()).unwrap();
            let b = extremal_correlation(&set, dir, &bis).unwrap();
            assert_eq!(a.status, SolveStatus::Optimal);
            assert_eq!(a.method, Method::Barrier);
            assert!((a.value - b.value).abs() < 1e-3, "{rho}: {} vs {}", a.value, b.value);
            assert!(psd_feasible(&a.witness).feasible);
            assert!(set.constraint_residual(&a.witness) < 1e-9);
            assert!((a.witness[pair] - a.value).abs() < 1e-12);
        }
    }

    #[test]
    fn tree_dep_decay() {
        assert_eq!(symmetric_tree_dep_corr(1, 0.3), 0.3);
        assert!((symmetric_tree_dep_corr(2, 0.3) - 0.3 * 1.3 / 2.0).abs() < 1e-15);
        assert!((symmetric_tree_dep_corr(3, 0.3) - 0.3 * 1.69 / 4.0).abs() < 1e-15);
        let mut prev = 1.0;
        for k in 1..=40 {
            let v = symmetric_tree_dep_corr(k, 0.6);
            assert!(v < prev && v > 0.0);
            prev = v;
        }
        assert!(prev < 1e-3);
    }
}
