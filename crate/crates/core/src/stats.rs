//! Empirical CDFs, sample moments, the Henze–Zirkler normality test and a
//! conditional-independence check for discrete samples.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::numeric::{normal_cdf, normal_quantile};
use crate::rng::{SeedStream, StreamTag};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least {need} rows, got {got}")]
    TooFewRows { need: usize, got: usize },
    #[error("sample covariance is singular (rank deficient)")]
    Singular,
    #[error("non-finite value in the sample")]
    NonFinite,
    #[error("coordinate {0} out of range")]
    BadCoordinate(usize),
}

/// Empirical distribution function of a univariate sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Ecdf {
    sorted_values: Vec<f64>,
}

impl Ecdf {
    pub fn new(values: &[f64]) -> Result<Self, StatsError> {
        if values.iter().any(|v| v.is_nan()) {
            return Err(StatsError::NonFinite);
        }
        let mut sorted_values = values.to_vec();
        sorted_values.sort_by(f64::total_cmp);
        Ok(Self { sorted_values })
    }

    pub fn n(&self) -> usize {
        self.sorted_values.len()
    }

    pub fn sorted_values(&self) -> &[f64] {
        &self.sorted_values
    }

    /// Fraction of values `≤ x`.
    pub fn eval(&self, x: f64) -> f64 {
        if self.sorted_values.is_empty() {
            return 0.0;
        }
        self.sorted_values.partition_point(|&v| v <= x) as f64 / self.n() as f64
    }

    /// `sup_x |F_n(x) − F(x)|` for a right-continuous CDF `F`. Left limits
    /// of `F` at the jumps are taken at the next float down.
    pub fn sup_distance(&self, cdf: impl Fn(f64) -> f64) -> f64 {
        let n = self.n() as f64;
        let v = &self.sorted_values;
        let mut worst: f64 = 0.0;
        let mut i = 0;
        while i < v.len() {
            let x = v[i];
            let mut j = i;
            while j < v.len() && v[j] == x {
                j += 1;
            }
            let below = i as f64 / n;
            let upto = j as f64 / n;
            worst = worst.max((cdf(x) - upto).abs()).max((cdf(x.next_down()) - below).abs());
            i = j;
        }
        worst
    }
}

pub fn ecdf_eval(e: &Ecdf, x: f64) -> f64 {
    e.eval(x)
}

pub fn sup_distance(e: &Ecdf, cdf: impl Fn(f64) -> f64) -> f64 {
    e.sup_distance(cdf)
}

/// Column means and the unbiased (`1/(n−1)`) covariance of an `n × d` block.
pub fn sample_mean_cov(block: &DMatrix<f64>) -> Result<(DVector<f64>, DMatrix<f64>), StatsError> {
    let n = block.nrows();
    if n < 2 {
        return Err(StatsError::TooFewRows { need: 2, got: n });
    }
    let mean = DVector::from_fn(block.ncols(), |j, _| block.column(j).mean());
    let mut centered = block.clone();
    for j in 0..block.ncols() {
        let m = mean[j];
        centered.column_mut(j).add_scalar_mut(-m);
    }
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Henze–Zirkler statistic with its p-value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HzResult {
    pub statistic: f64,
    pub p_value: f64,
    pub beta: f64,
}

/// Rows whitened by the biased (`1/n`) sample covariance.
fn whiten(block: &DMatrix<f64>) -> Result<DMatrix<f64>, StatsError> {
    let n = block.nrows();
    let d = block.ncols();
    if n <= d {
        return Err(StatsError::TooFewRows { need: d + 1, got: n });
    }
    if block.iter().any(|v| !v.is_finite()) {
        return Err(StatsError::NonFinite);
    }
    let (mean, cov) = sample_mean_cov(block)?;
    let s = cov * ((n as f64 - 1.0) / n as f64);
    let scale = s.diagonal().amax();
    let ch = s.clone().cholesky().ok_or(StatsError::Singular)?;
    let l = ch.l();
    if scale <= 0.0 || l.diagonal().iter().any(|&x| x * x <= 1e-12 * scale) {
        return Err(StatsError::Singular);
    }
    let mut centered = block.clone();
    for j in 0..d {
        centered.column_mut(j).add_scalar_mut(-mean[j]);
    }
    // z_i = L^{-1} (x_i - mean), stored as rows.
    let zt = l.solve_lower_triangular(&centered.transpose()).ok_or(StatsError::Singular)?;
    Ok(zt.transpose())
}

fn hz_statistic(z: &DMatrix<f64>) -> (f64, f64) {
    let n = z.nrows();
    let d = z.ncols() as f64;
    let nf = n as f64;
    let beta = ((nf * (2.0 * d + 1.0)) / 4.0).powf(1.0 / (d + 4.0)) / 2f64.sqrt();
    let b2 = beta * beta;
    let rows: Vec<Vec<f64>> = (0..n).map(|i| z.row(i).iter().copied().collect()).collect();
    let pair: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let zi = &rows[i];
            let mut acc = 0.0;
            for zj in &rows[i + 1..] {
                let dij: f64 = zi.iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
                acc += (-0.5 * b2 * dij).exp();
            }
            acc
        })
        .sum();
    // Diagonal terms contribute exp(0) = 1 each.
    let pair_total = 2.0 * pair + nf;
    let single: f64 = rows
        .iter()
        .map(|zi| {
            let di: f64 = zi.iter().map(|a| a * a).sum();
            (-b2 / (2.0 * (1.0 + b2)) * di).exp()
        })
        .sum();
    let hz = nf
        * (pair_total / (nf * nf) - 2.0 * (1.0 + b2).powf(-d / 2.0) * single / nf
            + (1.0 + 2.0 * b2).powf(-d / 2.0));
    (hz, beta)
}

/// Lognormal approximation of the null law of the statistic.
fn hz_lognormal_p(hz: f64, beta: f64, d: f64) -> f64 {
    let b2 = beta * beta;
    let b4 = b2 * b2;
    let b8 = b4 * b4;
    let a = 1.0 + 2.0 * b2;
    let wb = (1.0 + b2) * (1.0 + 3.0 * b2);
    let mu = 1.0 - a.powf(-d / 2.0) * (1.0 + d * b2 / a + d * (d + 2.0) * b4 / (2.0 * a * a));
    let si2 = 2.0 * (1.0 + 4.0 * b2).powf(-d / 2.0)
        + 2.0 * a.powf(-d) * (1.0 + 2.0 * d * b4 / (a * a) + 3.0 * d * (d + 2.0) * b8 / (4.0 * a.powi(4)))
        - 4.0 * wb.powf(-d / 2.0) * (1.0 + 3.0 * d * b4 / (2.0 * wb) + d * (d + 2.0) * b8 / (2.0 * wb * wb));
    let pmu = (mu.powi(4) / (si2 + mu * mu)).sqrt().ln();
    let psi = ((si2 + mu * mu) / (mu * mu)).ln().sqrt();
    if hz <= 0.0 {
        return 1.0;
    }
    (1.0 - normal_cdf((hz.ln() - pmu) / psi)).clamp(0.0, 1.0)
}

/// Henze–Zirkler test of multivariate normality, p-value from the
/// lognormal approximation. Needs `n > d` and a nonsingular covariance.
pub fn henze_zirkler(block: &DMatrix<f64>) -> Result<HzResult, StatsError> {
    let z = whiten(block)?;
    let (statistic, beta) = hz_statistic(&z);
    Ok(HzResult {
        statistic,
        p_value: hz_lognormal_p(statistic, beta, block.ncols() as f64),
        beta,
    })
}

/// Henze–Zirkler test with a Monte Carlo null: `reps` standard normal blocks
/// of the same shape. Preferable to the lognormal approximation for `d > 8`.
pub fn henze_zirkler_mc(block: &DMatrix<f64>, reps: usize, stream: &SeedStream) -> Result<HzResult, StatsError> {
    let z = whiten(block)?;
    let (statistic, beta) = hz_statistic(&z);
    let (n, d) = block.shape();
    let exceed = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream.derive(StreamTag::Replicate, r as u64).rng();
            let sim = DMatrix::from_fn(n, d, |_, _| normal_quantile(rng.open01()));
            match whiten(&sim) {
                Ok(w) => usize::from(hz_statistic(&w).0 >= statistic),
                Err(_) => 0,
            }
        })
        .sum::<usize>();
    Ok(HzResult {
        statistic,
        p_value: (1 + exceed) as f64 / (1 + reps) as f64,
        beta,
    })
}

/// Threshold below which a conditioning stratum is ignored.
pub const CIA_MIN_STRATUM: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct Stratum {
    pub sum: f64,
    pub count: usize,
    /// Largest factorization gap within the stratum, `None` if too small.
    pub gap: Option<f64>,
}

/// Largest factorization gap with the cell where it is attained.
#[derive(Debug, Clone, PartialEq)]
pub struct CiaReport {
    pub gap: f64,
    pub strata: Vec<Stratum>,
    /// `(sum, left values, right values)` of the maximizing cell.
    pub argmax: Option<(f64, Vec<f64>, Vec<f64>)>,
}

fn key(v: &[f64]) -> Vec<u64> {
    v.iter().map(|&x| if x == 0.0 { 0 } else { x.to_bits() }).collect()
}

type Cell = (u64, Vec<u64>, Vec<u64>);

/// Conditional cell frequencies: for each sum stratum, the counts of left
/// cylinder values, right cylinder values and their pairs.
struct Tables {
    strata: BTreeMap<u64, (f64, usize, BTreeMap<Vec<u64>, usize>, BTreeMap<Vec<u64>, usize>, BTreeMap<(Vec<u64>, Vec<u64>), usize>)>,
}

const SUM_SNAP: f64 = 1e-9;

fn snap(s: f64) -> u64 {
    let r = (s / SUM_SNAP).round() * SUM_SNAP;
    if r == 0.0 {
        0
    } else {
        r.to_bits()
    }
}

fn tabulate(block: &DMatrix<f64>, rows: impl Iterator<Item = usize>, left: &[usize], right: &[usize], cond: &[usize]) -> Tables {
    let mut strata = BTreeMap::new();
    for k in rows {
        let s: f64 = cond.iter().map(|&c| block[(k, c)]).sum();
        let l: Vec<f64> = left.iter().map(|&c| block[(k, c)]).collect();
        let r: Vec<f64> = right.iter().map(|&c| block[(k, c)]).collect();
        let e = strata
            .entry(snap(s))
            .or_insert_with(|| (s, 0, BTreeMap::new(), BTreeMap::new(), BTreeMap::new()));
        e.1 += 1;
        let (lk, rk) = (key(&l), key(&r));
        *e.2.entry(lk.clone()).or_insert(0) += 1;
        *e.3.entry(rk.clone()).or_insert(0) += 1;
        *e.4.entry((lk, rk)).or_insert(0) += 1;
    }
    Tables { strata }
}

impl Tables {
    /// Signed gap `P̂[A∩B|s] − P̂[A|s]P̂[B|s]` of one cell.
    fn delta(&self, cell: &Cell) -> f64 {
        let Some((_, n, l, r, lr)) = self.strata.get(&cell.0) else {
            return 0.0;
        };
        let n = *n as f64;
        let pl = *l.get(&cell.1).unwrap_or(&0) as f64 / n;
        let pr = *r.get(&cell.2).unwrap_or(&0) as f64 / n;
        let plr = *lr.get(&(cell.1.clone(), cell.2.clone())).unwrap_or(&0) as f64 / n;
        plr - pl * pr
    }
}

fn check_coords(block: &DMatrix<f64>, coords: &[&[usize]]) -> Result<(), StatsError> {
    for c in coords.iter().flat_map(|c| c.iter()) {
        if *c >= block.ncols() {
            return Err(StatsError::BadCoordinate(*c));
        }
    }
    Ok(())
}

fn from_bits(k: &[u64]) -> Vec<f64> {
    k.iter().map(|&b| f64::from_bits(b)).collect()
}

fn cia_gap(block: &DMatrix<f64>, left: &[usize], right: &[usize], cond: &[usize], min_count: usize) -> (CiaReport, Option<Cell>) {
    let t = tabulate(block, 0..block.nrows(), left, right, cond);
    let mut gap = 0.0;
    let mut best: Option<Cell> = None;
    let mut strata = Vec::new();
    for (&sk, (s, n, l, r, _)) in &t.strata {
        let mut sg = None;
        if *n >= min_count {
            let mut g: f64 = 0.0;
            for lk in l.keys() {
                for rk in r.keys() {
                    let cell = (sk, lk.clone(), rk.clone());
                    let d = t.delta(&cell).abs();
                    if d > g {
                        g = d;
                    }
                    if d > gap {
                        gap = d;
                        best = Some(cell);
                    }
                }
            }
            sg = Some(g);
        }
        strata.push(Stratum { sum: *s, count: *n, gap: sg });
    }
    let argmax = best.as_ref().map(|c| (t.strata[&c.0].0, from_bits(&c.1), from_bits(&c.2)));
    (CiaReport { gap, strata, argmax }, best)
}

/// Largest gap `|P̂[A∩B|s] − P̂[A|s]P̂[B|s]|` over cylinder events `A` on the
/// left coordinates, `B` on the right coordinates, and strata `s` of the sum
/// of the conditioning coordinates holding at least `min_count` rows.
pub fn cia_check(block: &DMatrix<f64>, left: &[usize], right: &[usize], cond: &[usize], min_count: usize) -> Result<CiaReport, StatsError> {
    check_coords(block, &[left, right, cond])?;
    Ok(cia_gap(block, left, right, cond, min_count).0)
}

/// The gap together with its bootstrap standard error: the standard
/// deviation, over `reps` row resamples, of the signed gap at the cell where
/// the full sample attains its maximum.
#[derive(Debug, Clone, PartialEq)]
pub struct CiaBootstrap {
    pub report: CiaReport,
    pub se: f64,
}

pub fn cia_bootstrap(
    block: &DMatrix<f64>,
    left: &[usize],
    right: &[usize],
    cond: &[usize],
    min_count: usize,
    reps: usize,
    stream: &SeedStream,
) -> Result<CiaBootstrap, StatsError> {
    check_coords(block, &[left, right, cond])?;
    let (report, best) = cia_gap(block, left, right, cond, min_count);
    let Some(cell) = best else {
        return Ok(CiaBootstrap { report, se: 0.0 });
    };
    let n = block.nrows();
    let deltas: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = stream.derive(StreamTag::Bootstrap, r as u64).rng();
            let idx: Vec<usize> = (0..n).map(|_| rng.index(n)).collect();
            tabulate(block, idx.into_iter(), left, right, cond).delta(&cell)
        })
        .collect();
    let m = deltas.iter().sum::<f64>() / reps as f64;
    let var = deltas.iter().map(|d| (d - m) * (d - m)).sum::<f64>() / (reps as f64 - 1.0).max(1.0);
    Ok(CiaBootstrap { report, se: var.sqrt() })
}
