//! Leaf marginal distributions and node copulas.
//!
//! Sampling is inverse-transform on a keyed uniform stream, so results are
//! identical no matter how work is split across threads.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::linalg::{psd_cholesky, validate_correlation, LinalgError};
use crate::numeric::{integrate, normal_cdf, normal_pdf, normal_quantile};
use crate::rng::SeedStream;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("normal variance must be positive and finite, got {0}")]
    NonPositiveVariance(f64),
    #[error("normal mean must be finite, got {0}")]
    NonFiniteMean(f64),
    #[error("discrete support and probabilities differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("discrete distribution needs at least one support point")]
    EmptySupport,
    #[error("discrete support must be strictly increasing and finite")]
    UnsortedSupport,
    #[error("discrete probabilities must be positive, got {0}")]
    NonPositiveProb(f64),
    #[error("discrete probabilities sum to {0}, expected 1")]
    ProbSum(f64),
    #[error("quantile level {0} outside [0, 1]")]
    LevelOutOfRange(f64),
    #[error("copula dimension must be at least 1")]
    ZeroDimension,
    #[error("invalid correlation matrix: {0}")]
    Correlation(#[from] LinalgError),
}

/// Distribution of a leaf risk.
#[derive(Debug, Clone, PartialEq)]
pub enum MarginalSpec {
    Normal { mean: f64, var: f64 },
    /// Finite discrete law; `support` strictly increasing, `probs` positive
    /// and summing to one.
    Discrete { support: Vec<f64>, probs: Vec<f64> },
}

impl MarginalSpec {
    pub fn normal(mean: f64, var: f64) -> Result<Self, SpecError> {
        let m = Self::Normal { mean, var };
        m.validate()?;
        Ok(m)
    }

    pub fn discrete(support: Vec<f64>, probs: Vec<f64>) -> Result<Self, SpecError> {
        let m = Self::Discrete { support, probs };
        m.validate()?;
        Ok(m)
    }

    /// Two-point law on {0, 1} with `P[X = 1] = p`.
    pub fn bernoulli(p: f64) -> Result<Self, SpecError> {
        Self::discrete(vec![0.0, 1.0], vec![1.0 - p, p])
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        match self {
            Self::Normal { mean, var } => {
                if !mean.is_finite() {
                    return Err(SpecError::NonFiniteMean(*mean));
                }
                if !(var.is_finite() && *var > 0.0) {
                    return Err(SpecError::NonPositiveVariance(*var));
                }
            }
            Self::Discrete { support, probs } => {
                if support.len() != probs.len() {
                    return Err(SpecError::LengthMismatch(support.len(), probs.len()));
                }
                if support.is_empty() {
                    return Err(SpecError::EmptySupport);
                }
                if support.iter().any(|x| !x.is_finite()) || support.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(SpecError::UnsortedSupport);
                }
                if let Some(&p) = probs.iter().find(|&&p| !(p > 0.0)) {
                    return Err(SpecError::NonPositiveProb(p));
                }
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > 1e-12 {
                    return Err(SpecError::ProbSum(s));
                }
            }
        }
        Ok(())
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Self::Discrete { .. })
    }

    pub fn mean(&self) -> f64 {
        match self {
            Self::Normal { mean, .. } => *mean,
            Self::Discrete { support, probs } => support.iter().zip(probs).map(|(x, p)| x * p).sum(),
        }
    }

    pub fn variance(&self) -> f64 {
        match self {
            Self::Normal { var, .. } => *var,
            Self::Discrete { support, probs } => {
                let m = self.mean();
                support.iter().zip(probs).map(|(x, p)| p * (x - m) * (x - m)).sum()
            }
        }
    }

    /// Distribution function `F(x) = P[X ≤ x]`.
    pub fn cdf(&self, x: f64) -> f64 {
        match self {
            Self::Normal { mean, var } => normal_cdf((x - mean) / var.sqrt()),
            Self::Discrete { support, probs } => {
                let k = support.partition_point(|&s| s <= x);
                if k == support.len() {
                    1.0
                } else {
                    probs[..k].iter().sum()
                }
            }
        }
    }

    /// Generalized inverse `inf{x : F(x) ≥ u}`.
    pub fn quantile(&self, u: f64) -> Result<f64, SpecError> {
        if !(0.0..=1.0).contains(&u) {
            return Err(SpecError::LevelOutOfRange(u));
        }
        Ok(self.quantile_unchecked(u))
    }

    fn quantile_unchecked(&self, u: f64) -> f64 {
        match self {
            Self::Normal { mean, var } => mean + var.sqrt() * normal_quantile(u),
            Self::Discrete { support, probs } => {
                if u <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                let mut cum = 0.0;
                for (i, p) in probs.iter().enumerate() {
                    cum += p;
                    if cum >= u {
                        return support[i];
                    }
                }
                *support.last().unwrap()
            }
        }
    }

    /// `n` i.i.d. draws.
    pub fn sample(&self, n: usize, stream: &SeedStream) -> Vec<f64> {
        let mut rng = stream.rng();
        match self {
            Self::Normal { mean, var } => {
                let sd = var.sqrt();
                (0..n).map(|_| mean + sd * normal_quantile(rng.open01())).collect()
            }
            Self::Discrete { support, probs } => {
                let mut cum: Vec<f64> = probs
                    .iter()
                    .scan(0.0, |acc, p| {
                        *acc += p;
                        Some(*acc)
                    })
                    .collect();
                *cum.last_mut().unwrap() = 1.0;
                (0..n)
                    .map(|_| {
                        let u = rng.open01();
                        support[cum.partition_point(|&c| c < u).min(support.len() - 1)]
                    })
                    .collect()
            }
        }
    }
}

/// Dependence structure between the children of a branching node.
#[derive(Debug, Clone, PartialEq)]
pub enum CopulaSpec {
    Gaussian { correlation: DMatrix<f64> },
    Independence { dim: usize },
}

impl CopulaSpec {
    pub fn gaussian(correlation: DMatrix<f64>) -> Result<Self, SpecError> {
        let c = Self::Gaussian { correlation };
        c.validate()?;
        Ok(c)
    }

    /// Two-dimensional Gaussian copula with correlation `rho`.
    pub fn bivariate(rho: f64) -> Result<Self, SpecError> {
        Self::gaussian(DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]))
    }

    pub fn independence(dim: usize) -> Self {
        Self::Independence { dim }
    }

    pub fn validate(&self) -> Result<(), SpecError> {
        match self {
            Self::Gaussian { correlation } => {
                if correlation.nrows() == 0 {
                    return Err(SpecError::ZeroDimension);
                }
                validate_correlation(correlation)?;
            }
            Self::Independence { dim } => {
                if *dim == 0 {
                    return Err(SpecError::ZeroDimension);
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::Gaussian { correlation } => correlation.nrows(),
            Self::Independence { dim } => *dim,
        }
    }

    /// Pearson correlation matrix of the normal scores (identity for the
    /// independence copula).
    pub fn correlation_matrix(&self) -> DMatrix<f64> {
        match self {
            Self::Gaussian { correlation } => correlation.clone(),
            Self::Independence { dim } => DMatrix::identity(*dim, *dim),
        }
    }

    /// `n` i.i.d. rows from the copula as an `n × d` matrix on [0,1]^d.
    pub fn sample(&self, n: usize, stream: &SeedStream) -> Result<DMatrix<f64>, SpecError> {
        let d = self.dim();
        let mut rng = stream.rng();
        match self {
            Self::Independence { .. } => Ok(DMatrix::from_fn(n, d, |_, _| rng.open01())),
            Self::Gaussian { correlation } => {
                let l = psd_cholesky(correlation)?;
                let mut out = DMatrix::zeros(n, d);
                let mut z = vec![0.0; d];
                for k in 0..n {
                    for zi in z.iter_mut() {
                        *zi = normal_quantile(rng.open01());
                    }
                    for i in 0..d {
                        let mut y = 0.0;
                        for j in 0..=i {
                            y += l[(i, j)] * z[j];
                        }
                        out[(k, i)] = normal_cdf(y);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Copula CDF for two-dimensional copulas.
    pub fn cdf2(&self, u1: f64, u2: f64) -> Option<f64> {
        match self {
            Self::Independence { dim: 2 } => Some(u1.clamp(0.0, 1.0) * u2.clamp(0.0, 1.0)),
            Self::Gaussian { correlation } if correlation.nrows() == 2 => {
                Some(bivariate_gaussian_copula_cdf(correlation[(0, 1)], u1, u2))
            }
            _ => None,
        }
    }
}

/// Bivariate Gaussian copula `C_ρ(u1, u2) = Φ₂(Φ⁻¹(u1), Φ⁻¹(u2); ρ)`.
///
/// Evaluated as `∫_{-∞}^{a} φ(z) Φ((b − ρz)/√(1−ρ²)) dz` by adaptive
/// quadrature with the lower limit truncated at −8.5. `ρ = ±1` use the
/// Fréchet bounds directly.
pub fn bivariate_gaussian_copula_cdf(rho: f64, u1: f64, u2: f64) -> f64 {
    let u1 = u1.clamp(0.0, 1.0);
    let u2 = u2.clamp(0.0, 1.0);
    if u1 == 0.0 || u2 == 0.0 {
        return 0.0;
    }
    if u1 == 1.0 {
        return u2;
    }
    if u2 == 1.0 {
        return u1;
    }
    if rho >= 1.0 {
        return u1.min(u2);
    }
    if rho <= -1.0 {
        return (u1 + u2 - 1.0).max(0.0);
    }
    if rho == 0.0 {
        return u1 * u2;
    }
    let a = normal_quantile(u1);
    let b = normal_quantile(u2);
    const LOWER: f64 = -8.5;
    let upper = a.min(8.5);
    if upper <= LOWER {
        return 0.0;
    }
    let s = (1.0 - rho * rho).sqrt();
    let f = |z: f64| normal_pdf(z) * normal_cdf((b - rho * z) / s);
    // Split at the kink of the conditional CDF so the integrator sees a
    // smooth integrand on each side.
    let kink = if rho.abs() > 1e-12 { b / rho } else { f64::NAN };
    let v = if kink > LOWER && kink < upper {
        integrate(f, LOWER, kink, 5e-13) + integrate(f, kink, upper, 5e-13)
    } else {
        integrate(f, LOWER, upper, 1e-12)
    };
    let mut v = v.clamp(0.0, u1.min(u2));
    if a > 8.5 {
        // Mass of z beyond the truncation point, where Φ(·) is effectively 1
        // relative to u2.
        v = (v + (u1 - normal_cdf(8.5)) * u2).min(u1.min(u2));
    }
    v.max((u1 + u2 - 1.0).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamTag;
    use std::f64::consts::PI;

    #[test]
    fn discrete_quantile_steps() {
        let d = MarginalSpec::discrete(vec![1.0, 5.0], vec![0.3, 0.7]).unwrap();
        assert_eq!(d.quantile(0.3).unwrap(), 1.0);
        assert_eq!(d.quantile(0.300001).unwrap(), 5.0);
        assert_eq!(d.quantile(1.0).unwrap(), 5.0);
        assert_eq!(d.quantile(0.0).unwrap(), f64::NEG_INFINITY);
        assert!(matches!(d.quantile(1.5), Err(SpecError::LevelOutOfRange(_))));
        assert!(matches!(d.quantile(-0.1), Err(SpecError::LevelOutOfRange(_))));
    }

    #[test]
    fn normal_quantile_values() {
        let n = MarginalSpec::normal(0.0, 1.0).unwrap();
        assert_eq!(n.quantile(0.5).unwrap(), 0.0);
        // Oracle: bisection on the erf-based CDF.
        let m = MarginalSpec::normal(4.0, 3.0).unwrap();
        let (mut lo, mut hi) = (0.0, 20.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if m.cdf(mid) < 0.975 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let q = m.quantile(0.975).unwrap();
        assert!((q - lo).abs() < 1e-10);
        assert!((q - 7.3948).abs() < 1e-4);
    }

    #[test]
    fn spec_validation() {
        assert!(MarginalSpec::normal(0.0, 0.0).is_err());
        assert!(MarginalSpec::normal(f64::NAN, 1.0).is_err());
        assert!(MarginalSpec::discrete(vec![1.0, 1.0], vec![0.5, 0.5]).is_err());
        assert!(MarginalSpec::discrete(vec![1.0, 2.0], vec![0.5, 0.4]).is_err());
        assert!(MarginalSpec::discrete(vec![1.0], vec![0.5, 0.5]).is_err());
        assert!(MarginalSpec::discrete(vec![0.0, 1.0], vec![1.0, 0.0]).is_err());
        assert!(MarginalSpec::discrete(vec![], vec![]).is_err());
        assert!(CopulaSpec::bivariate(1.2).is_err());
        assert!(CopulaSpec::gaussian(DMatrix::from_row_slice(
            3,
            3,
            &[1.0, 0.9, -0.9, 0.9, 1.0, 0.9, -0.9, 0.9, 1.0]
        ))
        .is_err());
        assert!(CopulaSpec::bivariate(-1.0).is_ok());
    }

    #[test]
    fn point_mass_sampling() {
        let d = MarginalSpec::discrete(vec![0.0], vec![1.0]).unwrap();
        assert_eq!(d.sample(5, &SeedStream::new(1)), vec![0.0; 5]);
    }

    #[test]
    fn normal_sample_moments() {
        // CLT oracle: tolerance 5 standard errors of the mean / variance.
        let m = MarginalSpec::normal(4.0, 3.0).unwrap();
        let n = 1_000_000;
        let x = m.sample(n, &SeedStream::new(11));
        let mean = x.iter().sum::<f64>() / n as f64;
        let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 4.0).abs() < 0.01, "mean {mean}");
        assert!((var - 3.0).abs() < 0.03, "var {var}");
    }

    #[test]
    fn bernoulli_sample_mean() {
        let m = MarginalSpec::discrete(vec![0.0, 1.0], vec![0.5, 0.5]).unwrap();
        let x = m.sample(100_000, &SeedStream::new(2));
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        assert!((mean - 0.5).abs() < 0.008);
    }

    #[test]
    fn sampling_is_deterministic() {
        let m = MarginalSpec::normal(0.0, 2.0).unwrap();
        let s = SeedStream::new(5).derive(StreamTag::Marginal, 3);
        assert_eq!(m.sample(100, &s), m.sample(100, &s));
    }

    #[test]
    fn comonotone_copula_columns_identical() {
        let c = CopulaSpec::bivariate(1.0).unwrap();
        let u = c.sample(100, &SeedStream::new(4)).unwrap();
        for k in 0..100 {
            assert_eq!(u[(k, 0)], u[(k, 1)]);
        }
    }

    #[test]
    fn copula_values_in_unit_square() {
        let c = CopulaSpec::bivariate(-0.6).unwrap();
        let u = c.sample(10_000, &SeedStream::new(8)).unwrap();
        assert!(u.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gaussian_copula_normal_scores_correlation() {
        // Fisher-z standard error at n = 1e6 is 1e-3; 3 SE on the rho scale
        // (1 - 0.49) gives ~1.5e-3 < 3e-3.
        let c = CopulaSpec::bivariate(0.7).unwrap();
        let n = 1_000_000;
        let u = c.sample(n, &SeedStream::new(21)).unwrap();
        let z1: Vec<f64> = (0..n).map(|k| normal_quantile(u[(k, 0)])).collect();
        let z2: Vec<f64> = (0..n).map(|k| normal_quantile(u[(k, 1)])).collect();
        let r = pearson(&z1, &z2);
        assert!((r - 0.7).abs() < 0.003, "r = {r}");
    }

    #[test]
    fn independence_copula_spearman_near_zero() {
        let c = CopulaSpec::independence(2);
        let n = 100_000;
        let u = c.sample(n, &SeedStream::new(3)).unwrap();
        let a: Vec<f64> = (0..n).map(|k| u[(k, 0)]).collect();
        let b: Vec<f64> = (0..n).map(|k| u[(k, 1)]).collect();
        // Uniform columns: Pearson on the values equals Spearman up to ranks;
        // permutation-null SE is 1/sqrt(n) ~ 0.0032.
        assert!(pearson(&a, &b).abs() < 0.02);
    }

    fn pearson(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            sab += (x - ma) * (y - mb);
            saa += (x - ma).powi(2);
            sbb += (y - mb).powi(2);
        }
        sab / (saa * sbb).sqrt()
    }

    #[test]
    fn bivariate_cdf_special_cases() {
        for &(u1, u2) in &[(0.2, 0.7), (0.5, 0.5), (0.9, 0.1)] {
            assert!((bivariate_gaussian_copula_cdf(0.0, u1, u2) - u1 * u2).abs() < 1e-15);
        }
        assert_eq!(bivariate_gaussian_copula_cdf(1.0, 0.3, 0.6), 0.3);
        assert!((bivariate_gaussian_copula_cdf(-1.0, 0.3, 0.9) - 0.2).abs() < 1e-15);
        assert_eq!(bivariate_gaussian_copula_cdf(0.4, 0.0, 0.6), 0.0);
        assert_eq!(bivariate_gaussian_copula_cdf(0.4, 1.0, 0.6), 0.6);
    }

    #[test]
    fn bivariate_cdf_arcsine_identity_at_center() {
        // C_rho(1/2, 1/2) = 1/4 + arcsin(rho) / (2 pi) for every rho.
        for &rho in &[-0.99, -0.7, -0.3, 0.1, 0.5, 0.7, 0.95, 0.999] {
            let want = 0.25 + f64::asin(rho) / (2.0 * PI);
            let got = bivariate_gaussian_copula_cdf(rho, 0.5, 0.5);
            assert!((got - want).abs() < 1e-10, "rho {rho}: {got} vs {want}");
        }
        assert!((bivariate_gaussian_copula_cdf(0.5, 0.5, 0.5) - 1.0 / 3.0).abs() < 1e-10);
    }

    /// Plackett's identity: dΦ₂/dρ = φ₂(a, b; ρ), so
    /// Φ₂(a,b;ρ) = Φ(a)Φ(b) + ∫_0^ρ φ₂(a,b;r) dr. Integrated with a fine
    /// composite Simpson rule, independent of the conditional-form quadrature.
    fn plackett_oracle(rho: f64, u1: f64, u2: f64) -> f64 {
        let a = normal_quantile(u1);
        let b = normal_quantile(u2);
        let dens = |r: f64| {
            let q = 1.0 - r * r;
            (-(a * a - 2.0 * r * a * b + b * b) / (2.0 * q)).exp() / (2.0 * PI * q.sqrt())
        };
        let m = 20_000;
        let h = rho / m as f64;
        let mut s = dens(0.0) + dens(rho);
        for i in 1..m {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * dens(i as f64 * h);
        }
        u1 * u2 + s * h / 3.0
    }

    #[test]
    fn bivariate_cdf_matches_plackett_oracle() {
        for &rho in &[-0.9, -0.45, 0.2, 0.7, 0.9] {
            for &(u1, u2) in &[(0.1, 0.2), (0.3, 0.8), (0.5, 0.5), (0.95, 0.6), (0.01, 0.99), (0.75, 0.75)] {
                let got = bivariate_gaussian_copula_cdf(rho, u1, u2);
                let want = plackett_oracle(rho, u1, u2);
                assert!((got - want).abs() < 1e-10, "rho {rho} u ({u1},{u2}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn bivariate_cdf_monotone_on_grid() {
        let grid: Vec<f64> = (1..20).map(|i| i as f64 / 20.0).collect();
        let rhos: Vec<f64> = (-9..=9).map(|i| i as f64 / 10.0).collect();
        for &rho in &rhos {
            for &u2 in &grid {
                let mut prev = 0.0;
                for &u1 in &grid {
                    let v = bivariate_gaussian_copula_cdf(rho, u1, u2);
                    assert!(v >= prev - 1e-12);
                    prev = v;
                }
            }
        }
        for &u1 in &grid {
            for &u2 in &grid {
                let mut prev = 0.0;
                for &rho in &rhos {
                    let v = bivariate_gaussian_copula_cdf(rho, u1, u2);
                    assert!(v >= prev - 1e-12);
                    prev = v;
                }
            }
        }
    }
}
