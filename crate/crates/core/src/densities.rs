//! Belief targets, sampling distributions over a box domain, and the
//! Rosenblatt map that sends a sampling distribution to the uniform law on
//! the unit hypercube.
//!
//! Targets are unnormalized: nothing here computes a normalizing constant.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::{log_sum_exp, norm_cdf, norm_pdf, norm_quantile, rng_for, Rng};

/// Axis-aligned box `[lower, upper]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDomain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxDomain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::invalid("domain dimension must be positive"));
        }
        if lower.len() != upper.len() {
            return Err(Error::Shape {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::invalid(format!(
                    "bounds of dimension {i} are not an interval: [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// `[lo, hi]^d`.
    pub fn cube(d: usize, lo: f64, hi: f64) -> Self {
        Self::new(vec![lo; d], vec![hi; d]).expect("valid cube")
    }

    pub fn unit(d: usize) -> Self {
        Self::cube(d, 0.0, 1.0)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, i: usize) -> f64 {
        self.upper[i] - self.lower[i]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|i| self.width(i)).product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (lo, hi))| *v >= *lo && *v <= *hi)
    }

    pub fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !self.contains(x) {
            return Err(Error::OutOfDomain { point: x.to_vec() });
        }
        Ok(())
    }

    /// Fold `x` back into the box by mirror reflection at the faces.
    pub fn reflect(&self, x: &mut [f64]) {
        for (i, v) in x.iter_mut().enumerate() {
            let lo = self.lower[i];
            let w = self.upper[i] - lo;
            let mut t = (*v - lo).rem_euclid(2.0 * w);
            if t > w {
                t = 2.0 * w - t;
            }
            *v = lo + t;
        }
    }
}

/// Gaussian component stored by mean and precision.
#[derive(Clone, Debug)]
struct Component {
    log_coef: f64,
    mean: DVector<f64>,
    precision: DMatrix<f64>,
    /// Lower Cholesky factor of the covariance.
    chol: DMatrix<f64>,
    log_det_cov: f64,
}

impl Component {
    fn new(log_coef: f64, mean: Vec<f64>, cov: DMatrix<f64>) -> Self {
        let chol = cov
            .clone()
            .cholesky()
            .expect("covariance must be positive definite");
        let l = chol.l();
        let log_det_cov = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let precision = chol.inverse();
        Self {
            log_coef,
            mean: DVector::from_vec(mean),
            precision,
            chol: l,
            log_det_cov,
        }
    }

    fn quad(&self, x: &[f64]) -> (f64, DVector<f64>) {
        let diff = DVector::from_column_slice(x) - &self.mean;
        let pd = &self.precision * &diff;
        (diff.dot(&pd), pd)
    }

    /// Log of the mixture probability of this component, given that the
    /// unnormalized term is `exp(log_coef - quad/2)`.
    fn log_mass(&self) -> f64 {
        let d = self.mean.len() as f64;
        self.log_coef + 0.5 * self.log_det_cov + 0.5 * d * (2.0 * std::f64::consts::PI).ln()
    }
}

type LogFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type ScoreFn = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

#[derive(Clone)]
enum TargetKind {
    Onemoon,
    Twomoons,
    Ring { k: usize },
    Uniform,
    /// `log sum_k exp(c_k - quad_k / 2)`
    Mixture(Vec<Component>),
    Custom {
        log: LogFn,
        score: Option<ScoreFn>,
    },
}

/// An expert's belief `p`, given as an unnormalized log-density on a box.
#[derive(Clone)]
pub struct BeliefTarget {
    name: String,
    domain: BoxDomain,
    kind: TargetKind,
    exponent: f64,
}

impl fmt::Debug for BeliefTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BeliefTarget")
            .field("name", &self.name)
            .field("domain", &self.domain)
            .field("exponent", &self.exponent)
            .finish()
    }
}

fn alternating(d: usize, scale: f64) -> Vec<f64> {
    (1..=d)
        .map(|j| if j % 2 == 0 { scale } else { -scale })
        .collect()
}

/// Names accepted by [`BeliefTarget::by_name`].
pub const TARGET_NAMES: [&str; 8] = [
    "onemoon2d",
    "twomoons2d",
    "ring2d",
    "gaussian4d",
    "gaussian16d",
    "mixturegaussians4d",
    "mixturegaussians10d",
    "stargaussian6d",
];

impl BeliefTarget {
    /// Look up one of the built-in targets (case-insensitive).
    pub fn by_name(name: &str) -> Result<Self> {
        let key = name.to_ascii_lowercase();
        match key.as_str() {
            "onemoon2d" => Ok(Self::onemoon2d()),
            "twomoons2d" => Ok(Self::twomoons2d()),
            "ring2d" => Ok(Self::ring2d()),
            "gaussian4d" => Ok(Self::gaussian(4)),
            "gaussian16d" => Ok(Self::gaussian(16)),
            "mixturegaussians4d" => Ok(Self::mixture_gaussians(4)),
            "mixturegaussians10d" => Ok(Self::mixture_gaussians(10)),
            "stargaussian6d" => Ok(Self::star_gaussian(6)),
            _ => Err(Error::invalid(format!("unknown target '{name}'"))),
        }
    }

    pub fn onemoon2d() -> Self {
        Self::builtin("Onemoon2D", BoxDomain::cube(2, -6.0, 6.0), TargetKind::Onemoon)
    }

    pub fn twomoons2d() -> Self {
        Self::builtin("Twomoons2D", BoxDomain::cube(2, -6.0, 6.0), TargetKind::Twomoons)
    }

    pub fn ring2d() -> Self {
        Self::builtin("Ring2D", BoxDomain::cube(2, -6.0, 6.0), TargetKind::Ring { k: 1 })
    }

    /// Correlated Gaussian with alternating-sign mean of magnitude 2.
    pub fn gaussian(d: usize) -> Self {
        let dd = d as f64;
        let cov = DMatrix::from_fn(d, d, |i, j| if i == j { dd / 10.0 } else { dd / 15.0 });
        let mean = alternating(d, 2.0);
        let bound = if d >= 16 { 8.0 } else { 6.0 };
        Self::builtin(
            &format!("Gaussian{d}D"),
            BoxDomain::cube(d, -bound, bound),
            TargetKind::Mixture(vec![Component::new(0.0, mean, cov)]),
        )
    }

    /// Four elongated Gaussians placed at radius 3 along `±1` and `±(-1)^j`.
    pub fn mixture_gaussians(d: usize) -> Self {
        let ones = vec![1.0; d];
        let alt: Vec<f64> = (1..=d).map(|j| if j % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let dirs = [
            ones.clone(),
            ones.iter().map(|v| -v).collect(),
            alt.clone(),
            alt.iter().map(|v| -v).collect::<Vec<_>>(),
        ];
        let comps = dirs
            .iter()
            .map(|v| {
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
                let unit: Vec<f64> = v.iter().map(|a| a / norm).collect();
                let mean: Vec<f64> = unit.iter().map(|a| 3.0 * a).collect();
                let u = DVector::from_vec(unit);
                // Q diag(1, 0.1, ..., 0.1) Q^T with u as first column of Q.
                let cov = DMatrix::identity(d, d) * 0.1 + &u * u.transpose() * 0.9;
                Component::new(0.25f64.ln(), mean, cov)
            })
            .collect();
        Self::builtin(
            &format!("Mixturegaussians{d}D"),
            BoxDomain::cube(d, -6.0, 6.0),
            TargetKind::Mixture(comps),
        )
    }

    /// Equal mixture of two normalized Gaussians sharing mean `3·1` with
    /// correlation `0.9` and `(-1)^{|i-j|} 0.9` respectively.
    pub fn star_gaussian(d: usize) -> Self {
        let rho = 0.9;
        let cov1 = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
        let cov2 = DMatrix::from_fn(d, d, |i, j| {
            if i == j {
                1.0
            } else if (i as i64 - j as i64).abs() % 2 == 0 {
                rho
            } else {
                -rho
            }
        });
        let mean = vec![3.0; d];
        let comps = [cov1, cov2]
            .into_iter()
            .map(|cov| {
                let c = Component::new(0.0, mean.clone(), cov);
                let log_norm = -0.5 * c.log_det_cov - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
                Component {
                    log_coef: 0.5f64.ln() + log_norm,
                    ..c
                }
            })
            .collect();
        Self::builtin(
            &format!("Stargaussian{d}D"),
            // [-6, 6] would clip about 1.5% of the mass at the upper faces.
            BoxDomain::cube(d, -7.0, 7.0),
            TargetKind::Mixture(comps),
        )
    }

    /// Constant density on `domain`.
    pub fn uniform(domain: BoxDomain) -> Self {
        Self::builtin("Uniform", domain, TargetKind::Uniform)
    }

    /// Normal(mean, sd^2) restricted to `[lo, hi]`.
    pub fn truncated_normal_1d(mean: f64, sd: f64, lo: f64, hi: f64) -> Result<Self> {
        let domain = BoxDomain::new(vec![lo], vec![hi])?;
        let cov = DMatrix::from_element(1, 1, sd * sd);
        Ok(Self::builtin(
            "TruncatedNormal1D",
            domain,
            TargetKind::Mixture(vec![Component::new(0.0, vec![mean], cov)]),
        ))
    }

    /// Gaussian mixture given by unnormalized weights, means and covariances.
    pub fn gaussian_mixture(
        name: &str,
        domain: BoxDomain,
        weights: &[f64],
        means: Vec<Vec<f64>>,
        covs: Vec<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let d = domain.dim();
        if weights.len() != means.len() || weights.len() != covs.len() || weights.is_empty() {
            return Err(Error::invalid("mixture parts must have equal, nonzero length"));
        }
        let mut comps = Vec::with_capacity(weights.len());
        for ((w, m), c) in weights.iter().zip(means).zip(covs) {
            if m.len() != d || c.len() != d {
                return Err(Error::Shape { expected: d, got: m.len() });
            }
            let cov = DMatrix::from_fn(d, d, |i, j| c[i][j]);
            if cov.clone().cholesky().is_none() {
                return Err(Error::invalid("covariance is not positive definite"));
            }
            let comp = Component::new(0.0, m, cov);
            let log_norm = -0.5 * comp.log_det_cov - 0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
            comps.push(Component {
                log_coef: w.ln() + log_norm,
                ..comp
            });
        }
        Ok(Self::builtin(name, domain, TargetKind::Mixture(comps)))
    }

    /// Registration hook for programmatic targets.
    pub fn custom(
        name: &str,
        domain: BoxDomain,
        log_unnorm: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        score: Option<Box<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>>,
    ) -> Self {
        Self::builtin(
            name,
            domain,
            TargetKind::Custom {
                log: Arc::new(log_unnorm),
                score: score.map(Arc::from),
            },
        )
    }

    fn builtin(name: &str, domain: BoxDomain, kind: TargetKind) -> Self {
        Self {
            name: name.to_string(),
            domain,
            kind,
            exponent: 1.0,
        }
    }

    /// The target `p^alpha`.
    pub fn powered(&self, alpha: f64) -> Self {
        Self {
            name: format!("{}^{alpha}", self.name),
            exponent: self.exponent * alpha,
            ..self.clone()
        }
    }

    /// Same density on a different box.
    pub fn with_domain(&self, domain: BoxDomain) -> Result<Self> {
        if domain.dim() != self.dim() {
            return Err(Error::Shape {
                expected: self.dim(),
                got: domain.dim(),
            });
        }
        Ok(Self {
            domain,
            ..self.clone()
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn domain(&self) -> &BoxDomain {
        &self.domain
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn has_analytic_score(&self) -> bool {
        !matches!(self.kind, TargetKind::Custom { score: None, .. })
    }

    /// Unnormalized log-density; errors outside the domain box.
    pub fn log_unnorm_density(&self, x: &[f64]) -> Result<f64> {
        self.domain.check(x)?;
        Ok(self.log_unnorm(x))
    }

    /// Unnormalized log-density without the domain check.
    pub fn log_unnorm(&self, x: &[f64]) -> f64 {
        let v = match &self.kind {
            TargetKind::Onemoon => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                -0.5 * ((r - 2.0) / 0.2).powi(2) - 0.5 * ((x[0] + 2.0) / 0.3).powi(2)
            }
            TargetKind::Twomoons => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let a = x[0].abs();
                -(r - 1.0).powi(2) / 0.08 - (a - 2.0).powi(2) / 0.18
                    + crate::util::softplus(-4.0 * a / 0.09)
            }
            TargetKind::Ring { k } => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt();
                let terms: Vec<f64> = (1..=*k)
                    .map(|i| (32.0 / std::f64::consts::PI).ln() - 32.0 * (r - i as f64 - 1.0).powi(2))
                    .collect();
                log_sum_exp(&terms)
            }
            TargetKind::Uniform => 0.0,
            TargetKind::Mixture(comps) => {
                let terms: Vec<f64> = comps.iter().map(|c| c.log_coef - 0.5 * c.quad(x).0).collect();
                log_sum_exp(&terms)
            }
            TargetKind::Custom { log, .. } => log(x),
        };
        self.exponent * v
    }

    /// Analytic gradient of the log-density, when known.
    pub fn score(&self, x: &[f64]) -> Option<Vec<f64>> {
        let mut g = match &self.kind {
            TargetKind::Onemoon => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt().max(1e-300);
                let radial = -(r - 2.0) / 0.04 / r;
                vec![radial * x[0] - (x[0] + 2.0) / 0.09, radial * x[1]]
            }
            TargetKind::Twomoons => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt().max(1e-300);
                let radial = -2.0 * (r - 1.0) / 0.08 / r;
                let a = x[0].abs();
                let sign = if x[0] >= 0.0 { 1.0 } else { -1.0 };
                let k = 4.0 / 0.09;
                let da = -2.0 * (a - 2.0) / 0.18 - k * crate::util::sigmoid(-k * a);
                vec![radial * x[0] + sign * da, radial * x[1]]
            }
            TargetKind::Ring { k } => {
                let r = (x[0] * x[0] + x[1] * x[1]).sqrt().max(1e-300);
                let terms: Vec<f64> = (1..=*k).map(|i| -32.0 * (r - i as f64 - 1.0).powi(2)).collect();
                let lse = log_sum_exp(&terms);
                let dr: f64 = (1..=*k)
                    .zip(&terms)
                    .map(|(i, t)| (t - lse).exp() * (-64.0) * (r - i as f64 - 1.0))
                    .sum();
                vec![dr * x[0] / r, dr * x[1] / r]
            }
            TargetKind::Uniform => vec![0.0; x.len()],
            TargetKind::Mixture(comps) => {
                let parts: Vec<(f64, DVector<f64>)> = comps
                    .iter()
                    .map(|c| {
                        let (q, pd) = c.quad(x);
                        (c.log_coef - 0.5 * q, pd)
                    })
                    .collect();
                let logs: Vec<f64> = parts.iter().map(|p| p.0).collect();
                let lse = log_sum_exp(&logs);
                let mut g = vec![0.0; x.len()];
                for (l, pd) in &parts {
                    let w = (l - lse).exp();
                    for (gi, v) in g.iter_mut().zip(pd.iter()) {
                        *gi -= w * v;
                    }
                }
                g
            }
            TargetKind::Custom { score, .. } => score.as_ref()?(x),
        };
        for v in &mut g {
            *v *= self.exponent;
        }
        Some(g)
    }

    /// Mean and per-coordinate variance, for Gaussian-family targets.
    pub fn moments(&self) -> Option<(Vec<f64>, Vec<f64>)> {
        let TargetKind::Mixture(comps) = &self.kind else {
            return None;
        };
        if self.exponent != 1.0 {
            return None;
        }
        let logs: Vec<f64> = comps.iter().map(|c| c.log_mass()).collect();
        let lse = log_sum_exp(&logs);
        let d = self.dim();
        let mut mean = vec![0.0; d];
        let mut second = vec![0.0; d];
        for (c, l) in comps.iter().zip(&logs) {
            let w = (l - lse).exp();
            let cov = &c.chol * c.chol.transpose();
            for j in 0..d {
                mean[j] += w * c.mean[j];
                second[j] += w * (cov[(j, j)] + c.mean[j] * c.mean[j]);
            }
        }
        let var = (0..d).map(|j| second[j] - mean[j] * mean[j]).collect();
        Some((mean, var))
    }

    /// Weight, mean and per-coordinate variance of each mixture component.
    pub fn components(&self) -> Option<Vec<(f64, Vec<f64>, Vec<f64>)>> {
        let TargetKind::Mixture(comps) = &self.kind else {
            return None;
        };
        if self.exponent != 1.0 {
            return None;
        }
        let logs: Vec<f64> = comps.iter().map(|c| c.log_mass()).collect();
        let lse = log_sum_exp(&logs);
        Some(
            comps
                .iter()
                .zip(&logs)
                .map(|(c, l)| {
                    let cov = &c.chol * c.chol.transpose();
                    let var = (0..self.dim()).map(|j| cov[(j, j)]).collect();
                    ((l - lse).exp(), c.mean.iter().copied().collect(), var)
                })
                .collect(),
        )
    }

    /// Approximate draws from the normalized target on its box; deterministic
    /// given `seed`. Gaussian-family targets are sampled exactly (with
    /// rejection at the box); others by Metropolis-adjusted Langevin chains.
    pub fn reference_sample(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        let d = self.dim();
        if n == 0 {
            return Ok(Array2::zeros((0, d)));
        }
        match &self.kind {
            TargetKind::Mixture(comps) if self.exponent == 1.0 => {
                Ok(self.sample_mixture(comps, n, seed))
            }
            TargetKind::Uniform => {
                let mut rng = rng_for(seed, 0);
                Ok(Array2::from_shape_fn((n, d), |(_, j)| {
                    self.domain.lower[j] + rng.gen::<f64>() * self.domain.width(j)
                }))
            }
            _ if self.has_analytic_score() => self.sample_mala(n, seed),
            _ => Err(Error::invalid(format!(
                "no reference sampler for target '{}' without analytic score",
                self.name
            ))),
        }
    }

    fn sample_mixture(&self, comps: &[Component], n: usize, seed: u64) -> Array2<f64> {
        let d = self.dim();
        let logs: Vec<f64> = comps.iter().map(|c| c.log_mass()).collect();
        let lse = log_sum_exp(&logs);
        let probs: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
        let mut rng = rng_for(seed, 0);
        let mut out = Array2::zeros((n, d));
        let mut row = 0;
        while row < n {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            let mut k = probs.len() - 1;
            for (i, p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    k = i;
                    break;
                }
            }
            let z = DVector::from_fn(d, |_, _| StandardNormal.sample(&mut rng));
            let x = &comps[k].mean + &comps[k].chol * z;
            if self.domain.contains(x.as_slice()) {
                out.row_mut(row).assign(&ndarray::ArrayView1::from(x.as_slice()));
                row += 1;
            }
        }
        out
    }

    /// MALA with step adaptation during a 1000-step burn-in and 10x thinning.
    /// Chains start from a draw of the grid-discretized target so that mode
    /// proportions are right from the first step.
    fn sample_mala(&self, n: usize, seed: u64) -> Result<Array2<f64>> {
        const BURN_IN: usize = 1000;
        const THIN: usize = 10;
        let d = self.dim();
        let n_chains = n.clamp(1, 200);
        let init = self.grid_draws(n_chains, seed)?;
        let mut out = Array2::zeros((n, d));
        let per_chain = n.div_ceil(n_chains);
        let mut row = 0;
        for c in 0..n_chains {
            if row >= n {
                break;
            }
            let mut rng = rng_for(seed, 1 + c as u64);
            let mut x = init[c].clone();
            let mut lp = self.log_unnorm(&x);
            let mut g = self.score(&x).expect("analytic score");
            let mut eps: f64 = 1e-3;
            let step = |x: &mut Vec<f64>, lp: &mut f64, g: &mut Vec<f64>, eps: f64, rng: &mut Rng| -> bool {
                let prop: Vec<f64> = (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        x[j] + eps * g[j] + (2.0 * eps).sqrt() * z
                    })
                    .collect();
                if !self.domain.contains(&prop) {
                    return false;
                }
                let lp_new = self.log_unnorm(&prop);
                let g_new = self.score(&prop).expect("analytic score");
                let fwd: f64 = (0..d)
                    .map(|j| (prop[j] - x[j] - eps * g[j]).powi(2))
                    .sum::<f64>()
                    / (4.0 * eps);
                let bwd: f64 = (0..d)
                    .map(|j| (x[j] - prop[j] - eps * g_new[j]).powi(2))
                    .sum::<f64>()
                    / (4.0 * eps);
                let log_alpha = lp_new - *lp - bwd + fwd;
                if rng.gen::<f64>().ln() < log_alpha {
                    *x = prop;
                    *lp = lp_new;
                    *g = g_new;
                    true
                } else {
                    false
                }
            };
            for _ in 0..BURN_IN {
                let accepted = step(&mut x, &mut lp, &mut g, eps, &mut rng);
                eps *= if accepted { 1.02 } else { 0.97 };
            }
            let take = per_chain.min(n - row);
            for _ in 0..take {
                for _ in 0..THIN {
                    step(&mut x, &mut lp, &mut g, eps, &mut rng);
                }
                for j in 0..d {
                    out[(row, j)] = x[j];
                }
                row += 1;
            }
        }
        Ok(out)
    }

    /// Draws from the target discretized on a midpoint grid (d <= 3 only).
    fn grid_draws(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
        let d = self.dim();
        if d > 3 {
            return Err(Error::invalid("grid initialization needs d <= 3"));
        }
        let per_axis = match d {
            1 => 4096,
            2 => 256,
            _ => 48,
        };
        let grid = crate::quadrature::Grid::new(&self.domain, per_axis);
        let logs: Vec<f64> = grid.points().map(|p| self.log_unnorm(&p)).collect();
        let lse = log_sum_exp(&logs);
        let mut cdf = Vec::with_capacity(logs.len());
        let mut acc = 0.0;
        for l in &logs {
            acc += (l - lse).exp();
            cdf.push(acc);
        }
        let mut rng = rng_for(seed, u64::MAX);
        Ok((0..n)
            .map(|_| {
                let u = rng.gen::<f64>() * acc;
                let idx = cdf.partition_point(|c| *c < u).min(cdf.len() - 1);
                grid.point(idx)
            })
            .collect())
    }
}

/// Family of a sampling distribution. Gaussian kinds are truncated to the box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SamplingKind {
    UniformBox,
    DiagonalGaussian {
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    /// Mixture of diagonal Gaussians.
    GaussianMixture {
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
    },
}

/// Sampling density `λ` of the comparison candidates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingDist {
    #[serde(flatten)]
    pub kind: SamplingKind,
    pub domain: BoxDomain,
}

/// Per-dimension grid resolution for numerically integrated mixture CDFs.
pub const MIXTURE_CDF_GRID: usize = 4096;

impl SamplingDist {
    pub fn uniform(domain: BoxDomain) -> Self {
        Self {
            kind: SamplingKind::UniformBox,
            domain,
        }
    }

    pub fn diagonal_gaussian(domain: BoxDomain, mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        let d = domain.dim();
        if mean.len() != d || var.len() != d {
            return Err(Error::Shape { expected: d, got: mean.len().min(var.len()) });
        }
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("variances must be positive"));
        }
        Ok(Self {
            kind: SamplingKind::DiagonalGaussian { mean, var },
            domain,
        })
    }

    pub fn gaussian_mixture(
        domain: BoxDomain,
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        vars: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let d = domain.dim();
        if weights.is_empty() || weights.len() != means.len() || weights.len() != vars.len() {
            return Err(Error::invalid("mixture parts must have equal, nonzero length"));
        }
        if means.iter().chain(&vars).any(|v| v.len() != d) {
            return Err(Error::Shape { expected: d, got: 0 });
        }
        if weights.iter().any(|w| !(*w > 0.0)) || vars.iter().flatten().any(|v| !(*v > 0.0)) {
            return Err(Error::invalid("weights and variances must be positive"));
        }
        Ok(Self {
            kind: SamplingKind::GaussianMixture { weights, means, vars },
            domain,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.domain.dim();
        match &self.kind {
            SamplingKind::UniformBox => Ok(()),
            SamplingKind::DiagonalGaussian { mean, var } => {
                Self::diagonal_gaussian(self.domain.clone(), mean.clone(), var.clone()).map(|_| ())
            }
            SamplingKind::GaussianMixture { weights, means, vars } => {
                let _ = d;
                Self::gaussian_mixture(self.domain.clone(), weights.clone(), means.clone(), vars.clone())
                    .map(|_| ())
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Mass of N(mean, var) inside `[lo, hi]`.
    fn interval_mass(mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
        let a = (lo - mean) / sd;
        let b = (hi - mean) / sd;
        if a > 0.0 {
            norm_cdf(-a) - norm_cdf(-b)
        } else {
            norm_cdf(b) - norm_cdf(a)
        }
    }

    /// Normalized density on the box.
    pub fn pdf(&self, x: &[f64]) -> f64 {
        if !self.domain.contains(x) {
            return 0.0;
        }
        match &self.kind {
            SamplingKind::UniformBox => 1.0 / self.domain.volume(),
            SamplingKind::DiagonalGaussian { mean, var } => (0..self.dim())
                .map(|j| {
                    let sd = var[j].sqrt();
                    let z = Self::interval_mass(mean[j], sd, self.domain.lower[j], self.domain.upper[j]);
                    norm_pdf((x[j] - mean[j]) / sd) / sd / z
                })
                .product(),
            SamplingKind::GaussianMixture { weights, means, vars } => {
                let mut num = 0.0;
                let mut den = 0.0;
                for k in 0..weights.len() {
                    let mut dens = weights[k];
                    let mut mass = weights[k];
                    for j in 0..self.dim() {
                        let sd = vars[k][j].sqrt();
                        dens *= norm_pdf((x[j] - means[k][j]) / sd) / sd;
                        mass *= Self::interval_mass(means[k][j], sd, self.domain.lower[j], self.domain.upper[j]);
                    }
                    num += dens;
                    den += mass;
                }
                num / den
            }
        }
    }

    /// `n` draws; Gaussian draws outside the box are rejected and redrawn.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Array2<f64> {
        let d = self.dim();
        let mut out = Array2::zeros((n, d));
        for i in 0..n {
            let x = self.sample_one(rng);
            for j in 0..d {
                out[(i, j)] = x[j];
            }
        }
        out
    }

    pub fn sample_one(&self, rng: &mut Rng) -> Vec<f64> {
        let d = self.dim();
        loop {
            let x: Vec<f64> = match &self.kind {
                SamplingKind::UniformBox => (0..d)
                    .map(|j| self.domain.lower[j] + rng.gen::<f64>() * self.domain.width(j))
                    .collect(),
                SamplingKind::DiagonalGaussian { mean, var } => (0..d)
                    .map(|j| {
                        let z: f64 = StandardNormal.sample(rng);
                        mean[j] + var[j].sqrt() * z
                    })
                    .collect(),
                SamplingKind::GaussianMixture { weights, means, vars } => {
                    let total: f64 = weights.iter().sum();
                    let u = rng.gen::<f64>() * total;
                    let mut acc = 0.0;
                    let mut k = weights.len() - 1;
                    for (i, w) in weights.iter().enumerate() {
                        acc += w;
                        if u < acc {
                            k = i;
                            break;
                        }
                    }
                    (0..d)
                        .map(|j| {
                            let z: f64 = StandardNormal.sample(rng);
                            means[k][j] + vars[k][j].sqrt() * z
                        })
                        .collect()
                }
            };
            if self.domain.contains(&x) {
                return x;
            }
        }
    }

    /// Conditional CDF table of coordinate `j` for a mixture, given the
    /// already-known coordinates `prefix = x[..j]`.
    fn mixture_cdf_table(&self, j: usize, prefix: &[f64]) -> (f64, f64, Vec<f64>) {
        let SamplingKind::GaussianMixture { weights, means, vars } = &self.kind else {
            unreachable!()
        };
        let d = self.dim();
        let lo = self.domain.lower[j];
        let hi = self.domain.upper[j];
        let log_omega: Vec<f64> = (0..weights.len())
            .map(|k| {
                let mut l = weights[k].ln();
                for (i, xi) in prefix.iter().enumerate() {
                    let sd = vars[k][i].sqrt();
                    l += (norm_pdf((xi - means[k][i]) / sd) / sd).max(1e-300).ln();
                }
                for i in j + 1..d {
                    let sd = vars[k][i].sqrt();
                    l += Self::interval_mass(means[k][i], sd, self.domain.lower[i], self.domain.upper[i])
                        .max(1e-300)
                        .ln();
                }
                l
            })
            .collect();
        let lse = log_sum_exp(&log_omega);
        let omega: Vec<f64> = log_omega.iter().map(|l| (l - lse).exp()).collect();
        let n = MIXTURE_CDF_GRID;
        let h = (hi - lo) / (n - 1) as f64;
        let dens: Vec<f64> = (0..n)
            .map(|i| {
                let t = lo + i as f64 * h;
                omega
                    .iter()
                    .enumerate()
                    .map(|(k, w)| {
                        let sd = vars[k][j].sqrt();
                        w * norm_pdf((t - means[k][j]) / sd) / sd
                    })
                    .sum::<f64>()
            })
            .collect();
        let mut cdf = vec![0.0; n];
        for i in 1..n {
            cdf[i] = cdf[i - 1] + 0.5 * h * (dens[i - 1] + dens[i]);
        }
        let total = cdf[n - 1];
        for c in &mut cdf {
            *c /= total;
        }
        (lo, h, cdf)
    }

    /// Map `x` in the box to the unit hypercube by sequential conditional CDFs.
    pub fn rosenblatt_forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.domain.check(x)?;
        let d = self.dim();
        Ok(match &self.kind {
            SamplingKind::UniformBox => (0..d)
                .map(|j| (x[j] - self.domain.lower[j]) / self.domain.width(j))
                .collect(),
            SamplingKind::DiagonalGaussian { mean, var } => (0..d)
                .map(|j| {
                    truncated_normal_cdf(x[j], mean[j], var[j].sqrt(), self.domain.lower[j], self.domain.upper[j])
                })
                .collect(),
            SamplingKind::GaussianMixture { .. } => (0..d)
                .map(|j| {
                    let (lo, h, cdf) = self.mixture_cdf_table(j, &x[..j]);
                    let pos = ((x[j] - lo) / h).clamp(0.0, (cdf.len() - 1) as f64);
                    let i = (pos.floor() as usize).min(cdf.len() - 2);
                    let f = pos - i as f64;
                    cdf[i] * (1.0 - f) + cdf[i + 1] * f
                })
                .collect(),
        })
    }

    /// Inverse of [`Self::rosenblatt_forward`].
    pub fn rosenblatt_inverse(&self, u: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        if u.len() != d {
            return Err(Error::Shape { expected: d, got: u.len() });
        }
        if u.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::OutOfDomain { point: u.to_vec() });
        }
        let mut x = Vec::with_capacity(d);
        for j in 0..d {
            let v = match &self.kind {
                SamplingKind::UniformBox => self.domain.lower[j] + u[j] * self.domain.width(j),
                SamplingKind::DiagonalGaussian { mean, var } => truncated_normal_quantile(
                    u[j],
                    mean[j],
                    var[j].sqrt(),
                    self.domain.lower[j],
                    self.domain.upper[j],
                ),
                SamplingKind::GaussianMixture { .. } => {
                    let (lo, h, cdf) = self.mixture_cdf_table(j, &x);
                    let i = cdf.partition_point(|c| *c < u[j]).clamp(1, cdf.len() - 1) - 1;
                    let span = cdf[i + 1] - cdf[i];
                    let f = if span > 0.0 { (u[j] - cdf[i]) / span } else { 0.0 };
                    lo + (i as f64 + f.clamp(0.0, 1.0)) * h
                }
            };
            x.push(v.clamp(self.domain.lower[j], self.domain.upper[j]));
        }
        Ok(x)
    }

    /// Row-wise forward map of a point set.
    pub fn forward_points(&self, xs: &Array2<f64>) -> Result<Array2<f64>> {
        map_rows(xs, |r| self.rosenblatt_forward(r))
    }

    /// Row-wise inverse map of a point set.
    pub fn inverse_points(&self, us: &Array2<f64>) -> Result<Array2<f64>> {
        map_rows(us, |r| self.rosenblatt_inverse(r))
    }
}

fn map_rows(xs: &Array2<f64>, f: impl Fn(&[f64]) -> Result<Vec<f64>>) -> Result<Array2<f64>> {
    let mut out = Array2::zeros(xs.raw_dim());
    for (i, row) in xs.rows().into_iter().enumerate() {
        let v = f(&row.to_vec())?;
        for (j, x) in v.into_iter().enumerate() {
            out[(i, j)] = x;
        }
    }
    Ok(out)
}

/// CDF of N(mean, sd^2) truncated to `[lo, hi]`, computed on whichever tail
/// keeps precision.
fn truncated_normal_cdf(x: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let z = (x - mean) / sd;
    if z > 0.0 {
        let mass = norm_cdf(-a) - norm_cdf(-b);
        1.0 - (norm_cdf(-z) - norm_cdf(-b)) / mass
    } else {
        let mass = norm_cdf(b) - norm_cdf(a);
        (norm_cdf(z) - norm_cdf(a)) / mass
    }
}

fn truncated_normal_quantile(u: f64, mean: f64, sd: f64, lo: f64, hi: f64) -> f64 {
    let a = (lo - mean) / sd;
    let b = (hi - mean) / sd;
    let below = norm_cdf(a);
    let mass = norm_cdf(b) - below;
    let p = below + u * mass;
    let mut z = if p > 0.5 {
        // work with the upper tail to keep precision
        let q = norm_cdf(-b) + (1.0 - u) * mass;
        -norm_quantile(q)
    } else {
        norm_quantile(p)
    };
    // Newton polish against the truncated CDF itself.
    for _ in 0..3 {
        let x = mean + sd * z;
        let pdf = norm_pdf(z) / mass;
        if pdf < 1e-300 {
            break;
        }
        z -= (truncated_normal_cdf(x, mean, sd, lo, hi) - u) / pdf;
        z = z.clamp(a, b);
    }
    mean + sd * z
}

/// Point set as CSV: a header `x1,..,xd[,extra..]`, then one row per point.
/// `extra` columns are appended with their names.
pub fn points_to_csv(x: &Array2<f64>, extra: &[(&str, &[f64])]) -> String {
    let d = x.ncols();
    let mut names: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
    names.extend(extra.iter().map(|(n, _)| n.to_string()));
    let mut out = names.join(",");
    out.push('\n');
    for (i, row) in x.rows().into_iter().enumerate() {
        let mut cols: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        cols.extend(extra.iter().map(|(_, vals)| format!("{:?}", vals[i])));
        out.push_str(&cols.join(","));
        out.push('\n');
    }
    out
}

/// Parses a point-set CSV; returns column names and all numeric columns.
/// Lines starting with `#` are skipped.
pub fn points_from_csv(text: &str) -> Result<(Vec<String>, Array2<f64>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let names: Vec<String> = header.split(',').map(|h| h.trim().to_string()).collect();
    let mut values = Vec::new();
    let mut rows = 0;
    for (idx, line) in lines {
        let row: Vec<&str> = line.split(',').collect();
        if row.len() != names.len() {
            return Err(Error::Parse {
                line: idx + 1,
                message: format!("expected {} columns, found {}", names.len(), row.len()),
            });
        }
        for cell in row {
            values.push(cell.trim().parse::<f64>().map_err(|e| Error::Parse {
                line: idx + 1,
                message: format!("{e}: '{cell}'"),
            })?);
        }
        rows += 1;
    }
    let x = Array2::from_shape_vec((rows, names.len()), values).map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    Ok((names, x))
}

/// Reads the `x1..xd` columns of a point-set CSV file.
pub fn read_points(path: &std::path::Path) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let (names, all) = points_from_csv(&std::fs::read_to_string(path)?)?;
    let d = names.iter().take_while(|n| n.starts_with('x')).count();
    Ok(all.slice(ndarray::s![.., ..d]).to_owned())
}

pub fn write_points(path: &std::path::Path, x: &Array2<f64>, extra: &[(&str, &[f64])]) -> Result<()> {
    std::fs::write(path, points_to_csv(x, extra))?;
    Ok(())
}
