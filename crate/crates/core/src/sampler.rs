//! Annealed Langevin dynamics, with an optional position-dependent tempering
//! of the score, and a probability-flow ODE sampler.

use ndarray::{Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::densities::BoxDomain;
use crate::diffusion::{noise_schedule, JointScoreNet};
use crate::error::{Error, Result};
use crate::util::{rng_for, Rng};

/// Batched score: rows of points and a noise level in, rows of scores out.
pub type ScoreFn<'a> = dyn FnMut(ArrayView2<'_, f64>, f64) -> Result<Array2<f64>> + 'a;

/// Batched tempering field: one value per row.
pub type FieldFn<'a> = dyn Fn(ArrayView2<'_, f64>) -> Vec<f64> + 'a;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AldConfig {
    /// Langevin steps per noise level.
    pub steps_per_level: usize,
    /// Noise levels, strictly decreasing.
    pub schedule: Vec<f64>,
    pub eps_base: f64,
}

impl AldConfig {
    /// 50 steps on each of 40 cosine levels, base step 0.15.
    pub fn standard(sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            steps_per_level: 50,
            schedule: noise_schedule(sigma_min, sigma_max, 40),
            eps_base: 0.15,
        }
    }

    /// Cheaper preset for two-dimensional problems.
    pub fn fast_2d(sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            steps_per_level: 15,
            schedule: noise_schedule(sigma_min, sigma_max, 40),
            eps_base: 7.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_level == 0 {
            return Err(Error::Config("need at least one step per level".into()));
        }
        if self.schedule.is_empty() || self.schedule.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("schedule must hold positive noise levels".into()));
        }
        if self.schedule.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("schedule must be strictly decreasing".into()));
        }
        if !(self.eps_base > 0.0) {
            return Err(Error::Config("eps_base must be positive".into()));
        }
        Ok(())
    }

    pub fn sigma_max(&self) -> f64 {
        self.schedule[0]
    }
}

/// `ε = ε_base / τ · σ² / σ_max²`.
pub fn step_size(eps_base: f64, tau: f64, sigma: f64, sigma_max: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("tempering value must be positive, got {tau}")));
    }
    Ok(eps_base / tau * (sigma * sigma) / (sigma_max * sigma_max))
}

/// Plain annealed Langevin dynamics. Chains start at `N(c, σ_max² I)` with
/// `c` the center of `boundary` (or the origin) and are reflected into
/// `boundary` after each step when one is given.
pub fn ald_run(
    score_fn: &mut ScoreFn<'_>,
    cfg: &AldConfig,
    d: usize,
    n_chains: usize,
    seed: u64,
    boundary: Option<&BoxDomain>,
) -> Result<Array2<f64>> {
    run(score_fn, None, cfg, d, n_chains, seed, boundary)
}

/// Annealed Langevin dynamics with drift `τ(x)·s(x, σ)` and step
/// `step_size(ε_base, τ(x), σ, σ_max)`.
pub fn scaled_ald_run(
    score_fn: &mut ScoreFn<'_>,
    tau_fn: &FieldFn<'_>,
    cfg: &AldConfig,
    d: usize,
    n_chains: usize,
    seed: u64,
    boundary: Option<&BoxDomain>,
) -> Result<Array2<f64>> {
    run(score_fn, Some(tau_fn), cfg, d, n_chains, seed, boundary)
}

fn run(
    score_fn: &mut ScoreFn<'_>,
    tau_fn: Option<&FieldFn<'_>>,
    cfg: &AldConfig,
    d: usize,
    n_chains: usize,
    seed: u64,
    boundary: Option<&BoxDomain>,
) -> Result<Array2<f64>> {
    cfg.validate()?;
    if let Some(b) = boundary {
        if b.dim() != d {
            return Err(Error::Shape { expected: d, got: b.dim() });
        }
    }
    let sigma_max = cfg.sigma_max();
    let mut rngs: Vec<Rng> = (0..n_chains).map(|c| rng_for(seed, c as u64)).collect();
    let center: Vec<f64> = match boundary {
        Some(b) => (0..d).map(|j| 0.5 * (b.lower()[j] + b.upper()[j])).collect(),
        None => vec![0.0; d],
    };
    let mut x = Array2::zeros((n_chains, d));
    for (i, rng) in rngs.iter_mut().enumerate() {
        for j in 0..d {
            let z: f64 = StandardNormal.sample(rng);
            x[(i, j)] = center[j] + sigma_max * z;
        }
        if let Some(b) = boundary {
            b.reflect(x.row_mut(i).as_slice_mut().expect("row-major"));
        }
    }
    if n_chains == 0 {
        return Ok(x);
    }
    let mut tau = vec![1.0; n_chains];
    for &sigma in &cfg.schedule {
        for _ in 0..cfg.steps_per_level {
            let s = score_fn(x.view(), sigma)?;
            if s.dim() != (n_chains, d) {
                return Err(Error::Shape { expected: d, got: s.ncols() });
            }
            if let Some(f) = tau_fn {
                tau = f(x.view());
            }
            for (i, rng) in rngs.iter_mut().enumerate() {
                let eps = step_size(cfg.eps_base, tau[i], sigma, sigma_max)?;
                let noise_scale = (2.0 * eps).sqrt();
                let mut row = x.row_mut(i);
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(rng);
                    row[j] += eps * tau[i] * s[(i, j)] + noise_scale * z;
                }
                if let Some(b) = boundary {
                    b.reflect(row.as_slice_mut().expect("row-major"));
                }
                if row.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFiniteChain { chain: i, sigma });
                }
            }
        }
    }
    Ok(x)
}

/// Marginal score of a trained joint model as a batched score function.
/// The loser slot gets fresh noise from `rng` at every call.
pub fn marginal_score_fn<'a>(net: &'a JointScoreNet, mut rng: Rng) -> impl FnMut(ArrayView2<'_, f64>, f64) -> Result<Array2<f64>> + 'a {
    move |x, sigma| net.marginal_score(x, sigma, &mut rng)
}

/// Score-scaled ALD on a trained joint model, reflected into the unit cube.
pub fn scaled_ald_net(
    net: &JointScoreNet,
    tau_fn: &FieldFn<'_>,
    cfg: &AldConfig,
    n_chains: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let d = net.dim();
    let mut score = marginal_score_fn(net, rng_for(seed, u64::MAX));
    scaled_ald_run(&mut score, tau_fn, cfg, d, n_chains, seed, Some(&BoxDomain::unit(d)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Local error tolerance of the adaptive Heun steps.
    pub tol: f64,
    /// Integrate the reverse SDE (Euler–Maruyama, `sde_steps` geometric steps)
    /// instead of the deterministic flow.
    pub stochastic: bool,
    pub sde_steps: usize,
}

impl OdeConfig {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            sigma_min,
            sigma_max,
            tol: 1e-5,
            stochastic: false,
            sde_steps: 400,
        }
    }
}

/// Statistics of an ODE solve.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
}

/// Integrate `dx/dσ = −σ s(x, σ)` from `σ_max` down to `σ_min`, starting from
/// `N(origin, σ_max² I)`. Returns the final points and step statistics.
pub fn ode_sample(
    score_fn: &mut ScoreFn<'_>,
    cfg: &OdeConfig,
    d: usize,
    n: usize,
    seed: u64,
    origin: &[f64],
) -> Result<(Array2<f64>, OdeStats)> {
    if origin.len() != d {
        return Err(Error::Shape { expected: d, got: origin.len() });
    }
    if !(cfg.sigma_min > 0.0 && cfg.sigma_min < cfg.sigma_max && cfg.tol > 0.0) {
        return Err(Error::Config("need 0 < sigma_min < sigma_max and tol > 0".into()));
    }
    let mut rng = rng_for(seed, 0);
    let mut x = Array2::from_shape_fn((n, d), |(_, j)| {
        let z: f64 = StandardNormal.sample(&mut rng);
        origin[j] + cfg.sigma_max * z
    });
    let mut stats = OdeStats::default();
    if n == 0 {
        return Ok((x, stats));
    }
    // Work in u = ln σ, where dx/du = −σ² s.
    let (u_end, u_start) = (cfg.sigma_min.ln(), cfg.sigma_max.ln());
    if cfg.stochastic {
        let h = (u_end - u_start) / cfg.sde_steps as f64;
        let mut u = u_start;
        for _ in 0..cfg.sde_steps {
            let sigma = u.exp();
            let next = (u + h).exp();
            let s = score_fn(x.view(), sigma)?;
            // Reverse SDE in σ: dx = −2σ s dσ + sqrt(2σ |dσ|) n.
            let ds = sigma - next;
            let noise = (2.0 * sigma * ds).sqrt();
            for i in 0..n {
                for j in 0..d {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    x[(i, j)] += 2.0 * sigma * ds * s[(i, j)] + noise * z;
                }
            }
            u += h;
            stats.accepted += 1;
        }
        return Ok((x, stats));
    }
    let rhs = |f: &mut ScoreFn<'_>, x: ArrayView2<'_, f64>, u: f64| -> Result<Array2<f64>> {
        let sigma = u.exp();
        let s = f(x, sigma)?;
        Ok(s * (-sigma * sigma))
    };
    let mut u = u_start;
    let mut h = -(u_start - u_end) / 32.0;
    let mut k1 = rhs(score_fn, x.view(), u)?;
    while u > u_end {
        if u + h < u_end {
            h = u_end - u;
        }
        let euler = &x + &(&k1 * h);
        let k2 = rhs(score_fn, euler.view(), u + h)?;
        let heun = &x + &((&k1 + &k2) * (0.5 * h));
        let err = (&heun - &euler)
            .iter()
            .zip(heun.iter())
            .map(|(e, v)| e.abs() / (1.0 + v.abs()))
            .fold(0.0f64, f64::max);
        if !err.is_finite() {
            return Err(Error::Solver(format!(
                "non-finite state at σ = {:.4e} after {} accepted / {} rejected steps",
                u.exp(),
                stats.accepted,
                stats.rejected
            )));
        }
        if err <= cfg.tol {
            x = heun;
            u += h;
            k1 = rhs(score_fn, x.view(), u)?;
            stats.accepted += 1;
        } else {
            stats.rejected += 1;
        }
        let factor = (0.9 * (cfg.tol / err.max(1e-300)).sqrt()).clamp(0.2, 4.0);
        h *= factor;
        if h.abs() < 1e-12 {
            return Err(Error::Solver(format!(
                "step size underflow at σ = {:.4e} after {} accepted / {} rejected steps",
                u.exp(),
                stats.accepted,
                stats.rejected
            )));
        }
    }
    Ok((x, stats))
}
