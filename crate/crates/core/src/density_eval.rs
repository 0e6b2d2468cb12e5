//! Log-density of a score model by the instantaneous change of variables
//! along the probability-flow ODE.
//!
//! With `u = ln σ` the coupled system is `dx/du = −σ² s(x, σ)` and
//! `dℓ/du = σ² ∇·s(x, σ)`, integrated from `σ_min` to `σ_max`, and
//! `log p(x) = log N(x(σ_max); c, σ_max² I) − ℓ(σ_max)`.

use ndarray::{s, Array2, ArrayView2};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diffusion::JointScoreNet;
use crate::error::{Error, Result};
use crate::sampler::ScoreFn;
use crate::util::rng_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum Divergence {
    /// `d` forward differences along the coordinate axes.
    Exact,
    /// Trace estimate from a fixed set of Gaussian directions per point,
    /// each rescaled to norm `√d`.
    Hutchinson { probes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityEvalConfig {
    pub divergence: Divergence,
    /// Local error tolerance of the predictor-corrector steps.
    pub tol: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    /// Forward-difference step on the network input.
    pub fd_step: f64,
    /// Seeds the per-point loser-slot noise and probes.
    pub seed: u64,
}

impl DensityEvalConfig {
    pub fn new(sigma_min: f64, sigma_max: f64) -> Self {
        Self {
            divergence: Divergence::Exact,
            tol: 1e-5,
            sigma_min,
            sigma_max,
            fd_step: 1e-4,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return Err(Error::Config("need 0 < sigma_min < sigma_max".into()));
        }
        if !(self.tol > 0.0 && self.fd_step > 0.0) {
            return Err(Error::Config("tol and fd_step must be positive".into()));
        }
        if let Divergence::Hutchinson { probes: 0 } = self.divergence {
            return Err(Error::Config("need at least one probe".into()));
        }
        Ok(())
    }
}

/// Solver statistics of one batched evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SolveStats {
    pub accepted: usize,
    pub rejected: usize,
    pub restarts: usize,
    pub score_calls: usize,
}

/// Right-hand side of the augmented system for a batch of points.
struct Rhs<'s, 'f> {
    score: &'s mut ScoreFn<'f>,
    divergence: Divergence,
    /// Probe directions, one `d`-block per probe, for each point.
    probes: Option<Array2<f64>>,
    h: f64,
    d: usize,
    calls: usize,
}

impl Rhs<'_, '_> {
    /// Returns `[dx/du, dℓ/du]` rows for state rows `[x, ℓ]`.
    fn eval(&mut self, u: f64, y: &Array2<f64>) -> Result<Array2<f64>> {
        let d = self.d;
        let b = y.nrows();
        let sigma = u.exp();
        let x = y.slice(s![.., ..d]);
        let k = match self.divergence {
            Divergence::Exact => d,
            Divergence::Hutchinson { probes } => probes,
        };
        // Stack the base points and k displaced copies.
        let mut stack = Array2::zeros(((k + 1) * b, d));
        stack.slice_mut(s![..b, ..]).assign(&x);
        for p in 0..k {
            let mut block = stack.slice_mut(s![(p + 1) * b..(p + 2) * b, ..]);
            block.assign(&x);
            match &self.probes {
                None => block.column_mut(p).mapv_inplace(|v| v + self.h),
                Some(v) => {
                    let dir = v.slice(s![.., p * d..(p + 1) * d]);
                    block.scaled_add(self.h, &dir);
                }
            }
        }
        let sc = (self.score)(stack.view(), sigma)?;
        self.calls += 1;
        if sc.dim() != stack.dim() {
            return Err(Error::Shape { expected: d, got: sc.ncols() });
        }
        let s2 = sigma * sigma;
        let mut out = Array2::zeros((b, d + 1));
        for i in 0..b {
            for j in 0..d {
                out[(i, j)] = -s2 * sc[(i, j)];
            }
            let mut div = 0.0;
            for p in 0..k {
                let r = (p + 1) * b + i;
                match &self.probes {
                    None => div += (sc[(r, p)] - sc[(i, p)]) / self.h,
                    Some(v) => {
                        for j in 0..d {
                            div += v[(i, p * d + j)] * (sc[(r, j)] - sc[(i, j)]) / self.h;
                        }
                    }
                }
            }
            if self.probes.is_some() {
                div /= k as f64;
            }
            out[(i, d)] = s2 * div;
        }
        Ok(out)
    }
}

fn rk4_step(rhs: &mut Rhs<'_, '_>, u: f64, y: &Array2<f64>, f0: &Array2<f64>, h: f64) -> Result<Array2<f64>> {
    let k1 = f0;
    let k2 = rhs.eval(u + 0.5 * h, &(y + &(k1 * (0.5 * h))))?;
    let k3 = rhs.eval(u + 0.5 * h, &(y + &(&k2 * (0.5 * h))))?;
    let k4 = rhs.eval(u + h, &(y + &(&k3 * h)))?;
    Ok(y + &((k1 + &(&k2 * 2.0) + &(&k3 * 2.0) + &k4) * (h / 6.0)))
}

/// Log-density of each row of `xs` under the model whose perturbed score is
/// `score`, with the Gaussian prior centered at `origin`.
///
/// All rows share one adaptive step sequence: fourth-order Adams–Bashforth
/// predictor, Adams–Moulton corrector, Milne's error estimate, and RK4
/// restarts whenever the step changes.
pub fn log_density_batch(
    score: &mut ScoreFn<'_>,
    xs: ArrayView2<'_, f64>,
    origin: &[f64],
    cfg: &DensityEvalConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    cfg.validate()?;
    let (b, d) = xs.dim();
    if origin.len() != d {
        return Err(Error::Shape { expected: d, got: origin.len() });
    }
    let mut stats = SolveStats::default();
    if b == 0 {
        return Ok((Vec::new(), stats));
    }
    let probes = match cfg.divergence {
        Divergence::Exact => None,
        Divergence::Hutchinson { probes } => {
            let mut v = Array2::zeros((b, probes * d));
            for i in 0..b {
                let mut rng = rng_for(cfg.seed ^ 0x9e37_79b9_7f4a_7c15, point_key(xs.row(i).iter()));
                for p in 0..probes {
                    let mut dir = v.slice_mut(s![i, p * d..(p + 1) * d]);
                    dir.mapv_inplace(|_| StandardNormal.sample(&mut rng));
                    let norm = dir.iter().map(|c| c * c).sum::<f64>().sqrt();
                    let scale = (d as f64).sqrt() / norm.max(f64::MIN_POSITIVE);
                    dir.mapv_inplace(|c| c * scale);
                }
            }
            Some(v)
        }
    };
    let mut rhs = Rhs {
        score,
        divergence: cfg.divergence,
        probes,
        h: cfg.fd_step,
        d,
        calls: 0,
    };
    let mut y = Array2::zeros((b, d + 1));
    y.slice_mut(s![.., ..d]).assign(&xs);
    let (u0, u_end) = (cfg.sigma_min.ln(), cfg.sigma_max.ln());
    let span = u_end - u0;
    let mut u = u0;
    let mut h = span / 64.0;
    let h_min = span * 1e-9;
    let scaled_err = |a: &Array2<f64>, bb: &Array2<f64>| {
        a.iter()
            .zip(bb.iter())
            .map(|(p, c)| (19.0 / 270.0) * (c - p).abs() / (1.0 + c.abs()))
            .fold(0.0f64, f64::max)
    };
    let mut f = rhs.eval(u, &y)?;
    'outer: while u < u_end - 1e-12 * span {
        // Restart: build a history of four derivative values with RK4.
        stats.restarts += 1;
        let mut hist = vec![f.clone()];
        for _ in 0..3 {
            if u + h >= u_end {
                break;
            }
            y = rk4_step(&mut rhs, u, &y, hist.last().expect("nonempty"), h)?;
            u += h;
            stats.accepted += 1;
            hist.push(rhs.eval(u, &y)?);
        }
        if hist.len() < 4 {
            // Too close to the end for a multistep method.
            let last = u_end - u;
            y = rk4_step(&mut rhs, u, &y, hist.last().expect("nonempty"), last)?;
            stats.accepted += 1;
            break 'outer;
        }
        let mut since_restart = 0usize;
        loop {
            if u >= u_end - 1e-12 * span {
                break 'outer;
            }
            if u + h > u_end {
                h = u_end - u;
                f = hist.pop().expect("history");
                continue 'outer;
            }
            let n = hist.len();
            let (f3, f2, f1, f0) = (&hist[n - 1], &hist[n - 2], &hist[n - 3], &hist[n - 4]);
            let pred = &y + &((f3 * 55.0 - f2 * 59.0 + f1 * 37.0 - f0 * 9.0) * (h / 24.0));
            let fp = rhs.eval(u + h, &pred)?;
            let corr = &y + &((&fp * 9.0 + f3 * 19.0 - f2 * 5.0 + f1) * (h / 24.0));
            let err = scaled_err(&pred, &corr);
            if !err.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite state at σ = {:.4e} ({} accepted, {} rejected steps)",
                    u.exp(),
                    stats.accepted,
                    stats.rejected
                )));
            }
            if err <= cfg.tol {
                y = corr;
                u += h;
                stats.accepted += 1;
                since_restart += 1;
                let fnew = rhs.eval(u, &y)?;
                hist.push(fnew);
                if hist.len() > 4 {
                    hist.remove(0);
                }
                if err < cfg.tol / 64.0 && since_restart >= 8 {
                    h *= 2.0;
                    f = hist.pop().expect("history");
                    continue 'outer;
                }
            } else {
                stats.rejected += 1;
                h *= 0.5;
                if h < h_min {
                    return Err(Error::Solver(format!(
                        "step size underflow at σ = {:.4e} ({} accepted, {} rejected steps)",
                        u.exp(),
                        stats.accepted,
                        stats.rejected
                    )));
                }
                f = hist.pop().expect("history");
                continue 'outer;
            }
        }
    }
    stats.score_calls = rhs.calls;
    let var = cfg.sigma_max * cfg.sigma_max;
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI * var).ln();
    let out = (0..b)
        .map(|i| {
            let q: f64 = (0..d).map(|j| (y[(i, j)] - origin[j]).powi(2)).sum();
            log_norm - 0.5 * q / var - y[(i, d)]
        })
        .collect::<Vec<_>>();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::Solver("non-finite log-density".into()));
    }
    Ok((out, stats))
}

/// Stream index derived from the bits of a point, so that per-point random
/// draws do not depend on batch composition.
fn point_key<'a>(x: impl Iterator<Item = &'a f64>) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for v in x {
        h ^= v.to_bits();
        // splitmix64 finalizer
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// Log-density of the trained model's marginal (winner) law at each row of
/// `xs`, in cube coordinates. The loser slot holds one fixed noise draw per
/// point, scaled by σ along the trajectory, so the right-hand side is smooth.
pub fn log_density_ode(net: &JointScoreNet, xs: ArrayView2<'_, f64>, cfg: &DensityEvalConfig) -> Result<Vec<f64>> {
    log_density_ode_stats(net, xs, cfg).map(|(v, _)| v)
}

pub fn log_density_ode_stats(
    net: &JointScoreNet,
    xs: ArrayView2<'_, f64>,
    cfg: &DensityEvalConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    let d = net.dim();
    if xs.ncols() != d {
        return Err(Error::Shape { expected: d, got: xs.ncols() });
    }
    let b = xs.nrows();
    let mut noise = Array2::zeros((b, d));
    for i in 0..b {
        let mut rng = rng_for(cfg.seed, point_key(xs.row(i).iter()));
        for v in noise.row_mut(i).iter_mut() {
            *v = StandardNormal.sample(&mut rng);
        }
    }
    let mut score = |x: ArrayView2<'_, f64>, sigma: f64| -> Result<Array2<f64>> {
        let reps = x.nrows() / b.max(1);
        let mut tiled = Array2::zeros(x.raw_dim());
        for r in 0..reps {
            tiled.slice_mut(s![r * b..(r + 1) * b, ..]).assign(&noise);
        }
        net.marginal_score_with_noise(x, sigma, tiled.view())
    };
    let origin = vec![net.config.center; d];
    // Evaluate in chunks to bound memory; chunk results do not depend on
    // each other except through the shared step sequence within a chunk.
    log_density_batch(&mut score, xs, &origin, cfg)
}
