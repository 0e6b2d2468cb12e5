//! Tempering fields between the belief density and the marginal winner
//! density (MWD), their quadrature oracles, and the sample-based estimator.
//!
//! With uniform `λ` on `𝒳` and `Δ = log p(x) − log p(x′)`:
//!
//! * Bradley–Terry: `τ(x) = s ∫ σ(Δ/s) dx′ / ∫ σ(Δ/s) σ(−Δ/s) dx′`.
//! * Exponential: `τ(x) = (1/s) ((2|L| + 2A) / (A + B) − 1)` with
//!   `A = ∫_U e^{sΔ}`, `B = ∫_L e^{−sΔ}` over the sub- and superlevel sets
//!   `L = {Δ ≥ 0}` and `U = {Δ < 0}`.
//! * MWD: `p_w(x) = 2 λ(x) ∫ F(Δ) λ(x′) dx′` with `F` the noise-difference CDF.

use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::densities::{BeliefTarget, BoxDomain};
use crate::error::{Error, Result};
use crate::nn::{Adam, Checkpoint, DenseNet, LrSchedule, WeightDecayMode};
use crate::quadrature::Grid;
use crate::rum::{RumConfig, RumModel};
use crate::util::{halton, log_sum_exp, quantile, rng_for, sigmoid, softplus};

/// Laplace density of the noise difference at `t` (the derivative of the
/// exponential-RUM choice CDF).
fn noise_pdf(rum: &RumConfig, t: f64) -> f64 {
    match rum.model {
        RumModel::BradleyTerry => {
            let a = sigmoid(t / rum.s);
            a * (1.0 - a) / rum.s
        }
        RumModel::Exponential => 0.5 * rum.s * (-rum.s * t.abs()).exp(),
    }
}

/// Bradley–Terry field at a point with log-density `logp_x`, from log-density
/// values `nodes` on an equal-weight grid.
pub fn bt_field_from_values(logp_x: f64, nodes: &[f64], s: f64) -> Result<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for lp in nodes {
        let t = (logp_x - lp) / s;
        let a = sigmoid(t);
        num += a;
        den += a * sigmoid(-t);
    }
    if !(den > 0.0) || !num.is_finite() {
        return Err(Error::Degenerate("Bradley–Terry field denominator vanishes".into()));
    }
    Ok(s * num / den)
}

/// Exponential-RUM field from log-density values on a grid with cell volume
/// `cell`.
pub fn exp_field_from_values(logp_x: f64, nodes: &[f64], cell: f64, s: f64) -> Result<f64> {
    let (mut vol_l, mut a, mut b) = (0.0, 0.0, 0.0);
    for lp in nodes {
        let delta = logp_x - lp;
        if delta >= 0.0 {
            vol_l += cell;
            b += cell * (-s * delta).exp();
        } else {
            a += cell * (s * delta).exp();
        }
    }
    if !(a + b > 0.0) {
        return Err(Error::Degenerate("exponential field denominator vanishes".into()));
    }
    Ok(((2.0 * vol_l + 2.0 * a) / (a + b) - 1.0) / s)
}

/// MWD at a point: `2 λ(x) Σ F(logp_x − logp_i) w_i` with `w_i = λ(x_i)·cell`.
pub fn mwd_from_values(logp_x: f64, lambda_x: f64, nodes: &[f64], weights: &[f64], rum: &RumConfig) -> f64 {
    let acc: f64 = nodes
        .iter()
        .zip(weights)
        .map(|(lp, w)| rum.noise_cdf(logp_x - lp) * w)
        .sum();
    2.0 * lambda_x * acc
}

/// A belief target tabulated on a midpoint grid over its domain, for
/// quadrature of fields and the MWD under uniform `λ`.
pub struct TargetQuadrature<'a> {
    target: &'a BeliefTarget,
    grid: Grid,
    logp: Vec<f64>,
    log_z: f64,
}

impl<'a> TargetQuadrature<'a> {
    pub fn new(target: &'a BeliefTarget, per_axis: usize) -> Result<Self> {
        if per_axis < 2 {
            return Err(Error::Degenerate("quadrature grid needs at least two cells per axis".into()));
        }
        let grid = Grid::new(target.domain(), per_axis);
        let logp: Vec<f64> = grid.points().map(|x| target.log_unnorm(&x)).collect();
        if logp.iter().any(|v| v.is_nan()) {
            return Err(Error::Degenerate("target log-density is NaN on the grid".into()));
        }
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logp.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + (sum * grid.cell_volume()).ln();
        Ok(Self {
            target,
            grid,
            logp,
            log_z,
        })
    }

    /// Default resolution: 2048 cells in 1D, 256 per axis in 2D.
    pub fn standard(target: &'a BeliefTarget) -> Result<Self> {
        match target.dim() {
            1 => Self::new(target, 2048),
            2 => Self::new(target, 256),
            d => Err(Error::invalid(format!("field quadrature is limited to d ≤ 2, got {d}"))),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn target(&self) -> &BeliefTarget {
        self.target
    }

    /// Unnormalized log-density values at the grid nodes.
    pub fn node_log_density(&self) -> &[f64] {
        &self.logp
    }

    /// Log normalizer of the target over its domain.
    pub fn log_normalizer(&self) -> f64 {
        self.log_z
    }

    pub fn bt_field(&self, x: &[f64], s: f64) -> Result<f64> {
        bt_field_from_values(self.target.log_unnorm(x), &self.logp, s)
    }

    pub fn exp_field(&self, x: &[f64], s: f64) -> Result<f64> {
        exp_field_from_values(self.target.log_unnorm(x), &self.logp, self.grid.cell_volume(), s)
    }

    /// Field for the given choice model.
    pub fn field(&self, x: &[f64], rum: &RumConfig) -> Result<f64> {
        match rum.model {
            RumModel::BradleyTerry => self.bt_field(x, rum.s),
            RumModel::Exponential => self.exp_field(x, rum.s),
        }
    }

    /// MWD under uniform `λ` on the target's domain.
    pub fn mwd(&self, x: &[f64], rum: &RumConfig) -> f64 {
        let vol = self.target.domain().volume();
        let lp = self.target.log_unnorm(x);
        let acc: f64 = self.logp.iter().map(|v| rum.noise_cdf(lp - v)).sum();
        2.0 * acc * self.grid.cell_volume() / (vol * vol)
    }

    /// Score of the MWD, differentiating under the integral:
    /// `∇log p_w = ∇log p · ∫F′(Δ) / ∫F(Δ)`.
    pub fn mwd_score(&self, x: &[f64], rum: &RumConfig) -> Result<Vec<f64>> {
        let g = self
            .target
            .score(x)
            .ok_or_else(|| Error::invalid("target has no analytic score"))?;
        let lp = self.target.log_unnorm(x);
        let (mut num, mut den) = (0.0, 0.0);
        for v in &self.logp {
            num += noise_pdf(rum, lp - v);
            den += rum.noise_cdf(lp - v);
        }
        Ok(g.iter().map(|gi| gi * num / den).collect())
    }

    /// Normalized target density at `x`.
    pub fn density(&self, x: &[f64]) -> f64 {
        (self.target.log_unnorm(x) - self.log_z).exp()
    }
}

/// Sample-based integrals of the Bradley–Terry field in terms of a
/// log-density model `f` at importance samples `X_i` with weights `1/p_w`.
///
/// `τ̂` depends on `x` only through `c = f(x)`:
/// `τ̂ = s Σ w_i σ((c − f_i)/s) / Σ w_i σ((c − f_i)/s) σ((f_i − c)/s)`,
/// which is tabulated on a fine grid in `c`.
#[derive(Clone, Debug)]
pub struct FieldIntegrals {
    f_support: Vec<f64>,
    weights: Vec<f64>,
    s: f64,
    table_lo: f64,
    table_step: f64,
    table: Vec<f64>,
}

const TABLE_SPACING: f64 = 1.0 / 256.0;
const TABLE_MARGIN: f64 = 8.0;

impl FieldIntegrals {
    /// `log_pw` holds the MWD log-density at each support point; weights are
    /// rescaled by their maximum, which leaves the ratio unchanged.
    pub fn new(f_support: Vec<f64>, log_pw: &[f64], s: f64) -> Result<Self> {
        if f_support.is_empty() || f_support.len() != log_pw.len() {
            return Err(Error::Shape {
                expected: f_support.len(),
                got: log_pw.len(),
            });
        }
        if !(s > 0.0) || f_support.iter().chain(log_pw).any(|v| !v.is_finite()) {
            return Err(Error::invalid("field integrals need finite inputs and s > 0"));
        }
        let top = log_pw.iter().map(|v| -v).fold(f64::NEG_INFINITY, f64::max);
        let weights = log_pw.iter().map(|v| (-v - top).exp()).collect();
        let fmin = f_support.iter().cloned().fold(f64::INFINITY, f64::min);
        let fmax = f_support.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let table_lo = fmin - TABLE_MARGIN * s;
        let table_step = TABLE_SPACING * s;
        let n = ((fmax - fmin + 2.0 * TABLE_MARGIN * s) / table_step).ceil() as usize + 2;
        let mut out = Self {
            f_support,
            weights,
            s,
            table_lo,
            table_step,
            table: Vec::new(),
        };
        out.table = (0..n).map(|k| out.exact(table_lo + k as f64 * table_step)).collect::<Result<_>>()?;
        Ok(out)
    }

    pub fn len(&self) -> usize {
        self.f_support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.f_support.is_empty()
    }

    /// Unclipped estimate by direct summation in log space.
    pub fn exact(&self, c: f64) -> Result<f64> {
        let mut log_num = Vec::with_capacity(self.len());
        let mut log_den = Vec::with_capacity(self.len());
        for (fi, w) in self.f_support.iter().zip(&self.weights) {
            let t = (c - fi) / self.s;
            let lw = w.ln();
            let (la, lb) = (-softplus(-t), -softplus(t));
            log_num.push(lw + la);
            log_den.push(lw + la + lb);
        }
        let tau = self.s * (log_sum_exp(&log_num) - log_sum_exp(&log_den)).exp();
        if !tau.is_finite() {
            return Err(Error::Degenerate(
                "tempering field denominator is zero (degenerate ratio model)".into(),
            ));
        }
        Ok(tau)
    }

    /// Unclipped estimate from the table, falling back to summation outside.
    pub fn lookup(&self, c: f64) -> Result<f64> {
        let pos = (c - self.table_lo) / self.table_step;
        if !(pos >= 0.0 && pos < (self.table.len() - 1) as f64) {
            return self.exact(c);
        }
        let k = pos.floor() as usize;
        let t = pos - k as f64;
        Ok(self.table[k] * (1.0 - t) + self.table[k + 1] * t)
    }
}

/// Belief-density ratio model `log r(x, x′) = f(x′) − f(x)`.
#[derive(Clone, Debug)]
pub struct RatioNet {
    pub net: DenseNet,
    pub s: f64,
    pub weight_decay: f64,
}

pub const RATIO_KIND: &str = "ratio-net-v1";

#[derive(Serialize, Deserialize)]
struct RatioMeta {
    s: f64,
    weight_decay: f64,
}

impl RatioNet {
    /// Three hidden SiLU layers of width `hidden`, scalar output.
    pub fn new(d: usize, hidden: usize, s: f64, weight_decay: f64, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed, 0);
        let net = DenseNet::init(&[d, hidden, hidden, hidden, 1], 0, 0, &mut rng)?;
        Ok(Self { net, s, weight_decay })
    }

    pub fn dim(&self) -> usize {
        self.net.input_width()
    }

    /// Unnormalized log-density `f` at each row.
    pub fn f_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.net.forward_batch(x)?.column(0).to_vec())
    }

    pub fn f(&self, x: &[f64]) -> Result<f64> {
        Ok(self.net.forward(x)?[0])
    }

    pub fn log_ratio(&self, x: &[f64], x_prime: &[f64]) -> Result<f64> {
        Ok(self.f(x_prime)? - self.f(x)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ck = Checkpoint {
            kind: RATIO_KIND.into(),
            net: self.net.clone(),
            ema: None,
        };
        std::fs::write(path, ck.to_bytes())?;
        let meta = RatioMeta {
            s: self.s,
            weight_decay: self.weight_decay,
        };
        std::fs::write(crate::diffusion::sidecar(path), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let ck = Checkpoint::from_bytes(&std::fs::read(path)?)?;
        if ck.kind != RATIO_KIND {
            return Err(Error::Checkpoint(format!("expected {RATIO_KIND}, found {}", ck.kind)));
        }
        let meta: RatioMeta = serde_json::from_str(&std::fs::read_to_string(crate::diffusion::sidecar(path))?)?;
        Ok(Self {
            net: ck.net,
            s: meta.s,
            weight_decay: meta.weight_decay,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioTrainConfig {
    pub hidden: usize,
    pub iterations: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// `None` picks 1e-3, or 3e-3 for at most `100 d` comparisons.
    pub weight_decay: Option<f64>,
}

impl Default for RatioTrainConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            iterations: 2000,
            batch: 4000,
            learning_rate: 2e-3,
            weight_decay: None,
        }
    }
}

pub fn default_ratio_weight_decay(n: usize, d: usize) -> f64 {
    if n <= 100 * d {
        3e-3
    } else {
        1e-3
    }
}

/// Mean of `softplus(log r(w, l) / s)` over the pairs.
pub fn ratio_loss(ratio: &RatioNet, winners: ArrayView2<'_, f64>, losers: ArrayView2<'_, f64>) -> Result<f64> {
    let fw = ratio.f_batch(winners)?;
    let fl = ratio.f_batch(losers)?;
    let n = fw.len().max(1) as f64;
    Ok(fw
        .iter()
        .zip(&fl)
        .map(|(a, b)| softplus((b - a) / ratio.s))
        .sum::<f64>()
        / n)
}

/// Fits `f` by minimizing the Bradley–Terry negative log-likelihood with
/// Adam and coupled (gradient-added) weight decay.
pub fn train_ratio_net(
    winners: ArrayView2<'_, f64>,
    losers: ArrayView2<'_, f64>,
    s: f64,
    cfg: &RatioTrainConfig,
    seed: u64,
) -> Result<RatioNet> {
    let (n, d) = winners.dim();
    if n == 0 {
        return Err(Error::invalid("ratio training needs at least one comparison"));
    }
    if losers.dim() != (n, d) {
        return Err(Error::Shape {
            expected: n,
            got: losers.nrows(),
        });
    }
    let wd = cfg.weight_decay.unwrap_or_else(|| default_ratio_weight_decay(n, d));
    let mut ratio = RatioNet::new(d, cfg.hidden, s, wd, seed)?;
    let mut adam = Adam::new(ratio.net.param_count(), cfg.learning_rate, (cfg.iterations / 4).max(1));
    adam.schedule = LrSchedule::InverseSqrt;
    adam.weight_decay = wd;
    adam.decay_mode = WeightDecayMode::Coupled;
    let mut rng = rng_for(seed, 1);
    let b = cfg.batch.min(n).max(1);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut grad = vec![0.0; ratio.net.param_count()];
    let mut stack = Array2::zeros((2 * b, d));
    for iter in 1..=cfg.iterations {
        for i in 0..b {
            if cursor == n {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let k = order[cursor];
            cursor += 1;
            stack.row_mut(i).assign(&winners.row(k));
            stack.row_mut(b + i).assign(&losers.row(k));
        }
        let (out, tape) = ratio.net.forward_tape(stack.view())?;
        let mut d_out = Array2::zeros((2 * b, 1));
        let mut loss = 0.0;
        for i in 0..b {
            let t = (out[(b + i, 0)] - out[(i, 0)]) / s;
            loss += softplus(t);
            let g = sigmoid(t) / (s * b as f64);
            d_out[(i, 0)] = -g;
            d_out[(b + i, 0)] = g;
        }
        if !(loss / b as f64).is_finite() {
            return Err(Error::Training {
                iteration: iter,
                reason: "ratio loss diverged".into(),
            });
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        ratio.net.backward(&tape, d_out.view(), &mut grad)?;
        adam.step(ratio.net.params_mut(), &grad, iter)?;
    }
    Ok(ratio)
}

/// Number of lattice points used to set the upper clip.
pub const CLIP_LATTICE: usize = 4096;
pub const CLIP_QUANTILE: f64 = 0.999;

/// Estimated field `τ̂(x)` from a ratio model and MWD importance samples,
/// clipped to `[1, Q(0.999)]` with the quantile taken over a fixed Halton
/// lattice of the domain.
#[derive(Clone, Debug)]
pub struct TemperingFieldEstimate {
    pub ratio: RatioNet,
    integrals: FieldIntegrals,
    upper: f64,
}

impl TemperingFieldEstimate {
    /// `support` rows are MWD samples, `log_pw` their model log-densities.
    pub fn new(ratio: RatioNet, support: ArrayView2<'_, f64>, log_pw: &[f64], domain: &BoxDomain) -> Result<Self> {
        if support.ncols() != ratio.dim() || domain.dim() != ratio.dim() {
            return Err(Error::Shape {
                expected: ratio.dim(),
                got: support.ncols(),
            });
        }
        let f_support = ratio.f_batch(support)?;
        let integrals = FieldIntegrals::new(f_support, log_pw, ratio.s)?;
        let mut est = Self {
            ratio,
            integrals,
            upper: f64::INFINITY,
        };
        let lattice = clip_lattice(domain);
        let raw = est.raw_batch(lattice.view())?;
        est.upper = quantile(&raw, CLIP_QUANTILE).max(1.0);
        Ok(est)
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn support_len(&self) -> usize {
        self.integrals.len()
    }

    /// Unclipped estimates.
    pub fn raw_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        self.ratio
            .f_batch(x)?
            .into_iter()
            .map(|c| self.integrals.lookup(c))
            .collect()
    }

    pub fn evaluate_batch(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        Ok(self.raw_batch(x)?.into_iter().map(|t| t.clamp(1.0, self.upper)).collect())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let c = self.ratio.f(x)?;
        Ok(self.integrals.lookup(c)?.clamp(1.0, self.upper))
    }
}

/// The fixed clip lattice: the first `CLIP_LATTICE` Halton points mapped to
/// `domain`.
pub fn clip_lattice(domain: &BoxDomain) -> Array2<f64> {
    let d = domain.dim();
    let mut out = Array2::zeros((CLIP_LATTICE, d));
    for i in 0..CLIP_LATTICE {
        let h = halton(i + 1, d);
        for j in 0..d {
            out[(i, j)] = domain.lower()[j] + h[j] * domain.width(j);
        }
    }
    out
}

/// Values of a scalar function on a `n × n` slice through `domain` along
/// axes `ax1` and `ax2`, with the other coordinates at `anchor`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceGrid {
    pub ax1: usize,
    pub ax2: usize,
    pub n: usize,
    /// Row-major points, `ax1` varying slowest.
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
}

impl SliceGrid {
    pub fn points_for(domain: &BoxDomain, ax1: usize, ax2: usize, n: usize, anchor: &[f64]) -> Result<Vec<Vec<f64>>> {
        let d = domain.dim();
        if ax1 >= d || ax2 >= d || ax1 == ax2 && d > 1 || anchor.len() != d || n == 0 {
            return Err(Error::invalid("invalid slice axes or anchor"));
        }
        let mut pts = Vec::with_capacity(n * n);
        for a in 0..n {
            for b in 0..n {
                let mut p = anchor.to_vec();
                p[ax1] = domain.lower()[ax1] + (a as f64 + 0.5) / n as f64 * domain.width(ax1);
                p[ax2] = domain.lower()[ax2] + (b as f64 + 0.5) / n as f64 * domain.width(ax2);
                pts.push(p);
            }
        }
        Ok(pts)
    }

    /// CSV with columns `x1..xd,<value_name>`.
    pub fn write_csv(&self, path: &Path, value_name: &str) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let d = self.points.first().map_or(0, Vec::len);
        let header: Vec<String> = (1..=d).map(|j| format!("x{j}")).collect();
        writeln!(f, "{},{value_name}", header.join(","))?;
        for (p, v) in self.points.iter().zip(&self.values) {
            let cols: Vec<String> = p.iter().map(|c| format!("{c:?}")).collect();
            writeln!(f, "{},{v:?}", cols.join(","))?;
        }
        Ok(())
    }
}

/// Field estimate on a slice through the domain center.
pub fn field_slice(est: &TemperingFieldEstimate, domain: &BoxDomain, ax1: usize, ax2: usize, n: usize) -> Result<SliceGrid> {
    let center: Vec<f64> = (0..domain.dim())
        .map(|j| 0.5 * (domain.lower()[j] + domain.upper()[j]))
        .collect();
    let points = SliceGrid::points_for(domain, ax1, ax2, n, &center)?;
    let x = Array2::from_shape_fn((points.len(), domain.dim()), |(i, j)| points[i][j]);
    let values = est.evaluate_batch(x.view())?;
    Ok(SliceGrid {
        ax1,
        ax2,
        n,
        points,
        values,
    })
}

/// Quadrature inputs for the constant-tempering results: at each node the
/// field `τ(x)`, `‖∇log q(x)‖²`, and the weight `p(x)·cell` (normalized
/// internally).
#[derive(Clone, Debug, Default)]
pub struct ConstantTemperingInputs {
    pub tau: Vec<f64>,
    pub grad_q_sq: Vec<f64>,
    pub p_weight: Vec<f64>,
}

impl ConstantTemperingInputs {
    /// Tabulates the inputs on `grid`; `log_p` may be unnormalized.
    pub fn on_grid(
        grid: &Grid,
        field: &dyn Fn(&[f64]) -> Result<f64>,
        score_q: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
        log_p: &dyn Fn(&[f64]) -> f64,
    ) -> Result<Self> {
        let mut out = Self::default();
        let mut logs = Vec::with_capacity(grid.len());
        for x in grid.points() {
            out.tau.push(field(&x)?);
            out.grad_q_sq.push(score_q(&x)?.iter().map(|g| g * g).sum());
            logs.push(log_p(&x));
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out.p_weight = logs.iter().map(|l| (l - max).exp()).collect();
        Ok(out)
    }

    fn expect(&self, g: impl Fn(usize) -> f64) -> f64 {
        let z: f64 = self.p_weight.iter().sum();
        (0..self.p_weight.len()).map(|i| self.p_weight[i] * g(i)).sum::<f64>() / z
    }
}

/// Optimal constant tempering `τ* = E_p[ω τ]`, `ω = ‖∇log q‖² / E_p‖∇log q‖²`.
pub fn optimal_constant_tau(inp: &ConstantTemperingInputs) -> Result<f64> {
    let norm = inp.expect(|i| inp.grad_q_sq[i]);
    if !(norm > 0.0) {
        return Err(Error::Degenerate("score of q vanishes under p".into()));
    }
    // Centered on one field value so a constant field is returned exactly.
    let c0 = inp.tau.first().copied().unwrap_or(0.0);
    Ok(c0 + inp.expect(|i| inp.grad_q_sq[i] * (inp.tau[i] - c0)) / norm)
}

/// Constant-tempering error `F(p, q^τ) = E_p[(τ − τ(X))² ‖∇log q(X)‖²]`.
pub fn constant_tempering_error(inp: &ConstantTemperingInputs, tau: f64) -> f64 {
    inp.expect(|i| (tau - inp.tau[i]).powi(2) * inp.grad_q_sq[i])
}

/// Error at the optimum, `E_p[‖∇log q‖² τ²] − E_p[τ ‖∇log q‖²]² / E_p‖∇log q‖²`.
pub fn optimal_tempering_error(inp: &ConstantTemperingInputs) -> Result<f64> {
    let norm = inp.expect(|i| inp.grad_q_sq[i]);
    if !(norm > 0.0) {
        return Err(Error::Degenerate("score of q vanishes under p".into()));
    }
    let m1 = inp.expect(|i| inp.grad_q_sq[i] * inp.tau[i]);
    Ok(inp.expect(|i| inp.grad_q_sq[i] * inp.tau[i] * inp.tau[i]) - m1 * m1 / norm)
}

/// Fisher divergence `E_p‖∇log p − τ ∇log q‖²` by quadrature on `grid`.
pub fn fisher_divergence_tempered(
    grid: &Grid,
    score_p: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    score_q: &dyn Fn(&[f64]) -> Result<Vec<f64>>,
    log_p: &dyn Fn(&[f64]) -> f64,
    tau: f64,
) -> Result<f64> {
    let (mut num, mut z) = (0.0, 0.0);
    let logs: Vec<f64> = grid.points().map(|x| log_p(&x)).collect();
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    for (x, l) in grid.points().zip(&logs) {
        let w = (l - max).exp();
        let sp = score_p(&x)?;
        let sq = score_q(&x)?;
        let e: f64 = sp.iter().zip(&sq).map(|(a, b)| (a - tau * b).powi(2)).sum();
        num += w * e;
        z += w;
    }
    Ok(num / z)
}
