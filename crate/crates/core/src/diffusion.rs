//! Joint score model of winners and losers with EDM preconditioning,
//! trained by denoising score matching with random masking of the loser.
//!
//! Points live in the unit cube. The network sees `c_in · (z − center)`, so
//! the noise prior and the data share the cube's center.

use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Adam, Checkpoint, DenseNet, Ema, LrSchedule, WeightDecayMode};
use crate::util::{rng_for, Rng};

pub const MODEL_KIND: &str = "joint-score-v1";

/// Hidden width by dimension.
pub fn hidden_for_dim(d: usize) -> usize {
    match d {
        0..=2 => 32,
        3..=4 => 64,
        5..=10 => 96,
        _ => 128,
    }
}

/// Optimizer steps by dimension.
pub fn iterations_for_dim(d: usize) -> usize {
    if d <= 2 {
        8192
    } else if d < 10 {
        12288
    } else {
        15360
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreModelConfig {
    pub d: usize,
    pub hidden: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub p_mean: f64,
    pub p_std: f64,
    /// Probability of drawing σ from the sampling schedule.
    pub phi: f64,
    pub iterations: usize,
    /// Batch size cap; the batch is `min(n, batch)`.
    pub batch: usize,
    /// Number of levels of the sampling schedule.
    pub levels: usize,
    pub alpha_ref: f64,
    pub iter_ref: usize,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub ema_sigma_rel: f64,
    /// Probability that an item's loser is replaced by noise.
    pub mask_prob: f64,
    /// Coordinate the noise prior is centered on.
    pub center: f64,
}

impl Default for ScoreModelConfig {
    fn default() -> Self {
        Self::for_dim(2)
    }
}

impl ScoreModelConfig {
    pub fn for_dim(d: usize) -> Self {
        Self {
            d,
            hidden: hidden_for_dim(d),
            sigma_min: 0.01,
            sigma_max: 2.0,
            sigma_data: 0.5,
            p_mean: -1.2,
            p_std: 1.2,
            phi: 0.5,
            iterations: iterations_for_dim(d),
            batch: 4000,
            levels: 40,
            alpha_ref: 0.005,
            iter_ref: 1024,
            lr_schedule: LrSchedule::InverseSqrt,
            weight_decay: 0.0,
            ema_sigma_rel: 0.01,
            mask_prob: 0.5,
            center: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d == 0 {
            return bad("d must be positive");
        }
        if self.hidden < 4 {
            return bad("hidden width must be at least 4");
        }
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(self.sigma_data > 0.0) {
            return bad("sigma_data must be positive");
        }
        if !(0.0..=1.0).contains(&self.phi) || !(0.0..=1.0).contains(&self.mask_prob) {
            return bad("phi and mask_prob must lie in [0, 1]");
        }
        if self.levels < 2 || self.batch == 0 {
            return bad("need at least two levels and a positive batch");
        }
        Ok(())
    }

    pub fn schedule(&self) -> Vec<f64> {
        noise_schedule(self.sigma_min, self.sigma_max, self.levels)
    }

    pub fn c_skip(&self, sigma: f64) -> f64 {
        let sd2 = self.sigma_data * self.sigma_data;
        sd2 / (sigma * sigma + sd2)
    }

    pub fn c_out(&self, sigma: f64) -> f64 {
        sigma * self.sigma_data / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_in(&self, sigma: f64) -> f64 {
        1.0 / (sigma * sigma + self.sigma_data * self.sigma_data).sqrt()
    }

    pub fn c_noise(&self, sigma: f64) -> f64 {
        0.25 * sigma.ln()
    }
}

/// Cosine schedule from `sigma_max` down to `sigma_min` in `levels` steps.
pub fn noise_schedule(sigma_min: f64, sigma_max: f64, levels: usize) -> Vec<f64> {
    assert!(levels >= 2);
    (0..levels)
        .map(|k| {
            let c = (std::f64::consts::PI * k as f64 / (levels - 1) as f64).cos();
            sigma_min + 0.5 * (sigma_max - sigma_min) * (1.0 + c)
        })
        .collect()
}

/// Training noise level: a schedule level with probability `phi`, else a
/// log-normal draw clamped to `[sigma_min, sigma_max]`.
pub fn sample_train_sigma(cfg: &ScoreModelConfig, schedule: &[f64], rng: &mut Rng) -> f64 {
    draw_train_sigma(cfg, schedule, rng).0
}

/// As [`sample_train_sigma`], also reporting whether the schedule component
/// was chosen.
pub fn draw_train_sigma(cfg: &ScoreModelConfig, schedule: &[f64], rng: &mut Rng) -> (f64, bool) {
    if rng.gen::<f64>() < cfg.phi {
        (schedule[rng.gen_range(0..schedule.len())], true)
    } else {
        let z: f64 = StandardNormal.sample(rng);
        let sigma = (cfg.p_mean + cfg.p_std * z).exp().clamp(cfg.sigma_min, cfg.sigma_max);
        (sigma, false)
    }
}

/// Network and preconditioning for `s(x, x′, σ, joint, temp)`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointScoreNet {
    /// Evaluation weights (the EMA shadow after training).
    pub net: DenseNet,
    pub config: ScoreModelConfig,
    /// Raw optimizer weights at the end of training, if known.
    pub online: Option<Vec<f64>>,
}

impl JointScoreNet {
    pub fn new(config: ScoreModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d;
        let h = config.hidden;
        let widths = [2 * d + 3, h, h, h, h, h, 2 * d];
        let net = DenseNet::init(&widths, 2, h / 4, rng)?;
        Ok(Self {
            net,
            config,
            online: None,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.d
    }

    /// Network input rows for a batch of noisy states.
    fn inputs(&self, z: ArrayView2<'_, f64>, sigma: &[f64], joint: &[bool], temp: bool) -> Array2<f64> {
        let d2 = 2 * self.config.d;
        let b = z.nrows();
        let mut x = Array2::zeros((b, d2 + 3));
        for i in 0..b {
            let cin = self.config.c_in(sigma[i]);
            for j in 0..d2 {
                x[(i, j)] = cin * (z[(i, j)] - self.config.center);
            }
            x[(i, d2)] = self.config.c_noise(sigma[i]);
            x[(i, d2 + 1)] = f64::from(u8::from(joint[i]));
            x[(i, d2 + 2)] = f64::from(u8::from(temp));
        }
        x
    }

    /// Denoised estimate `D(z; σ)` for each row of `z` (width `2d`).
    pub fn denoise_batch(
        &self,
        z: ArrayView2<'_, f64>,
        sigma: &[f64],
        joint: &[bool],
        temp: bool,
    ) -> Result<Array2<f64>> {
        let f = self.net.forward_batch(self.inputs(z, sigma, joint, temp).view())?;
        Ok(self.precondition(z, sigma, &f))
    }

    fn precondition(&self, z: ArrayView2<'_, f64>, sigma: &[f64], f: &Array2<f64>) -> Array2<f64> {
        let c = self.config.center;
        let mut out = Array2::zeros(z.raw_dim());
        for i in 0..z.nrows() {
            let (cs, co) = (self.config.c_skip(sigma[i]), self.config.c_out(sigma[i]));
            for j in 0..z.ncols() {
                out[(i, j)] = c + cs * (z[(i, j)] - c) + co * f[(i, j)];
            }
        }
        out
    }

    /// Score `(D(z; σ) − z) / σ²` of the perturbed joint for each row.
    pub fn score_batch(
        &self,
        z: ArrayView2<'_, f64>,
        sigma: &[f64],
        joint: &[bool],
        temp: bool,
    ) -> Result<Array2<f64>> {
        let mut d = self.denoise_batch(z, sigma, joint, temp)?;
        for i in 0..z.nrows() {
            let inv = 1.0 / (sigma[i] * sigma[i]);
            for j in 0..z.ncols() {
                d[(i, j)] = (d[(i, j)] - z[(i, j)]) * inv;
            }
        }
        Ok(d)
    }

    /// Marginal winner score at noise `sigma` for each row of `x` (width
    /// `d`), with the loser slot filled by `noise` scaled by `sigma`.
    pub fn marginal_score_with_noise(
        &self,
        x: ArrayView2<'_, f64>,
        sigma: f64,
        noise: ArrayView2<'_, f64>,
    ) -> Result<Array2<f64>> {
        let d = self.config.d;
        if x.ncols() != d || noise.dim() != x.dim() {
            return Err(Error::Shape {
                expected: d,
                got: x.ncols(),
            });
        }
        let b = x.nrows();
        let mut z = Array2::zeros((b, 2 * d));
        z.slice_mut(s![.., ..d]).assign(&x);
        for i in 0..b {
            for j in 0..d {
                z[(i, d + j)] = self.config.center + sigma * noise[(i, j)];
            }
        }
        let full = self.score_batch(z.view(), &vec![sigma; b], &vec![false; b], false)?;
        Ok(full.slice(s![.., ..d]).to_owned())
    }

    /// Marginal winner score with fresh loser-slot noise from `rng`.
    pub fn marginal_score(&self, x: ArrayView2<'_, f64>, sigma: f64, rng: &mut Rng) -> Result<Array2<f64>> {
        let noise = Array2::from_shape_fn(x.raw_dim(), |_| StandardNormal.sample(rng));
        self.marginal_score_with_noise(x, sigma, noise.view())
    }

    /// Score at one point. With `joint`, `x_prime` must be given and all `2d`
    /// components are returned; otherwise the first `d` (winner) components.
    pub fn perturbed_score(
        &self,
        x: &[f64],
        x_prime: Option<&[f64]>,
        sigma: f64,
        joint: bool,
        temp: bool,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        let d = self.config.d;
        let (lo, hi) = (self.config.sigma_min, self.config.sigma_max);
        if !(sigma >= lo * (1.0 - 1e-12) && sigma <= hi * (1.0 + 1e-12)) {
            return Err(Error::invalid(format!("σ = {sigma} outside [{lo}, {hi}]")));
        }
        if x.len() != d {
            return Err(Error::Shape { expected: d, got: x.len() });
        }
        if joint != x_prime.is_some() {
            return Err(Error::invalid("x′ must be given exactly when joint is set"));
        }
        let mut z = Array2::zeros((1, 2 * d));
        for j in 0..d {
            z[(0, j)] = x[j];
            z[(0, d + j)] = match x_prime {
                Some(xp) => {
                    if xp.len() != d {
                        return Err(Error::Shape { expected: d, got: xp.len() });
                    }
                    xp[j]
                }
                None => {
                    let n: f64 = StandardNormal.sample(rng);
                    self.config.center + sigma * n
                }
            };
        }
        let out = self.score_batch(z.view(), &[sigma], &[joint], temp)?;
        let take = if joint { 2 * d } else { d };
        Ok(out.row(0).iter().take(take).copied().collect())
    }

    /// Raw weights as the network and the evaluation weights as EMA shadow.
    pub fn checkpoint(&self) -> Checkpoint {
        let mut net = self.net.clone();
        if let Some(online) = &self.online {
            net.params_mut().copy_from_slice(online);
        }
        Checkpoint {
            kind: MODEL_KIND.into(),
            net,
            ema: Some(self.net.params().to_vec()),
        }
    }

    /// Writes `<path>` (binary) and `<path>.json` (configuration).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.checkpoint().to_bytes())?;
        std::fs::write(sidecar(path), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        let ck = Checkpoint::from_bytes(&std::fs::read(path)?)?;
        if ck.kind != MODEL_KIND {
            return Err(Error::Checkpoint(format!("expected {MODEL_KIND}, found {}", ck.kind)));
        }
        let config: ScoreModelConfig = serde_json::from_str(&std::fs::read_to_string(sidecar(path))?)?;
        let mut net = ck.net;
        let mut online = None;
        if let Some(shadow) = ck.ema {
            online = Some(net.params().to_vec());
            net.params_mut().copy_from_slice(&shadow);
        }
        if net.input_width() != 2 * config.d + 3 {
            return Err(Error::Checkpoint("config does not match network".into()));
        }
        let online = online.filter(|o| o.as_slice() != net.params());
        Ok(Self { net, config, online })
    }
}

pub(crate) fn sidecar(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Training pairs, one row per item: winner then loser, cube coordinates.
pub struct DsmBatch<'a> {
    pub winners: ArrayView2<'a, f64>,
    pub losers: ArrayView2<'a, f64>,
}

/// Denoising score-matching loss averaged over the batch, with its
/// parameter gradient accumulated into `grad`.
///
/// Per item the loss is `ℓ(σ) ‖target − score‖²` with `ℓ(σ) = σ²` and the
/// kernel score `(y − z)/σ²` as target, which equals `‖D(z) − y‖² / σ²`.
/// Masked items put pure noise in the loser slot and score only winners.
pub fn dsm_loss(
    model: &JointScoreNet,
    batch: &DsmBatch<'_>,
    schedule: &[f64],
    rng: &mut Rng,
    grad: &mut [f64],
) -> Result<f64> {
    let cfg = &model.config;
    let d = cfg.d;
    let b = batch.winners.nrows();
    if b == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let mut y = Array2::zeros((b, 2 * d));
    let mut z = Array2::zeros((b, 2 * d));
    let mut sigma = vec![0.0; b];
    let mut joint = vec![true; b];
    for i in 0..b {
        sigma[i] = sample_train_sigma(cfg, schedule, rng);
        joint[i] = rng.gen::<f64>() >= cfg.mask_prob;
        for j in 0..d {
            y[(i, j)] = batch.winners[(i, j)];
            y[(i, d + j)] = batch.losers[(i, j)];
        }
        for j in 0..2 * d {
            let n: f64 = StandardNormal.sample(rng);
            z[(i, j)] = if j >= d && !joint[i] {
                cfg.center + sigma[i] * n
            } else {
                y[(i, j)] + sigma[i] * n
            };
        }
    }
    let inputs = model.inputs(z.view(), &sigma, &joint, false);
    let (f, tape) = model.net.forward_tape(inputs.view())?;
    let den = model.precondition(z.view(), &sigma, &f);
    let mut loss = 0.0;
    let mut d_f = Array2::zeros(f.raw_dim());
    let inv_b = 1.0 / b as f64;
    for i in 0..b {
        let active = if joint[i] { 2 * d } else { d };
        let w = 1.0 / (sigma[i] * sigma[i]);
        let co = cfg.c_out(sigma[i]);
        for j in 0..active {
            let r = den[(i, j)] - y[(i, j)];
            loss += w * r * r;
            d_f[(i, j)] = 2.0 * w * r * co * inv_b;
        }
    }
    loss *= inv_b;
    if !loss.is_finite() {
        return Err(Error::Training {
            iteration: 0,
            reason: "non-finite loss".into(),
        });
    }
    model.net.backward(&tape, d_f.view(), grad)?;
    Ok(loss)
}

pub struct TrainOutcome {
    pub model: JointScoreNet,
    pub losses: Vec<f64>,
}

/// Train on winner/loser pairs in cube coordinates. Returns the EMA weights.
pub fn train(
    winners: ArrayView2<'_, f64>,
    losers: ArrayView2<'_, f64>,
    config: &ScoreModelConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let n = winners.nrows();
    if n == 0 || losers.dim() != winners.dim() || winners.ncols() != config.d {
        return Err(Error::invalid("training pairs must be nonempty with matching shapes"));
    }
    let mut init_rng = rng_for(seed, 0);
    let mut model = JointScoreNet::new(config.clone(), &mut init_rng)?;
    let mut rng = rng_for(seed, 1);
    let schedule = config.schedule();
    let mut adam = Adam::new(model.net.param_count(), config.alpha_ref, config.iter_ref);
    adam.schedule = config.lr_schedule;
    adam.weight_decay = config.weight_decay;
    adam.decay_mode = WeightDecayMode::Decoupled;
    let mut ema = Ema::new(model.net.params(), config.ema_sigma_rel);
    let bsz = n.min(config.batch);
    let mut grad = vec![0.0; model.net.param_count()];
    let mut losses = Vec::with_capacity(config.iterations);
    let mut wb = Array2::zeros((bsz, config.d));
    let mut lb = Array2::zeros((bsz, config.d));
    for iter in 1..=config.iterations {
        let idx: Vec<usize> = if bsz == n {
            (0..n).collect()
        } else {
            sample_indices(&mut rng, n, bsz).into_vec()
        };
        for (r, &k) in idx.iter().enumerate() {
            wb.row_mut(r).assign(&winners.row(k));
            lb.row_mut(r).assign(&losers.row(k));
        }
        grad.iter_mut().for_each(|g| *g = 0.0);
        let batch = DsmBatch {
            winners: wb.view(),
            losers: lb.view(),
        };
        let loss = dsm_loss(&model, &batch, &schedule, &mut rng, &mut grad).map_err(|e| match e {
            Error::Training { reason, .. } => Error::Training { iteration: iter, reason },
            other => other,
        })?;
        if loss > 1e6 {
            return Err(Error::Training {
                iteration: iter,
                reason: format!("loss {loss:.3e} exceeds 1e6"),
            });
        }
        losses.push(loss);
        adam.step(model.net.params_mut(), &grad, iter)?;
        ema.update(model.net.params(), iter);
    }
    if config.iterations > 0 {
        model.online = Some(model.net.params().to_vec());
        model.net.params_mut().copy_from_slice(ema.shadow());
    }
    Ok(TrainOutcome { model, losses })
}
