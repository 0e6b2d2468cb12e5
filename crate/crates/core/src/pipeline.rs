//! End-to-end estimation: simulate or load comparisons, map them to the unit
//! cube, fit the joint score model and the ratio model, estimate the
//! tempering field from MWD importance samples, draw belief samples by
//! score-scaled ALD and score them against the target.
//!
//! Every stage writes one artifact whose file name carries a hash of the
//! settings and upstream artifacts it depends on; reruns reuse existing
//! artifacts unless forced.

use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, FieldMode, Resolved};
use crate::densities::{read_points, write_points, BoxDomain, SamplingDist};
use crate::density_eval::log_density_ode;
use crate::diffusion::{train, JointScoreNet};
use crate::error::{Error, Result};
use crate::metrics::{mean_std, MetricReport};
use crate::rum::{simulate_comparisons, ComparisonDataset};
use crate::sampler::{scaled_ald_net, AldConfig};
use crate::tempering::{field_slice, train_ratio_net, RatioNet, SliceGrid, TemperingFieldEstimate};

/// Seed for a named stage of a run, independent across stages.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(stage.as_bytes());
    h.update(seed.to_le_bytes());
    let bytes = h.finalize();
    u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
}

fn content_key<T: Serialize>(parts: &T) -> Result<String> {
    let json = serde_json::to_vec(parts)?;
    Ok(hex::encode(&Sha256::digest(&json)[..8]))
}

/// Tempering applied during belief sampling.
pub enum Tempering<'a> {
    Estimated(&'a TemperingFieldEstimate),
    Constant(f64),
    None,
}

impl Tempering<'_> {
    fn values(&self, x: ArrayView2<'_, f64>) -> Vec<f64> {
        match self {
            Self::Estimated(est) => est
                .evaluate_batch(x)
                .unwrap_or_else(|_| vec![f64::NAN; x.nrows()]),
            Self::Constant(c) => vec![*c; x.nrows()],
            Self::None => vec![1.0; x.nrows()],
        }
    }
}

pub fn simulate(res: &Resolved, seed: u64) -> Result<ComparisonDataset> {
    let target = res.belief_target()?;
    simulate_comparisons(&target, &res.lambda, &res.rum, res.n_pairs, seed)
}

pub fn fit_score(res: &Resolved, data: &ComparisonDataset, seed: u64) -> Result<JointScoreNet> {
    let (w, l) = data.unit_cube()?;
    Ok(train(w.view(), l.view(), &res.score_model, stage_seed(seed, "score"))?.model)
}

pub fn fit_ratio(res: &Resolved, data: &ComparisonDataset, seed: u64) -> Result<RatioNet> {
    let (w, l) = data.unit_cube()?;
    train_ratio_net(w.view(), l.view(), res.rum.s, &res.ratio, stage_seed(seed, "ratio"))
}

/// `2000 d` MWD samples by marginal ALD and their model log-densities, in
/// cube coordinates.
pub fn importance_samples(res: &Resolved, net: &JointScoreNet, seed: u64) -> Result<(Array2<f64>, Vec<f64>)> {
    let m = res.field.importance_per_dim * net.dim();
    let support = scaled_ald_net(net, &|x| vec![1.0; x.nrows()], &res.ald, m, stage_seed(seed, "importance"))?;
    let log_pw = log_density_ode(net, support.view(), &res.density_eval(stage_seed(seed, "density")))?;
    Ok((support, log_pw))
}

pub fn estimate_field(ratio: RatioNet, support: ArrayView2<'_, f64>, log_pw: &[f64]) -> Result<TemperingFieldEstimate> {
    let d = ratio.dim();
    TemperingFieldEstimate::new(ratio, support, log_pw, &BoxDomain::unit(d))
}

/// Belief samples in cube coordinates.
pub fn sample_cube(net: &JointScoreNet, tempering: &Tempering<'_>, ald: &AldConfig, n: usize, seed: u64) -> Result<Array2<f64>> {
    scaled_ald_net(net, &|x| tempering.values(x), ald, n, stage_seed(seed, "sample"))
}

/// Field on a grid over the first two axes, with points in original
/// coordinates.
pub fn field_grid(est: &TemperingFieldEstimate, lambda: &SamplingDist, n: usize) -> Result<SliceGrid> {
    let d = est.ratio.dim();
    let (ax1, ax2) = if d >= 2 { (0, 1) } else { (0, 0) };
    let mut grid = field_slice(est, &BoxDomain::unit(d), ax1, ax2, n)?;
    if d == 1 {
        grid.points.truncate(n);
        grid.values.truncate(n);
    }
    for p in &mut grid.points {
        *p = lambda.rosenblatt_inverse(p)?;
    }
    Ok(grid)
}

pub fn evaluate(res: &Resolved, samples: ArrayView2<'_, f64>, seed: u64) -> Result<MetricReport> {
    let target = res.belief_target()?;
    let reference = target.reference_sample(res.reference_n, stage_seed(seed, "reference"))?;
    MetricReport::compute(samples, reference.view(), seed)
}

/// Wall-clock seconds per stage; zero for reused artifacts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub simulate: f64,
    pub score: f64,
    pub ratio: f64,
    pub importance: f64,
    pub sample: f64,
    pub eval: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.simulate + self.score + self.ratio + self.importance + self.sample + self.eval
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedArtifacts {
    pub dataset: PathBuf,
    pub score: PathBuf,
    pub ratio: Option<PathBuf>,
    pub importance: Option<PathBuf>,
    pub field_grid: Option<PathBuf>,
    pub samples: PathBuf,
    pub metrics: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
    pub times: StageTimes,
    pub artifacts: SeedArtifacts,
    /// Upper clip of the estimated field, when one was built.
    pub field_upper: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentOutcome {
    pub target: String,
    pub seeds: Vec<SeedOutcome>,
}

impl ExperimentOutcome {
    pub fn reports(&self) -> Vec<&MetricReport> {
        self.seeds.iter().filter_map(|s| s.report.as_ref()).collect()
    }

    pub fn all_succeeded(&self) -> bool {
        self.seeds.iter().all(|s| s.error.is_none())
    }

    /// Per-seed rows plus a `mean ± std` line.
    pub fn summary(&self) -> String {
        let mut out = format!(
            "{:<22} {:>6} {:>12} {:>10} {:>10}\n",
            "target", "seed", "wasserstein", "mmtv", "seconds"
        );
        for s in &self.seeds {
            match &s.report {
                Some(r) => out.push_str(&format!(
                    "{:<22} {:>6} {:>12.4} {:>10.4} {:>10.1}\n",
                    self.target,
                    s.seed,
                    r.wasserstein,
                    r.mmtv,
                    s.times.total()
                )),
                None => out.push_str(&format!(
                    "{:<22} {:>6} failed: {}\n",
                    self.target,
                    s.seed,
                    s.error.as_deref().unwrap_or("unknown error")
                )),
            }
        }
        let w: Vec<f64> = self.reports().iter().map(|r| r.wasserstein).collect();
        let t: Vec<f64> = self.reports().iter().map(|r| r.mmtv).collect();
        if !w.is_empty() {
            let (wm, ws) = mean_std(&w);
            let (tm, ts) = mean_std(&t);
            out.push_str(&format!(
                "{:<22} {:>6} {:>12} {:>10}\n",
                self.target,
                "mean",
                format!("{wm:.3}±{ws:.3}"),
                format!("{tm:.3}±{ts:.3}")
            ));
        }
        out
    }
}

/// Runs every seed of an experiment; failures are recorded per seed and the
/// remaining seeds continue. Writes `summary.txt` and `summary.json` to the
/// output directory.
pub fn run_experiment(cfg: &ExperimentConfig, force: bool) -> Result<ExperimentOutcome> {
    let res = cfg.resolve()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    std::fs::write(cfg.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut seeds = Vec::new();
    for &seed in &res.seeds {
        seeds.push(run_seed(&res, seed, &cfg.out_dir, force));
    }
    let outcome = ExperimentOutcome {
        target: res.target.clone(),
        seeds,
    };
    std::fs::write(cfg.out_dir.join("summary.txt"), outcome.summary())?;
    std::fs::write(cfg.out_dir.join("summary.json"), serde_json::to_string_pretty(&outcome)?)?;
    Ok(outcome)
}

/// One seed of the pipeline; never panics on stage failure.
pub fn run_seed(res: &Resolved, seed: u64, out_dir: &Path, force: bool) -> SeedOutcome {
    let mut outcome = SeedOutcome {
        seed,
        report: None,
        error: None,
        times: StageTimes::default(),
        artifacts: SeedArtifacts::default(),
        field_upper: None,
    };
    if let Err(e) = run_seed_inner(res, seed, out_dir, force, &mut outcome) {
        outcome.error = Some(e.to_string());
    }
    outcome
}

fn timed<T>(slot: &mut f64, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f();
    *slot = start.elapsed().as_secs_f64();
    out
}

fn run_seed_inner(res: &Resolved, seed: u64, out_dir: &Path, force: bool, o: &mut SeedOutcome) -> Result<()> {
    let dir = out_dir.join(format!("seed-{seed}"));
    std::fs::create_dir_all(&dir)?;
    let fresh = |p: &Path| force || !p.exists();

    let data_key = content_key(&("simulate", &res.target, &res.lambda, &res.rum, res.n_pairs, seed))?;
    o.artifacts.dataset = dir.join(format!("data-{data_key}.csv"));
    let data = if fresh(&o.artifacts.dataset) {
        let data = timed(&mut o.times.simulate, || simulate(res, seed))?;
        data.write(&o.artifacts.dataset)?;
        data
    } else {
        ComparisonDataset::read(&o.artifacts.dataset)?
    };

    let score_key = content_key(&("score", &data_key, &res.score_model))?;
    o.artifacts.score = dir.join(format!("score-{score_key}.bin"));
    let net = if fresh(&o.artifacts.score) {
        let net = timed(&mut o.times.score, || fit_score(res, &data, seed))?;
        net.save(&o.artifacts.score)?;
        net
    } else {
        JointScoreNet::load(&o.artifacts.score)?
    };

    let mut estimate = None;
    let mut field_key = String::new();
    if res.field.mode == FieldMode::Estimated {
        let ratio_key = content_key(&("ratio", &data_key, &res.ratio, res.rum.s))?;
        let ratio_path = dir.join(format!("ratio-{ratio_key}.bin"));
        let ratio = if fresh(&ratio_path) {
            let r = timed(&mut o.times.ratio, || fit_ratio(res, &data, seed))?;
            r.save(&ratio_path)?;
            r
        } else {
            RatioNet::load(&ratio_path)?
        };
        o.artifacts.ratio = Some(ratio_path);

        let imp_key = content_key(&(
            "importance",
            &score_key,
            &res.ald,
            res.field.importance_per_dim,
            &res.field.divergence,
            res.field.tol,
        ))?;
        let imp_path = dir.join(format!("importance-{imp_key}.csv"));
        let (support, log_pw) = if fresh(&imp_path) {
            let (s, l) = timed(&mut o.times.importance, || importance_samples(res, &net, seed))?;
            write_points(&imp_path, &s, &[("logpw", &l)])?;
            (s, l)
        } else {
            read_importance(&imp_path)?
        };
        o.artifacts.importance = Some(imp_path);
        let est = estimate_field(ratio, support.view(), &log_pw)?;
        o.field_upper = Some(est.upper());
        field_key = content_key(&("field", &ratio_key, &imp_key))?;
        let grid_path = dir.join(format!("field-{field_key}.csv"));
        if fresh(&grid_path) {
            field_grid(&est, &res.lambda, res.field.grid)?.write_csv(&grid_path, "tau")?;
        }
        o.artifacts.field_grid = Some(grid_path);
        estimate = Some(est);
    }

    let sample_key = content_key(&(
        "sample",
        &score_key,
        &field_key,
        &res.field.mode,
        res.field.constant,
        &res.ald,
        res.n_samples,
    ))?;
    o.artifacts.samples = dir.join(format!("samples-{sample_key}.csv"));
    let samples = if fresh(&o.artifacts.samples) {
        let tempering = match (&res.field.mode, &estimate) {
            (FieldMode::Estimated, Some(est)) => Tempering::Estimated(est),
            (FieldMode::Constant, _) => Tempering::Constant(res.field.constant),
            _ => Tempering::None,
        };
        let x = timed(&mut o.times.sample, || {
            let cube = sample_cube(&net, &tempering, &res.ald, res.n_samples, seed)?;
            res.lambda.inverse_points(&cube)
        })?;
        write_points(&o.artifacts.samples, &x, &[])?;
        x
    } else {
        read_points(&o.artifacts.samples)?
    };

    let metrics_key = content_key(&("metrics", &sample_key, res.reference_n))?;
    o.artifacts.metrics = dir.join(format!("metrics-{metrics_key}.json"));
    let report = if fresh(&o.artifacts.metrics) {
        let r = timed(&mut o.times.eval, || evaluate(res, samples.view(), seed))?;
        std::fs::write(&o.artifacts.metrics, serde_json::to_string_pretty(&r)?)?;
        r
    } else {
        serde_json::from_str(&std::fs::read_to_string(&o.artifacts.metrics)?)?
    };
    o.report = Some(report);
    Ok(())
}

/// Reads an importance CSV (`x1..xd,logpw`, cube coordinates).
pub fn read_importance(path: &Path) -> Result<(Array2<f64>, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let (names, all) = crate::densities::points_from_csv(&std::fs::read_to_string(path)?)?;
    if names.last().map(String::as_str) != Some("logpw") || all.ncols() < 2 {
        return Err(Error::Parse {
            line: 1,
            message: "importance file needs columns x1..xd,logpw".into(),
        });
    }
    let d = all.ncols() - 1;
    Ok((all.slice(ndarray::s![.., ..d]).to_owned(), all.column(d).to_vec()))
}

/// Reads a metrics JSON file and checks its schema tag.
pub fn read_metrics(path: &Path) -> Result<MetricReport> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let r: MetricReport = serde_json::from_str(&std::fs::read_to_string(path)?)?;
    if r.schema != crate::metrics::METRICS_SCHEMA {
        return Err(Error::Checkpoint(format!("unsupported metrics schema '{}'", r.schema)));
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(target: &str, out: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::for_target(target).unwrap();
        cfg.out_dir = out.to_path_buf();
        cfg.n_pairs = Some(200);
        cfg.score_model.insert("iterations".into(), toml::Value::Integer(30));
        cfg.ratio.insert("iterations".into(), toml::Value::Integer(30));
        cfg.field.importance_per_dim = 50;
        cfg.field.tol = 1e-3;
        cfg.sampler.n_samples = 100;
        cfg.sampler.levels = 10;
        cfg.sampler.steps_per_level = Some(3);
        cfg.eval.reference_n = 100;
        cfg
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(stage_seed(1, "score"), stage_seed(1, "ratio"));
        assert_ne!(stage_seed(1, "score"), stage_seed(2, "score"));
        assert_eq!(stage_seed(7, "x"), stage_seed(7, "x"));
    }

    #[test]
    fn runs_are_deterministic_and_resumable() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny("onemoon2d", &dir.path().join("a"));
        let first = run_experiment(&cfg, false).unwrap();
        assert!(first.all_succeeded(), "{:?}", first.seeds[0].error);
        let s = &first.seeds[0];
        for p in [&s.artifacts.dataset, &s.artifacts.score, &s.artifacts.samples, &s.artifacts.metrics] {
            assert!(p.exists(), "{p:?}");
        }
        let grid = std::fs::read_to_string(s.artifacts.field_grid.as_ref().unwrap()).unwrap();
        assert_eq!(grid.lines().count(), 64 * 64 + 1);
        // Second run reuses every artifact.
        let again = run_experiment(&cfg, false).unwrap();
        assert_eq!(again.seeds[0].times.total(), 0.0);
        assert_eq!(again.seeds[0].report, s.report);
        // A fresh directory reproduces the metrics exactly.
        let other = run_experiment(&tiny("onemoon2d", &dir.path().join("b")), false).unwrap();
        assert_eq!(
            std::fs::read(&s.artifacts.metrics).unwrap(),
            std::fs::read(&other.seeds[0].artifacts.metrics).unwrap()
        );
        assert!(dir.path().join("a/summary.txt").exists());
        assert!(first.summary().contains("mean"));
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("onemoon2d", dir.path());
        cfg.seeds.clear();
        assert!(matches!(run_experiment(&cfg, false), Err(Error::Config(_))));
    }

    #[test]
    fn failing_stage_is_recorded_per_seed() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny("onemoon2d", dir.path());
        cfg.seeds = vec![1, 2];
        let res = cfg.resolve().unwrap();
        // Block the artifact directory of seed 1 with a file.
        std::fs::create_dir_all(dir.path()).unwrap();
        std::fs::write(dir.path().join("seed-1"), b"").unwrap();
        let bad = run_seed(&res, 1, dir.path(), false);
        assert!(bad.error.is_some());
        let good = run_seed(&res, 2, dir.path(), false);
        assert!(good.error.is_none());
    }
}
