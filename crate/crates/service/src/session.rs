//! Elicitation sessions: spec validation, the seeded pair queue, the
//! append-only event log and fitting.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use belief_core::config::{EvalSpec, ExperimentConfig, FieldMode, FieldSpec, LambdaSpec, SamplerSpec};
use belief_core::densities::{read_points, write_points, BeliefTarget, BoxDomain, SamplingDist};
use belief_core::diffusion::JointScoreNet;
use belief_core::pipeline::{self, Tempering};
use belief_core::rum::{default_noise_scale, ComparisonDataset, RumConfig, RumModel};
use belief_core::tempering::{RatioNet, SliceGrid, TemperingFieldEstimate};
use belief_core::util::rng_for;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

pub const EVENT_SCHEMA: &str = "session-event-v1";
pub const MAX_DIM: usize = 16;
/// Answers required before a fit is accepted.
pub const MIN_FIT_ANSWERS: usize = 50;
pub const GRID_SIDE: usize = 64;
const EVENTS_FILE: &str = "events.ndjson";

#[derive(Debug, thiserror::Error)]
pub enum SessionError {
    #[error("invalid session spec: {0}")]
    InvalidSpec(String),
    #[error("pair {got} is not the pending pair {pending}")]
    StalePair { got: u64, pending: u64 },
    #[error("at least {MIN_FIT_ANSWERS} answers are needed to fit, have {0}")]
    TooFewAnswers(usize),
    #[error("a fit is already running")]
    Busy,
    #[error("no fitted model yet")]
    NotReady,
    #[error("corrupt event log: {0}")]
    Log(String),
    #[error(transparent)]
    Core(#[from] belief_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SessionError>;

fn default_s() -> f64 {
    default_noise_scale()
}

fn default_model() -> RumModel {
    RumModel::BradleyTerry
}

fn default_lambda() -> LambdaSpec {
    LambdaSpec::Uniform
}

fn default_seed() -> u64 {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    #[serde(default)]
    pub labels: Vec<String>,
    #[serde(default)]
    pub units: Vec<String>,
    #[serde(default = "default_lambda")]
    pub lambda: LambdaSpec,
    /// Assumed noise level of the expert.
    #[serde(default = "default_s")]
    pub s: f64,
    #[serde(default = "default_model")]
    pub model: RumModel,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl SessionSpec {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn validate(mut self) -> Result<(Self, BoxDomain, SamplingDist, RumConfig)> {
        let d = self.dim();
        if d == 0 || d > MAX_DIM {
            return Err(SessionError::InvalidSpec(format!("dimension must be in 1..={MAX_DIM}, got {d}")));
        }
        let domain = BoxDomain::new(self.lower.clone(), self.upper.clone())
            .map_err(|e| SessionError::InvalidSpec(e.to_string()))?;
        for (name, v) in [("labels", &mut self.labels), ("units", &mut self.units)] {
            if v.is_empty() {
                *v = (1..=d)
                    .map(|j| if name == "labels" { format!("x{j}") } else { String::new() })
                    .collect();
            } else if v.len() != d {
                return Err(SessionError::InvalidSpec(format!("{name} needs {d} entries, got {}", v.len())));
            }
        }
        let rum = RumConfig::new(self.model, self.s).map_err(|e| SessionError::InvalidSpec(e.to_string()))?;
        let lambda = self
            .lambda
            .resolve(&BeliefTarget::uniform(domain.clone()))
            .and_then(|l| l.validate().map(|_| l))
            .map_err(|e| SessionError::InvalidSpec(e.to_string()))?;
        Ok((self, domain, lambda, rum))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Winner {
    First,
    Second,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pair {
    pub pair_id: u64,
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

/// Overrides applied on top of the session defaults when fitting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitRequest {
    pub seed: Option<u64>,
    pub score_model: toml::Table,
    pub ratio: toml::Table,
    pub field: Option<FieldSpec>,
    pub sampler: Option<SamplerSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Event {
    Created { schema: String, id: String, spec: SessionSpec },
    Answer { pair_id: u64, winner: Winner },
    Fitted { answers: usize, request: FitRequest, dir: String },
    FitFailed { answers: usize, message: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state", rename_all = "lowercase")]
pub enum FitStatus {
    Empty,
    Fitting { answers: usize },
    Ready { answers: usize },
    Failed { answers: usize, message: String },
}

/// A finished fit. Immutable once published.
pub struct FitSnapshot {
    pub answers: usize,
    pub net: JointScoreNet,
    pub estimate: Option<TemperingFieldEstimate>,
    pub constant: f64,
    pub samples: Array2<f64>,
    pub lambda: SamplingDist,
}

pub struct Session {
    pub id: String,
    pub spec: SessionSpec,
    pub domain: BoxDomain,
    pub lambda: SamplingDist,
    pub rum: RumConfig,
    pairs: Vec<Pair>,
    answers: Vec<Winner>,
    pub status: FitStatus,
    dir: PathBuf,
}

impl Session {
    /// Queue length at creation and extension step: the default number of
    /// comparisons `1000 d`.
    pub fn queue_chunk(&self) -> usize {
        (1000 * self.spec.dim()).max(100)
    }

    /// Creates a session and writes the first log record.
    pub fn create(spec: SessionSpec, id: String, root: &Path) -> Result<Self> {
        let mut session = Self::init(spec, id, root)?;
        std::fs::create_dir_all(&session.dir)?;
        let path = session.dir.join(EVENTS_FILE);
        if path.exists() {
            return Err(SessionError::Log(format!("{} already exists", path.display())));
        }
        session.append(&Event::Created {
            schema: EVENT_SCHEMA.into(),
            id: session.id.clone(),
            spec: session.spec.clone(),
        })?;
        session.extend_queue();
        Ok(session)
    }

    fn init(spec: SessionSpec, id: String, root: &Path) -> Result<Self> {
        let (spec, domain, lambda, rum) = spec.validate()?;
        Ok(Self {
            dir: root.join(&id),
            id,
            spec,
            domain,
            lambda,
            rum,
            pairs: Vec::new(),
            answers: Vec::new(),
            status: FitStatus::Empty,
        })
    }

    /// Rebuilds a session from its directory. Returns the session and the
    /// last successful fit, if its artifacts are still present.
    pub fn replay(dir: &Path) -> Result<(Self, Option<FitSnapshot>)> {
        let text = std::fs::read_to_string(dir.join(EVENTS_FILE))?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty()).enumerate();
        let parse = |i: usize, l: &str| -> Result<Event> {
            serde_json::from_str(l).map_err(|e| SessionError::Log(format!("line {}: {e}", i + 1)))
        };
        let mut session = match lines.next() {
            Some((i, l)) => match parse(i, l)? {
                Event::Created { schema, id, spec } if schema == EVENT_SCHEMA => {
                    let root = dir.parent().unwrap_or(Path::new("."));
                    let mut s = Self::init(spec, id, root)?;
                    s.dir = dir.to_path_buf();
                    s
                }
                Event::Created { schema, .. } => {
                    return Err(SessionError::Log(format!("unsupported schema '{schema}'")));
                }
                _ => return Err(SessionError::Log("first record is not a creation".into())),
            },
            None => return Err(SessionError::Log("empty log".into())),
        };
        session.extend_queue();
        let mut last_fit = None;
        for (i, line) in lines {
            match parse(i, line)? {
                Event::Created { .. } => return Err(SessionError::Log(format!("line {}: duplicate creation", i + 1))),
                Event::Answer { pair_id, winner } => session.apply_answer(pair_id, winner)?,
                Event::Fitted { answers, request, dir } => {
                    session.status = FitStatus::Ready { answers };
                    last_fit = Some((answers, request, dir));
                }
                Event::FitFailed { answers, message } => session.status = FitStatus::Failed { answers, message },
            }
        }
        let snapshot = match last_fit {
            Some((answers, request, name)) => match session.load_fit(answers, &request, &session.dir.join(name)) {
                Ok(s) => Some(s),
                Err(e) => {
                    session.status = FitStatus::Failed {
                        answers,
                        message: format!("fit artifacts unavailable: {e}"),
                    };
                    None
                }
            },
            None => None,
        };
        if snapshot.is_none() && matches!(session.status, FitStatus::Ready { .. }) {
            session.status = FitStatus::Empty;
        }
        Ok((session, snapshot))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn append(&self, event: &Event) -> Result<()> {
        let mut line = serde_json::to_string(event).map_err(|e| SessionError::Log(e.to_string()))?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(self.dir.join(EVENTS_FILE))?;
        f.write_all(line.as_bytes())?;
        f.sync_data()?;
        Ok(())
    }

    fn pair_at(&self, k: u64) -> Pair {
        let mut rng = rng_for(self.spec.seed, k);
        let first = self.lambda.sample_one(&mut rng);
        let second = self.lambda.sample_one(&mut rng);
        Pair { pair_id: k, first, second }
    }

    fn extend_queue(&mut self) {
        let start = self.pairs.len() as u64;
        let chunk = self.queue_chunk() as u64;
        let more: Vec<Pair> = (start..start + chunk).map(|k| self.pair_at(k)).collect();
        self.pairs.extend(more);
    }

    pub fn queue_len(&self) -> usize {
        self.pairs.len()
    }

    pub fn answer_count(&self) -> usize {
        self.answers.len()
    }

    pub fn pending(&self) -> &Pair {
        &self.pairs[self.answers.len()]
    }

    fn apply_answer(&mut self, pair_id: u64, winner: Winner) -> Result<()> {
        let pending = self.pending().pair_id;
        if pair_id != pending {
            return Err(SessionError::StalePair { got: pair_id, pending });
        }
        self.answers.push(winner);
        if self.answers.len() == self.pairs.len() {
            self.extend_queue();
        }
        Ok(())
    }

    /// Records an answer to the pending pair.
    pub fn answer(&mut self, pair_id: u64, winner: Winner) -> Result<()> {
        let pending = self.pending().pair_id;
        if pair_id != pending {
            return Err(SessionError::StalePair { got: pair_id, pending });
        }
        self.append(&Event::Answer { pair_id, winner })?;
        self.apply_answer(pair_id, winner)
    }

    pub fn dataset(&self) -> Result<ComparisonDataset> {
        let n = self.answers.len();
        let d = self.spec.dim();
        let mut w = Array2::zeros((n, d));
        let mut l = Array2::zeros((n, d));
        for (k, winner) in self.answers.iter().enumerate() {
            let p = &self.pairs[k];
            let (a, b) = match winner {
                Winner::First => (&p.first, &p.second),
                Winner::Second => (&p.second, &p.first),
            };
            w.row_mut(k).assign(&ndarray::ArrayView1::from(a.as_slice()));
            l.row_mut(k).assign(&ndarray::ArrayView1::from(b.as_slice()));
        }
        Ok(ComparisonDataset::new(w, l, self.rum, self.lambda.clone(), self.spec.seed)?)
    }

    /// Everything a fit job needs, taken under the session lock.
    pub fn begin_fit(&mut self, request: FitRequest) -> Result<FitJob> {
        if matches!(self.status, FitStatus::Fitting { .. }) {
            return Err(SessionError::Busy);
        }
        let answers = self.answers.len();
        if answers < MIN_FIT_ANSWERS {
            return Err(SessionError::TooFewAnswers(answers));
        }
        let experiment = self.experiment(&request)?;
        experiment.resolve_for(&BeliefTarget::uniform(self.domain.clone()))?;
        let seed = request.seed.unwrap_or(self.spec.seed);
        let job = FitJob {
            dataset: self.dataset()?,
            domain: self.domain.clone(),
            experiment,
            dir: format!("fit-{answers}-{seed}"),
            root: self.dir.clone(),
            seed,
            answers,
            request,
        };
        self.status = FitStatus::Fitting { answers };
        Ok(job)
    }

    /// Publishes the outcome of a fit job to the log and status.
    pub fn finish_fit(&mut self, job: &FitJob, outcome: &Result<FitSnapshot>) -> Result<()> {
        let event = match outcome {
            Ok(_) => Event::Fitted {
                answers: job.answers,
                request: job.request.clone(),
                dir: job.dir.clone(),
            },
            Err(e) => Event::FitFailed {
                answers: job.answers,
                message: e.to_string(),
            },
        };
        self.append(&event)?;
        self.status = match event {
            Event::FitFailed { answers, message } => FitStatus::Failed { answers, message },
            _ => FitStatus::Ready { answers: job.answers },
        };
        Ok(())
    }

    fn experiment(&self, request: &FitRequest) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_toml("target = \"session\"")?;
        cfg.n_pairs = Some(self.answers.len().max(1));
        cfg.seeds = vec![request.seed.unwrap_or(self.spec.seed)];
        cfg.lambda = self.spec.lambda.clone();
        cfg.rum = self.rum;
        cfg.score_model = request.score_model.clone();
        cfg.ratio = request.ratio.clone();
        cfg.field = request.field.clone().unwrap_or_default();
        cfg.sampler = request.sampler.clone().unwrap_or_default();
        cfg.eval = EvalSpec::default();
        Ok(cfg)
    }

    fn load_fit(&self, answers: usize, request: &FitRequest, dir: &Path) -> Result<FitSnapshot> {
        let res = self
            .experiment(request)?
            .resolve_for(&BeliefTarget::uniform(self.domain.clone()))?;
        let net = JointScoreNet::load(&dir.join("score.bin"))?;
        let estimate = if res.field.mode == FieldMode::Estimated {
            let ratio = RatioNet::load(&dir.join("ratio.bin"))?;
            let (support, log_pw) = pipeline::read_importance(&dir.join("importance.csv"))?;
            Some(pipeline::estimate_field(ratio, support.view(), &log_pw)?)
        } else {
            None
        };
        Ok(FitSnapshot {
            answers,
            net,
            estimate,
            constant: res.field.constant,
            samples: read_points(&dir.join("samples.csv"))?,
            lambda: res.lambda,
        })
    }
}

pub struct FitJob {
    pub dataset: ComparisonDataset,
    pub domain: BoxDomain,
    pub experiment: ExperimentConfig,
    pub dir: String,
    pub root: PathBuf,
    pub seed: u64,
    pub answers: usize,
    pub request: FitRequest,
}

impl FitJob {
    pub fn artifact_dir(&self) -> PathBuf {
        self.root.join(&self.dir)
    }

    /// Runs the pipeline on the session data; blocking.
    pub fn run(&self) -> Result<FitSnapshot> {
        let res = self.experiment.resolve_for(&BeliefTarget::uniform(self.domain.clone()))?;
        let dir = self.artifact_dir();
        std::fs::create_dir_all(&dir)?;
        let net = pipeline::fit_score(&res, &self.dataset, self.seed)?;
        net.save(&dir.join("score.bin"))?;
        let estimate = if res.field.mode == FieldMode::Estimated {
            let ratio = pipeline::fit_ratio(&res, &self.dataset, self.seed)?;
            ratio.save(&dir.join("ratio.bin"))?;
            let (support, log_pw) = pipeline::importance_samples(&res, &net, self.seed)?;
            write_points(&dir.join("importance.csv"), &support, &[("logpw", &log_pw)])?;
            Some(pipeline::estimate_field(ratio, support.view(), &log_pw)?)
        } else {
            None
        };
        let tempering = match (&res.field.mode, &estimate) {
            (FieldMode::Estimated, Some(est)) => Tempering::Estimated(est),
            (FieldMode::Constant, _) => Tempering::Constant(res.field.constant),
            _ => Tempering::None,
        };
        let cube = pipeline::sample_cube(&net, &tempering, &res.ald, res.n_samples, self.seed)?;
        let samples = res.lambda.inverse_points(&cube)?;
        write_points(&dir.join("samples.csv"), &samples, &[])?;
        Ok(FitSnapshot {
            answers: self.answers,
            net,
            estimate,
            constant: res.field.constant,
            samples,
            lambda: res.lambda,
        })
    }
}

/// Density and field over one axis pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grids {
    pub ax1: usize,
    pub ax2: usize,
    pub n: usize,
    /// Cell centers along `ax1` and `ax2`.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Row-major, `ax1` varying slowest. Histogram density of the fitted
    /// samples on the two axes.
    pub density: Vec<f64>,
    /// Tempering field on the slice through the λ-median.
    pub field: Vec<f64>,
}

impl FitSnapshot {
    pub fn grids(&self, ax1: usize, ax2: usize) -> Result<Grids> {
        let domain = &self.lambda.domain;
        let d = domain.dim();
        let n = GRID_SIDE;
        let median = self.lambda.rosenblatt_inverse(&vec![0.5; d])?;
        let points = SliceGrid::points_for(domain, ax1, ax2, n, &median)
            .map_err(|e| SessionError::InvalidSpec(e.to_string()))?;
        let centers = |ax: usize| -> Vec<f64> {
            (0..n)
                .map(|a| domain.lower()[ax] + (a as f64 + 0.5) / n as f64 * domain.width(ax))
                .collect()
        };
        let field = match &self.estimate {
            Some(est) => {
                let cube = self.lambda.forward_points(&Array2::from_shape_vec(
                    (points.len(), d),
                    points.concat(),
                ).expect("grid shape"))?;
                est.evaluate_batch(cube.view())?
            }
            None => vec![self.constant; points.len()],
        };
        let mut density = vec![0.0; n * n];
        let cell = domain.width(ax1) * domain.width(ax2) / (n * n) as f64;
        let bin = |v: f64, ax: usize| {
            (((v - domain.lower()[ax]) / domain.width(ax) * n as f64).floor() as isize).clamp(0, n as isize - 1) as usize
        };
        let total = self.samples.nrows().max(1) as f64;
        for row in self.samples.rows() {
            if row.iter().all(|v| v.is_finite()) {
                density[bin(row[ax1], ax1) * n + bin(row[ax2], ax2)] += 1.0 / (total * cell);
            }
        }
        Ok(Grids {
            ax1,
            ax2,
            n,
            x: centers(ax1),
            y: centers(ax2),
            density,
            field,
        })
    }
}
