//! `belief`: run belief-density experiments stage by stage or end to end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use belief_core::config::{ExperimentConfig, FieldMode, Resolved};
use belief_core::densities::{read_points, write_points};
use belief_core::diffusion::JointScoreNet;
use belief_core::metrics::{summary_table, MetricReport};
use belief_core::pipeline::{self, Tempering};
use belief_core::rum::ComparisonDataset;
use belief_core::tempering::RatioNet;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "belief", version, about = "Belief density estimation from pairwise comparisons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in target with default settings, used when no config is given.
    #[arg(long)]
    target: Option<String>,
    /// Seed; defaults to the first seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        match (&self.config, &self.target) {
            (Some(path), _) => Ok(ExperimentConfig::load(path)?),
            (None, Some(name)) => Ok(ExperimentConfig::for_target(name)?),
            (None, None) => bail!("either --config or --target is required"),
        }
    }

    fn resolved(&self) -> anyhow::Result<(Resolved, u64)> {
        let res = self.experiment()?.resolve()?;
        let seed = self.seed.unwrap_or(res.seeds[0]);
        Ok((res, seed))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate comparisons from the configured expert.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Output dataset CSV.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the score model (and the ratio model when the field is estimated).
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for `score.bin` and `ratio.bin`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw MWD importance samples and write the tempering-field grid.
    Field {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        ratio: PathBuf,
        /// Output directory for `importance.csv` and `field.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Draw belief samples with the configured tempering.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        score: PathBuf,
        #[arg(long)]
        ratio: Option<PathBuf>,
        #[arg(long)]
        importance: Option<PathBuf>,
        /// Number of samples; defaults to the config.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score samples against a reference CSV or the target's reference sampler.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        samples: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate metrics JSON files into a mean ± std table.
    Summary {
        #[arg(long, default_value = "run")]
        label: String,
        files: Vec<PathBuf>,
    },
    /// Run every stage for every seed.
    Run {
        #[command(flatten)]
        common: Common,
        /// Recompute stages whose artifacts already exist.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Start the elicitation HTTP service.
    Serve {
        #[arg(long)]
        port: Option<u16>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_estimate(ratio: &Path, importance: &Path) -> anyhow::Result<belief_core::tempering::TemperingFieldEstimate> {
    let ratio = RatioNet::load(ratio)?;
    let (support, log_pw) = pipeline::read_importance(importance)?;
    Ok(pipeline::estimate_field(ratio, support.view(), &log_pw)?)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Simulate { common, out } => {
            let (res, seed) = common.resolved()?;
            let data = pipeline::simulate(&res, seed)?;
            data.write(&out)?;
            eprintln!("wrote {} comparisons to {}", data.len(), out.display());
        }
        Command::Fit { common, data, out } => {
            let (res, seed) = common.resolved()?;
            let data = ComparisonDataset::read(&data)?;
            std::fs::create_dir_all(&out)?;
            pipeline::fit_score(&res, &data, seed)?.save(&out.join("score.bin"))?;
            if res.field.mode == FieldMode::Estimated {
                pipeline::fit_ratio(&res, &data, seed)?.save(&out.join("ratio.bin"))?;
            }
            eprintln!("wrote models to {}", out.display());
        }
        Command::Field { common, score, ratio, out } => {
            let (res, seed) = common.resolved()?;
            let net = JointScoreNet::load(&score)?;
            let ratio = RatioNet::load(&ratio)?;
            std::fs::create_dir_all(&out)?;
            let (support, log_pw) = pipeline::importance_samples(&res, &net, seed)?;
            write_points(&out.join("importance.csv"), &support, &[("logpw", &log_pw)])?;
            let est = pipeline::estimate_field(ratio, support.view(), &log_pw)?;
            pipeline::field_grid(&est, &res.lambda, res.field.grid)?.write_csv(&out.join("field.csv"), "tau")?;
            eprintln!("field clip upper {:.4}; wrote {}", est.upper(), out.display());
        }
        Command::Sample { common, score, ratio, importance, n, out } => {
            let (res, seed) = common.resolved()?;
            let net = JointScoreNet::load(&score)?;
            let estimate = match (&res.field.mode, ratio, importance) {
                (FieldMode::Estimated, Some(r), Some(i)) => Some(load_estimate(&r, &i)?),
                (FieldMode::Estimated, _, _) => bail!("an estimated field needs --ratio and --importance"),
                _ => None,
            };
            let tempering = match (&res.field.mode, &estimate) {
                (FieldMode::Estimated, Some(est)) => Tempering::Estimated(est),
                (FieldMode::Constant, _) => Tempering::Constant(res.field.constant),
                _ => Tempering::None,
            };
            let cube = pipeline::sample_cube(&net, &tempering, &res.ald, n.unwrap_or(res.n_samples), seed)?;
            let x = res.lambda.inverse_points(&cube)?;
            write_points(&out, &x, &[])?;
            eprintln!("wrote {} samples to {}", x.nrows(), out.display());
        }
        Command::Eval { common, samples, reference, out } => {
            let a = read_points(&samples)?;
            let report = match reference {
                Some(path) => MetricReport::compute(a.view(), read_points(&path)?.view(), common.seed.unwrap_or(1))?,
                None => {
                    let (res, seed) = common.resolved()?;
                    pipeline::evaluate(&res, a.view(), seed)?
                }
            };
            let json = serde_json::to_string_pretty(&report)?;
            match out {
                Some(path) => std::fs::write(&path, &json).with_context(|| format!("writing {}", path.display()))?,
                None => println!("{json}"),
            }
        }
        Command::Summary { label, files } => {
            let reports = files
                .iter()
                .map(|p| pipeline::read_metrics(p))
                .collect::<Result<Vec<_>, _>>()?;
            print!("{}", summary_table(&label, &reports));
        }
        Command::Run { common, force, out } => {
            let mut cfg = common.experiment()?;
            if let Some(seed) = common.seed {
                cfg.seeds = vec![seed];
            }
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            let outcome = pipeline::run_experiment(&cfg, force)?;
            print!("{}", outcome.summary());
            if !outcome.all_succeeded() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Serve { port, data_dir } => {
            let mut cfg = belief_service::ServiceConfig::from_env();
            if let Some(p) = port {
                cfg.port = p;
            }
            if let Some(d) = data_dir {
                cfg.data_dir = d;
            }
            tokio::runtime::Runtime::new()?.block_on(belief_service::serve(cfg))?;
        }
    }
    Ok(ExitCode::SUCCESS)
}
