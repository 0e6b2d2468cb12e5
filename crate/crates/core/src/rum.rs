//! Random utility models of an expert choosing between two candidates, and
//! comparison datasets.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::Array2;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::densities::{BeliefTarget, SamplingDist};
use crate::error::{Error, Result};
use crate::util::{rng_for, sigmoid};

/// Default noise scale: the standard deviation of a unit Gumbel difference
/// divided by π, i.e. `sqrt(6 / π^2)`.
pub fn default_noise_scale() -> f64 {
    (6.0 / (std::f64::consts::PI * std::f64::consts::PI)).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RumModel {
    /// Gumbel noise; choice probability is the logistic CDF.
    BradleyTerry,
    /// Exponential noise; choice probability is the Laplace CDF.
    Exponential,
}

impl RumModel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RumModel::BradleyTerry => "bradley-terry",
            RumModel::Exponential => "exponential",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "bradley-terry" => Ok(RumModel::BradleyTerry),
            "exponential" => Ok(RumModel::Exponential),
            _ => Err(Error::invalid(format!("unknown choice model '{s}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RumConfig {
    pub model: RumModel,
    pub s: f64,
}

impl RumConfig {
    pub fn new(model: RumModel, s: f64) -> Result<Self> {
        if !(s > 0.0) || !s.is_finite() {
            return Err(Error::invalid(format!("noise scale must be positive, got {s}")));
        }
        Ok(Self { model, s })
    }

    pub fn bradley_terry() -> Self {
        Self {
            model: RumModel::BradleyTerry,
            s: default_noise_scale(),
        }
    }

    pub fn exponential() -> Self {
        Self {
            model: RumModel::Exponential,
            s: default_noise_scale(),
        }
    }

    /// CDF of the utility-noise difference at `t`.
    pub fn noise_cdf(&self, t: f64) -> f64 {
        match self.model {
            RumModel::BradleyTerry => sigmoid(t / self.s),
            RumModel::Exponential => {
                if t < 0.0 {
                    0.5 * (self.s * t).exp()
                } else {
                    1.0 - 0.5 * (-self.s * t).exp()
                }
            }
        }
    }
}

/// Probability that the candidate with utility advantage `du` is chosen.
pub fn choice_prob(rum: &RumConfig, du: f64) -> Result<f64> {
    if du.is_nan() {
        return Err(Error::invalid("utility difference is NaN"));
    }
    if du.is_infinite() {
        return Err(Error::invalid("utility difference is infinite"));
    }
    Ok(rum.noise_cdf(du))
}

/// Winner-first comparison outcomes, one row per pair.
#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonDataset {
    pub winners: Array2<f64>,
    pub losers: Array2<f64>,
    pub rum: RumConfig,
    pub lambda: SamplingDist,
    pub seed: u64,
}

impl ComparisonDataset {
    pub fn new(
        winners: Array2<f64>,
        losers: Array2<f64>,
        rum: RumConfig,
        lambda: SamplingDist,
        seed: u64,
    ) -> Result<Self> {
        if winners.dim() != losers.dim() {
            return Err(Error::Shape {
                expected: winners.nrows(),
                got: losers.nrows(),
            });
        }
        if winners.ncols() != lambda.dim() {
            return Err(Error::Shape {
                expected: lambda.dim(),
                got: winners.ncols(),
            });
        }
        for row in winners.rows().into_iter().chain(losers.rows()) {
            let v = row.to_vec();
            if !lambda.domain.contains(&v) {
                return Err(Error::OutOfDomain { point: v });
            }
        }
        Ok(Self {
            winners,
            losers,
            rum,
            lambda,
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.winners.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.winners.ncols()
    }

    /// Winners and losers mapped to the unit cube by the Rosenblatt map of λ.
    pub fn unit_cube(&self) -> Result<(Array2<f64>, Array2<f64>)> {
        Ok((
            self.lambda.forward_points(&self.winners)?,
            self.lambda.forward_points(&self.losers)?,
        ))
    }

    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::new();
        let _ = writeln!(out, "# rum: {} s={}", self.rum.model.as_str(), self.rum.s);
        let _ = writeln!(
            out,
            "# lambda: {}",
            serde_json::to_string(&self.lambda).expect("λ serializes")
        );
        let _ = writeln!(out, "# seed: {}", self.seed);
        let cols: Vec<String> = (1..=d)
            .map(|j| format!("w{j}"))
            .chain((1..=d).map(|j| format!("l{j}")))
            .collect();
        let _ = writeln!(out, "{}", cols.join(","));
        for (w, l) in self.winners.rows().into_iter().zip(self.losers.rows()) {
            let vals: Vec<String> = w.iter().chain(l.iter()).map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}", vals.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rum = None;
        let mut lambda: Option<SamplingDist> = None;
        let mut seed = None;
        let mut header_seen = false;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let parse_err = |message: String| Error::Parse {
                line: line_no,
                message,
            };
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(v) = meta.strip_prefix("rum:") {
                    let mut parts = v.split_whitespace();
                    let model = parts.next().ok_or_else(|| parse_err("missing model".into()))?;
                    let model = RumModel::parse(model).map_err(|e| parse_err(e.to_string()))?;
                    let s = parts
                        .next()
                        .and_then(|p| p.strip_prefix("s="))
                        .ok_or_else(|| parse_err("missing s=".into()))?
                        .parse::<f64>()
                        .map_err(|e| parse_err(e.to_string()))?;
                    rum = Some(RumConfig::new(model, s).map_err(|e| parse_err(e.to_string()))?);
                } else if let Some(v) = meta.strip_prefix("lambda:") {
                    let l: SamplingDist =
                        serde_json::from_str(v.trim()).map_err(|e| parse_err(e.to_string()))?;
                    l.validate().map_err(|e| parse_err(e.to_string()))?;
                    lambda = Some(l);
                } else if let Some(v) = meta.strip_prefix("seed:") {
                    seed = Some(v.trim().parse::<u64>().map_err(|e| parse_err(e.to_string()))?);
                }
                continue;
            }
            if !header_seen {
                header_seen = true;
                if line.starts_with('w') {
                    continue;
                }
            }
            let vals: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|t| t.trim().parse::<f64>()).collect();
            let vals = vals.map_err(|e| parse_err(format!("bad number: {e}")))?;
            if let Some(first) = rows.first() {
                if vals.len() != first.len() {
                    return Err(parse_err(format!(
                        "expected {} columns, found {}",
                        first.len(),
                        vals.len()
                    )));
                }
            }
            if vals.len() % 2 != 0 || vals.is_empty() {
                return Err(parse_err("row must hold winner and loser coordinates".into()));
            }
            rows.push(vals);
        }
        let rum = rum.ok_or(Error::Parse {
            line: 0,
            message: "missing '# rum:' header".into(),
        })?;
        let lambda = lambda.ok_or(Error::Parse {
            line: 0,
            message: "missing '# lambda:' header".into(),
        })?;
        let seed = seed.unwrap_or(0);
        let d = lambda.dim();
        if let Some(first) = rows.first() {
            if first.len() != 2 * d {
                return Err(Error::Parse {
                    line: 0,
                    message: format!("rows have {} columns, λ has dimension {d}", first.len()),
                });
            }
        }
        let n = rows.len();
        let winners = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
        let losers = Array2::from_shape_fn((n, d), |(i, j)| rows[i][d + j]);
        Self::new(winners, losers, rum, lambda, seed)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Simulate `n` comparisons of independent λ-draws by an expert with belief
/// `target` and choice model `rum`. Pair `i` uses its own random stream, so
/// the result does not depend on evaluation order.
pub fn simulate_comparisons(
    target: &BeliefTarget,
    lambda: &SamplingDist,
    rum: &RumConfig,
    n: usize,
    seed: u64,
) -> Result<ComparisonDataset> {
    if n == 0 {
        return Err(Error::invalid("need at least one comparison"));
    }
    if target.dim() != lambda.dim() {
        return Err(Error::Shape {
            expected: target.dim(),
            got: lambda.dim(),
        });
    }
    let d = lambda.dim();
    let mut winners = Array2::zeros((n, d));
    let mut losers = Array2::zeros((n, d));
    for i in 0..n {
        let mut rng = rng_for(seed, i as u64);
        let a = lambda.sample_one(&mut rng);
        let b = lambda.sample_one(&mut rng);
        let du = target.log_unnorm(&a) - target.log_unnorm(&b);
        // Both log-densities may be -inf far in a tail; treat as a tie.
        let p = if du.is_nan() { 0.5 } else { rum.noise_cdf(du) };
        let (w, l) = if rng.gen::<f64>() < p { (a, b) } else { (b, a) };
        for j in 0..d {
            winners[(i, j)] = w[j];
            losers[(i, j)] = l[j];
        }
    }
    ComparisonDataset::new(winners, losers, *rum, lambda.clone(), seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::BoxDomain;
    use proptest::prelude::*;

    #[test]
    fn choice_prob_values() {
        for rum in [RumConfig::bradley_terry(), RumConfig::exponential()] {
            assert_eq!(choice_prob(&rum, 0.0).unwrap(), 0.5);
            assert!(choice_prob(&rum, 1e6).unwrap() > 1.0 - 1e-12);
            assert!(choice_prob(&rum, f64::NAN).is_err());
            assert!(choice_prob(&rum, f64::INFINITY).is_err());
        }
        let bt = RumConfig::new(RumModel::BradleyTerry, 1.0).unwrap();
        assert!((choice_prob(&bt, 2f64.ln()).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        // Laplace(0, 1/s) CDF at du = 1, s = 2: 1 - e^{-2} / 2.
        let ex = RumConfig::new(RumModel::Exponential, 2.0).unwrap();
        assert!((choice_prob(&ex, 1.0).unwrap() - 0.932_332_358_381_693_6).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn bt_scale_invariance(du in -50.0f64..50.0, alpha in 0.01f64..100.0, s in 0.05f64..5.0) {
            let a = RumConfig::new(RumModel::BradleyTerry, s).unwrap();
            let b = RumConfig::new(RumModel::BradleyTerry, s * alpha).unwrap();
            let pa = choice_prob(&a, du).unwrap();
            let pb = choice_prob(&b, du * alpha).unwrap();
            prop_assert!((pa - pb).abs() < 1e-12);
        }

        #[test]
        fn choice_prob_is_a_symmetric_cdf(du in -50.0f64..50.0, s in 0.05f64..5.0, exp in any::<bool>()) {
            let model = if exp { RumModel::Exponential } else { RumModel::BradleyTerry };
            let rum = RumConfig::new(model, s).unwrap();
            let p = choice_prob(&rum, du).unwrap();
            prop_assert!((0.0..=1.0).contains(&p));
            prop_assert!((p + choice_prob(&rum, -du).unwrap() - 1.0).abs() < 1e-12);
            prop_assert!(choice_prob(&rum, du + 0.1).unwrap() >= p);
        }
    }

    fn ks_two_sample(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let (mut i, mut j, mut best) = (0, 0, 0.0f64);
        while i < a.len() && j < b.len() {
            if a[i] <= b[j] {
                i += 1;
            } else {
                j += 1;
            }
            best = best.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
        }
        best
    }

    #[test]
    fn uniform_belief_winners_follow_lambda() {
        let dom = BoxDomain::cube(2, -6.0, 6.0);
        let target = BeliefTarget::uniform(dom.clone());
        let lam = SamplingDist::uniform(dom);
        let data = simulate_comparisons(&target, &lam, &RumConfig::bradley_terry(), 100_000, 1).unwrap();
        let mut rng = rng_for(99, 0);
        let reference = lam.sample(100_000, &mut rng);
        for j in 0..2 {
            let ks = ks_two_sample(data.winners.column(j).to_vec(), reference.column(j).to_vec());
            assert!(ks < 0.02, "dim {j}: {ks}");
        }
    }

    #[test]
    fn exchangeable_first_point_wins_half_the_time() {
        let dom = BoxDomain::cube(1, 0.0, 1.0);
        let target = BeliefTarget::uniform(dom.clone());
        let lam = SamplingDist::uniform(dom);
        let n = 100_000;
        let data = simulate_comparisons(&target, &lam, &RumConfig::exponential(), n, 5).unwrap();
        // Replay each pair's stream to recover which draw came first.
        let first = (0..n)
            .filter(|&i| {
                let mut rng = rng_for(5, i as u64);
                lam.sample_one(&mut rng)[0] == data.winners[(i, 0)]
            })
            .count();
        let frac = first as f64 / n as f64;
        let se = (0.25 / n as f64).sqrt();
        assert!((frac - 0.5).abs() < 3.0 * se, "{frac}");
    }

    #[test]
    fn single_pair_and_determinism() {
        let t = BeliefTarget::onemoon2d();
        let lam = SamplingDist::uniform(t.domain().clone());
        let one = simulate_comparisons(&t, &lam, &RumConfig::bradley_terry(), 1, 3).unwrap();
        assert_eq!(one.len(), 1);
        let a = simulate_comparisons(&t, &lam, &RumConfig::bradley_terry(), 500, 3).unwrap();
        let b = simulate_comparisons(&t, &lam, &RumConfig::bradley_terry(), 500, 3).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert!(simulate_comparisons(&t, &lam, &RumConfig::bradley_terry(), 0, 3).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let t = BeliefTarget::gaussian(4);
        let lam = SamplingDist::diagonal_gaussian(t.domain().clone(), vec![0.0; 4], vec![4.0; 4]).unwrap();
        let data = simulate_comparisons(&t, &lam, &RumConfig::exponential(), 200, 8).unwrap();
        let back = ComparisonDataset::from_csv(&data.to_csv()).unwrap();
        assert_eq!(back, data);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        data.write(&path).unwrap();
        assert_eq!(ComparisonDataset::read(&path).unwrap(), data);
        assert!(matches!(
            ComparisonDataset::read(&dir.path().join("none.csv")),
            Err(Error::MissingInput(_))
        ));
    }

    #[test]
    fn csv_errors_report_lines() {
        let t = BeliefTarget::onemoon2d();
        let lam = SamplingDist::uniform(t.domain().clone());
        let csv = simulate_comparisons(&t, &lam, &RumConfig::bradley_terry(), 3, 1)
            .unwrap()
            .to_csv();
        let unknown = csv.replace("bradley-terry", "thurstone");
        assert!(matches!(
            ComparisonDataset::from_csv(&unknown),
            Err(Error::Parse { line: 1, .. })
        ));
        let mut lines: Vec<&str> = csv.lines().collect();
        lines[5] = "0.1,0.2,abc,0.3";
        assert!(matches!(
            ComparisonDataset::from_csv(&lines.join("\n")),
            Err(Error::Parse { line: 6, .. })
        ));
    }

    #[test]
    fn large_csv_parses_quickly() {
        let t = BeliefTarget::onemoon2d();
        let lam = SamplingDist::uniform(t.domain().clone());
        let csv = simulate_comparisons(&t, &lam, &RumConfig::bradley_terry(), 2000, 1)
            .unwrap()
            .to_csv();
        let start = std::time::Instant::now();
        let data = ComparisonDataset::from_csv(&csv).unwrap();
        assert_eq!(data.len(), 2000);
        assert!(start.elapsed().as_secs_f64() < 1.0);
    }
}
