//! Sample-set discrepancies: exact 2-Wasserstein on subsamples and the mean
//! marginal total variation (MMTV).

use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::rng_for;

pub const METRICS_SCHEMA: &str = "metrics-v1";
pub const W2_SUBSAMPLE: usize = 512;
pub const MMTV_BINS: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema: String,
    pub wasserstein: f64,
    pub mmtv: f64,
    /// Subsample size behind the Wasserstein value.
    pub n_used: usize,
    pub seeds: Vec<u64>,
}

impl MetricReport {
    pub fn compute(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, seed: u64) -> Result<Self> {
        let (wasserstein, n_used) = wasserstein_with(a, b, W2_SUBSAMPLE, seed)?;
        Ok(Self {
            schema: METRICS_SCHEMA.into(),
            wasserstein,
            mmtv: mmtv(a, b, MMTV_BINS)?,
            n_used,
            seeds: vec![seed],
        })
    }
}

fn check_pair(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    if a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::invalid("metrics need nonempty sample sets"));
    }
    if a.ncols() != b.ncols() {
        return Err(Error::Shape {
            expected: a.ncols(),
            got: b.ncols(),
        });
    }
    Ok(())
}

fn subsample(x: ArrayView2<'_, f64>, m: usize, seed: u64, stream: u64) -> Array2<f64> {
    if x.nrows() == m {
        return x.to_owned();
    }
    let mut rng = rng_for(seed, stream);
    let mut idx = sample(&mut rng, x.nrows(), m).into_vec();
    idx.sort_unstable();
    x.select(ndarray::Axis(0), &idx)
}

/// Exact 2-Wasserstein distance between the empirical measures of
/// `min(|A|, |B|, 512)`-point subsamples (drawn with `seed`).
pub fn wasserstein(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, seed: u64) -> Result<f64> {
    wasserstein_with(a, b, W2_SUBSAMPLE, seed).map(|(w, _)| w)
}

/// As [`wasserstein`] with an explicit subsample cap; also returns the
/// subsample size.
pub fn wasserstein_with(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, cap: usize, seed: u64) -> Result<(f64, usize)> {
    check_pair(a, b)?;
    let m = a.nrows().min(b.nrows()).min(cap.max(1));
    let sa = subsample(a, m, seed, 0);
    let sb = subsample(b, m, seed, 0);
    let mut cost = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            cost[i * m + j] = sa
                .row(i)
                .iter()
                .zip(sb.row(j).iter())
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
        }
    }
    let assign = min_cost_assignment(&cost, m);
    let total: f64 = assign.iter().enumerate().map(|(i, &j)| cost[i * m + j]).sum();
    Ok(((total / m as f64).max(0.0).sqrt(), m))
}

/// Minimum-cost perfect matching of an `n × n` row-major cost matrix by the
/// shortest-augmenting-path Hungarian method; returns the column of each row.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n);
    // 1-based potentials and matching as in the classic O(n³) formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

/// Mean over dimensions of the total variation between marginal histograms
/// with `bins` equal-width bins on the union range.
pub fn mmtv(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, bins: usize) -> Result<f64> {
    check_pair(a, b)?;
    if bins == 0 {
        return Err(Error::invalid("need at least one bin"));
    }
    let d = a.ncols();
    let mut total = 0.0;
    for j in 0..d {
        let (ca, cb) = (a.column(j), b.column(j));
        let lo = ca.iter().chain(cb.iter()).cloned().fold(f64::INFINITY, f64::min);
        let hi = ca.iter().chain(cb.iter()).cloned().fold(f64::NEG_INFINITY, f64::max);
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::invalid("non-finite sample value"));
        }
        let width = (hi - lo) / bins as f64;
        let bin = |v: f64| {
            if width > 0.0 {
                (((v - lo) / width) as usize).min(bins - 1)
            } else {
                0
            }
        };
        let mut ha = vec![0.0; bins];
        let mut hb = vec![0.0; bins];
        for v in ca.iter() {
            ha[bin(*v)] += 1.0 / ca.len() as f64;
        }
        for v in cb.iter() {
            hb[bin(*v)] += 1.0 / cb.len() as f64;
        }
        total += 0.5 * ha.iter().zip(&hb).map(|(p, q)| (p - q).abs()).sum::<f64>();
    }
    Ok(total / d as f64)
}

/// Mean and sample standard deviation of a metric across seeds.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Per-seed reports summarized as `mean ± std` lines.
pub fn summary_table(label: &str, reports: &[MetricReport]) -> String {
    let w: Vec<f64> = reports.iter().map(|r| r.wasserstein).collect();
    let t: Vec<f64> = reports.iter().map(|r| r.mmtv).collect();
    let (wm, ws) = mean_std(&w);
    let (tm, ts) = mean_std(&t);
    format!(
        "{:<24} {:>20} {:>20} {:>6}\n{:<24} {:>20} {:>20} {:>6}\n",
        "target",
        "wasserstein",
        "mmtv",
        "seeds",
        label,
        format!("{wm:.3} ± {ws:.3}"),
        format!("{tm:.3} ± {ts:.3}"),
        reports.len()
    )
}
