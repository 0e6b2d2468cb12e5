//! Quadrature oracles shared by the theory and acceptance tests. Each check
//! returns the measured discrepancy; callers decide on tolerances.
#![allow(dead_code)]

use belief_core::densities::{BeliefTarget, BoxDomain, SamplingDist};
use belief_core::quadrature::Grid;
use belief_core::rum::{simulate_comparisons, RumConfig};
use belief_core::tempering::{
    constant_tempering_error, fisher_divergence_tempered, mwd_from_values, optimal_constant_tau,
    optimal_tempering_error, ConstantTemperingInputs, FieldIntegrals, TargetQuadrature,
};
use belief_core::util::{log_sum_exp, rng_for, softplus};
use rand::Rng as _;

/// `ln p_w(x)` up to a constant under uniform λ, from the nodes of `q`,
/// summed in log space so far tails do not underflow.
pub fn log_mwd(q: &TargetQuadrature<'_>, x: &[f64], rum: &RumConfig) -> f64 {
    let lp = q.target().log_unnorm(x);
    let terms: Vec<f64> = q
        .node_log_density()
        .iter()
        .map(|v| {
            let t = lp - v;
            match rum.model {
                belief_core::rum::RumModel::BradleyTerry => -softplus(-t / rum.s),
                belief_core::rum::RumModel::Exponential => {
                    if t >= 0.0 {
                        (-(0.5 * (-rum.s * t).exp())).ln_1p()
                    } else {
                        (0.5f64).ln() + rum.s * t
                    }
                }
            }
        })
        .collect();
    log_sum_exp(&terms)
}

fn fd_grad(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|j| {
            let mut a = x.to_vec();
            let mut b = x.to_vec();
            a[j] += h;
            b[j] -= h;
            (f(&a) - f(&b)) / (2.0 * h)
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub struct Collinearity {
    pub max_angle: f64,
    pub max_ratio_err: f64,
    pub points: usize,
}

/// Angle between the analytic `∇log p` and a finite-difference `∇log p_w`,
/// and the relative error of `‖∇log p‖ / ‖∇log p_w‖` against the quadrature
/// field, over an `n × n` midpoint grid of the target's box.
pub fn collinearity(target: &BeliefTarget, rum: &RumConfig, n: usize) -> Collinearity {
    let q = TargetQuadrature::standard(target).unwrap();
    let grid = Grid::new(target.domain(), n);
    let mut out = Collinearity {
        max_angle: 0.0,
        max_ratio_err: 0.0,
        points: 0,
    };
    for x in grid.points() {
        let gp = target.score(&x).unwrap();
        let gw = fd_grad(&|y| log_mwd(&q, y, rum), &x, 1e-5);
        let (np, nw) = (norm(&gp), norm(&gw));
        if np <= 1e-3 || nw <= 1e-3 {
            continue;
        }
        let cos = gp.iter().zip(&gw).map(|(a, b)| a * b).sum::<f64>() / (np * nw);
        let angle = cos.clamp(-1.0, 1.0).acos();
        let tau = q.field(&x, rum).unwrap();
        let err = (np / nw - tau).abs() / tau;
        out.max_angle = out.max_angle.max(angle);
        out.max_ratio_err = out.max_ratio_err.max(err);
        out.points += 1;
    }
    out
}

/// Largest deviation of the uniform-target fields from `2s` (Bradley–Terry)
/// and `1/s` (exponential) over a few scales and points.
pub fn uniform_field_errors() -> (f64, f64) {
    let target = BeliefTarget::uniform(BoxDomain::cube(2, -1.5, 2.5));
    let q = TargetQuadrature::new(&target, 128).unwrap();
    let (mut bt, mut ex) = (0.0f64, 0.0f64);
    for s in [0.25, 0.7797, 1.0, 3.0] {
        for x in [[0.0, 0.0], [-1.2, 2.1], [2.4, -1.4]] {
            bt = bt.max((q.bt_field(&x, s).unwrap() - 2.0 * s).abs());
            ex = ex.max((q.exp_field(&x, s).unwrap() - 1.0 / s).abs());
        }
    }
    (bt, ex)
}

pub struct Prop1 {
    pub formula: f64,
    pub grid_search: f64,
    pub constant_case: f64,
}

/// Constant-tempering inputs on Twomoons2D: Bradley–Terry field, MWD score,
/// weights `p`, on an `n × n` grid. Also returns `∇log p` per node.
pub fn twomoons_inputs(n: usize) -> (ConstantTemperingInputs, Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let target = BeliefTarget::twomoons2d();
    let q = TargetQuadrature::standard(&target).unwrap();
    let rum = RumConfig::bradley_terry();
    let grid = Grid::new(target.domain(), n);
    let inp = ConstantTemperingInputs::on_grid(
        &grid,
        &|x| q.bt_field(x, rum.s),
        &|x| q.mwd_score(x, &rum),
        &|x| target.log_unnorm(x),
    )
    .unwrap();
    let sp = grid.points().map(|x| target.score(&x).unwrap()).collect();
    let sq = grid.points().map(|x| q.mwd_score(&x, &rum).unwrap()).collect();
    (inp, sp, sq)
}

/// Proposition 1: the closed-form optimal constant against a grid search of
/// the Fisher divergence `E_p‖∇log p − τ ∇log p_w‖²` with step 0.01 over
/// `[1, max τ(x)]`, plus the constant-field case.
pub fn prop1(n: usize) -> Prop1 {
    let (inp, sp, sq) = twomoons_inputs(n);
    let formula = optimal_constant_tau(&inp).unwrap();
    let z: f64 = inp.p_weight.iter().sum();
    let fisher = |tau: f64| {
        let mut acc = 0.0;
        for i in 0..sp.len() {
            let e: f64 = sp[i].iter().zip(&sq[i]).map(|(a, b)| (a - tau * b).powi(2)).sum();
            acc += inp.p_weight[i] * e;
        }
        acc / z
    };
    let top = inp.tau.iter().cloned().fold(1.0, f64::max);
    let steps = ((top - 1.0) / 0.01).ceil() as usize;
    let (mut best, mut best_val) = (1.0, f64::INFINITY);
    for k in 0..=steps {
        let tau = 1.0 + 0.01 * k as f64;
        let v = fisher(tau);
        if v < best_val {
            best = tau;
            best_val = v;
        }
    }
    let flat = ConstantTemperingInputs {
        tau: vec![3.7; inp.tau.len()],
        grad_q_sq: inp.grad_q_sq.clone(),
        p_weight: inp.p_weight.clone(),
    };
    Prop1 {
        formula,
        grid_search: best,
        constant_case: optimal_constant_tau(&flat).unwrap(),
    }
}

/// Proposition 2: largest relative gap between the direct Fisher divergence
/// and the error formula for τ ∈ {1, 2, 3} on a 1D Gaussian pair, and between
/// the two error formulas at τ* on Twomoons2D.
pub fn prop2(n: usize) -> (f64, f64) {
    let grid = Grid::new(&BoxDomain::cube(1, -6.0, 6.0), 4000);
    // p = N(0, 1/2), q = N(0, 1).
    let log_p = |x: &[f64]| -x[0] * x[0];
    let sp = |x: &[f64]| Ok(vec![-2.0 * x[0]]);
    let sq = |x: &[f64]| Ok(vec![-x[0]]);
    let inp = ConstantTemperingInputs::on_grid(&grid, &|_| Ok(2.0), &sq, &log_p).unwrap();
    let mut gauss = 0.0f64;
    for tau in [1.0, 2.0, 3.0] {
        let direct = fisher_divergence_tempered(&grid, &sp, &sq, &log_p, tau).unwrap();
        let formula = constant_tempering_error(&inp, tau);
        gauss = gauss.max((direct - formula).abs() / direct);
    }
    let (inp, _, _) = twomoons_inputs(n);
    let star = optimal_constant_tau(&inp).unwrap();
    let first = constant_tempering_error(&inp, star);
    let second = optimal_tempering_error(&inp).unwrap();
    (gauss, (first - second).abs() / first)
}

/// Largest relative violation of `τ_{p^α,s} = s τ_{p^{α/s},1}` (Bradley–Terry)
/// and `τ_{p^α,s} = τ_{p^{αs},1} / s` (exponential) at 20 random Onemoon2D
/// points.
pub fn scaling_identity_error() -> f64 {
    let base = BeliefTarget::onemoon2d();
    let mut rng = rng_for(11, 3);
    let mut worst = 0.0f64;
    for &(alpha, s) in &[(1.0, 0.7797), (0.6, 2.5)] {
        let lhs = base.powered(alpha);
        let bt_rhs = base.powered(alpha / s);
        let exp_rhs = base.powered(alpha * s);
        let (ql, qb, qe) = (
            TargetQuadrature::standard(&lhs).unwrap(),
            TargetQuadrature::standard(&bt_rhs).unwrap(),
            TargetQuadrature::standard(&exp_rhs).unwrap(),
        );
        for _ in 0..20 {
            let x = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
            let a = ql.bt_field(&x, s).unwrap();
            let b = s * qb.bt_field(&x, 1.0).unwrap();
            worst = worst.max((a - b).abs() / a);
            let a = ql.exp_field(&x, s).unwrap();
            let b = qe.exp_field(&x, 1.0).unwrap() / s;
            worst = worst.max((a - b).abs() / a);
        }
    }
    worst
}

/// MWD of a 1D belief under a Gaussian λ, once in original coordinates and
/// pushed forward through the Rosenblatt map, once computed directly in the
/// uniform coordinates. Returns the largest absolute difference.
pub fn reparametrization_gap(rum: &RumConfig) -> f64 {
    let domain = BoxDomain::cube(1, -4.0, 4.0);
    let lambda = SamplingDist::diagonal_gaussian(domain.clone(), vec![0.3], vec![1.7]).unwrap();
    let belief = |x: f64| -0.5 * ((x - 0.8) / 0.6).powi(2);
    let n = 8192;
    let xg = Grid::new(&domain, n);
    let x_nodes: Vec<f64> = xg.points().map(|p| belief(p[0])).collect();
    let x_weights: Vec<f64> = xg.points().map(|p| lambda.pdf(&p) * xg.cell_volume()).collect();
    let ug = Grid::new(&BoxDomain::unit(1), n);
    let u_nodes: Vec<f64> = ug
        .points()
        .map(|u| belief(lambda.rosenblatt_inverse(&u).unwrap()[0]))
        .collect();
    let u_weights = vec![ug.cell_volume(); n];
    let mut worst = 0.0f64;
    for k in 0..200 {
        let u = (k as f64 + 0.5) / 200.0;
        let x = lambda.rosenblatt_inverse(&[u]).unwrap();
        let lam = lambda.pdf(&x);
        let pushed = mwd_from_values(belief(x[0]), lam, &x_nodes, &x_weights, rum) / lam;
        let direct = mwd_from_values(belief(x[0]), 1.0, &u_nodes, &u_weights, rum);
        worst = worst.max((pushed - direct).abs());
    }
    worst
}

/// Points of an `n × n` grid inside the highest-density region holding
/// `mass` of the target.
pub fn hdr_points(target: &BeliefTarget, n: usize, mass: f64) -> Vec<Vec<f64>> {
    let q = TargetQuadrature::standard(target).unwrap();
    let mut dens: Vec<f64> = q.grid().points().map(|x| q.density(&x)).collect();
    dens.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let cell = q.grid().cell_volume();
    let (mut acc, mut level) = (0.0, 0.0);
    for d in dens {
        acc += d * cell;
        level = d;
        if acc >= mass {
            break;
        }
    }
    Grid::new(target.domain(), n)
        .points()
        .filter(|x| q.density(x) >= level)
        .collect()
}

/// Field estimator fed with oracle inputs: exact `f = log p`, `m` exact MWD
/// draws (simulated winners) and quadrature `p_w`. Returns the largest
/// relative error against the quadrature field on the 90% region.
pub fn oracle_estimator_error(target: &BeliefTarget, m: usize, seed: u64) -> f64 {
    let rum = RumConfig::bradley_terry();
    let q = TargetQuadrature::standard(target).unwrap();
    let lambda = SamplingDist::uniform(target.domain().clone());
    let data = simulate_comparisons(target, &lambda, &rum, m, seed).unwrap();
    let f: Vec<f64> = data.winners.rows().into_iter().map(|r| target.log_unnorm(&r.to_vec())).collect();
    let log_pw: Vec<f64> = data.winners.rows().into_iter().map(|r| q.mwd(&r.to_vec(), &rum).ln()).collect();
    let est = FieldIntegrals::new(f, &log_pw, rum.s).unwrap();
    hdr_points(target, 40, 0.9)
        .iter()
        .map(|x| {
            let want = q.bt_field(x, rum.s).unwrap();
            let got = est.exact(target.log_unnorm(x)).unwrap();
            (got - want).abs() / want
        })
        .fold(0.0, f64::max)
}

/// Total variation between per-axis histograms of `m` simulated winners and
/// the bin masses of the quadrature MWD, averaged over axes.
pub fn winner_histogram_mmtv(target: &BeliefTarget, m: usize, bins: usize, seed: u64) -> f64 {
    let rum = RumConfig::bradley_terry();
    let q = TargetQuadrature::new(target, 128).unwrap();
    let lambda = SamplingDist::uniform(target.domain().clone());
    let data = simulate_comparisons(target, &lambda, &rum, m, seed).unwrap();
    let dom = target.domain();
    let outer = Grid::new(dom, 4 * bins);
    let pw: Vec<(Vec<f64>, f64)> = outer.points().map(|x| {
        let v = q.mwd(&x, &rum) * outer.cell_volume();
        (x, v)
    }).collect();
    let total: f64 = pw.iter().map(|p| p.1).sum();
    let d = target.dim();
    let mut tv = 0.0;
    for j in 0..d {
        let (lo, w) = (dom.lower()[j], dom.width(j) / bins as f64);
        let bin = |v: f64| (((v - lo) / w) as usize).min(bins - 1);
        let mut emp = vec![0.0; bins];
        for r in data.winners.rows() {
            emp[bin(r[j])] += 1.0 / m as f64;
        }
        let mut quad = vec![0.0; bins];
        for (x, v) in &pw {
            quad[bin(x[j])] += v / total;
        }
        tv += 0.5 * emp.iter().zip(&quad).map(|(a, b)| (a - b).abs()).sum::<f64>();
    }
    tv / d as f64
}

/// Local maxima of Twomoons2D on the horizontal axis, one per half-plane.
pub fn twomoons_modes() -> [[f64; 2]; 2] {
    let t = BeliefTarget::twomoons2d();
    let best = |sign: f64| {
        (0..60_000)
            .map(|k| sign * (0.001 + 6.0 * k as f64 / 60_000.0))
            .max_by(|a, b| t.log_unnorm(&[*a, 0.0]).partial_cmp(&t.log_unnorm(&[*b, 0.0])).unwrap())
            .unwrap()
    };
    [[best(-1.0), 0.0], [best(1.0), 0.0]]
}
