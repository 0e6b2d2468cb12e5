//! Numerical checks of the field theorems, the constant-tempering results and
//! the reparametrization invariance, against quadrature oracles.

mod common;

use belief_core::densities::BeliefTarget;
use belief_core::rum::RumConfig;
use belief_core::tempering::TargetQuadrature;
use common::*;

#[test]
fn uniform_belief_gives_constant_fields() {
    let (bt, ex) = uniform_field_errors();
    assert!(bt < 1e-6, "{bt}");
    assert!(ex < 1e-6, "{ex}");
}

#[test]
fn bradley_terry_scores_are_collinear_on_twomoons() {
    let c = collinearity(&BeliefTarget::twomoons2d(), &RumConfig::bradley_terry(), 60);
    assert!(c.points > 3000, "{}", c.points);
    assert!(c.max_angle < 1e-3, "angle {}", c.max_angle);
    assert!(c.max_ratio_err < 1e-4, "ratio {}", c.max_ratio_err);
}

#[test]
fn exponential_scores_are_collinear_on_truncated_normal() {
    let target = BeliefTarget::truncated_normal_1d(0.4, 0.9, -3.0, 3.0).unwrap();
    for s in [0.5, 1.0, 2.0] {
        let rum = RumConfig::new(belief_core::rum::RumModel::Exponential, s).unwrap();
        let c = collinearity(&target, &rum, 300);
        assert!(c.points > 250);
        assert!(c.max_angle < 1e-3, "angle {}", c.max_angle);
        assert!(c.max_ratio_err < 1e-4, "s {s}: ratio {}", c.max_ratio_err);
    }
}

#[test]
fn optimal_constant_matches_grid_search() {
    let p = prop1(96);
    assert!((p.formula - p.grid_search).abs() <= 0.01 * p.formula, "{} {}", p.formula, p.grid_search);
    assert_eq!(p.constant_case, 3.7);
}

#[test]
fn error_formulas_agree() {
    let (gauss, moons) = prop2(96);
    assert!(gauss < 1e-3, "{gauss}");
    assert!(moons < 1e-3, "{moons}");
}

#[test]
fn noise_scale_identities() {
    let e = scaling_identity_error();
    assert!(e < 1e-6, "{e}");
}

#[test]
fn mwd_is_invariant_under_reparametrization() {
    for rum in [RumConfig::bradley_terry(), RumConfig::exponential()] {
        let gap = reparametrization_gap(&rum);
        assert!(gap < 1e-3, "{gap}");
    }
}

#[test]
fn simulated_winners_follow_the_quadrature_mwd() {
    let tv = winner_histogram_mmtv(&BeliefTarget::onemoon2d(), 100_000, 50, 7);
    assert!(tv < 0.03, "{tv}");
}

#[test]
fn estimator_with_oracle_inputs_recovers_the_field() {
    let err = oracle_estimator_error(&BeliefTarget::twomoons2d(), 4000, 3);
    assert!(err < 0.10, "{err}");
}

#[test]
fn exponential_and_bradley_terry_fields_are_similar() {
    let target = BeliefTarget::twomoons2d();
    let q = TargetQuadrature::standard(&target).unwrap();
    let bt = RumConfig::bradley_terry();
    let worst = hdr_points(&target, 40, 0.9)
        .iter()
        .map(|x| {
            let a = q.bt_field(x, bt.s).unwrap();
            let b = q.exp_field(x, 1.0).unwrap();
            (a - b).abs() / a
        })
        .fold(0.0, f64::max);
    assert!(worst < 0.15, "{worst}");
}

#[test]
fn twomoons_modes_are_mirror_images() {
    let [l, r] = twomoons_modes();
    assert!((l[0] + r[0]).abs() < 1e-3);
    assert!(r[0] > 1.0 && r[0] < 2.0, "{}", r[0]);
}
