//! Browser bindings: target densities, quadrature tempering fields and
//! simulated comparisons on two-dimensional targets.
//!
//! Grids are returned row-major with `x2` varying slowest, covering the
//! target's box at cell midpoints.

use belief_core::densities::{BeliefTarget, SamplingDist};
use belief_core::quadrature::Grid;
use belief_core::rum::{simulate_comparisons, RumConfig, RumModel};
use belief_core::tempering::TargetQuadrature;
use wasm_bindgen::prelude::*;

/// Nodes per axis of the quadrature behind `field_grid`.
const QUAD_NODES: usize = 128;
const MAX_SIDE: usize = 256;

fn target_2d(name: &str) -> Result<BeliefTarget, String> {
    let t = BeliefTarget::by_name(name).map_err(|e| e.to_string())?;
    if t.dim() != 2 {
        return Err(format!("'{name}' is {}-dimensional; only 2D targets can be drawn", t.dim()));
    }
    Ok(t)
}

fn check_side(n: usize) -> Result<(), String> {
    if n < 2 || n > MAX_SIDE {
        return Err(format!("grid side must lie in [2, {MAX_SIDE}], got {n}"));
    }
    Ok(())
}

fn rum(model: &str, s: f64) -> Result<RumConfig, String> {
    let model = RumModel::parse(model).map_err(|e| e.to_string())?;
    RumConfig::new(model, s).map_err(|e| e.to_string())
}

/// Names of the built-in two-dimensional targets.
pub fn target_names() -> Vec<String> {
    ["onemoon2d", "twomoons2d", "ring2d"].iter().map(|s| s.to_string()).collect()
}

/// `[lower1, upper1, lower2, upper2]` of a target's box.
pub fn bounds(name: &str) -> Result<Vec<f64>, String> {
    let t = target_2d(name)?;
    let d = t.domain();
    Ok(vec![d.lower()[0], d.upper()[0], d.lower()[1], d.upper()[1]])
}

/// Normalized target density on an `n × n` grid.
pub fn density_grid(name: &str, n: usize) -> Result<Vec<f64>, String> {
    check_side(n)?;
    let t = target_2d(name)?;
    let q = TargetQuadrature::new(&t, QUAD_NODES).map_err(|e| e.to_string())?;
    Ok(Grid::new(t.domain(), n).points().map(|x| q.density(&x)).collect())
}

/// Tempering field between the belief and its marginal winner density under
/// uniform sampling, on an `n × n` grid.
pub fn field_grid(name: &str, model: &str, s: f64, n: usize) -> Result<Vec<f64>, String> {
    check_side(n)?;
    let t = target_2d(name)?;
    let rum = rum(model, s)?;
    let q = TargetQuadrature::new(&t, QUAD_NODES).map_err(|e| e.to_string())?;
    Grid::new(t.domain(), n)
        .points()
        .map(|x| q.field(&x, &rum).map_err(|e| e.to_string()))
        .collect()
}

/// `n` simulated comparisons under uniform sampling, flattened as
/// `[w1, w2, l1, l2]` per pair.
pub fn comparisons(name: &str, model: &str, s: f64, n: usize, seed: u64) -> Result<Vec<f64>, String> {
    let t = target_2d(name)?;
    let rum = rum(model, s)?;
    let lambda = SamplingDist::uniform(t.domain().clone());
    let data = simulate_comparisons(&t, &lambda, &rum, n, seed).map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(4 * n);
    for (w, l) in data.winners.rows().into_iter().zip(data.losers.rows()) {
        out.extend(w.iter().chain(l.iter()));
    }
    Ok(out)
}

#[wasm_bindgen(js_name = targetNames)]
pub fn js_target_names() -> Vec<String> {
    target_names()
}

#[wasm_bindgen(js_name = bounds)]
pub fn js_bounds(name: &str) -> Result<Vec<f64>, JsError> {
    bounds(name).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = densityGrid)]
pub fn js_density_grid(name: &str, n: usize) -> Result<Vec<f64>, JsError> {
    density_grid(name, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = fieldGrid)]
pub fn js_field_grid(name: &str, model: &str, s: f64, n: usize) -> Result<Vec<f64>, JsError> {
    field_grid(name, model, s, n).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen(js_name = comparisons)]
pub fn js_comparisons(name: &str, model: &str, s: f64, n: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    comparisons(name, model, s, n, seed).map_err(|e| JsError::new(&e))
}
