//! Three calls for the browser page in `www/`. Each returns a JSON string.

use qprop::activations::ActivationDescriptor;
use qprop::calibrate::{optimize_spacing, DEFAULT_REFINE_TOL};
use qprop::meanfield::{analyze, c_map, solve_c_star, solve_q_star, HyperParams, SolverOptions};
use qprop::{make_constant_spaced, Error};
use serde_json::json;
use wasm_bindgen::prelude::*;

fn js(r: Result<String, Error>) -> Result<String, JsError> {
    r.map_err(|e| JsError::new(&e.to_string()))
}

/// χ against normalized spacing D̃ for an N-state constant-spaced staircase.
pub fn spacing_curve(n_states: usize, points: usize) -> Result<String, Error> {
    let c = optimize_spacing(n_states, points.max(2), DEFAULT_REFINE_TOL)?;
    let (d, x): (Vec<f64>, Vec<f64>) = c.samples.iter().copied().unzip();
    Ok(json!({ "d_tilde": d, "chi": x, "d_tilde_opt": c.d_tilde_opt, "chi_max": c.chi_max }).to_string())
}

/// The correlation map over `[-1, 1]` with its stable fixed point and χ there.
pub fn map_curve(n_states: usize, sigma_w: f64, sigma_b: f64, points: usize) -> Result<String, Error> {
    let act = make_constant_spaced(n_states)?;
    let hp = HyperParams::from_std(sigma_w, sigma_b)?;
    let q = solve_q_star(&act, hp, SolverOptions::default())?.q_star;
    let n = points.max(2);
    let cs: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64).collect();
    let m = cs
        .iter()
        .map(|&c| c_map(&act, q, c, hp))
        .collect::<Result<Vec<_>, _>>()?;
    let fp = solve_c_star(&act, hp, SolverOptions::default())?;
    Ok(json!({ "c": cs, "map": m, "q_star": q, "c_star": fp.c_star, "chi": fp.chi }).to_string())
}

/// Full report for an activation given as `sign`, `constant:N` or JSON.
pub fn analyze_report(activation: &str, sigma_w: f64, sigma_b: f64) -> Result<String, Error> {
    let desc = ActivationDescriptor::parse(activation)?;
    let r = analyze(
        &desc.build()?,
        HyperParams::from_std(sigma_w, sigma_b)?,
        SolverOptions::default(),
    )?;
    serde_json::to_string(&r).map_err(|e| Error::Parse(e.to_string()))
}

#[wasm_bindgen(js_name = spacingCurve)]
pub fn spacing_curve_js(n_states: usize, points: usize) -> Result<String, JsError> {
    js(spacing_curve(n_states, points))
}

#[wasm_bindgen(js_name = mapCurve)]
pub fn map_curve_js(n_states: usize, sigma_w: f64, sigma_b: f64, points: usize) -> Result<String, JsError> {
    js(map_curve(n_states, sigma_w, sigma_b, points))
}

#[wasm_bindgen(js_name = analyzeReport)]
pub fn analyze_report_js(activation: &str, sigma_w: f64, sigma_b: f64) -> Result<String, JsError> {
    js(analyze_report(activation, sigma_w, sigma_b))
}
