//! Browser bindings. Each export returns a flat `Float64Array` of rows so
//! the page needs no JSON layer; the row layout is given per function.

use oal_core::correlations::{g2_regression, smooth_gaussian, symmetric_taus};
use oal_core::evolve::{steady_state, sweep_nbar, LindbladGenerator};
use oal_core::model::{mhz, CqedParams, DriveParams};
use oal_core::opalg::HilbertSpace;
use oal_core::semiclassical::threshold_scan;
use wasm_bindgen::prelude::*;

fn grid(x_max: f64, points: usize) -> Result<Vec<f64>, String> {
    if points < 2 || !(x_max > 0.0) {
        return Err("need x_max > 0 and at least two points".into());
    }
    Ok((0..points).map(|k| x_max * k as f64 / (points - 1) as f64).collect())
}

fn params(g0_mhz: f64) -> CqedParams {
    CqedParams {
        g0: mhz(g0_mhz),
        ..Default::default()
    }
}

/// Rows of (x, n̄, ⟨σ₃′₃′⟩, ⟨σ₄₄⟩) over `[0, x_max]`.
pub fn sweep_rows(g0_mhz: f64, x_max: f64, points: usize, fock_cutoff: usize) -> Result<Vec<f64>, String> {
    let space = HilbertSpace::new(fock_cutoff).map_err(|e| e.to_string())?;
    let curve = sweep_nbar(&params(g0_mhz), &DriveParams::default(), &grid(x_max, points)?, space)
        .map_err(|e| e.to_string())?;
    Ok(curve
        .points
        .iter()
        .flat_map(|p| [p.x, p.nbar, p.pop_3p, p.pop_4])
        .collect())
}

/// Rows of (τ in ns, raw g², smoothed g²) over `[−tau_max_ns, tau_max_ns]`.
pub fn g2_rows(x: f64, tau_max_ns: f64, points: usize, sigma_ns: f64) -> Result<Vec<f64>, String> {
    let space = HilbertSpace::new(8).map_err(|e| e.to_string())?;
    let d = DriveParams::default().with_pump_ratio(x).map_err(|e| e.to_string())?;
    let gen = LindbladGenerator::from_model(&CqedParams::default(), &d, space);
    let rho = steady_state(&gen).map_err(|e| e.to_string())?;
    let points = points | 1;
    let raw = g2_regression(&gen, &rho, &symmetric_taus(tau_max_ns * 1e-9, points)).map_err(|e| e.to_string())?;
    let smooth = smooth_gaussian(&raw, sigma_ns * 1e-9).map_err(|e| e.to_string())?;
    Ok((0..raw.len())
        .flat_map(|i| [raw.taus[i] * 1e9, raw.values[i], smooth.values[i]])
        .collect())
}

/// First element is x_th (NaN when there is no threshold), followed by rows
/// of (x, mean-field |α|², quantum n̄).
pub fn threshold_rows(g0_mhz: f64, x_max: f64, points: usize) -> Result<Vec<f64>, String> {
    let p = params(g0_mhz);
    let xs = grid(x_max, points)?;
    let scan = threshold_scan(&p, &DriveParams::default(), &xs).map_err(|e| e.to_string())?;
    let space = HilbertSpace::new(8).map_err(|e| e.to_string())?;
    let quantum = sweep_nbar(&p, &DriveParams::default(), &xs, space).map_err(|e| e.to_string())?;
    let mut out = vec![scan.x_th.unwrap_or(f64::NAN)];
    for (s, q) in scan.curve.points.iter().zip(&quantum.points) {
        out.extend([s.x, s.nbar, q.nbar]);
    }
    Ok(out)
}

#[wasm_bindgen]
pub fn sweep_curve(g0_mhz: f64, x_max: f64, points: usize, fock_cutoff: usize) -> Result<Vec<f64>, JsValue> {
    sweep_rows(g0_mhz, x_max, points, fock_cutoff).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn g2_curve(x: f64, tau_max_ns: f64, points: usize, sigma_ns: f64) -> Result<Vec<f64>, JsValue> {
    g2_rows(x, tau_max_ns, points, sigma_ns).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn semiclassical_threshold(g0_mhz: f64, x_max: f64, points: usize) -> Result<Vec<f64>, JsValue> {
    threshold_rows(g0_mhz, x_max, points).map_err(|e| JsValue::from_str(&e))
}
