//! Finite-difference utilities used by the test suites.
//!
//! The numeric side only ever calls forward evaluation, so a check compares
//! the engine's reverse pass against an independent derivative estimate.

use ndarray::ArrayD;

use super::param::Param;

/// Central-difference gradient of `eval` w.r.t. every coordinate of `param`,
/// probing at most `max_coords` coordinates (evenly strided, deterministic).
/// Returns `(flat_index, numeric_grad)` pairs.
pub fn central_diff_param(
    param: &Param<f64>,
    eval: &mut dyn FnMut() -> f64,
    h: f64,
    max_coords: usize,
) -> Vec<(usize, f64)> {
    let base = (*param.value()).clone();
    let n = base.len();
    let stride = (n / max_coords.max(1)).max(1);
    let mut out = Vec::new();
    let flat: Vec<f64> = base.iter().cloned().collect();
    for idx in (0..n).step_by(stride) {
        let mut plus = flat.clone();
        plus[idx] += h;
        param.set(ArrayD::from_shape_vec(base.raw_dim(), plus).unwrap());
        let f_plus = eval();
        let mut minus = flat.clone();
        minus[idx] -= h;
        param.set(ArrayD::from_shape_vec(base.raw_dim(), minus).unwrap());
        let f_minus = eval();
        out.push((idx, (f_plus - f_minus) / (2.0 * h)));
    }
    param.set(base);
    out
}

/// Relative error with a floor so that near-zero pairs compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-6);
    (a - b).abs() / denom
}

/// Check one parameter: max relative error between the analytic gradient and
/// central differences over sampled coordinates.
pub fn max_param_rel_err(
    param: &Param<f64>,
    analytic: &ArrayD<f64>,
    eval: &mut dyn FnMut() -> f64,
    h: f64,
    max_coords: usize,
) -> f64 {
    let analytic_flat: Vec<f64> = analytic.iter().cloned().collect();
    central_diff_param(param, eval, h, max_coords)
        .into_iter()
        .map(|(idx, num)| rel_err(analytic_flat[idx], num))
        .fold(0.0, f64::max)
}

/// Central difference for a plain vector function (no params involved).
pub fn central_diff_vec(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let fp = f(&buf);
        buf[i] = orig - h;
        let fm = f(&buf);
        buf[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// True when every analytic/numeric pair agrees within `tol` relative error.
pub fn grads_close(analytic: &[f64], numeric: &[f64], tol: f64) -> bool {
    analytic.len() == numeric.len()
        && analytic
            .iter()
            .zip(numeric)
            .all(|(&a, &n)| rel_err(a, n) <= tol)
}
