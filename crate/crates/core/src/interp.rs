//! Plain piecewise-linear helpers mirroring the graph operations.

/// Interpolates through `(xk, yk)` at `q`, holding the end values constant
/// outside the knot range. `xk` must be non-decreasing with at least two
/// entries.
pub fn linear_at(xk: &[f64], yk: &[f64], q: f64) -> f64 {
    let r = xk.partition_point(|&v| v <= q).saturating_sub(1).min(xk.len() - 2);
    let h = (xk[r + 1] - xk[r]).max(deepfrc_tensor::EPS_DIV);
    let w = ((q - xk[r]) / h).clamp(0.0, 1.0);
    yk[r] + w * (yk[r + 1] - yk[r])
}

/// [`linear_at`] for many queries.
pub fn linear(xk: &[f64], yk: &[f64], queries: &[f64]) -> Vec<f64> {
    queries.iter().map(|&q| linear_at(xk, yk, q)).collect()
}

/// Derivative on grid `t`: central differences inside, one-sided at the ends.
pub fn central_diff(values: &[f64], t: &[f64]) -> Vec<f64> {
    let m = values.len();
    let mut out = Vec::with_capacity(m);
    out.push((values[1] - values[0]) / (t[1] - t[0]));
    for k in 1..m - 1 {
        out.push((values[k + 1] - values[k - 1]) / (t[k + 1] - t[k - 1]));
    }
    out.push((values[m - 1] - values[m - 2]) / (t[m - 1] - t[m - 2]));
    out
}
