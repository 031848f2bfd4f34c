//! Central finite-difference oracle for gradient checks.
//!
//! Kept independent of the tape: callers hand in a closure evaluating the
//! loss from a flat coordinate vector and get numerical derivatives back.

/// Central difference gradient of `f` at `x` over every coordinate.
pub fn central_diff<F>(mut f: F, x: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = vec![0.0; x.len()];
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let orig = buf[i];
        buf[i] = orig + h;
        let hi = f(&buf);
        buf[i] = orig - h;
        let lo = f(&buf);
        buf[i] = orig;
        out[i] = (hi - lo) / (2.0 * h);
    }
    out
}

/// Central differences on a subset of coordinates, for large parameter
/// vectors where probing every entry is too slow.
pub fn central_diff_at<F>(mut f: F, x: &[f64], coords: &[usize], h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut out = Vec::with_capacity(coords.len());
    let mut buf = x.to_vec();
    for &i in coords {
        let orig = buf[i];
        buf[i] = orig + h;
        let hi = f(&buf);
        buf[i] = orig - h;
        let lo = f(&buf);
        buf[i] = orig;
        out.push((hi - lo) / (2.0 * h));
    }
    out
}

/// Max over coordinates of `|a-b| / max(|b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / y.abs().max(floor))
        .fold(0.0, f64::max)
}
