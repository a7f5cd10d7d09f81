//! Order statistics shared by the fitting stages.

/// Linearly interpolated percentile (`q` in `[0, 1]`) of `values`.
///
/// The slice is reordered in place. Returns `None` on empty input.
pub fn percentile_mut(values: &mut [f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let q = q.clamp(0.0, 1.0);
    let pos = q * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_val = *lo_val;
    if frac == 0.0 || upper.is_empty() {
        return Some(lo_val);
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    Some(lo_val + frac * (hi_val - lo_val))
}

/// Percentile of a borrowed slice (copies once).
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    let mut buf = values.to_vec();
    percentile_mut(&mut buf, q)
}

/// Low and high percentile of the same data with a single copy.
pub fn percentile_pair(values: &[f64], low: f64, high: f64, scratch: &mut Vec<f64>) -> Option<(f64, f64)> {
    scratch.clear();
    scratch.extend_from_slice(values);
    let lo = percentile_mut(scratch, low)?;
    let hi = percentile_mut(scratch, high)?;
    Some((lo, hi))
}

pub fn median(values: &[f64]) -> Option<f64> {
    percentile(values, 0.5)
}

/// Median absolute deviation around the median, unscaled.
pub fn mad(values: &[f64]) -> Option<(f64, f64)> {
    let med = median(values)?;
    let dev: Vec<f64> = values.iter().map(|v| (v - med).abs()).collect();
    Some((med, median(&dev)?))
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
