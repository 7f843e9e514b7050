//! Small fitting helpers shared by the scaling checks.

use serde::Serialize;

/// Least-squares slope of log y against log x (points with x, y > 0).
pub fn loglog_slope(pts: &[(f64, f64)]) -> f64 {
    let p: Vec<(f64, f64)> = pts.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    linear_slope(&p)
}

/// Least-squares slope of y against x; NaN with fewer than two points.
pub fn linear_slope(pts: &[(f64, f64)]) -> f64 {
    if pts.len() < 2 {
        return f64::NAN;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let num: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

/// Fit y = c x through the origin; returns (c, max relative deviation of y from c x).
pub fn slope_through_origin(pts: &[(f64, f64)]) -> (f64, f64) {
    let sxy: f64 = pts.iter().map(|(x, y)| x * y).sum();
    let sxx: f64 = pts.iter().map(|(x, _)| x * x).sum();
    let c = sxy / sxx;
    let dev = pts.iter().map(|(x, y)| ((y - c * x) / (c * x)).abs()).fold(0.0, f64::max);
    (c, dev)
}

/// Binomial proportion with a 95% Wilson score interval.
#[derive(Clone, Copy, Debug, Serialize, PartialEq)]
pub struct Proportion {
    pub hits: usize,
    pub trials: usize,
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
}

impl Proportion {
    pub fn new(hits: usize, trials: usize) -> Self {
        let n = trials.max(1) as f64;
        let p = hits as f64 / n;
        let z = 1.959_963_984_540_054;
        let den = 1.0 + z * z / n;
        let centre = (p + z * z / (2.0 * n)) / den;
        let half = z * (p * (1.0 - p) / n + z * z / (4.0 * n * n)).sqrt() / den;
        let lo = if hits == 0 { 0.0 } else { (centre - half).max(0.0) };
        let hi = if hits >= trials { 1.0 } else { (centre + half).min(1.0) };
        Self { hits, trials, estimate: p, lo, hi }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slopes() {
        let pts: Vec<(f64, f64)> = [1.0f64, 10.0, 100.0].iter().map(|&x| (x, 3.0 * x.powf(-1.5))).collect();
        assert!((loglog_slope(&pts) + 1.5).abs() < 1e-12);
        let (c, dev) = slope_through_origin(&[(1.0, 2.0), (2.0, 4.0)]);
        assert!((c - 2.0).abs() < 1e-15 && dev < 1e-15);
        assert!(linear_slope(&[(1.0, 1.0)]).is_nan());
    }

    #[test]
    fn wilson_interval() {
        let p = Proportion::new(0, 100);
        assert_eq!(p.lo, 0.0);
        assert!(p.hi > 0.0 && p.hi < 0.05);
        let p = Proportion::new(50, 100);
        assert!((p.lo - 0.4038).abs() < 1e-3 && (p.hi - 0.5962).abs() < 1e-3);
    }
}
