//! Small statistical helpers shared by the check suites.

/// Sample mean.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample variance.
pub fn sample_var(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64
}

/// Standard error of the sample mean.
pub fn se_mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    (sample_var(xs) / xs.len() as f64).sqrt()
}

/// Standard error of the sample variance of near-Gaussian data,
/// `var * sqrt(2 / (n - 1))`.
pub fn se_var_gaussian(var: f64, n: usize) -> f64 {
    if n < 2 {
        return f64::INFINITY;
    }
    var * (2.0 / (n as f64 - 1.0)).sqrt()
}

/// Ordinary least squares of y on x; returns (slope, intercept).
pub fn linear_fit(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    debug_assert_eq!(xs.len(), ys.len());
    let n = xs.len() as f64;
    let mx = mean(xs);
    let my = mean(ys);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx == 0.0 || n < 2.0 {
        return (0.0, my);
    }
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of log(y) against log(x); points with non-positive values are
/// rejected by returning NaN.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    if xs.iter().any(|&x| x <= 0.0) || ys.iter().any(|&y| y <= 0.0) {
        return f64::NAN;
    }
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    linear_fit(&lx, &ly).0
}
