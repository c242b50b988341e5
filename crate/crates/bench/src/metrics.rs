//! Error measures reported by the experiments.

/// `err / opt - 1`: the smallest `eps` with `err <= (1 + eps) opt`.
///
/// Infinite when `opt = 0 < err`, zero when both vanish.
pub fn relative_error(err_abs: f64, opt_abs: f64) -> f64 {
    if opt_abs > 0.0 {
        err_abs / opt_abs - 1.0
    } else if err_abs > 0.0 {
        f64::INFINITY
    } else {
        0.0
    }
}

/// `||A - A~|| / ||A||`, used where the optimum is zero.
pub fn recovery_error(err_abs: f64, norm_a: f64) -> f64 {
    if norm_a > 0.0 {
        err_abs / norm_a
    } else {
        relative_error(err_abs, 0.0)
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, _) = mean_stderr(&lx);
    let (my, _) = mean_stderr(&ly);
    let num: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let den: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    num / den
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_cases() {
        assert_eq!(relative_error(3.0, 3.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 1.0);
        let truncated_limit = relative_error(8f64.sqrt(), 4f64.sqrt());
        assert!((truncated_limit - (2f64.sqrt() - 1.0)).abs() < 1e-15);
        assert!((truncated_limit - 0.41421356).abs() < 1e-8);
        assert_eq!(relative_error(1.0, 0.0), f64::INFINITY);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(0.0, 2.0) >= -1.0);
    }

    #[test]
    fn stats() {
        let (m, se) = mean_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        // sample variance 5/3, over 4 samples
        assert!((se - (5.0f64 / 12.0).sqrt()).abs() < 1e-15);
        assert_eq!(mean_stderr(&[7.0]), (7.0, 0.0));
        assert!(mean_stderr(&[]).0.is_nan());
        assert_eq!(recovery_error(1.0, 4.0), 0.25);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [16.0, 32.0, 64.0, 128.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((loglog_slope(&x, &y) - 1.5).abs() < 1e-12);
    }
}
