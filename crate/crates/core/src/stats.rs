//! Monte Carlo summaries shared by the estimators.

use serde::{Deserialize, Serialize};

/// A Monte Carlo scalar with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl ValueEstimate {
    pub fn exact(value: f64) -> Self {
        Self { value, stderr: 0.0, samples: 0 }
    }

    /// Sample mean and standard error of the mean.
    pub fn from_samples(xs: &[f64]) -> Self {
        let (m, v) = mean_var(xs);
        let n = xs.len();
        let stderr = if n > 1 { (v / n as f64).sqrt() } else { 0.0 };
        Self { value: m, stderr, samples: n }
    }

    /// Standard error of the difference of two independent estimates.
    pub fn combined_stderr(&self, other: &ValueEstimate) -> f64 {
        self.stderr.hypot(other.stderr)
    }

    /// `|value - target| <= k * stderr`, with an absolute floor for exact estimators.
    pub fn within(&self, target: f64, k: f64, floor: f64) -> bool {
        (self.value - target).abs() <= k * self.stderr + floor
    }
}

/// Mean and unbiased variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    let v = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (m, v)
}

/// Log of the mean of `exp(lw)` with a delta-method standard error on the log.
#[derive(Clone, Copy, Debug)]
pub struct LogMeanExp {
    pub log_mean: f64,
    pub stderr: f64,
    pub ess: f64,
    pub spread: f64,
}

pub fn log_mean_exp(lw: &[f64]) -> LogMeanExp {
    let n = lw.len();
    let max = lw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = lw.iter().cloned().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = lw.iter().map(|l| (l - max).exp()).collect();
    let (m, v) = mean_var(&w);
    let stderr = if n > 1 && m > 0.0 { (v / n as f64).sqrt() / m } else { 0.0 };
    LogMeanExp { log_mean: max + m.ln(), stderr, ess: weight_ess(&w), spread: max - min }
}

/// Kish effective sample size of nonnegative weights.
pub fn weight_ess(w: &[f64]) -> f64 {
    let s: f64 = w.iter().sum();
    let s2: f64 = w.iter().map(|x| x * x).sum();
    if s2 > 0.0 {
        s * s / s2
    } else {
        0.0
    }
}

/// Normalized autocorrelation at lags `0..=max_lag`.
pub fn autocorrelation(xs: &[f64], max_lag: usize) -> Vec<f64> {
    let n = xs.len();
    let (m, _) = mean_var(xs);
    let c0: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n as f64;
    (0..=max_lag.min(n.saturating_sub(1)))
        .map(|k| {
            if c0 == 0.0 {
                return if k == 0 { 1.0 } else { 0.0 };
            }
            let ck: f64 = (0..n - k).map(|i| (xs[i] - m) * (xs[i + k] - m)).sum::<f64>() / n as f64;
            ck / c0
        })
        .collect()
}

/// Effective sample size from the initial positive sequence of autocorrelations.
pub fn autocorr_ess(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 4 {
        return n as f64;
    }
    let rho = autocorrelation(xs, (n / 2).min(2000));
    let mut tau = 1.0;
    let mut k = 1;
    while k + 1 < rho.len() {
        let pair = rho[k] + rho[k + 1];
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        k += 2;
    }
    (n as f64 / tau).min(n as f64)
}

/// Standard error of the mean from non-overlapping batch means.
pub fn batch_means_stderr(xs: &[f64], batches: usize) -> f64 {
    let n = xs.len();
    let b = batches.max(2).min(n.max(2));
    let size = n / b;
    if size == 0 {
        return ValueEstimate::from_samples(xs).stderr;
    }
    let means: Vec<f64> = (0..b).map(|i| xs[i * size..(i + 1) * size].iter().sum::<f64>() / size as f64).collect();
    let (_, v) = mean_var(&means);
    (v / b as f64).sqrt()
}

/// Gelman-Rubin potential scale reduction over equal-length chains.
pub fn r_hat(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    if m < 2 {
        return f64::NAN;
    }
    let n = chains.iter().map(|c| c.len()).min().unwrap_or(0);
    if n < 2 {
        return f64::NAN;
    }
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(&c[..n])).collect();
    let grand = stats.iter().map(|s| s.0).sum::<f64>() / m as f64;
    let b = n as f64 / (m - 1) as f64 * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m as f64;
    if w == 0.0 {
        return 1.0;
    }
    let var_plus = (n - 1) as f64 / n as f64 * w + b / n as f64;
    (var_plus / w).sqrt()
}

/// Least-squares slope and intercept of `y` against `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Slope of `log y` against `log x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_mean_exp_of_constant_is_exact() {
        let r = log_mean_exp(&[-1000.0; 10]);
        assert!((r.log_mean + 1000.0).abs() < 1e-12);
        assert_eq!(r.stderr, 0.0);
        assert!((r.ess - 10.0).abs() < 1e-12);
    }

    #[test]
    fn log_mean_exp_matches_direct_sum() {
        let lw = [0.1, -0.3, 0.7, 0.2];
        let direct = (lw.iter().map(|x: &f64| x.exp()).sum::<f64>() / 4.0).ln();
        assert!((log_mean_exp(&lw).log_mean - direct).abs() < 1e-14);
    }

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(-2.0)).collect();
        assert!((log_log_slope(&x, &y) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn ess_of_iid_like_sequence_is_near_length() {
        let xs: Vec<f64> = (0..1000).map(|i| ((i * 7919) % 1000) as f64).collect();
        let e = autocorr_ess(&xs);
        assert!(e > 300.0, "{e}");
    }

    #[test]
    fn r_hat_near_one_for_identical_chains() {
        let c: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let r = r_hat(&[c.clone(), c]);
        assert!((r - 1.0).abs() < 0.05, "{r}");
    }
}
