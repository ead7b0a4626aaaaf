//! Execution-time statistics over repeated load steps.
//!
//! For one step of `n` requests timed `k` times (`t_1..t_k` in ms):
//!
//! * mean `x̄ = Σ t_i / k`
//! * sample standard deviation `σ = sqrt(Σ (t_i - x̄)² / (k - 1))`
//! * throughput `Θ = n / (x̄ / 1000)` requests per second
//! * coefficient of variation `CV = 100 · σ / x̄` percent

use thiserror::Error;

/// Wall-clock time of one repeat of one load step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingSample {
    /// Target label as written to CSV, e.g. `publish` or `publish@4`.
    pub target: String,
    /// Requests in the step.
    pub n: u64,
    /// 1-based repeat index.
    pub repeat: u32,
    pub t_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsSummary {
    pub target: String,
    pub n: u64,
    pub repeats: usize,
    pub mean_ms: f64,
    pub stddev_ms: f64,
    pub throughput_per_s: f64,
    pub cv_pct: f64,
    /// Set when there was a single sample, so σ is reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no samples")]
    EmptySamples,
    #[error("sample {index} has non-positive or non-finite time {t_ms}")]
    BadTime { index: usize, t_ms: f64 },
    #[error("samples mix different steps")]
    MixedSteps,
}

/// Summarises the repeats of a single step. All samples must share target and `n`.
pub fn compute_metrics(samples: &[TimingSample]) -> Result<MetricsSummary, MetricsError> {
    let first = samples.first().ok_or(MetricsError::EmptySamples)?;
    if samples.iter().any(|s| s.n != first.n || s.target != first.target) {
        return Err(MetricsError::MixedSteps);
    }
    let times: Vec<f64> = samples.iter().map(|s| s.t_ms).collect();
    summarize(&first.target, first.n, &times)
}

/// Same as [`compute_metrics`] over bare times.
pub fn summarize(target: &str, n: u64, times_ms: &[f64]) -> Result<MetricsSummary, MetricsError> {
    if times_ms.is_empty() {
        return Err(MetricsError::EmptySamples);
    }
    // Welford's running mean and sum of squared deviations.
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (i, &t) in times_ms.iter().enumerate() {
        if !(t.is_finite() && t > 0.0) {
            return Err(MetricsError::BadTime { index: i, t_ms: t });
        }
        let delta = t - mean;
        mean += delta / (i + 1) as f64;
        m2 += delta * (t - mean);
    }
    let k = times_ms.len();
    let degenerate = k < 2;
    let stddev = if degenerate { 0.0 } else { (m2.max(0.0) / (k - 1) as f64).sqrt() };
    Ok(MetricsSummary {
        target: target.to_owned(),
        n,
        repeats: k,
        mean_ms: mean,
        stddev_ms: stddev,
        throughput_per_s: n as f64 / (mean / 1000.0),
        cv_pct: 100.0 * stddev / mean,
        degenerate,
    })
}
