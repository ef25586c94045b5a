use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// How the normalising magnitude of a benchmark was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagnitudeKind {
    Range,
    Iqr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// One row of per-dimension nRMSE values per evaluated target.
    pub nrmse: Vec<Vec<f64>>,
    /// Per dimension, the fraction of targets with nRMSE ≤ 0.05.
    pub within_5pct: Vec<f64>,
    /// Per dimension, the fraction of targets with nRMSE ≤ 0.02.
    pub within_2pct: Vec<f64>,
    pub magnitude_kind: MagnitudeKind,
    pub magnitude: Vec<f64>,
}

impl MetricsReport {
    pub fn new(nrmse: Vec<Vec<f64>>, magnitude_kind: MagnitudeKind, magnitude: Vec<f64>) -> Self {
        let d = magnitude.len();
        let frac = |thr: f64| -> Vec<f64> {
            (0..d)
                .map(|k| {
                    if nrmse.is_empty() {
                        0.0
                    } else {
                        nrmse.iter().filter(|row| row[k] <= thr).count() as f64 / nrmse.len() as f64
                    }
                })
                .collect()
        };
        Self {
            within_5pct: frac(0.05),
            within_2pct: frac(0.02),
            nrmse,
            magnitude_kind,
            magnitude,
        }
    }

    /// Mean nRMSE per dimension.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.nrmse.len().max(1) as f64;
        (0..self.magnitude.len())
            .map(|k| self.nrmse.iter().map(|r| r[k]).sum::<f64>() / n)
            .collect()
    }
}

/// Per-dimension `sqrt(mean((x_i − x*)²)) / magnitude` over a window of states.
pub fn nrmse(window: &[Vec<f64>], x_star: &[f64], magnitude: &[f64]) -> Result<Vec<f64>> {
    if window.is_empty() {
        return Err(Error::InvalidConfig("empty nRMSE window".into()));
    }
    let d = x_star.len();
    check_len("magnitude", d, magnitude.len())?;
    if magnitude.iter().any(|m| !(*m > 0.0)) {
        return Err(Error::InvalidConfig("nRMSE magnitude must be positive".into()));
    }
    let n = window.len() as f64;
    (0..d)
        .map(|k| {
            let mut ss = 0.0;
            for x in window {
                check_len("state", d, x.len())?;
                ss += (x[k] - x_star[k]).powi(2);
            }
            Ok((ss / n).sqrt() / magnitude[k])
        })
        .collect()
}

/// Indices of samples in the final `fraction` of `[t_start, t_end]`.
pub fn tail_window(times: &[f64], t_start: f64, t_end: f64, fraction: f64) -> std::ops::Range<usize> {
    let cut = t_end - fraction * (t_end - t_start);
    let lo = times.partition_point(|&t| t < cut - 1e-12 * t_end.abs().max(1.0));
    let hi = times.partition_point(|&t| t <= t_end + 1e-12 * t_end.abs().max(1.0));
    lo..hi.max(lo)
}

/// Percentile with linear interpolation between order statistics
/// (position `p·(n−1)` in the sorted sample).
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    let pos = p * (sorted.len() - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < sorted.len() {
        sorted[i] + frac * (sorted[i + 1] - sorted[i])
    } else {
        sorted[i]
    }
}

/// Interquartile range under the linear-interpolation convention.
pub fn iqr(samples: &[f64]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::InvalidConfig("interquartile range of an empty sample".into()));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(percentile(&s, 0.75) - percentile(&s, 0.25))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nrmse_cases() {
        let at = vec![vec![1.0, 2.0]; 5];
        assert_eq!(nrmse(&at, &[1.0, 2.0], &[1.0, 1.0]).unwrap(), vec![0.0, 0.0]);
        let off = vec![vec![1.3]; 7];
        assert!((nrmse(&off, &[1.0], &[3.0]).unwrap()[0] - 0.1).abs() < 1e-15);
        assert!(nrmse(&[], &[1.0], &[1.0]).is_err());
        assert!(nrmse(&off, &[1.0], &[0.0]).is_err());
    }

    #[test]
    fn iqr_cases() {
        let uniform: Vec<f64> = (0..=100).map(f64::from).collect();
        assert_eq!(iqr(&uniform).unwrap(), 50.0);
        assert_eq!(iqr(&[2.5; 9]).unwrap(), 0.0);
        assert_eq!(iqr(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 1.5);
        assert!(iqr(&[]).is_err());
    }

    #[test]
    fn last_fifth_window() {
        let times: Vec<f64> = (0..=500).map(f64::from).collect();
        let w = tail_window(&times, 0.0, 500.0, 0.2);
        assert_eq!((times[w.start], times[w.end - 1]), (400.0, 500.0));
    }

    #[test]
    fn report_fractions() {
        let rep = MetricsReport::new(vec![vec![0.01], vec![0.03], vec![0.2], vec![0.0]], MagnitudeKind::Range, vec![1.0]);
        assert_eq!(rep.within_5pct, vec![0.75]);
        assert_eq!(rep.within_2pct, vec![0.5]);
    }
}
