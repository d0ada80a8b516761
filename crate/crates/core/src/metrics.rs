//! Objective measures: smoothed ERLE, normalized misalignment and the
//! logarithmic residual energy, plus per-section aggregation of traces.

use serde::{Deserialize, Serialize};

use crate::echosim::{Activity, Section};
use crate::error::{check_len, Error, Result};

/// Lowest misalignment reported, in dB.
pub const MISALIGNMENT_FLOOR_DB: f64 = -120.0;
/// Residual energy floor of [`log_mse`] (−200 dB).
pub const LOG_MSE_FLOOR: f64 = 1e-20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ErleConfig {
    /// Pole of the power smoother.
    pub smoothing: f64,
    /// Power floor relative to the peak of `d²`.
    pub relative_floor: f64,
    /// Reported ceiling in dB.
    pub cap_db: f64,
}

impl Default for ErleConfig {
    fn default() -> Self {
        Self {
            smoothing: 0.99,
            relative_floor: 1e-12,
            cap_db: 120.0,
        }
    }
}

impl ErleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.smoothing) {
            return Err(Error::config(
                "metrics.erle.smoothing",
                format!("need 0 <= smoothing < 1 (got {})", self.smoothing),
            ));
        }
        if !(self.relative_floor > 0.0 && self.relative_floor.is_finite()) {
            return Err(Error::config(
                "metrics.erle.relative_floor",
                "floor must be positive",
            ));
        }
        if !self.cap_db.is_finite() {
            return Err(Error::config("metrics.erle.cap_db", "cap must be finite"));
        }
        Ok(())
    }
}

/// Per-sample ERLE in dB: the ratio of smoothed `d²` to smoothed `(d − d̂)²`.
///
/// Both powers are floored at `relative_floor · max d²`. Where the residual
/// power is at the floor the cap is reported (or 0 dB if the echo power is
/// also at the floor).
pub fn erle(d: &[f64], d_hat: &[f64], config: &ErleConfig) -> Result<Vec<f64>> {
    check_len("erle", d.len(), d_hat.len())?;
    config.validate()?;
    let peak = d.iter().fold(0.0f64, |m, v| m.max(v * v));
    let floor = if peak > 0.0 {
        config.relative_floor * peak
    } else {
        f64::MIN_POSITIVE
    };
    let a = config.smoothing;
    let (mut echo, mut residual) = (0.0, 0.0);
    Ok(d.iter()
        .zip(d_hat)
        .map(|(&dn, &hn)| {
            let r = dn - hn;
            echo = a * echo + (1.0 - a) * dn * dn;
            residual = a * residual + (1.0 - a) * r * r;
            if residual <= floor {
                if echo <= floor {
                    0.0
                } else {
                    config.cap_db
                }
            } else {
                (10.0 * (echo.max(floor) / residual).log10()).min(config.cap_db)
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Misalignment {
    pub db: f64,
    /// The true response was longer than the estimate and was truncated.
    pub truncated: bool,
}

/// `10 log10(‖h − ĥ‖² / ‖h‖²)`, floored at [`MISALIGNMENT_FLOOR_DB`].
///
/// A shorter estimate is compared against the truncated truth; a longer one
/// against the zero-extended truth. `None` when `‖h‖ = 0`.
pub fn misalignment(h: &[f64], h_hat: &[f64]) -> Option<Misalignment> {
    let truncated = h.len() > h_hat.len();
    let truth = &h[..h.len().min(h_hat.len())];
    let norm: f64 = truth.iter().map(|v| v * v).sum();
    if norm == 0.0 {
        return None;
    }
    let overlap: f64 = truth
        .iter()
        .zip(h_hat)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tail: f64 = h_hat[truth.len()..].iter().map(|v| v * v).sum();
    let ratio = (overlap + tail) / norm;
    let db = if ratio > 0.0 {
        (10.0 * ratio.log10()).max(MISALIGNMENT_FLOOR_DB)
    } else {
        MISALIGNMENT_FLOOR_DB
    };
    Some(Misalignment { db, truncated })
}

/// `10 log10 Σ (e − s − n)²`, floored at [`LOG_MSE_FLOOR`].
pub fn log_mse(e: &[f64], s: &[f64], n: &[f64]) -> Result<f64> {
    check_len("log_mse", e.len(), s.len())?;
    check_len("log_mse", e.len(), n.len())?;
    let energy: f64 = e
        .iter()
        .zip(s)
        .zip(n)
        .map(|((e, s), n)| {
            let r = e - s - n;
            r * r
        })
        .sum();
    Ok(10.0 * energy.max(LOG_MSE_FLOOR).log10())
}

/// Values sampled at increasing sample indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub index: Vec<usize>,
    pub value: Vec<f64>,
}

impl Trace {
    /// One point per sample.
    pub fn dense(values: Vec<f64>) -> Self {
        Self {
            index: (0..values.len()).collect(),
            value: values,
        }
    }

    pub fn push(&mut self, index: usize, value: f64) {
        debug_assert!(self.index.last().map_or(true, |&last| last < index));
        self.index.push(index);
        self.value.push(value);
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Every `stride`-th point.
    pub fn decimate(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        Self {
            index: self.index.iter().copied().step_by(stride).collect(),
            value: self.value.iter().copied().step_by(stride).collect(),
        }
    }

    pub fn points(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.index.iter().copied().zip(self.value.iter().copied())
    }

    /// First index at or after `from` whose value is at or below `threshold`.
    pub fn first_at_or_below(&self, threshold: f64, from: usize) -> Option<usize> {
        self.points()
            .find(|&(i, v)| i >= from && v <= threshold)
            .map(|(i, _)| i)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AggregateOptions {
    /// Samples skipped at the start of every section.
    pub warmup: usize,
    /// Length of the trailing window for `final_mean`.
    pub final_window: usize,
}

impl AggregateOptions {
    /// 0.25 s warm-up, 1 s final window.
    pub fn for_rate(sample_rate: u32) -> Self {
        Self {
            warmup: sample_rate as usize / 4,
            final_window: sample_rate as usize,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionAggregate {
    pub kind: Activity,
    pub start: usize,
    pub end: usize,
    pub mean: Option<f64>,
    pub final_mean: Option<f64>,
    /// Trace points contributing to `mean`.
    pub count: usize,
    /// No trace point survived the warm-up exclusion.
    pub empty: bool,
}

fn mean_over(trace: &Trace, lo: usize, hi: usize) -> (Option<f64>, usize) {
    let (sum, count) = trace
        .points()
        .filter(|&(i, _)| i >= lo && i < hi)
        .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
    ((count > 0).then(|| sum / count as f64), count)
}

pub fn aggregate_sections(
    trace: &Trace,
    sections: &[Section],
    options: &AggregateOptions,
) -> Vec<SectionAggregate> {
    sections
        .iter()
        .map(|section| {
            let lo = section
                .start
                .saturating_add(options.warmup)
                .min(section.end);
            let (mean, count) = mean_over(trace, lo, section.end);
            let final_lo = section.end.saturating_sub(options.final_window).max(lo);
            let (final_mean, _) = mean_over(trace, final_lo, section.end);
            SectionAggregate {
                kind: section.kind,
                start: section.start,
                end: section.end,
                mean,
                final_mean,
                count,
                empty: count == 0,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut state = seed;
        move || {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64) - 0.5
        }
    }

    #[test]
    fn perfect_estimate_reports_cap() {
        let mut r = lcg(1);
        let d: Vec<f64> = (0..1000).map(|_| r()).collect();
        let e = erle(&d, &d, &ErleConfig::default()).unwrap();
        assert!(e[10..].iter().all(|&v| v == 120.0));
    }

    #[test]
    fn no_estimate_is_zero_db() {
        let mut r = lcg(2);
        let d: Vec<f64> = (0..2000).map(|_| r()).collect();
        let e = erle(&d, &vec![0.0; d.len()], &ErleConfig::default()).unwrap();
        assert!(e.iter().all(|&v| v.abs() < 1e-9));
    }

    #[test]
    fn silent_echo_and_residual_is_zero_db() {
        let e = erle(&[0.0; 10], &[0.0; 10], &ErleConfig::default()).unwrap();
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn erle_length_mismatch() {
        assert!(erle(&[0.0; 3], &[0.0; 2], &ErleConfig::default()).is_err());
        let bad = ErleConfig {
            smoothing: 1.0,
            ..Default::default()
        };
        assert!(erle(&[0.0], &[0.0], &bad).is_err());
    }

    #[test]
    fn misalignment_cases() {
        let h = [1.0, -0.5, 0.25];
        assert_eq!(misalignment(&h, &h).unwrap().db, MISALIGNMENT_FLOOR_DB);
        assert_eq!(misalignment(&h, &[0.0; 3]).unwrap().db, 0.0);
        let half: Vec<f64> = h.iter().map(|v| v / 2.0).collect();
        let m = misalignment(&h, &half).unwrap();
        assert!((m.db - 10.0 * 0.25f64.log10()).abs() < 1e-12);
        assert!(!m.truncated);
        let short = misalignment(&h, &h[..2]).unwrap();
        assert!(short.truncated);
        assert_eq!(short.db, MISALIGNMENT_FLOOR_DB);
        let long = misalignment(&h, &[1.0, -0.5, 0.25, 1.3125]).unwrap();
        assert!((long.db - 10.0 * 1.3125f64.log10()).abs() < 1e-12);
        assert!(misalignment(&[0.0], &[1.0]).is_none());
    }

    #[test]
    fn log_mse_cases() {
        let s = [0.5, -0.25, 0.0];
        let n = [0.1, 0.0, 0.2];
        let e: Vec<f64> = s.iter().zip(&n).map(|(a, b)| a + b).collect();
        assert_eq!(log_mse(&e, &s, &n).unwrap(), -200.0);
        let mut impulse = e.clone();
        impulse[1] += 1.0;
        assert_eq!(log_mse(&impulse, &s, &n).unwrap(), 0.0);
        let residual = [0.3, -0.2, 0.7];
        let scaled: Vec<f64> = residual.iter().map(|v| v * 10.0).collect();
        let zero = [0.0; 3];
        let a = log_mse(&residual, &zero, &zero).unwrap();
        let b = log_mse(&scaled, &zero, &zero).unwrap();
        assert!((b - a - 20.0).abs() < 1e-12);
        assert!(log_mse(&[0.0], &[0.0; 2], &[0.0]).is_err());
    }

    fn section(start: usize, end: usize) -> Section {
        Section {
            kind: Activity::Stfe,
            start,
            end,
        }
    }

    #[test]
    fn aggregates() {
        let constant = Trace::dense(vec![3.5; 100]);
        let opts = AggregateOptions {
            warmup: 10,
            final_window: 20,
        };
        let agg = &aggregate_sections(&constant, &[section(0, 100)], &opts)[0];
        assert_eq!(agg.mean, Some(3.5));
        assert_eq!(agg.final_mean, Some(3.5));
        assert_eq!(agg.count, 90);

        let step = Trace::dense((0..100).map(|i| if i < 50 { 0.0 } else { 10.0 }).collect());
        let opts = AggregateOptions {
            warmup: 0,
            final_window: 20,
        };
        let agg = &aggregate_sections(&step, &[section(0, 100)], &opts)[0];
        assert_eq!(agg.mean, Some(5.0));
        assert_eq!(agg.final_mean, Some(10.0));

        let opts = AggregateOptions {
            warmup: 100,
            final_window: 20,
        };
        let agg = &aggregate_sections(&constant, &[section(0, 100)], &opts)[0];
        assert!(agg.empty);
        assert_eq!(agg.mean, None);
        assert_eq!(agg.final_mean, None);
    }

    #[test]
    fn trace_helpers() {
        let t = Trace::dense(vec![0.0, -3.0, -12.0, -5.0, -20.0]);
        assert_eq!(t.first_at_or_below(-10.0, 0), Some(2));
        assert_eq!(t.first_at_or_below(-10.0, 3), Some(4));
        assert_eq!(t.first_at_or_below(-30.0, 0), None);
        let d = t.decimate(2);
        assert_eq!(d.index, vec![0, 2, 4]);
        assert_eq!(d.value, vec![0.0, -12.0, -20.0]);
    }
}
