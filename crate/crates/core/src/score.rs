//! Asset-level scoring: weighted Fisher combination of sensor p-values,
//! Gamma calibration of the null score distribution, flags and events.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::SensorMeta;
use crate::error::{Error, Result};
use crate::interpret::Contributor;
use crate::scalar::Scalar;
use crate::special::gamma_quantile;
use crate::stats::{mean, variance};

pub const DEFAULT_SIGNIFICANCE: f64 = 0.01;
const MIN_CALIBRATION_SAMPLES: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightMode {
    /// `1 / (#systems · #sensors in system · #summaries of sensor)`.
    #[default]
    Hierarchy,
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    /// Moment-matched Gamma fitted on training scores.
    #[default]
    Gamma,
    /// Gamma implied by independent sensors with uniform null p-values.
    ChiSquare,
}

/// Per-sensor weights. An explicit `weight` in the metadata overrides the
/// computed value.
pub fn default_weights(meta: &[SensorMeta], mode: WeightMode) -> Result<Vec<f64>> {
    if meta.is_empty() {
        return Err(Error::arg("no sensors to weight"));
    }
    let d = meta.len() as f64;
    let mut names: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut summaries: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for m in meta {
        names.entry(&m.system).or_default().insert(&m.name);
        *summaries.entry((&m.system, &m.name)).or_default() += 1;
    }
    let systems = names.len() as f64;
    let weights: Vec<f64> = meta
        .iter()
        .map(|m| {
            m.weight.unwrap_or_else(|| match mode {
                WeightMode::Uniform => 1.0 / d,
                WeightMode::Hierarchy => {
                    let sensors = names[m.system.as_str()].len() as f64;
                    let sums = summaries[&(m.system.as_str(), m.name.as_str())] as f64;
                    1.0 / (systems * sensors * sums)
                }
            })
        })
        .collect();
    check_weights(&weights)?;
    Ok(weights)
}

fn check_weights(weights: &[f64]) -> Result<()> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || !weights.iter().any(|w| *w > 0.0) {
        return Err(Error::arg(
            "sensor weights must be finite, non-negative and not all zero",
        ));
    }
    Ok(())
}

/// Weights rescaled so the sensors available at a step carry the full
/// weight mass. `None` when nothing with positive weight is available.
pub fn effective_weights<T: Scalar>(pvals: &[T], weights: &[T]) -> Option<Vec<T>> {
    let total: T = weights.iter().copied().sum();
    let avail: T = pvals
        .iter()
        .zip(weights)
        .filter(|(p, _)| !p.is_nan())
        .map(|(_, &w)| w)
        .sum();
    if avail <= T::zero() {
        return None;
    }
    let scale = total / avail;
    Some(
        pvals
            .iter()
            .zip(weights)
            .map(|(p, &w)| if p.is_nan() { T::zero() } else { w * scale })
            .collect(),
    )
}

/// Weighted Fisher statistic for one step; NaN p-values mark missing
/// sensors.
pub fn fisher_step<T: Scalar>(pvals: &[T], weights: &[T]) -> Option<T> {
    let eff = effective_weights(pvals, weights)?;
    Some(
        -T::two()
            * pvals
                .iter()
                .zip(&eff)
                .filter(|(p, _)| !p.is_nan())
                .map(|(&p, &w)| w * p.ln())
                .sum::<T>(),
    )
}

/// Scores for a column-major p-value matrix (`pvals[k][t]`).
pub fn fisher_score<T: Scalar>(pvals: &[Vec<T>], weights: &[T]) -> Result<Vec<Option<T>>> {
    if pvals.len() != weights.len() {
        return Err(Error::arg(format!(
            "{} p-value columns for {} weights",
            pvals.len(),
            weights.len()
        )));
    }
    let n = pvals.first().map_or(0, Vec::len);
    if pvals.iter().any(|c| c.len() != n) {
        return Err(Error::arg("p-value columns differ in length"));
    }
    if pvals
        .iter()
        .flatten()
        .any(|&p| !p.is_nan() && !(p > T::zero() && p <= T::one()))
    {
        return Err(Error::arg("p-values must lie in (0, 1]"));
    }
    let mut row = vec![T::zero(); pvals.len()];
    Ok((0..n)
        .map(|t| {
            for (r, c) in row.iter_mut().zip(pvals) {
                *r = c[t];
            }
            fisher_step(&row, weights)
        })
        .collect())
}

/// Moment-matched Gamma `(shape, scale)` with the unbiased variance.
pub fn fit_gamma_moments<T: Scalar>(scores: &[T]) -> Result<(T, T)> {
    if scores.len() < MIN_CALIBRATION_SAMPLES {
        return Err(Error::DegenerateCalibration(format!(
            "{} training scores, need at least {MIN_CALIBRATION_SAMPLES}",
            scores.len()
        )));
    }
    let m = mean(scores);
    let v = variance(scores);
    if !(v > T::zero()) || !(m > T::zero()) {
        return Err(Error::DegenerateCalibration(format!(
            "training scores have mean {m} and variance {v}"
        )));
    }
    Ok((m * m / v, v / m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Calibration<T> {
    pub weights: Vec<T>,
    pub method: CalibrationMethod,
    pub alpha: T,
    pub theta: T,
    pub significance: T,
    pub threshold: T,
    pub train_mean: T,
    pub train_variance: T,
}

fn check_significance<T: Scalar>(significance: T) -> Result<()> {
    if !(significance > T::zero() && significance < T::one()) {
        return Err(Error::arg(format!(
            "significance {significance} outside (0, 1)"
        )));
    }
    Ok(())
}

/// Fits the score null on training scores and places the threshold at
/// the `1 − significance` quantile.
pub fn calibrate<T: Scalar>(weights: &[T], train_scores: &[T], significance: T) -> Result<Calibration<T>> {
    check_significance(significance)?;
    let (alpha, theta) = fit_gamma_moments(train_scores)?;
    let threshold = gamma_quantile(alpha, theta, T::one() - significance)?;
    Ok(Calibration {
        weights: weights.to_vec(),
        method: CalibrationMethod::Gamma,
        alpha,
        theta,
        significance,
        threshold,
        train_mean: mean(train_scores),
        train_variance: variance(train_scores),
    })
}

/// Threshold from the null that assumes independent sensors: each term
/// `−2 λ log p` is `λ · χ²(2)`, and the weighted sum is matched to a Gamma
/// with the same mean and variance. With unit weights this is exactly
/// `χ²(2d)`.
pub fn calibrate_chi_square<T: Scalar>(weights: &[T], train_scores: &[T], significance: T) -> Result<Calibration<T>> {
    check_significance(significance)?;
    let s1: T = weights.iter().copied().sum();
    let s2: T = weights.iter().map(|&w| w * w).sum();
    if !(s1 > T::zero()) {
        return Err(Error::arg("weights sum to zero"));
    }
    let alpha = s1 * s1 / s2;
    let theta = T::two() * s2 / s1;
    let threshold = gamma_quantile(alpha, theta, T::one() - significance)?;
    let (train_mean, train_variance) = if train_scores.len() >= 2 {
        (mean(train_scores), variance(train_scores))
    } else {
        (T::zero(), T::zero())
    };
    Ok(Calibration {
        weights: weights.to_vec(),
        method: CalibrationMethod::ChiSquare,
        alpha,
        theta,
        significance,
        threshold,
        train_mean,
        train_variance,
    })
}

/// `S_t > γ`; missing scores are never flagged.
pub fn flag<T: Scalar>(scores: &[Option<T>], threshold: T) -> Vec<bool> {
    scores
        .iter()
        .map(|s| matches!(s, Some(v) if *v > threshold))
        .collect()
}

/// A flagged run, indices into the score series (end inclusive).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyEvent {
    pub start: usize,
    pub end: usize,
    pub peak_score: f64,
    pub peak_index: usize,
    pub contributors: Vec<Contributor>,
}

/// Maximal runs of flags, merging runs separated by at most `max_gap`
/// unflagged steps.
pub fn extract_events<T: Scalar>(flags: &[bool], scores: &[Option<T>], max_gap: usize) -> Result<Vec<AnomalyEvent>> {
    if flags.len() != scores.len() {
        return Err(Error::arg("flags and scores differ in length"));
    }
    let mut runs: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < flags.len() {
        if !flags[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t + 1 < flags.len() && flags[t + 1] {
            t += 1;
        }
        match runs.last_mut() {
            Some(last) if start - last.1 - 1 <= max_gap => last.1 = t,
            _ => runs.push((start, t)),
        }
        t += 1;
    }
    Ok(runs
        .into_iter()
        .map(|(start, end)| {
            let mut peak_index = start;
            let mut peak = f64::NEG_INFINITY;
            for (i, s) in scores.iter().enumerate().take(end + 1).skip(start) {
                if let Some(v) = s {
                    let v = v.to_f64_lossy();
                    if v > peak {
                        peak = v;
                        peak_index = i;
                    }
                }
            }
            AnomalyEvent {
                start,
                end,
                peak_score: peak,
                peak_index,
                contributors: Vec::new(),
            }
        })
        .collect())
}
