//! Per-sensor error signals between observed and predicted series.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::Predictions;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorMode {
    #[default]
    Point,
    Area,
}

/// How one sensor's error signal is computed. `smoothing` is the EWMA
/// factor, 0 turns smoothing off. Keys left out of a config take the
/// defaults of the chosen mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "RawSettings")]
pub struct ErrorSettings {
    pub mode: ErrorMode,
    pub smoothing: f64,
    pub half_width: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSettings {
    mode: Option<ErrorMode>,
    smoothing: Option<f64>,
    half_width: Option<usize>,
}

impl From<RawSettings> for ErrorSettings {
    fn from(raw: RawSettings) -> Self {
        let base = match raw.mode.unwrap_or_default() {
            ErrorMode::Point => ErrorSettings::point(),
            ErrorMode::Area => ErrorSettings::area(),
        };
        ErrorSettings {
            mode: base.mode,
            smoothing: raw.smoothing.unwrap_or(base.smoothing),
            half_width: raw.half_width.unwrap_or(base.half_width),
        }
    }
}

impl Default for ErrorSettings {
    fn default() -> Self {
        ErrorSettings::point()
    }
}

impl ErrorSettings {
    pub fn point() -> Self {
        ErrorSettings {
            mode: ErrorMode::Point,
            smoothing: 0.1,
            half_width: 2,
        }
    }

    pub fn area() -> Self {
        ErrorSettings {
            mode: ErrorMode::Area,
            smoothing: 0.0,
            half_width: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.smoothing) {
            return Err(Error::arg(format!(
                "smoothing factor {} outside [0, 1]",
                self.smoothing
            )));
        }
        if self.mode == ErrorMode::Area && self.half_width == 0 {
            return Err(Error::arg("area error needs a half width of at least 1"));
        }
        Ok(())
    }
}

/// Error signals aligned to prediction indices: `values[k][i]` belongs to
/// sensor `k` at frame row `indices[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorSeries<T> {
    pub indices: Vec<usize>,
    pub values: Vec<Vec<T>>,
    pub settings: Vec<ErrorSettings>,
}

fn same_len<T>(x: &[T], y: &[T]) -> Result<()> {
    if x.len() != y.len() {
        return Err(Error::arg(format!(
            "observed length {} differs from predicted length {}",
            x.len(),
            y.len()
        )));
    }
    Ok(())
}

pub fn point_error<T: Scalar>(x: &[T], y: &[T]) -> Result<Vec<T>> {
    same_len(x, y)?;
    Ok(x.iter().zip(y).map(|(&a, &b)| (a - b).abs()).collect())
}

/// Signed mean residual over `[t − l, t + l]`, truncated at the edges.
pub fn area_error<T: Scalar>(x: &[T], y: &[T], l: usize) -> Result<Vec<T>> {
    same_len(x, y)?;
    if l == 0 {
        return Err(Error::arg("area half width must be at least 1"));
    }
    let r: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a - b).collect();
    let n = r.len();
    Ok((0..n)
        .map(|t| {
            let lo = t.saturating_sub(l);
            let hi = (t + l).min(n - 1);
            let s: T = r[lo..=hi].iter().copied().sum();
            s / T::of_usize(hi - lo + 1)
        })
        .collect())
}

pub fn ewma_smooth<T: Scalar>(e: &[T], beta: T) -> Result<Vec<T>> {
    if e.is_empty() {
        return Err(Error::arg("cannot smooth an empty sequence"));
    }
    if !(beta > T::zero() && beta <= T::one()) {
        return Err(Error::arg(format!("smoothing factor {beta} outside (0, 1]")));
    }
    let mut out = Vec::with_capacity(e.len());
    let mut s = e[0];
    out.push(s);
    for &v in &e[1..] {
        s = beta * v + (T::one() - beta) * s;
        out.push(s);
    }
    Ok(out)
}

/// One sensor's error signal under `settings`.
pub fn sensor_error<T: Scalar>(x: &[T], y: &[T], settings: &ErrorSettings) -> Result<Vec<T>> {
    settings.validate()?;
    let raw = match settings.mode {
        ErrorMode::Point => point_error(x, y)?,
        ErrorMode::Area => area_error(x, y, settings.half_width)?,
    };
    if settings.smoothing > 0.0 && !raw.is_empty() {
        ewma_smooth(&raw, T::of(settings.smoothing))
    } else {
        Ok(raw)
    }
}

/// Error signals for every sensor of a scaled frame against its predictions.
pub fn compute_errors<T: Scalar>(
    observed: &[Vec<f64>],
    predictions: &Predictions<T>,
    settings: &[ErrorSettings],
) -> Result<ErrorSeries<T>> {
    if settings.len() != predictions.values.len() || observed.len() != settings.len() {
        return Err(Error::arg(format!(
            "{} sensors observed, {} predicted, {} error settings",
            observed.len(),
            predictions.values.len(),
            settings.len()
        )));
    }
    let values = observed
        .iter()
        .zip(&predictions.values)
        .zip(settings)
        .map(|((col, pred), s)| {
            let x: Vec<T> = predictions.indices.iter().map(|&t| T::of(col[t])).collect();
            let e = sensor_error(&x, pred, s)?;
            if e.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric("non-finite error value".into()));
            }
            Ok(e)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ErrorSeries {
        indices: predictions.indices.clone(),
        values,
        settings: settings.to_vec(),
    })
}
