//! Telemetry ingestion and preprocessing.
//!
//! An [`AssetFrame`] holds one asset's aligned sensor matrix (column-major,
//! `NaN` marks a missing cell), its covariate columns, and per-sensor
//! metadata. The preprocessing steps are pure functions from frame to frame:
//! median resampling, covariate discretization, interpolation plus
//! train-fitted scaling, and sliding-window extraction for the forecaster.

use std::collections::{BTreeMap, HashSet};
use std::io::Read;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::stats;

/// Which tail of the error distribution counts as anomalous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailMode {
    #[default]
    TwoSided,
    Upper,
    Lower,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorMeta {
    pub name: String,
    pub system: String,
    pub summary: String,
    #[serde(default)]
    pub tail_mode: TailMode,
    #[serde(default)]
    pub weight: Option<f64>,
}

impl SensorMeta {
    pub fn new(system: &str, name: &str, summary: &str) -> Self {
        SensorMeta {
            name: name.to_string(),
            system: system.to_string(),
            summary: summary.to_string(),
            tail_mode: TailMode::TwoSided,
            weight: None,
        }
    }

    /// CSV column name, `system.sensor.summary`.
    pub fn column(&self) -> String {
        format!("{}.{}.{}", self.system, self.name, self.summary)
    }

    fn parse_column(col: &str) -> Option<Self> {
        let first = col.find('.')?;
        let last = col.rfind('.')?;
        if first == last {
            return None;
        }
        let (system, name, summary) = (&col[..first], &col[first + 1..last], &col[last + 1..]);
        if system.is_empty() || name.is_empty() || summary.is_empty() {
            return None;
        }
        Some(SensorMeta::new(system, name, summary))
    }
}

/// One asset's aligned telemetry.
#[derive(Debug, Clone, PartialEq)]
pub struct AssetFrame {
    /// Epoch seconds, strictly increasing.
    pub timestamps: Vec<i64>,
    /// `d` sensor columns of length `T`; `NaN` marks a missing cell.
    pub sensors: Vec<Vec<f64>>,
    /// `m` covariate columns of length `T`; category codes once discretized.
    pub covariates: Vec<Vec<f64>>,
    pub sensor_meta: Vec<SensorMeta>,
    pub covariate_names: Vec<String>,
    /// Number of categories per covariate; `None` for a continuous column
    /// that still needs a discretization rule.
    pub covariate_levels: Vec<Option<usize>>,
}

impl AssetFrame {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensors.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.len()
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        if self.sensors.len() != self.sensor_meta.len() {
            return Err(Error::Schema(format!(
                "{} sensor columns but {} metadata entries",
                self.sensors.len(),
                self.sensor_meta.len()
            )));
        }
        if self.covariates.len() != self.covariate_names.len()
            || self.covariates.len() != self.covariate_levels.len()
        {
            return Err(Error::Schema("covariate columns and names differ in count".into()));
        }
        if self.sensors.iter().chain(&self.covariates).any(|c| c.len() != t) {
            return Err(Error::Schema("column length differs from timestamp count".into()));
        }
        if let Some(w) = self.timestamps.windows(2).find(|w| w[1] <= w[0]) {
            return Err(Error::Schema(format!(
                "timestamps not strictly increasing at {}",
                w[1]
            )));
        }
        let mut seen = HashSet::new();
        for m in &self.sensor_meta {
            if !seen.insert((&m.system, &m.name, &m.summary)) {
                return Err(Error::Schema(format!("duplicate sensor `{}`", m.column())));
            }
            if let Some(w) = m.weight {
                if !w.is_finite() || w < 0.0 {
                    return Err(Error::Schema(format!(
                        "sensor `{}` has invalid weight {w}",
                        m.column()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Copy of the rows in `range`.
    pub fn slice(&self, range: Range<usize>) -> AssetFrame {
        AssetFrame {
            timestamps: self.timestamps[range.clone()].to_vec(),
            sensors: self.sensors.iter().map(|c| c[range.clone()].to_vec()).collect(),
            covariates: self.covariates.iter().map(|c| c[range.clone()].to_vec()).collect(),
            sensor_meta: self.sensor_meta.clone(),
            covariate_names: self.covariate_names.clone(),
            covariate_levels: self.covariate_levels.clone(),
        }
    }

    /// `mask[k][t]` is true where sensor `k` had no reading at step `t`.
    pub fn missing_mask(&self) -> Vec<Vec<bool>> {
        self.sensors
            .iter()
            .map(|c| c.iter().map(|v| v.is_nan()).collect())
            .collect()
    }

    pub fn sensor_index(&self, column: &str) -> Option<usize> {
        self.sensor_meta.iter().position(|m| m.column() == column)
    }

    pub fn covariate_index(&self, name: &str) -> Option<usize> {
        self.covariate_names.iter().position(|n| n == name)
    }

    /// Width of one forecaster input row: sensors plus one-hot covariates.
    pub fn input_width(&self) -> Result<usize> {
        let mut width = self.n_sensors();
        for (name, levels) in self.covariate_names.iter().zip(&self.covariate_levels) {
            width += levels.ok_or_else(|| {
                Error::Schema(format!(
                    "covariate `{name}` is continuous; add a discretization rule"
                ))
            })?;
        }
        Ok(width)
    }

    /// Step between consecutive timestamps (smallest positive gap).
    pub fn native_step(&self) -> Option<i64> {
        self.timestamps.windows(2).map(|w| w[1] - w[0]).min()
    }
}

/// Training prefix `[0, train_end)`; the remainder is the test range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
}

impl SplitSpec {
    pub fn new(train_end: usize, len: usize) -> Result<Self> {
        if train_end == 0 || train_end >= len {
            return Err(Error::arg(format!(
                "train_end {train_end} must lie in (0, {len})"
            )));
        }
        Ok(SplitSpec { train_end })
    }

    pub fn train(&self) -> Range<usize> {
        0..self.train_end
    }
}

/// Parses a timestamp cell: epoch seconds (integer or decimal) or ISO-8601.
/// Zone-less ISO values are taken as UTC.
pub fn parse_timestamp(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Ok(v) = s.parse::<i64>() {
        return Some(v);
    }
    if let Ok(v) = s.parse::<f64>() {
        return v.is_finite().then(|| v.round() as i64);
    }
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(s) {
        return Some(dt.timestamp());
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"] {
        if let Ok(dt) = chrono::NaiveDateTime::parse_from_str(s, fmt) {
            return Some(dt.and_utc().timestamp());
        }
    }
    chrono::NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .ok()
        .and_then(|d| d.and_hms_opt(0, 0, 0))
        .map(|dt| dt.and_utc().timestamp())
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<AssetFrame> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    })?;
    read_csv(file)
}

/// Reads the telemetry CSV layout: a `timestamp` column, sensor columns named
/// `system.sensor.summary`, and covariate columns prefixed `cov.`.
pub fn read_csv<R: Read>(reader: R) -> Result<AssetFrame> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("timestamp") {
        return Err(Error::Schema("first column must be named `timestamp`".into()));
    }
    let mut seen = HashSet::new();
    for h in headers.iter() {
        if !seen.insert(h) {
            return Err(Error::Schema(format!("duplicate column `{h}`")));
        }
    }

    enum Col {
        Sensor(usize),
        Covariate(usize),
    }
    let mut sensor_meta = Vec::new();
    let mut covariate_names = Vec::new();
    let mut layout = Vec::new();
    for h in headers.iter().skip(1) {
        if let Some(name) = h.strip_prefix("cov.") {
            if name.is_empty() {
                return Err(Error::Schema("covariate column `cov.` has no name".into()));
            }
            layout.push(Col::Covariate(covariate_names.len()));
            covariate_names.push(name.to_string());
        } else {
            let meta = SensorMeta::parse_column(h).ok_or_else(|| {
                Error::Schema(format!("column `{h}` is not `system.sensor.summary`"))
            })?;
            layout.push(Col::Sensor(sensor_meta.len()));
            sensor_meta.push(meta);
        }
    }

    let mut rows: Vec<(i64, Vec<f64>, Vec<f64>)> = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        // Line numbers are 1-based and the header occupies line 1.
        let line = i + 2;
        let record = record?;
        let ts_cell = record.get(0).unwrap_or("");
        let ts = parse_timestamp(ts_cell).ok_or_else(|| Error::Parse {
            row: line,
            message: format!("malformed timestamp `{ts_cell}`"),
        })?;
        let mut s = vec![f64::NAN; sensor_meta.len()];
        let mut c = vec![f64::NAN; covariate_names.len()];
        for (j, col) in layout.iter().enumerate() {
            let cell = record.get(j + 1).unwrap_or("");
            let value = if cell.is_empty() {
                f64::NAN
            } else {
                cell.parse::<f64>().map_err(|_| Error::Parse {
                    row: line,
                    message: format!("non-numeric value `{cell}` in column `{}`", &headers[j + 1]),
                })?
            };
            match *col {
                Col::Sensor(k) => s[k] = value,
                Col::Covariate(k) => c[k] = value,
            }
        }
        rows.push((ts, s, c));
    }
    rows.sort_by_key(|r| r.0);
    if let Some(w) = rows.windows(2).find(|w| w[0].0 == w[1].0) {
        return Err(Error::Schema(format!("duplicate timestamp {}", w[0].0)));
    }

    let d = sensor_meta.len();
    let m = covariate_names.len();
    let mut frame = AssetFrame {
        timestamps: rows.iter().map(|r| r.0).collect(),
        sensors: (0..d).map(|k| rows.iter().map(|r| r.1[k]).collect()).collect(),
        covariates: (0..m).map(|k| rows.iter().map(|r| r.2[k]).collect()).collect(),
        sensor_meta,
        covariate_names,
        covariate_levels: vec![None; m],
    };
    frame.covariate_levels = frame.covariates.iter().map(|c| infer_levels(c)).collect();
    frame.validate()?;
    Ok(frame)
}

/// Category count for a column of small non-negative integer codes.
fn infer_levels(col: &[f64]) -> Option<usize> {
    const MAX_LEVELS: f64 = 64.0;
    let mut max = -1.0f64;
    for &v in col.iter().filter(|v| !v.is_nan()) {
        if v < 0.0 || v.fract() != 0.0 || v >= MAX_LEVELS {
            return None;
        }
        max = max.max(v);
    }
    (max >= 0.0).then(|| max as usize + 1)
}

/// Writes a frame back out in the layout [`read_csv`] accepts.
pub fn write_csv<W: std::io::Write>(frame: &AssetFrame, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(frame.sensor_meta.iter().map(|m| m.column()));
    header.extend(frame.covariate_names.iter().map(|n| format!("cov.{n}")));
    w.write_record(&header)?;
    for t in 0..frame.len() {
        let mut rec = vec![frame.timestamps[t].to_string()];
        for col in frame.sensors.iter().chain(&frame.covariates) {
            let v = col[t];
            rec.push(if v.is_nan() { String::new() } else { format!("{v}") });
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Aggregates rows into `[t, t + step)` buckets aligned to multiples of
/// `step`: sensors take the per-column median, covariates the most frequent
/// value (smallest on ties). Buckets without data are missing.
pub fn resample_median(frame: &AssetFrame, step: i64) -> Result<AssetFrame> {
    if step <= 0 {
        return Err(Error::arg(format!("resample step must be positive, got {step}")));
    }
    if let Some(native) = frame.native_step() {
        if step < native {
            return Err(Error::arg(format!(
                "resample step {step}s is finer than the native step {native}s"
            )));
        }
    }
    if frame.is_empty() {
        return Ok(frame.clone());
    }
    let bucket = |ts: i64| ts.div_euclid(step) * step;
    let first = bucket(frame.timestamps[0]);
    let last = bucket(*frame.timestamps.last().unwrap());
    let n_out = ((last - first) / step + 1) as usize;

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_out];
    for (i, &ts) in frame.timestamps.iter().enumerate() {
        members[((bucket(ts) - first) / step) as usize].push(i);
    }

    let sensors = frame
        .sensors
        .iter()
        .map(|col| {
            members
                .iter()
                .map(|idx| {
                    let vals: Vec<f64> =
                        idx.iter().map(|&i| col[i]).filter(|v| !v.is_nan()).collect();
                    stats::median(&vals).unwrap_or(f64::NAN)
                })
                .collect()
        })
        .collect();
    let covariates = frame
        .covariates
        .iter()
        .map(|col| {
            members
                .iter()
                .map(|idx| mode(idx.iter().map(|&i| col[i]).filter(|v| !v.is_nan())))
                .collect()
        })
        .collect();

    Ok(AssetFrame {
        timestamps: (0..n_out).map(|i| first + i as i64 * step).collect(),
        sensors,
        covariates,
        sensor_meta: frame.sensor_meta.clone(),
        covariate_names: frame.covariate_names.clone(),
        covariate_levels: frame.covariate_levels.clone(),
    })
}

fn mode(values: impl Iterator<Item = f64>) -> f64 {
    let mut counts: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
    for v in values {
        counts.entry(ordered_key(v)).or_insert((v, 0)).1 += 1;
    }
    // Ascending iteration plus a strict `>` keeps the smallest value on ties.
    counts
        .values()
        .fold(None::<(f64, usize)>, |best, &(v, n)| match best {
            Some((_, bn)) if bn >= n => best,
            _ => Some((v, n)),
        })
        .map_or(f64::NAN, |(v, _)| v)
}

/// Order-preserving bit pattern of a non-NaN float.
fn ordered_key(v: f64) -> u64 {
    let bits = v.to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | (1 << 63)
    }
}

/// Per-sensor affine map sending the training minimum to −1 and the
/// training maximum to +1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaling {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Scaling {
    pub fn fit(frame: &AssetFrame, split: SplitSpec) -> Result<Self> {
        let mut min = Vec::with_capacity(frame.n_sensors());
        let mut max = Vec::with_capacity(frame.n_sensors());
        for (col, meta) in frame.sensors.iter().zip(&frame.sensor_meta) {
            let (lo, hi) = col[split.train()]
                .iter()
                .filter(|v| !v.is_nan())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                    (lo.min(v), hi.max(v))
                });
            if !(hi > lo) {
                return Err(Error::DegenerateScale {
                    column: meta.column(),
                });
            }
            min.push(lo);
            max.push(hi);
        }
        Ok(Scaling { min, max })
    }

    pub fn scale(&self, k: usize, x: f64) -> f64 {
        2.0 * (x - self.min[k]) / (self.max[k] - self.min[k]) - 1.0
    }

    pub fn unscale(&self, k: usize, y: f64) -> f64 {
        (y + 1.0) * 0.5 * (self.max[k] - self.min[k]) + self.min[k]
    }

    pub fn apply(&self, frame: &AssetFrame) -> AssetFrame {
        let mut out = frame.clone();
        for (k, col) in out.sensors.iter_mut().enumerate() {
            for v in col.iter_mut() {
                *v = self.scale(k, *v);
            }
        }
        out
    }
}

/// Fills interior gaps of each sensor linearly and holds edge gaps at the
/// nearest observed value. Covariate gaps take the nearest earlier code
/// (the nearest later one at the leading edge). Columns with no
/// observations at all are left untouched.
pub fn interpolate(frame: &AssetFrame) -> AssetFrame {
    let mut out = frame.clone();
    for col in &mut out.sensors {
        fill_linear(col);
    }
    for col in &mut out.covariates {
        fill_hold(col);
    }
    out
}

fn fill_linear(col: &mut [f64]) {
    let known: Vec<usize> = (0..col.len()).filter(|&i| !col[i].is_nan()).collect();
    let (Some(&first), Some(&last)) = (known.first(), known.last()) else {
        return;
    };
    for i in 0..first {
        col[i] = col[first];
    }
    for i in last + 1..col.len() {
        col[i] = col[last];
    }
    for pair in known.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (col[a], col[b]);
        for i in a + 1..b {
            let frac = (i - a) as f64 / (b - a) as f64;
            col[i] = va + (vb - va) * frac;
        }
    }
}

fn fill_hold(col: &mut [f64]) {
    let Some(first) = col.iter().position(|v| !v.is_nan()) else {
        return;
    };
    let lead = col[first];
    let mut prev = lead;
    for v in col.iter_mut() {
        if v.is_nan() {
            *v = prev;
        } else {
            prev = *v;
        }
    }
    for v in col[..first].iter_mut() {
        *v = lead;
    }
}

/// Interpolates missing values and applies train-fitted scaling.
pub fn interpolate_and_scale(frame: &AssetFrame, split: SplitSpec) -> Result<(AssetFrame, Scaling)> {
    let filled = interpolate(frame);
    let scaling = Scaling::fit(&filled, split)?;
    Ok((scaling.apply(&filled), scaling))
}

/// How to turn a continuous covariate into category codes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CovariateRule {
    /// Low / medium / high by training-set terciles.
    Quantile { column: String },
    /// 1 where the value exceeds `cut`, else 0.
    Threshold { column: String, cut: f64 },
}

impl CovariateRule {
    pub fn column(&self) -> &str {
        match self {
            CovariateRule::Quantile { column } | CovariateRule::Threshold { column, .. } => column,
        }
    }
}

/// A rule with its training-dependent boundaries resolved, so it can be
/// re-applied verbatim to new data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ResolvedRule {
    Bins { column: String, boundaries: [f64; 2] },
    Threshold { column: String, cut: f64 },
}

impl ResolvedRule {
    pub fn column(&self) -> &str {
        match self {
            ResolvedRule::Bins { column, .. } | ResolvedRule::Threshold { column, .. } => column,
        }
    }

    fn levels(&self) -> usize {
        match self {
            ResolvedRule::Bins { .. } => 3,
            ResolvedRule::Threshold { .. } => 2,
        }
    }

    fn code(&self, v: f64) -> f64 {
        if v.is_nan() {
            return f64::NAN;
        }
        match *self {
            ResolvedRule::Bins { boundaries: [b1, b2], .. } => {
                if v <= b1 {
                    0.0
                } else if v <= b2 {
                    1.0
                } else {
                    2.0
                }
            }
            ResolvedRule::Threshold { cut, .. } => {
                if v > cut {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Resolves rules against the training range, then codes every row.
pub fn discretize_covariates(
    frame: &AssetFrame,
    split: SplitSpec,
    rules: &[CovariateRule],
) -> Result<(AssetFrame, Vec<ResolvedRule>)> {
    let mut resolved = Vec::with_capacity(rules.len());
    for rule in rules {
        let idx = frame.covariate_index(rule.column()).ok_or_else(|| {
            Error::Schema(format!("rule references missing covariate `{}`", rule.column()))
        })?;
        resolved.push(match rule {
            CovariateRule::Threshold { column, cut } => ResolvedRule::Threshold {
                column: column.clone(),
                cut: *cut,
            },
            CovariateRule::Quantile { column } => {
                let mut train: Vec<f64> = frame.covariates[idx][split.train()]
                    .iter()
                    .copied()
                    .filter(|v| !v.is_nan())
                    .collect();
                train.sort_by(|a, b| a.total_cmp(b));
                if train.is_empty() || train[0] == train[train.len() - 1] {
                    return Err(Error::DegenerateData(format!(
                        "covariate `{column}` has no spread in the training range"
                    )));
                }
                ResolvedRule::Bins {
                    column: column.clone(),
                    boundaries: [
                        stats::quantile_sorted(&train, 1.0 / 3.0),
                        stats::quantile_sorted(&train, 2.0 / 3.0),
                    ],
                }
            }
        });
    }
    let out = apply_rules(frame, &resolved)?;
    Ok((out, resolved))
}

/// Applies previously resolved rules.
pub fn apply_rules(frame: &AssetFrame, rules: &[ResolvedRule]) -> Result<AssetFrame> {
    let mut out = frame.clone();
    for rule in rules {
        let idx = out.covariate_index(rule.column()).ok_or_else(|| {
            Error::Schema(format!("rule references missing covariate `{}`", rule.column()))
        })?;
        for v in out.covariates[idx].iter_mut() {
            *v = rule.code(*v);
        }
        out.covariate_levels[idx] = Some(rule.levels());
    }
    Ok(out)
}

/// Sliding-window view of a frame: each target row is paired with the `w`
/// rows immediately before it.
///
/// Rows are stored once in a flat buffer; [`WindowedDataset::input`] slices
/// the `w × width` block for a given pair.
#[derive(Debug, Clone)]
pub struct WindowedDataset<T> {
    pub window: usize,
    /// Input row width: sensors plus one-hot covariates.
    pub width: usize,
    /// Number of sensors (target width).
    pub n_targets: usize,
    rows: Vec<T>,
    /// Frame index of each target.
    pub target_indices: Vec<usize>,
}

impl<T: Scalar> WindowedDataset<T> {
    pub fn len(&self) -> usize {
        self.target_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_indices.is_empty()
    }

    /// The `w × width` input block for pair `i`, row-major.
    pub fn input(&self, i: usize) -> &[T] {
        &self.rows[i * self.width..(i + self.window) * self.width]
    }

    /// Sensor values of target `i`.
    pub fn target(&self, i: usize) -> &[T] {
        let start = (i + self.window) * self.width;
        &self.rows[start..start + self.n_targets]
    }
}

/// Encodes one frame row: sensor values followed by one-hot covariates.
/// Unknown or missing codes encode as all zeros.
pub(crate) fn encode_row<T: Scalar>(frame: &AssetFrame, t: usize, out: &mut Vec<T>) {
    for col in &frame.sensors {
        out.push(T::of(col[t]));
    }
    for (col, levels) in frame.covariates.iter().zip(&frame.covariate_levels) {
        let levels = levels.unwrap_or(0);
        let code = col[t];
        for c in 0..levels {
            out.push(if code == c as f64 { T::one() } else { T::zero() });
        }
    }
}

/// Builds the (window, target) pairs for `range`.
pub fn make_windows<T: Scalar>(
    frame: &AssetFrame,
    w: usize,
    range: Range<usize>,
) -> Result<WindowedDataset<T>> {
    if w == 0 {
        return Err(Error::arg("window size must be positive"));
    }
    if range.end > frame.len() || range.start > range.end {
        return Err(Error::arg(format!(
            "window range {range:?} outside frame of length {}",
            frame.len()
        )));
    }
    if range.len() <= w {
        return Err(Error::arg(format!(
            "range length {} must exceed window size {w}",
            range.len()
        )));
    }
    let width = frame.input_width()?;
    for (col, meta) in frame.sensors.iter().zip(&frame.sensor_meta) {
        if col[range.clone()].iter().any(|v| v.is_nan()) {
            return Err(Error::arg(format!(
                "sensor `{}` has missing values; interpolate first",
                meta.column()
            )));
        }
    }
    let mut rows = Vec::with_capacity(range.len() * width);
    for t in range.clone() {
        encode_row(frame, t, &mut rows);
    }
    Ok(WindowedDataset {
        window: w,
        width,
        n_targets: frame.n_sensors(),
        rows,
        target_indices: (range.start + w..range.end).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn frame_from(cols: Vec<Vec<f64>>) -> AssetFrame {
        let t = cols.first().map_or(0, |c| c.len());
        AssetFrame {
            timestamps: (0..t as i64).map(|i| i * 3600).collect(),
            sensor_meta: (0..cols.len())
                .map(|k| SensorMeta::new("sys", &format!("s{k}"), "value"))
                .collect(),
            sensors: cols,
            covariates: vec![],
            covariate_names: vec![],
            covariate_levels: vec![],
        }
    }

    #[test]
    fn loads_three_row_file() {
        let csv = "timestamp,monitron.m1.temp,cov.throughput\n\
                   0,1.5,10\n3600,2.5,12\n7200,3.5,11\n";
        let f = read_csv(csv.as_bytes()).unwrap();
        assert_eq!((f.n_sensors(), f.n_covariates(), f.len()), (1, 1, 3));
        assert_eq!(f.sensor_meta[0], SensorMeta::new("monitron", "m1", "temp"));
        assert_eq!(f.covariate_names, vec!["throughput"]);
    }

    #[test]
    fn iso_timestamps_and_sorting() {
        let csv = "timestamp,a.b.c\n2024-01-01T01:00:00Z,2\n2024-01-01 00:00:00,1\n";
        let f = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(f.timestamps, vec![1_704_067_200, 1_704_070_800]);
        assert_eq!(f.sensors[0], vec![1.0, 2.0]);
    }

    #[test]
    fn duplicate_timestamp_is_rejected() {
        let csv = "timestamp,a.b.c\n100,1\n100,2\n";
        let err = read_csv(csv.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("100"), "{err}");
    }

    #[test]
    fn empty_cell_is_missing() {
        let csv = "timestamp,a.b.c,a.d.c\n0,,1\n1,2,3\n";
        let f = read_csv(csv.as_bytes()).unwrap();
        assert!(f.sensors[0][0].is_nan());
        assert_eq!(f.missing_mask()[0], vec![true, false]);
    }

    #[test]
    fn malformed_inputs_report_rows() {
        let err = read_csv("timestamp,a.b.c\n0,1\nyesterday,2\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 3, .. }), "{err}");
        let err = read_csv("timestamp,a.b.c\n0,abc\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Parse { row: 2, .. }), "{err}");
        let err = read_csv("timestamp,a.b.c,a.b.c\n0,1,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
        let err = read_csv("timestamp,ab\n0,1\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)), "{err}");
    }

    #[test]
    fn csv_write_read_round_trip() {
        let csv = "timestamp,a.b.c,cov.mode\n0,1.25,0\n60,,1\n";
        let f = read_csv(csv.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_csv(&f, &mut buf).unwrap();
        let g = read_csv(buf.as_slice()).unwrap();
        assert_eq!(g.timestamps, f.timestamps);
        assert_eq!(g.covariate_levels, vec![Some(2)]);
        assert!(g.sensors[0][1].is_nan());
    }

    #[test]
    fn median_resampling() {
        let mut f = frame_from(vec![vec![1.0, 9.0, 5.0, 2.0, 4.0]]);
        f.timestamps = vec![0, 600, 1200, 7200, 7800];
        let r = resample_median(&f, 3600).unwrap();
        assert_eq!(r.timestamps, vec![0, 3600, 7200]);
        assert_eq!(r.sensors[0][0], 5.0);
        assert!(r.sensors[0][1].is_nan());
        assert_eq!(r.sensors[0][2], 3.0);
    }

    #[test]
    fn resample_takes_covariate_mode() {
        let mut f = frame_from(vec![vec![1.0, 2.0, 3.0]]);
        f.timestamps = vec![0, 10, 20];
        f.covariates = vec![vec![2.0, 1.0, 2.0]];
        f.covariate_names = vec!["mode".into()];
        f.covariate_levels = vec![Some(3)];
        let r = resample_median(&f, 60).unwrap();
        assert_eq!(r.covariates[0], vec![2.0]);
    }

    #[test]
    fn resample_rejects_finer_step() {
        let f = frame_from(vec![vec![1.0, 2.0]]);
        assert!(matches!(resample_median(&f, 60), Err(Error::Argument(_))));
    }

    #[test]
    fn resample_is_idempotent() {
        let mut f = frame_from(vec![vec![1.0, 7.0, f64::NAN, 2.0, 8.0, 3.0]]);
        f.timestamps = vec![0, 100, 200, 4000, 4100, 12000];
        let once = resample_median(&f, 3600).unwrap();
        let twice = resample_median(&once, 3600).unwrap();
        assert_eq!(once.timestamps, twice.timestamps);
        for (a, b) in once.sensors[0].iter().zip(&twice.sensors[0]) {
            assert!(a == b || (a.is_nan() && b.is_nan()));
        }
    }

    #[test]
    fn interpolation_fills_runs_and_edges() {
        let f = frame_from(vec![vec![f64::NAN, 4.0, f64::NAN, f64::NAN, 10.0, f64::NAN]]);
        let g = interpolate(&f);
        assert_eq!(g.sensors[0], vec![4.0, 4.0, 6.0, 8.0, 10.0, 10.0]);
    }

    #[test]
    fn scaling_endpoints_and_extrapolation() {
        let f = frame_from(vec![vec![10.0, 30.0, 20.0, 40.0]]);
        let split = SplitSpec::new(3, 4).unwrap();
        let (g, s) = interpolate_and_scale(&f, split).unwrap();
        assert_eq!(g.sensors[0], vec![-1.0, 1.0, 0.0, 2.0]);
        assert_eq!(s.unscale(0, 2.0), 40.0);
    }

    #[test]
    fn constant_train_column_is_degenerate() {
        let mut f = frame_from(vec![vec![1.0, 2.0, 3.0], vec![5.0, 5.0, 6.0]]);
        f.sensor_meta[1] = SensorMeta::new("amp", "m1", "rms");
        let err = interpolate_and_scale(&f, SplitSpec::new(2, 3).unwrap()).unwrap_err();
        assert!(err.to_string().contains("amp.m1.rms"), "{err}");
    }

    fn with_covariate(values: Vec<f64>) -> AssetFrame {
        let mut f = frame_from(vec![(0..values.len()).map(|i| i as f64).collect()]);
        f.covariates = vec![values];
        f.covariate_names = vec!["throughput".into()];
        f.covariate_levels = vec![None];
        f
    }

    #[test]
    fn availability_threshold_rule() {
        let mut f = with_covariate(vec![99.1, 97.0, 98.0]);
        f.covariate_names = vec!["availability".into()];
        let rules = [CovariateRule::Threshold {
            column: "availability".into(),
            cut: 98.0,
        }];
        let (g, _) = discretize_covariates(&f, SplitSpec::new(2, 3).unwrap(), &rules).unwrap();
        assert_eq!(g.covariates[0], vec![1.0, 0.0, 0.0]);
        assert_eq!(g.covariate_levels, vec![Some(2)]);
    }

    #[test]
    fn tercile_bins_send_boundary_to_lower_bin() {
        // Train values 0..=6: terciles at 2 and 4.
        let mut vals: Vec<f64> = (0..7).map(f64::from).collect();
        vals.extend([2.0, 4.5, 9.0]);
        let f = with_covariate(vals);
        let rules = [CovariateRule::Quantile {
            column: "throughput".into(),
        }];
        let (g, resolved) =
            discretize_covariates(&f, SplitSpec::new(7, 10).unwrap(), &rules).unwrap();
        assert_eq!(
            resolved[0],
            ResolvedRule::Bins {
                column: "throughput".into(),
                boundaries: [2.0, 4.0]
            }
        );
        assert_eq!(&g.covariates[0][7..], &[0.0, 2.0, 2.0]);
    }

    #[test]
    fn rule_on_missing_column_is_schema_error() {
        let f = with_covariate(vec![1.0, 2.0]);
        let rules = [CovariateRule::Quantile {
            column: "nope".into(),
        }];
        let err = discretize_covariates(&f, SplitSpec::new(1, 2).unwrap(), &rules).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn window_counts_and_indices() {
        let f = frame_from(vec![(0..10).map(f64::from).collect()]);
        let ds = make_windows::<f64>(&f, 3, 0..10).unwrap();
        assert_eq!(ds.len(), 7);
        assert_eq!(ds.target_indices, (3..10).collect::<Vec<_>>());
        assert_eq!(ds.input(0), &[0.0, 1.0, 2.0]);
        assert_eq!(ds.target(0), &[3.0]);
        assert!(make_windows::<f64>(&f, 10, 0..10).is_err());
    }

    #[test]
    fn one_hot_width() {
        let mut f = frame_from(vec![vec![0.0; 5], vec![1.0; 5]]);
        f.covariates = vec![vec![0.0, 1.0, 2.0, 1.0, 0.0]];
        f.covariate_names = vec!["tp".into()];
        f.covariate_levels = vec![Some(3)];
        let ds = make_windows::<f64>(&f, 2, 0..5).unwrap();
        assert_eq!(ds.width, 5);
        assert_eq!(ds.input(0), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    }

    proptest! {
        #[test]
        fn window_pair_count(len in 2usize..200, w_frac in 0.0f64..1.0) {
            let w = 1 + ((len - 2) as f64 * w_frac) as usize;
            let f = frame_from(vec![vec![0.5; len]]);
            let ds = make_windows::<f64>(&f, w, 0..len).unwrap();
            prop_assert_eq!(ds.len(), len - w);
            for i in 0..ds.len() {
                prop_assert_eq!(ds.target_indices[i], w + i);
            }
        }

        #[test]
        fn scale_round_trip(lo in -1e6f64..1e6, span in 1e-3f64..1e6, x in 0.0f64..1.0) {
            let s = Scaling { min: vec![lo], max: vec![lo + span] };
            let v = lo + span * x;
            prop_assert!((s.unscale(0, s.scale(0, v)) - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }

        #[test]
        fn bins_ignore_test_row_order(seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut vals: Vec<f64> = (0..30).map(|i| ((i * 37) % 11) as f64).collect();
            let f1 = with_covariate(vals.clone());
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            vals[20..].shuffle(&mut rng);
            let f2 = with_covariate(vals);
            let rules = [CovariateRule::Quantile { column: "throughput".into() }];
            let split = SplitSpec::new(20, 30).unwrap();
            let (_, r1) = discretize_covariates(&f1, split, &rules).unwrap();
            let (_, r2) = discretize_covariates(&f2, split, &rules).unwrap();
            prop_assert_eq!(r1, r2);
        }
    }
}
