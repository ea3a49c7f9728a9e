//! Interval matching against ground truth and pooled precision/recall.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::parse_timestamp;
use crate::error::{Error, Result};

pub const DAY: i64 = 86_400;
pub const DEFAULT_LEAD_MIN: i64 = DAY;
pub const DEFAULT_LEAD_MAX: i64 = 7 * DAY;

/// Closed interval `[start, end]`, timestamps in epoch seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Interval {
    pub start: i64,
    pub end: i64,
}

impl Interval {
    pub fn new(start: i64, end: i64) -> Result<Self> {
        if start > end {
            return Err(Error::arg(format!("interval start {start} after end {end}")));
        }
        Ok(Interval { start, end })
    }

    pub fn overlaps(&self, other: &Interval) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    #[default]
    Anomaly,
    WorkOrder,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledInterval {
    pub signal: String,
    pub start: i64,
    pub end: i64,
    pub kind: LabelKind,
}

impl LabeledInterval {
    pub fn interval(&self) -> Interval {
        Interval {
            start: self.start,
            end: self.end,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl std::ops::AddAssign for Counts {
    fn add_assign(&mut self, o: Counts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    pub counts: Counts,
    /// Per truth interval: detected or not.
    pub truth_hit: Vec<bool>,
    /// Per detection: matched any truth interval or not.
    pub detection_hit: Vec<bool>,
}

fn tally(truth_hit: Vec<bool>, detection_hit: Vec<bool>) -> Matching {
    let tp = truth_hit.iter().filter(|&&h| h).count();
    Matching {
        counts: Counts {
            tp,
            fn_: truth_hit.len() - tp,
            fp: detection_hit.iter().filter(|&&h| !h).count(),
        },
        truth_hit,
        detection_hit,
    }
}

/// A truth interval counts as detected when any detection overlaps it;
/// detections overlapping no truth are false positives.
pub fn match_detection(detected: &[Interval], truth: &[Interval]) -> Matching {
    let mut truth_hit = vec![false; truth.len()];
    let mut detection_hit = vec![false; detected.len()];
    let mut by_start: Vec<usize> = (0..truth.len()).collect();
    by_start.sort_by_key(|&i| truth[i].start);
    for (di, d) in detected.iter().enumerate() {
        let upto = by_start.partition_point(|&i| truth[i].start <= d.end);
        for &ti in &by_start[..upto] {
            if truth[ti].end >= d.start {
                truth_hit[ti] = true;
                detection_hit[di] = true;
            }
        }
    }
    tally(truth_hit, detection_hit)
}

/// A detection ending at `e` predicts a work order starting at `s` when
/// `s − lead_max ≤ e ≤ s − lead_min`.
pub fn match_predictive(
    detected: &[Interval],
    work_orders: &[Interval],
    lead_min: i64,
    lead_max: i64,
) -> Result<Matching> {
    if lead_min > lead_max {
        return Err(Error::arg(format!(
            "lead_min {lead_min}s exceeds lead_max {lead_max}s"
        )));
    }
    let mut truth_hit = vec![false; work_orders.len()];
    let mut detection_hit = vec![false; detected.len()];
    for (di, d) in detected.iter().enumerate() {
        for (wi, w) in work_orders.iter().enumerate() {
            if w.start - lead_max <= d.end && d.end <= w.start - lead_min {
                truth_hit[wi] = true;
                detection_hit[di] = true;
            }
        }
    }
    Ok(tally(truth_hit, detection_hit))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// `None` when the denominator is zero.
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub f05: Option<f64>,
    pub per_signal: BTreeMap<String, Counts>,
}

fn f_beta(p: Option<f64>, r: Option<f64>, beta: f64) -> Option<f64> {
    let (p, r) = (p?, r?);
    let b2 = beta * beta;
    let denom = b2 * p + r;
    (denom > 0.0).then(|| (1.0 + b2) * p * r / denom)
}

pub fn precision_recall(c: Counts) -> (Option<f64>, Option<f64>) {
    let ratio = |a: usize, b: usize| (a + b > 0).then(|| a as f64 / (a + b) as f64);
    (ratio(c.tp, c.fp), ratio(c.tp, c.fn_))
}

/// Pooled counts over signals, then precision, recall, F1 and F0.5.
pub fn aggregate<'a>(per_signal: impl IntoIterator<Item = (&'a str, Counts)>) -> EvalReport {
    let mut map: BTreeMap<String, Counts> = BTreeMap::new();
    let mut total = Counts::default();
    for (name, c) in per_signal {
        *map.entry(name.to_string()).or_default() += c;
        total += c;
    }
    let (precision, recall) = precision_recall(total);
    EvalReport {
        tp: total.tp,
        fp: total.fp,
        fn_: total.fn_,
        precision,
        recall,
        f1: f_beta(precision, recall, 1.0),
        f05: f_beta(precision, recall, 0.5),
        per_signal: map,
    }
}

impl EvalReport {
    /// Key-value text form, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.6}"));
        let mut s = format!(
            "tp = {}\nfp = {}\nfn = {}\nprecision = {}\nrecall = {}\nf1 = {}\nf0.5 = {}\n",
            self.tp,
            self.fp,
            self.fn_,
            fmt(self.precision),
            fmt(self.recall),
            fmt(self.f1),
            fmt(self.f05)
        );
        for (name, c) in &self.per_signal {
            s.push_str(&format!("signal.{name} = tp {} fp {} fn {}\n", c.tp, c.fp, c.fn_));
        }
        s
    }
}

/// Reads a labels CSV with header `signal,start,end,kind`. Timestamps use
/// the same formats as data files; `kind` defaults to `anomaly`.
pub fn read_labels<R: Read>(reader: R) -> Result<Vec<LabeledInterval>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(sig), Some(st), Some(en)) = (col("signal"), col("start"), col("end")) else {
        return Err(Error::Schema(
            "labels need signal, start and end columns".into(),
        ));
    };
    let kind = col("kind");
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let ts = |j: usize| {
            parse_timestamp(rec.get(j).unwrap_or("")).ok_or_else(|| Error::Parse {
                row,
                message: format!("bad timestamp {:?}", rec.get(j).unwrap_or("")),
            })
        };
        let (start, end) = (ts(st)?, ts(en)?);
        if start > end {
            return Err(Error::Parse {
                row,
                message: format!("start {start} after end {end}"),
            });
        }
        let kind = match kind.and_then(|k| rec.get(k)).unwrap_or("") {
            "" | "anomaly" => LabelKind::Anomaly,
            "work_order" => LabelKind::WorkOrder,
            other => {
                return Err(Error::Parse {
                    row,
                    message: format!("unknown label kind {other:?}"),
                })
            }
        };
        out.push(LabeledInterval {
            signal: rec.get(sig).unwrap_or("").to_string(),
            start,
            end,
            kind,
        });
    }
    Ok(out)
}

pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<LabeledInterval>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| {
        Error::Argument(format!("cannot open labels file {}: {e}", path.display()))
    })?;
    read_labels(f)
}

pub fn write_labels<W: std::io::Write>(labels: &[LabeledInterval], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["signal", "start", "end", "kind"])?;
    for l in labels {
        let kind = match l.kind {
            LabelKind::Anomaly => "anomaly",
            LabelKind::WorkOrder => "work_order",
        };
        w.write_record([l.signal.as_str(), &l.start.to_string(), &l.end.to_string(), kind])?;
    }
    w.flush()?;
    Ok(())
}
