use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use m2ad::artifact::{to_canonical_json, write_atomic, ModelArtifact};
use m2ad::config::{EvalMode, PipelineConfig};
use m2ad::data::{load_csv, write_csv};
use m2ad::eval::{aggregate, load_labels, match_detection, match_predictive, write_labels, Interval, LabelKind};
use m2ad::pipeline::{detect, fit, DetectOptions, EventFile};
use m2ad::synth::{generate, proposition_report, run_ablation, SynthConfig, Variant};
use m2ad::Error;

#[derive(Parser)]
#[command(name = "m2ad", version, about = "Multi-system time-series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Detection,
    Predictive,
}

#[derive(Subcommand)]
enum Command {
    /// Fit forecaster, error mixtures and calibration on the training range.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Pipeline config (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score data with a trained model and write flagged events.
    Detect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Events JSON; the score series goes to `<stem>.scores.csv` beside it.
        #[arg(long)]
        out: PathBuf,
        /// Also report rows inside the training range.
        #[arg(long)]
        all: bool,
    },
    /// Compare detected events with labelled intervals.
    Evaluate {
        /// One events file per asset.
        #[arg(long, required = true, num_args = 1..)]
        events: Vec<PathBuf>,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, value_enum, default_value = "detection")]
        mode: Mode,
        /// Shortest lead before a work order, e.g. `1d` or `36h`.
        #[arg(long, default_value = "1d")]
        lead_min: String,
        #[arg(long, default_value = "7d")]
        lead_max: String,
        /// Text report; a JSON copy goes to `<stem>.json`. Printed when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a synthetic asset and its anomaly labels.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        /// Data CSV; labels go to `<stem>.labels.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the mixture-bias and tail-ratio results numerically.
    VerifyProps {
        /// Text table; a JSON copy goes to `<stem>.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate scoring variants on a labelled data set.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

fn load_config(path: Option<&Path>) -> m2ad::Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::default()),
    }
}

fn load_data(path: &Path) -> m2ad::Result<m2ad::data::AssetFrame> {
    load_csv(path).map_err(|e| match e {
        Error::Io(io) => Error::Argument(format!("cannot read data {}: {io}", path.display())),
        e => e.in_stage("data_model"),
    })
}

fn parse_lead(s: &str) -> m2ad::Result<i64> {
    if let Ok(secs) = s.trim().parse::<i64>() {
        return Ok(secs);
    }
    humantime::parse_duration(s)
        .map(|d: Duration| d.as_secs() as i64)
        .map_err(|e| Error::Argument(format!("cannot parse lead `{s}`: {e}")))
}

fn train(data: &Path, config: Option<&Path>, out: &Path) -> m2ad::Result<()> {
    let cfg = load_config(config)?;
    let frame = load_data(data)?;
    let (mut artifact, summary) = fit(&frame, &cfg)?;
    artifact.provenance.created = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|v| v.parse().ok());
    artifact.save(out)?;
    let r = &artifact.train_report;
    let c = &artifact.calibration;
    println!("model      {}", out.display());
    println!("asset      {}", artifact.asset_id);
    println!("train rows {}", summary.train_rows);
    println!(
        "epochs     {}{} final loss {:.6}",
        r.epochs_run,
        if r.early_stopped { " (early stop)" } else { "" },
        r.losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("components {:?}", summary.components);
    println!("gamma      alpha {:.4} theta {:.4} threshold {:.4}", c.alpha, c.theta, c.threshold);
    println!("train flag rate {:.4}", summary.train_flag_rate);
    Ok(())
}

fn detect_cmd(model: &Path, data: &Path, out: &Path, all: bool) -> m2ad::Result<()> {
    let artifact = ModelArtifact::load(model)?;
    let frame = load_data(data)?;
    let det = detect(&artifact, &frame, &DetectOptions { score_all: all })?;
    for c in &det.ignored_columns {
        eprintln!("warning: column `{c}` is not in the model and was ignored");
    }
    for c in &det.absent_sensors {
        eprintln!("warning: sensor `{c}` is missing; its weight was spread over the others");
    }
    let file = det.event_file(&artifact.sensors);
    write_atomic(out, to_canonical_json(&file)?.as_bytes())?;
    let scores = sibling(out, ".scores.csv");
    write_atomic(&scores, det.scores_csv().as_bytes())?;
    println!("{} events over {} scored rows -> {}", file.events.len(), det.scores.len(), out.display());
    Ok(())
}

fn evaluate(
    events: &[PathBuf],
    labels: &Path,
    mode: Mode,
    lead_min: &str,
    lead_max: &str,
    out: Option<&Path>,
) -> m2ad::Result<()> {
    let (lead_min, lead_max) = (parse_lead(lead_min)?, parse_lead(lead_max)?);
    if lead_min > lead_max {
        return Err(Error::Argument("lead-min exceeds lead-max".into()));
    }
    let mode = match mode {
        Mode::Detection => EvalMode::Detection,
        Mode::Predictive => EvalMode::Predictive,
    };
    let kind = match mode {
        EvalMode::Detection => LabelKind::Anomaly,
        EvalMode::Predictive => LabelKind::WorkOrder,
    };
    let truth = load_labels(labels)?;
    let mut per_signal = Vec::new();
    for path in events {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read events {}: {e}", path.display())))?;
        let file: EventFile = serde_json::from_str(&text)
            .map_err(|e| Error::Schema(format!("{}: {e}", path.display())))?;
        let detected: Vec<Interval> = file.events.iter().map(|e| Interval { start: e.start, end: e.end }).collect();
        let wanted: Vec<Interval> = truth
            .iter()
            .filter(|l| l.signal == file.asset_id && l.kind == kind)
            .map(|l| l.interval())
            .collect();
        let m = match mode {
            EvalMode::Detection => match_detection(&detected, &wanted),
            EvalMode::Predictive => match_predictive(&detected, &wanted, lead_min, lead_max)?,
        };
        per_signal.push((file.asset_id, m.counts));
    }
    let report = aggregate(per_signal.iter().map(|(s, c)| (s.as_str(), *c)));
    let text = report.to_text();
    match out {
        Some(p) => {
            write_atomic(p, text.as_bytes())?;
            write_atomic(sibling(p, ".json"), to_canonical_json(&report)?.as_bytes())?;
            print!("{text}");
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn simulate(scenario: &Path, out: &Path) -> m2ad::Result<()> {
    let sc = SynthConfig::load(scenario)?;
    let g = generate(&sc)?;
    let mut data = Vec::new();
    write_csv(&g.frame, &mut data)?;
    write_atomic(out, &data)?;
    let mut labels = Vec::new();
    write_labels(&g.truth, &mut labels)?;
    let labels_path = sibling(out, ".labels.csv");
    write_atomic(&labels_path, &labels)?;
    println!(
        "{} rows, {} sensors, {} anomalies -> {}, {}",
        g.frame.len(),
        g.frame.n_sensors(),
        g.truth.len(),
        out.display(),
        labels_path.display()
    );
    Ok(())
}

fn verify_props(out: &Path) -> m2ad::Result<()> {
    let report = proposition_report()?;
    let text = report.to_text();
    write_atomic(out, text.as_bytes())?;
    write_atomic(sibling(out, ".json"), to_canonical_json(&report)?.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn ablate(data: &Path, labels: &Path, config: Option<&Path>, out: &Path) -> m2ad::Result<()> {
    let cfg = load_config(config)?;
    let frame = load_data(data)?;
    let truth: Vec<_> = load_labels(labels)?
        .into_iter()
        .filter(|l| l.kind == LabelKind::Anomaly)
        .collect();
    let rows = run_ablation(&frame, &truth, &cfg, &Variant::ALL)?;
    let mut text = String::from("variant tp fp fn precision recall f1 f0.5 flagged_steps\n");
    let fmt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for r in &rows {
        let e = &r.report;
        text.push_str(&format!(
            "{} {} {} {} {} {} {} {} {}\n",
            serde_json::to_value(r.variant)?.as_str().unwrap_or("?"),
            e.tp,
            e.fp,
            e.fn_,
            fmt(e.precision),
            fmt(e.recall),
            fmt(e.f1),
            fmt(e.f05),
            r.flagged_steps
        ));
    }
    write_atomic(out, text.as_bytes())?;
    write_atomic(sibling(out, ".json"), to_canonical_json(&rows)?.as_bytes())?;
    print!("{text}");
    Ok(())
}

fn configure_threads() -> Result<(), String> {
    let Ok(v) = std::env::var("M2AD_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("M2AD_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let result = match &cli.command {
        Command::Train { data, config, out } => train(data, config.as_deref(), out),
        Command::Detect { model, data, out, all } => detect_cmd(model, data, out, *all),
        Command::Evaluate {
            events,
            labels,
            mode,
            lead_min,
            lead_max,
            out,
        } => evaluate(events, labels, *mode, lead_min, lead_max, out.as_deref()),
        Command::Simulate { scenario, out } => simulate(scenario, out),
        Command::VerifyProps { out } => verify_props(out),
        Command::Ablate {
            data,
            labels,
            config,
            out,
        } => ablate(data, labels, config.as_deref(), out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Some(h) = e.hint() {
                eprintln!("hint: {h}");
            }
            ExitCode::from(if e.is_numeric() { 3 } else { 2 })
        }
    }
}
