//! Synthetic multi-system assets with labelled anomalies, numerical checks
//! of the two tail/bias results behind the scoring design, and ablations.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::config::{Components, PipelineConfig};
use crate::data::{AssetFrame, SensorMeta, TailMode};
use crate::error::{Error, Result};
use crate::eval::{aggregate, match_detection, EvalReport, Interval, LabelKind, LabeledInterval};
use crate::pipeline::{
    detect, first_reported, fit_scoring, prepare, score, sensor_errors, train_forecaster, DetectOptions, Prepared,
};
use crate::artifact::ModelArtifact;
use crate::score::extract_events;
use crate::stats::{mean, std_dev_ml};
use crate::quad::{choose_panels, composite};
use crate::score::CalibrationMethod;
use crate::special::{ln_gamma_q, normal_ln_pdf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    /// Constant offset of `magnitude · noise` over the whole span.
    LevelShift,
    /// Triangular pulse peaking at `magnitude · noise` mid-span.
    Spike,
    /// Seasonal component mirrored in sign; values stay in the normal range
    /// but contradict the time of day. `magnitude` is unused.
    Contextual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    /// Affected columns (`system.sensor.summary`); empty means every sensor.
    #[serde(default)]
    pub sensors: Vec<String>,
    pub start: usize,
    pub duration: usize,
    #[serde(default)]
    pub magnitude: f64,
}

/// Evenly spaced single-sensor anomalies on randomly chosen sensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomAnomalies {
    pub count: usize,
    pub first: usize,
    pub spacing: usize,
    pub duration: usize,
    pub magnitude: f64,
    pub kinds: Vec<AnomalyKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSystem {
    pub name: String,
    pub sensors: Vec<String>,
    pub summaries: Vec<String>,
    /// Seasonal period in steps.
    pub period: f64,
    pub amplitude: f64,
    pub noise: f64,
    /// Multiplier on the signal level while the regime covariate is off.
    pub off_level: f64,
    /// Multiplier on the noise while the regime covariate is off.
    pub off_noise: f64,
    pub tail_mode: TailMode,
}

impl Default for SynthSystem {
    fn default() -> Self {
        SynthSystem {
            name: "system".into(),
            sensors: vec!["sensor".into()],
            summaries: vec!["value".into()],
            period: 24.0,
            amplitude: 1.0,
            noise: 0.1,
            off_level: 1.0,
            off_noise: 1.0,
            tail_mode: TailMode::TwoSided,
        }
    }
}

/// Alternating on/off spans with lengths drawn uniformly from the ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegimeSchedule {
    pub name: String,
    pub on: [usize; 2],
    pub off: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub asset_id: String,
    pub length: usize,
    /// First timestamp, epoch seconds.
    pub start: i64,
    /// Seconds between rows.
    pub step: i64,
    /// Loading of every sensor's noise on the shared latent factor.
    pub rho_dep: f64,
    /// AR(1) coefficient of the latent factor.
    pub latent_phi: f64,
    pub systems: Vec<SynthSystem>,
    pub regime: Option<RegimeSchedule>,
    pub anomalies: Vec<AnomalySpec>,
    pub random_anomalies: Option<RandomAnomalies>,
    /// Share of sensor cells dropped at random.
    pub missing_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            asset_id: "synthetic".into(),
            length: 1000,
            start: 1_704_067_200,
            step: 3600,
            rho_dep: 0.0,
            latent_phi: 0.8,
            systems: vec![SynthSystem::default()],
            regime: None,
            anomalies: Vec::new(),
            random_anomalies: None,
            missing_rate: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Argument(format!("cannot read scenario {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Argument(format!("invalid scenario {}: {e}", path.display())))
    }

    pub fn sensor_meta(&self) -> Vec<SensorMeta> {
        let mut out = Vec::new();
        for s in &self.systems {
            for name in &s.sensors {
                for summary in &s.summaries {
                    let mut m = SensorMeta::new(&s.name, name, summary);
                    m.tail_mode = s.tail_mode;
                    out.push(m);
                }
            }
        }
        out
    }
}

/// An anomaly as injected: span and affected sensor indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Injected {
    pub kind: AnomalyKind,
    pub start: usize,
    pub duration: usize,
    pub magnitude: f64,
    pub sensors: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synthetic {
    pub frame: AssetFrame,
    pub truth: Vec<LabeledInterval>,
    pub injected: Vec<Injected>,
}

fn resolve_anomalies(cfg: &SynthConfig, meta: &[SensorMeta], rng: &mut ChaCha8Rng) -> Result<Vec<Injected>> {
    let mut out = Vec::new();
    for a in &cfg.anomalies {
        let sensors = if a.sensors.is_empty() {
            (0..meta.len()).collect()
        } else {
            a.sensors
                .iter()
                .map(|c| {
                    meta.iter()
                        .position(|m| &m.column() == c)
                        .ok_or_else(|| Error::arg(format!("anomaly names unknown sensor {c:?}")))
                })
                .collect::<Result<Vec<_>>>()?
        };
        out.push(Injected {
            kind: a.kind,
            start: a.start,
            duration: a.duration,
            magnitude: a.magnitude,
            sensors,
        });
    }
    if let Some(r) = &cfg.random_anomalies {
        if r.kinds.is_empty() {
            return Err(Error::arg("random anomalies need at least one kind"));
        }
        for i in 0..r.count {
            out.push(Injected {
                kind: r.kinds[i % r.kinds.len()],
                start: r.first + i * r.spacing,
                duration: r.duration,
                magnitude: r.magnitude,
                sensors: vec![rng.random_range(0..meta.len())],
            });
        }
    }
    out.sort_by_key(|a| a.start);
    for a in &out {
        if a.duration == 0 || a.start + a.duration > cfg.length {
            return Err(Error::arg(format!(
                "anomaly at {} with duration {} does not fit in {} steps",
                a.start, a.duration, cfg.length
            )));
        }
    }
    for w in out.windows(2) {
        if w[1].start < w[0].start + w[0].duration {
            return Err(Error::arg(format!(
                "anomalies starting at {} and {} overlap",
                w[0].start, w[1].start
            )));
        }
    }
    Ok(out)
}

fn regime_series(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<Option<Vec<f64>>> {
    let Some(r) = &cfg.regime else {
        return Ok(None);
    };
    if r.on[0] == 0 || r.off[0] == 0 || r.on[0] > r.on[1] || r.off[0] > r.off[1] {
        return Err(Error::arg("regime span ranges must be positive and ordered"));
    }
    let mut out = Vec::with_capacity(cfg.length);
    let mut on = true;
    while out.len() < cfg.length {
        let [lo, hi] = if on { r.on } else { r.off };
        let len = rng.random_range(lo..=hi);
        out.extend(std::iter::repeat_n(if on { 1.0 } else { 0.0 }, len));
        on = !on;
    }
    out.truncate(cfg.length);
    Ok(Some(out))
}

/// Builds the frame and ground truth for a scenario.
pub fn generate(cfg: &SynthConfig) -> Result<Synthetic> {
    if cfg.length == 0 || cfg.step <= 0 {
        return Err(Error::arg("scenario needs a positive length and step"));
    }
    if !(0.0..1.0).contains(&cfg.rho_dep) || !(0.0..1.0).contains(&cfg.latent_phi) {
        return Err(Error::arg("rho_dep and latent_phi must lie in [0, 1)"));
    }
    if !(0.0..1.0).contains(&cfg.missing_rate) {
        return Err(Error::arg("missing_rate must lie in [0, 1)"));
    }
    let meta = cfg.sensor_meta();
    if meta.is_empty() {
        return Err(Error::arg("scenario has no sensors"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let regime = regime_series(cfg, &mut rng)?;
    let injected = resolve_anomalies(cfg, &meta, &mut rng)?;
    let n = cfg.length;

    let mut latent = Vec::with_capacity(n);
    let innov = (1.0 - cfg.latent_phi * cfg.latent_phi).sqrt();
    let mut l: f64 = StandardNormal.sample(&mut rng);
    for _ in 0..n {
        latent.push(l);
        let e: f64 = StandardNormal.sample(&mut rng);
        l = cfg.latent_phi * l + innov * e;
    }

    let mut sensors = Vec::with_capacity(meta.len());
    let mut seasonal = Vec::with_capacity(meta.len());
    let mut noise_scale = Vec::with_capacity(meta.len());
    for s in &cfg.systems {
        for _ in 0..s.sensors.len() * s.summaries.len() {
            let phase = rng.random_range(0.0..2.0 * PI);
            let offset = rng.random_range(-1.0..1.0) * s.amplitude;
            let mut col = Vec::with_capacity(n);
            let mut seas = Vec::with_capacity(n);
            for t in 0..n {
                let on = regime.as_ref().is_none_or(|r| r[t] == 1.0);
                let (lvl, nz) = if on { (1.0, 1.0) } else { (s.off_level, s.off_noise) };
                let season = s.amplitude * (2.0 * PI * t as f64 / s.period + phase).sin();
                let eps: f64 = StandardNormal.sample(&mut rng);
                let noise = s.noise * nz * (cfg.rho_dep * latent[t] + eps);
                col.push(lvl * (offset + season) + noise);
                seas.push(lvl * season);
            }
            sensors.push(col);
            seasonal.push(seas);
            noise_scale.push(s.noise);
        }
    }

    for a in &injected {
        for &k in &a.sensors {
            let sd = noise_scale[k];
            for i in 0..a.duration {
                let t = a.start + i;
                sensors[k][t] += match a.kind {
                    AnomalyKind::LevelShift => a.magnitude * sd,
                    AnomalyKind::Spike => {
                        let mid = (a.duration - 1) as f64 / 2.0;
                        let frac = if mid > 0.0 { 1.0 - (i as f64 - mid).abs() / mid } else { 1.0 };
                        a.magnitude * sd * frac.max(0.0)
                    }
                    AnomalyKind::Contextual => -2.0 * seasonal[k][t],
                };
            }
        }
    }

    if cfg.missing_rate > 0.0 {
        for col in &mut sensors {
            for v in col.iter_mut() {
                if rng.random::<f64>() < cfg.missing_rate {
                    *v = f64::NAN;
                }
            }
        }
    }

    let timestamps: Vec<i64> = (0..n as i64).map(|t| cfg.start + t * cfg.step).collect();
    let (covariates, covariate_names, covariate_levels) = match (regime, &cfg.regime) {
        (Some(r), Some(spec)) => (vec![r], vec![spec.name.clone()], vec![Some(2)]),
        _ => (Vec::new(), Vec::new(), Vec::new()),
    };
    let truth = injected
        .iter()
        .map(|a| LabeledInterval {
            signal: cfg.asset_id.clone(),
            start: timestamps[a.start],
            end: timestamps[a.start + a.duration - 1],
            kind: LabelKind::Anomaly,
        })
        .collect();
    let frame = AssetFrame {
        timestamps,
        sensors,
        covariates,
        sensor_meta: meta,
        covariate_names,
        covariate_levels,
    };
    frame.validate()?;
    Ok(Synthetic { frame, truth, injected })
}

/// Signal-free sensors with the generator's dependence structure.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePanel {
    /// `sensors[k][t] = rho · latent[t] + ε`, with unit-variance `ε`.
    pub sensors: Vec<Vec<f64>>,
    /// Unit-variance AR(1) factor.
    pub latent: Vec<f64>,
    pub rho: f64,
    pub phi: f64,
}

impl NoisePanel {
    /// Residuals of the best one-step forecaster, which knows the latent
    /// path up to `t − 1`.
    pub fn oracle_residuals(&self) -> Vec<Vec<f64>> {
        self.sensors
            .iter()
            .map(|col| {
                col.iter()
                    .enumerate()
                    .map(|(t, &x)| if t == 0 { x } else { x - self.rho * self.phi * self.latent[t - 1] })
                    .collect()
            })
            .collect()
    }
}

/// `n` steps of `d` sensors loading `rho` on a shared AR(1) factor with
/// coefficient `phi`.
pub fn dependent_noise(d: usize, n: usize, rho: f64, phi: f64, seed: u64) -> NoisePanel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let innov = (1.0 - phi * phi).sqrt();
    let mut sensors = vec![Vec::with_capacity(n); d];
    let mut latent = Vec::with_capacity(n);
    let mut l: f64 = StandardNormal.sample(&mut rng);
    for _ in 0..n {
        latent.push(l);
        for col in sensors.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            col.push(rho * l + e);
        }
        let e: f64 = StandardNormal.sample(&mut rng);
        l = phi * l + innov * e;
    }
    NoisePanel { sensors, latent, rho, phi }
}

// ---------------------------------------------------------------------------
// Mean bias of a single Gaussian fitted to a symmetric two-component mixture.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop1Row {
    pub mu_star: f64,
    pub rho: f64,
    pub sigma: f64,
    pub mu_bar: f64,
    pub bias: f64,
    pub bound: f64,
    /// Kronrod–Gauss error estimate of the KL integral at `mu_bar`.
    pub quad_error: f64,
}

const PROP1_QUAD_TOL: f64 = 1e-10;

/// Projects `½N(μ*(1+ρ), σ²) + ½N(μ*(1−ρ), σ²)` onto `{N(μ, σ²)}` by
/// minimising the KL divergence numerically and compares the bias with
/// `ρ|μ*| + (ρ|μ*|/σ)^{1/4}`.
pub fn verify_prop1(mu_star: f64, rho: f64, sigma: f64) -> Result<Prop1Row> {
    if !(rho > 0.0 && sigma > 0.0) || !mu_star.is_finite() {
        return Err(Error::arg("need rho > 0, sigma > 0 and a finite mu_star"));
    }
    let (m1, m2) = (mu_star * (1.0 + rho), mu_star * (1.0 - rho));
    let ln_p = |x: f64| {
        let a = normal_ln_pdf(x, m1, sigma);
        let b = normal_ln_pdf(x, m2, sigma);
        let hi = a.max(b);
        hi + ((a - hi).exp() + (b - hi).exp()).ln() - 2f64.ln()
    };
    let lo = m1.min(m2) - 14.0 * sigma;
    let hi = m1.max(m2) + 14.0 * sigma;
    let kl_integrand = |mu: f64| {
        move |x: f64| {
            let lp = ln_p(x);
            lp.exp() * (lp - normal_ln_pdf(x, mu, sigma))
        }
    };
    let centre = 0.5 * (m1 + m2);
    let panels = choose_panels(&kl_integrand(centre), lo, hi, PROP1_QUAD_TOL)?;
    let kl = |mu: f64| composite(&kl_integrand(mu), lo, hi, panels).0;

    let span = rho * mu_star.abs() + sigma;
    let (mut a, mut b) = (centre - span, centre + span);
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - g * (b - a);
    let mut d = a + g * (b - a);
    let (mut fc, mut fd) = (kl(c), kl(d));
    while b - a > 1e-10 {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - g * (b - a);
            fc = kl(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + g * (b - a);
            fd = kl(d);
        }
    }
    let mu_bar = 0.5 * (a + b);
    let quad_error = composite(&kl_integrand(mu_bar), lo, hi, panels).1;
    if !(quad_error <= PROP1_QUAD_TOL) {
        return Err(Error::Numeric(format!("KL quadrature error {quad_error} above budget")));
    }
    let r = rho * mu_star.abs();
    Ok(Prop1Row {
        mu_star,
        rho,
        sigma,
        mu_bar,
        bias: (mu_star - mu_bar).abs(),
        bound: r + (r / sigma).powf(0.25),
        quad_error,
    })
}

// ---------------------------------------------------------------------------
// Tail ratio of a correctly calibrated Gamma null against the chi-square one.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Point {
    pub s: f64,
    /// `ln` of the ratio; always finite.
    pub log_ratio: f64,
    /// The ratio itself; `None` when it leaves the double range.
    pub ratio: Option<f64>,
    pub saturated: bool,
}

/// `Q_{Γ(α,θ)}(S) / Q_{Γ(α,2)}(S)` for each `S`, with both tails evaluated
/// in log space.
pub fn verify_prop2(alpha: f64, theta: f64, s_grid: &[f64]) -> Result<Vec<Prop2Point>> {
    if !(alpha > 0.0 && theta > 0.0) {
        return Err(Error::arg("alpha and theta must be positive"));
    }
    if s_grid.iter().any(|&s| !(s > 0.0)) || s_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::arg("S grid must be positive and strictly ascending"));
    }
    Ok(s_grid
        .iter()
        .map(|&s| {
            let log_ratio = ln_gamma_q(alpha, s / theta) - ln_gamma_q(alpha, s / 2.0);
            let r = log_ratio.exp();
            let ok = r.is_finite() && r > 0.0;
            Prop2Point {
                s,
                log_ratio,
                ratio: ok.then_some(r),
                saturated: !ok,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prop2Series {
    pub alpha: f64,
    pub theta: f64,
    pub points: Vec<Prop2Point>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropositionReport {
    pub prop1: Vec<Prop1Row>,
    pub prop2: Vec<Prop2Series>,
}

pub const PROP2_GRID: [f64; 6] = [1.0, 10.0, 50.0, 100.0, 200.0, 500.0];

/// The standard grids for both checks.
pub fn proposition_report() -> Result<PropositionReport> {
    let mut prop1 = Vec::new();
    for mu in [0.5, 1.0, 2.0] {
        for rho in [0.1, 0.5, 1.0] {
            for sigma in [0.5, 1.0] {
                prop1.push(verify_prop1(mu, rho, sigma)?);
            }
        }
    }
    let mut prop2 = Vec::new();
    for alpha in [2.0, 5.0] {
        for theta in [1.5, 2.0, 3.0] {
            prop2.push(Prop2Series {
                alpha,
                theta,
                points: verify_prop2(alpha, theta, &PROP2_GRID)?,
            });
        }
    }
    Ok(PropositionReport { prop1, prop2 })
}

impl PropositionReport {
    pub fn to_text(&self) -> String {
        let mut s = String::from("# mixture mean bias\nmu_star rho sigma mu_bar bias bound holds\n");
        for r in &self.prop1 {
            s.push_str(&format!(
                "{} {} {} {:.12} {:.3e} {:.6} {}\n",
                r.mu_star,
                r.rho,
                r.sigma,
                r.mu_bar,
                r.bias,
                r.bound,
                r.bias <= r.bound
            ));
        }
        s.push_str("\n# tail ratio Q_gamma(alpha,theta)(S) / Q_gamma(alpha,2)(S)\nalpha theta S ratio log_ratio\n");
        for series in &self.prop2 {
            for p in &series.points {
                let ratio = p.ratio.map_or_else(|| "saturated".to_string(), |r| format!("{r:.6e}"));
                s.push_str(&format!(
                    "{} {} {} {} {:.6}\n",
                    series.alpha, series.theta, p.s, ratio, p.log_ratio
                ));
            }
        }
        s
    }
}

// ---------------------------------------------------------------------------
// Ablations.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Mixtures per config, Gamma calibration.
    GmmGamma,
    GmmChiSquare,
    NormalGamma,
    NormalChiSquare,
    /// Any sensor outside mean ± 4 sd of its training errors.
    StaticThreshold,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::GmmGamma,
        Variant::GmmChiSquare,
        Variant::NormalGamma,
        Variant::NormalChiSquare,
        Variant::StaticThreshold,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub report: EvalReport,
    pub flagged_steps: usize,
    pub events: Vec<Interval>,
}

/// Trains the forecaster once and evaluates every variant on the rows after
/// the training range.
pub fn run_ablation(
    frame: &AssetFrame,
    truth: &[LabeledInterval],
    cfg: &PipelineConfig,
    variants: &[Variant],
) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let prep = prepare(frame, cfg).map_err(|e| e.in_stage("data_model"))?;
    let (model, report) = train_forecaster(&prep, cfg).map_err(|e| e.in_stage("forecaster"))?;
    let truth_iv: Vec<Interval> = truth.iter().map(LabeledInterval::interval).collect();
    let signal = truth.first().map_or("asset", |t| t.signal.as_str());
    let mut rows = Vec::new();
    for &v in variants {
        let mut vc = cfg.clone();
        match v {
            Variant::GmmGamma | Variant::StaticThreshold => {}
            Variant::GmmChiSquare => vc.scoring.calibration = CalibrationMethod::ChiSquare,
            Variant::NormalGamma => force_normal(&mut vc),
            Variant::NormalChiSquare => {
                force_normal(&mut vc);
                vc.scoring.calibration = CalibrationMethod::ChiSquare;
            }
        }
        let (artifact, _) = fit_scoring(&prep, model.clone(), report.clone(), &vc)?;
        let (events, flagged) = if v == Variant::StaticThreshold {
            static_threshold(&prep, &artifact, frame, cfg.scoring.max_gap)?
        } else {
            let det = detect(&artifact, frame, &DetectOptions::default())?;
            let ev = det
                .events
                .iter()
                .map(|e| Interval { start: e.start, end: e.end })
                .collect();
            (ev, det.flags.iter().filter(|&&f| f).count())
        };
        let m = match_detection(&events, &truth_iv);
        rows.push(AblationRow {
            variant: v,
            report: aggregate([(signal, m.counts)]),
            flagged_steps: flagged,
            events,
        });
    }
    Ok(rows)
}

/// Flags rows where any sensor's error leaves mean ± 4 sd of its training
/// errors. Returns event spans in timestamps and the flagged row count.
fn static_threshold(
    prep: &Prepared,
    artifact: &ModelArtifact,
    frame: &AssetFrame,
    max_gap: usize,
) -> Result<(Vec<Interval>, usize)> {
    let train = sensor_errors(
        &artifact.forecaster,
        &prep.frame,
        &prep.missing,
        &artifact.error_settings,
        0..prep.train_rows,
    )?;
    let bands: Vec<(f64, f64)> = train.values.iter().map(|e| (mean(e), std_dev_ml(e))).collect();
    let scored = score(artifact, frame)?;
    let from = first_reported(&scored, artifact, &DetectOptions::default());
    let n = scored.timestamps.len();
    let mut flags = Vec::with_capacity(n - from);
    let mut excess = Vec::with_capacity(n - from);
    for i in from..n {
        let mut worst = 0.0f64;
        for (k, &(mu, sd)) in bands.iter().enumerate() {
            if scored.errors.missing[k][i] {
                continue;
            }
            worst = worst.max((scored.errors.values[k][i] - mu).abs() / sd.max(f64::MIN_POSITIVE));
        }
        flags.push(worst > 4.0);
        excess.push(Some(worst));
    }
    let events = extract_events(&flags, &excess, max_gap)?
        .into_iter()
        .map(|e| Interval {
            start: scored.timestamps[from + e.start],
            end: scored.timestamps[from + e.end],
        })
        .collect();
    Ok((events, flags.iter().filter(|&&f| f).count()))
}

fn force_normal(cfg: &mut PipelineConfig) {
    cfg.gmm.components = Components::Fixed(1);
    cfg.gmm.systems.clear();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            length: 300,
            rho_dep: 0.5,
            systems: vec![
                SynthSystem {
                    name: "a".into(),
                    sensors: vec!["x".into(), "y".into()],
                    ..SynthSystem::default()
                },
                SynthSystem {
                    name: "b".into(),
                    summaries: vec!["mean".into(), "max".into()],
                    ..SynthSystem::default()
                },
            ],
            regime: Some(RegimeSchedule {
                name: "mode".into(),
                on: [20, 40],
                off: [5, 10],
            }),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a.frame.sensors, b.frame.sensors);
        assert!(a.truth.is_empty());
        assert_eq!(a.frame.n_sensors(), 4);
        assert_eq!(a.frame.sensor_meta[3].column(), "b.sensor.max");
        assert_eq!(a.frame.covariate_levels, vec![Some(2)]);
        let mut other = small();
        other.seed = 1;
        assert_ne!(generate(&other).unwrap().frame.sensors, a.frame.sensors);
    }

    #[test]
    fn anomalies_are_injected_and_labelled() {
        let mut cfg = small();
        cfg.anomalies = vec![AnomalySpec {
            kind: AnomalyKind::LevelShift,
            sensors: vec!["a.x.value".into()],
            start: 100,
            duration: 50,
            magnitude: 5.0,
        }];
        let clean = generate(&small()).unwrap();
        let g = generate(&cfg).unwrap();
        assert_eq!(g.truth.len(), 1);
        assert_eq!(g.truth[0].start, cfg.start + 100 * cfg.step);
        assert_eq!(g.truth[0].end, cfg.start + 149 * cfg.step);
        for t in 0..300 {
            let diff = g.frame.sensors[0][t] - clean.frame.sensors[0][t];
            let want = if (100..150).contains(&t) { 0.5 } else { 0.0 };
            assert!((diff - want).abs() < 1e-12, "t={t}");
            assert_eq!(g.frame.sensors[1][t], clean.frame.sensors[1][t]);
        }
    }

    #[test]
    fn overlapping_or_bad_anomalies_are_rejected() {
        let mut cfg = small();
        let spec = |start| AnomalySpec {
            kind: AnomalyKind::Spike,
            sensors: vec![],
            start,
            duration: 20,
            magnitude: 4.0,
        };
        cfg.anomalies = vec![spec(10), spec(25)];
        assert!(generate(&cfg).is_err());
        cfg.anomalies = vec![spec(290)];
        assert!(generate(&cfg).is_err());
        cfg.anomalies = vec![AnomalySpec {
            sensors: vec!["nope".into()],
            ..spec(10)
        }];
        assert!(generate(&cfg).is_err());
    }

    #[test]
    fn random_anomalies_touch_one_sensor_each() {
        let mut cfg = small();
        cfg.random_anomalies = Some(RandomAnomalies {
            count: 5,
            first: 20,
            spacing: 50,
            duration: 10,
            magnitude: 6.0,
            kinds: vec![AnomalyKind::LevelShift, AnomalyKind::Spike],
        });
        let g = generate(&cfg).unwrap();
        assert_eq!(g.injected.len(), 5);
        assert_eq!(g.truth.len(), 5);
        assert!(g.injected.iter().all(|a| a.sensors.len() == 1));
    }

    #[test]
    fn missing_cells() {
        let mut cfg = small();
        cfg.missing_rate = 0.1;
        let g = generate(&cfg).unwrap();
        let nan = g.frame.sensors.iter().flatten().filter(|v| v.is_nan()).count();
        assert!(nan > 60 && nan < 180, "{nan}");
    }

    #[test]
    fn dependent_noise_correlation() {
        let x = dependent_noise(2, 50_000, 0.6, 0.8, 1).sensors;
        let m0 = crate::stats::mean(&x[0]);
        let m1 = crate::stats::mean(&x[1]);
        let cov: f64 = x[0].iter().zip(&x[1]).map(|(a, b)| (a - m0) * (b - m1)).sum::<f64>() / 50_000.0;
        let corr = cov / (crate::stats::variance(&x[0]) * crate::stats::variance(&x[1])).sqrt();
        assert!((corr - 0.36 / 1.36).abs() < 0.03, "{corr}");
    }

    #[test]
    fn prop1_projection_is_the_mixture_mean() {
        let r = verify_prop1(1.0, 0.5, 1.0).unwrap();
        assert!(r.bias < 1e-6, "{r:?}");
        assert!(r.bias <= r.bound);
        let tiny = verify_prop1(1.0, 1e-12, 1.0).unwrap();
        assert!(tiny.bound < 2e-3 && tiny.bias < 1e-6);
        assert!(verify_prop1(1.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn prop2_tail_ratios() {
        let grid = [1.0, 10.0, 100.0, 500.0];
        for p in verify_prop2(2.0, 2.0, &grid).unwrap() {
            assert!((p.ratio.unwrap() - 1.0).abs() < 1e-9);
        }
        // Closed form for α = 1: Q = exp(−S/θ).
        for p in verify_prop2(1.0, 1.5, &grid).unwrap() {
            let want = -p.s / 1.5 + p.s / 2.0;
            assert!((p.log_ratio - want).abs() < 1e-9 * want.abs().max(1.0));
        }
        // A narrower true null (θ < 2) has the thinner tail, so its p-value is
        // the smaller one and the ratio vanishes; θ > 2 is the mirror case.
        let narrow = verify_prop2(2.0, 1.5, &grid).unwrap();
        let wide = verify_prop2(2.0, 3.0, &grid).unwrap();
        for w in narrow.windows(2) {
            assert!(w[1].log_ratio < w[0].log_ratio);
        }
        for w in wide.windows(2) {
            assert!(w[1].log_ratio > w[0].log_ratio);
        }
        for (n, w) in narrow.iter().zip(&wide) {
            assert!(n.log_ratio < 0.0 && w.log_ratio > 0.0);
        }
        let far = verify_prop2(2.0, 1.5, &[1e5]).unwrap();
        assert!(far[0].saturated && far[0].ratio.is_none() && far[0].log_ratio.is_finite());
        assert!(verify_prop2(2.0, 2.0, &[2.0, 1.0]).is_err());
    }

    #[test]
    fn report_has_unit_ratio_rows() {
        let r = proposition_report().unwrap();
        assert_eq!(r.prop1.len(), 18);
        let text = r.to_text();
        assert!(text.contains("2 2 100 1.000000e0"));
    }
}
