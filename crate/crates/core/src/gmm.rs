//! One-dimensional Gaussian mixtures fitted by EM, used to turn a sensor's
//! error values into p-values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::TailMode;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::special::{normal_cdf, normal_ln_pdf};
use crate::stats::{mean, quantile_sorted, std_dev_ml, variance};

pub const P_FLOOR: f64 = 1e-15;
pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_TOL: f64 = 1e-7;
const RESTARTS: u64 = 3;
const CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Component<T> {
    pub weight: T,
    pub mean: T,
    pub sd: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub log_likelihood: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Gmm<T> {
    /// Sorted by mean.
    pub components: Vec<Component<T>>,
    pub tail_mode: TailMode,
    pub diagnostics: FitDiagnostics,
}

fn sd_floor<T: Scalar>(sample_sd: T) -> T {
    T::of(1e-6).max(T::of(1e-4) * sample_sd)
}

fn log_sum_exp<T: Scalar>(v: &[T]) -> T {
    let m = v.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + v.iter().map(|&x| (x - m).exp()).sum::<T>().ln()
}

impl<T: Scalar> Gmm<T> {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Free parameters: `m − 1` weights, `m` means, `m` deviations.
    pub fn n_free_params(&self) -> usize {
        3 * self.components.len() - 1
    }

    fn ln_density_terms(&self, x: T, out: &mut [T]) {
        for (o, c) in out.iter_mut().zip(&self.components) {
            *o = c.weight.ln() + normal_ln_pdf(x, c.mean, c.sd);
        }
    }

    pub fn ln_pdf(&self, x: T) -> T {
        let mut terms = vec![T::zero(); self.components.len()];
        self.ln_density_terms(x, &mut terms);
        log_sum_exp(&terms)
    }

    pub fn log_likelihood(&self, xs: &[T]) -> T {
        let parts: Vec<T> = xs
            .par_chunks(CHUNK)
            .map(|chunk| chunk.iter().map(|&x| self.ln_pdf(x)).sum::<T>())
            .collect();
        parts.into_iter().sum()
    }

    pub fn cdf(&self, x: T) -> T {
        self.components
            .iter()
            .map(|c| c.weight * normal_cdf((x - c.mean) / c.sd))
            .sum::<T>()
            .min(T::one())
    }

    /// Tail probability of `e` under the fitted mixture, clamped to
    /// `[P_FLOOR, 1]`.
    pub fn p_value(&self, e: T) -> T {
        let f = self.cdf(e);
        let p = match self.tail_mode {
            TailMode::TwoSided => T::two() * f.min(T::one() - f),
            TailMode::Upper => T::one() - f,
            TailMode::Lower => f,
        };
        p.max(T::of(P_FLOOR)).min(T::one())
    }

    pub fn sample<R: Rng>(&self, n: usize, rng: &mut R) -> Vec<T> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = self.components.len() - 1;
                for (j, c) in self.components.iter().enumerate() {
                    acc += c.weight.to_f64_lossy();
                    if u < acc {
                        pick = j;
                        break;
                    }
                }
                let c = &self.components[pick];
                let z: f64 = rng.sample(rand_distr::StandardNormal);
                c.mean + c.sd * T::of(z)
            })
            .collect()
    }
}

/// Bayesian information criterion, `−2 ln L + k ln n`.
pub fn bic<T: Scalar>(model: &Gmm<T>, errors: &[T]) -> Result<T> {
    if errors.is_empty() {
        return Err(Error::arg("BIC needs at least one value"));
    }
    let k = T::of_usize(model.n_free_params());
    Ok(-T::two() * model.log_likelihood(errors) + k * T::of_usize(errors.len()).ln())
}

struct Stats<T> {
    ll: T,
    n: Vec<T>,
    sx: Vec<T>,
}

/// E-step over a chunk: responsibilities written into `resp` (row-major,
/// `m` per point), partial log-likelihood and sufficient statistics returned.
fn e_step_chunk<T: Scalar>(comps: &[Component<T>], xs: &[T], resp: &mut [T]) -> Stats<T> {
    let m = comps.len();
    let mut st = Stats {
        ll: T::zero(),
        n: vec![T::zero(); m],
        sx: vec![T::zero(); m],
    };
    let half_ln_tau = T::of(0.5 * (2.0 * std::f64::consts::PI).ln());
    let consts: Vec<(T, T, T)> = comps
        .iter()
        .map(|c| (c.weight.ln() - c.sd.ln() - half_ln_tau, c.mean, T::one() / c.sd))
        .collect();
    let half = T::of(0.5);
    for (i, &x) in xs.iter().enumerate() {
        let r = &mut resp[i * m..(i + 1) * m];
        let mut hi = T::neg_infinity();
        for (o, &(k, mu, inv)) in r.iter_mut().zip(&consts) {
            let z = (x - mu) * inv;
            *o = k - half * z * z;
            hi = hi.max(*o);
        }
        let mut sum = T::zero();
        for o in r.iter_mut() {
            *o = (*o - hi).exp();
            sum += *o;
        }
        st.ll += hi + sum.ln();
        for (j, o) in r.iter_mut().enumerate() {
            *o /= sum;
            st.n[j] += *o;
            st.sx[j] += *o * x;
        }
    }
    st
}

/// One EM run from `init`. Returns the model and its log-likelihood trace.
fn run_em<T: Scalar>(
    xs: &[T],
    mut comps: Vec<Component<T>>,
    floor: T,
    max_iter: usize,
    tol: f64,
) -> (Vec<Component<T>>, Vec<f64>, bool) {
    let m = comps.len();
    let n_total = T::of_usize(xs.len());
    let mut resp = vec![T::zero(); xs.len() * m];
    let mut trace: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let stats: Vec<Stats<T>> = xs
            .par_chunks(CHUNK)
            .zip(resp.par_chunks_mut(CHUNK * m))
            .map(|(x, r)| e_step_chunk(&comps, x, r))
            .collect();
        let mut ll = T::zero();
        let mut nk = vec![T::zero(); m];
        let mut sx = vec![T::zero(); m];
        for s in &stats {
            ll += s.ll;
            for j in 0..m {
                nk[j] += s.n[j];
                sx[j] += s.sx[j];
            }
        }
        let ll = ll.to_f64_lossy();
        if let Some(&prev) = trace.last() {
            debug_assert!(
                ll >= prev - (1e-9 + T::epsilon().to_f64_lossy() * xs.len() as f64) * prev.abs().max(1.0),
                "EM log-likelihood decreased: {prev} -> {ll}"
            );
            trace.push(ll);
            if (ll - prev).abs() < tol * prev.abs().max(f64::MIN_POSITIVE) {
                converged = true;
                break;
            }
        } else {
            trace.push(ll);
        }
        // M-step. A component that lost all mass keeps its location.
        let means: Vec<T> = (0..m)
            .map(|j| {
                if nk[j] > T::zero() {
                    sx[j] / nk[j]
                } else {
                    comps[j].mean
                }
            })
            .collect();
        let ss: Vec<Vec<T>> = xs
            .par_chunks(CHUNK)
            .zip(resp.par_chunks(CHUNK * m))
            .map(|(x, r)| {
                let mut acc = vec![T::zero(); m];
                for (i, &v) in x.iter().enumerate() {
                    for j in 0..m {
                        let d = v - means[j];
                        acc[j] += r[i * m + j] * d * d;
                    }
                }
                acc
            })
            .collect();
        for j in 0..m {
            let s2: T = ss.iter().map(|a| a[j]).sum();
            let sd = if nk[j] > T::zero() {
                (s2 / nk[j]).sqrt()
            } else {
                comps[j].sd
            };
            comps[j] = Component {
                weight: (nk[j] / n_total).max(T::min_positive_value()),
                mean: means[j],
                sd: sd.max(floor),
            };
        }
        let wsum: T = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= wsum;
        }
    }
    (comps, trace, converged)
}

fn quantile_init<T: Scalar>(sorted: &[T], m: usize, sd: T, jitter: Option<&mut ChaCha8Rng>) -> Vec<Component<T>> {
    let mut positions: Vec<f64> = (1..=m).map(|j| (j as f64 - 0.5) / m as f64).collect();
    if let Some(rng) = jitter {
        for p in &mut positions {
            *p = (*p + rng.random_range(-0.5..0.5) / m as f64).clamp(0.0, 1.0);
        }
    }
    positions
        .into_iter()
        .map(|p| Component {
            weight: T::one() / T::of_usize(m),
            mean: quantile_sorted(sorted, T::of(p)),
            sd,
        })
        .collect()
}

fn finish<T: Scalar>(mut comps: Vec<Component<T>>, diagnostics: FitDiagnostics) -> Gmm<T> {
    comps.sort_by(|a, b| a.mean.partial_cmp(&b.mean).unwrap_or(std::cmp::Ordering::Equal));
    Gmm {
        components: comps,
        tail_mode: TailMode::default(),
        diagnostics,
    }
}

/// Fits an `m`-component mixture by EM, best of three restarts.
///
/// The first restart places means at the `(j − 0.5)/m` quantiles; later
/// restarts jitter those positions with a seeded generator.
pub fn em_fit<T: Scalar>(errors: &[T], m: usize, seed: u64, max_iter: usize, tol: f64) -> Result<Gmm<T>> {
    em_fit_traced(errors, m, seed, max_iter, tol).map(|(g, _)| g)
}

fn em_fit_traced<T: Scalar>(
    errors: &[T],
    m: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<(Gmm<T>, Vec<f64>)> {
    if m == 0 {
        return Err(Error::arg("mixture needs at least one component"));
    }
    if errors.len() < 8 * m {
        return Err(Error::arg(format!(
            "{} values are too few for {m} components (need {})",
            errors.len(),
            8 * m
        )));
    }
    if errors.iter().any(|v| !v.is_finite()) {
        return Err(Error::arg("mixture fit received non-finite values"));
    }
    let sample_sd = variance(errors).sqrt();
    let floor = sd_floor(sample_sd);
    if m == 1 {
        let mu = mean(errors);
        let sd = std_dev_ml(errors).max(floor);
        let c = Component {
            weight: T::one(),
            mean: mu,
            sd,
        };
        let mut g = finish(
            vec![c],
            FitDiagnostics {
                log_likelihood: 0.0,
                iterations: 0,
                converged: true,
            },
        );
        let ll = g.log_likelihood(errors).to_f64_lossy();
        g.diagnostics.log_likelihood = ll;
        return Ok((g, vec![ll]));
    }
    if sample_sd == T::zero() {
        return Err(Error::DegenerateData(format!(
            "all {} values are identical; cannot fit {m} components",
            errors.len()
        )));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(Vec<Component<T>>, Vec<f64>, bool)> = None;
    for r in 0..RESTARTS {
        let init = quantile_init(&sorted, m, sample_sd, if r == 0 { None } else { Some(&mut rng) });
        let run = run_em(errors, init, floor, max_iter.max(1), tol);
        let better = match &best {
            None => true,
            Some(b) => run.1.last() > b.1.last(),
        };
        if better {
            best = Some(run);
        }
    }
    let (comps, trace, converged) = best.expect("at least one restart");
    let mut g = finish(
        comps,
        FitDiagnostics {
            log_likelihood: 0.0,
            iterations: trace.len(),
            converged,
        },
    );
    g.diagnostics.log_likelihood = g.log_likelihood(errors).to_f64_lossy();
    Ok((g, trace))
}

/// Fits `m = 1..=m_max` and keeps the lowest BIC, preferring fewer
/// components on ties. Candidates the data cannot support (too few values
/// or no spread) end the search.
pub fn select_components<T: Scalar>(errors: &[T], m_max: usize, seed: u64) -> Result<(Gmm<T>, usize)> {
    if m_max == 0 {
        return Err(Error::arg("m_max must be at least 1"));
    }
    let mut best = em_fit(errors, 1, seed, DEFAULT_MAX_ITER, DEFAULT_TOL)?;
    let mut best_bic = bic(&best, errors)?;
    for m in 2..=m_max {
        let g = match em_fit(errors, m, seed, DEFAULT_MAX_ITER, DEFAULT_TOL) {
            Ok(g) => g,
            Err(Error::Argument(_) | Error::DegenerateData(_)) => break,
            Err(e) => return Err(e),
        };
        let b = bic(&g, errors)?;
        if b < best_bic {
            best = g;
            best_bic = b;
        }
    }
    let m = best.n_components();
    Ok((best, m))
}
