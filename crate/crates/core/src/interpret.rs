//! Per-sensor shares of a Fisher score.

use serde::{Deserialize, Serialize};

use crate::data::SensorMeta;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::score::effective_weights;

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct ContributionRanking<T> {
    /// Share of each sensor, `None` where the sensor was missing.
    pub shares: Vec<Option<T>>,
    /// Available sensors by descending share, lower index first on ties.
    pub order: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contributor {
    pub column: String,
    pub sensor: String,
    pub system: String,
    pub share: f64,
}

/// Shares `c_k = −2 λ_k log p_k / S_t`, using the same availability
/// renormalisation as the score. NaN p-values mark missing sensors.
pub fn contributions<T: Scalar>(pvals: &[T], weights: &[T], score: T) -> Result<ContributionRanking<T>> {
    if pvals.len() != weights.len() {
        return Err(Error::arg(format!(
            "{} p-values for {} weights",
            pvals.len(),
            weights.len()
        )));
    }
    if !(score > T::zero()) {
        return Err(Error::UndefinedRanking);
    }
    let eff = effective_weights(pvals, weights).ok_or(Error::UndefinedRanking)?;
    let shares: Vec<Option<T>> = pvals
        .iter()
        .zip(&eff)
        .map(|(&p, &w)| (!p.is_nan()).then(|| -T::two() * w * p.ln() / score))
        .collect();
    let mut order: Vec<usize> = (0..shares.len()).filter(|&k| shares[k].is_some()).collect();
    order.sort_by(|&a, &b| {
        shares[b]
            .partial_cmp(&shares[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(ContributionRanking { shares, order })
}

/// The first `min(k, available)` contributors with their system names.
pub fn top_k<T: Scalar>(ranking: &ContributionRanking<T>, meta: &[SensorMeta], k: usize) -> Result<Vec<Contributor>> {
    if k == 0 {
        return Err(Error::arg("top-k needs k ≥ 1"));
    }
    if meta.len() != ranking.shares.len() {
        return Err(Error::arg("sensor metadata does not match the ranking"));
    }
    Ok(ranking
        .order
        .iter()
        .take(k)
        .map(|&i| Contributor {
            column: meta[i].column(),
            sensor: meta[i].name.clone(),
            system: meta[i].system.clone(),
            share: ranking.shares[i].map_or(0.0, |s| s.to_f64_lossy()),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::fisher_step;
    use proptest::prelude::*;

    fn meta(d: usize) -> Vec<SensorMeta> {
        (0..d).map(|k| SensorMeta::new("sys", &format!("s{k}"), "v")).collect()
    }

    fn rank(p: &[f64], w: &[f64]) -> ContributionRanking<f64> {
        contributions(p, w, fisher_step(p, w).unwrap()).unwrap()
    }

    #[test]
    fn two_sensor_example() {
        let r = rank(&[1e-6, 0.5], &[0.5, 0.5]);
        let oracle = 1e6f64.ln() / (1e6f64.ln() + 2f64.ln());
        assert!((r.shares[0].unwrap() - oracle).abs() < 1e-12);
        assert!((r.shares[0].unwrap() - 0.9522).abs() < 1e-4);
        assert!((r.shares[1].unwrap() - 0.0478).abs() < 1e-4);
        let top = top_k(&r, &meta(2), 1).unwrap();
        assert_eq!(top.len(), 1);
        assert_eq!(top[0].sensor, "s0");
        assert_eq!(top[0].system, "sys");
    }

    #[test]
    fn single_and_tied_sensors() {
        assert_eq!(rank(&[0.2], &[3.0]).shares, vec![Some(1.0)]);
        let r = rank(&[0.1, 0.1, 0.1], &[1.0, 1.0, 1.0]);
        assert_eq!(r.order, vec![0, 1, 2]);
        let s = r.shares[0].unwrap();
        assert!(r.shares.iter().all(|v| (v.unwrap() - s).abs() < 1e-15));
    }

    #[test]
    fn truncation_and_ordering() {
        let r = rank(&[0.5, 1e-3, 0.05], &[1.0, 1.0, 1.0]);
        let top = top_k(&r, &meta(3), 5).unwrap();
        assert_eq!(top.len(), 3);
        assert_eq!(top.iter().map(|c| c.sensor.as_str()).collect::<Vec<_>>(), vec!["s1", "s2", "s0"]);
        assert!(top.windows(2).all(|w| w[0].share >= w[1].share));
        assert!(top_k(&r, &meta(3), 0).is_err());
    }

    #[test]
    fn zero_score_is_undefined() {
        assert!(matches!(contributions(&[1.0, 1.0], &[1.0, 1.0], 0.0), Err(Error::UndefinedRanking)));
    }

    #[test]
    fn missing_sensor_is_left_out() {
        let r = rank(&[0.01, f64::NAN, 0.2], &[1.0, 1.0, 1.0]);
        assert_eq!(r.shares[1], None);
        assert_eq!(r.order, vec![0, 2]);
        let total: f64 = r.shares.iter().flatten().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn shares_sum_to_one_and_ignore_weight_scale(
            p in prop::collection::vec(1e-10f64..0.99, 1..10),
            w in prop::collection::vec(0.01f64..3.0, 10),
            c in 0.01f64..100.0,
        ) {
            let w = &w[..p.len()];
            let r = rank(&p, w);
            let total: f64 = r.shares.iter().flatten().sum();
            prop_assert!((total - 1.0).abs() < 1e-9);
            let wc: Vec<f64> = w.iter().map(|v| v * c).collect();
            let rc = rank(&p, &wc);
            for (a, b) in r.shares.iter().zip(&rc.shares) {
                prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-9);
            }
        }

        #[test]
        fn lowering_a_p_value_never_lowers_its_rank(
            p in prop::collection::vec(1e-10f64..0.99, 2..8),
            k in 0usize..8,
            f in 0.001f64..1.0,
        ) {
            let k = k % p.len();
            let w = vec![1.0; p.len()];
            let pos = |r: &ContributionRanking<f64>| r.order.iter().position(|&i| i == k).unwrap();
            let before = pos(&rank(&p, &w));
            let mut q = p.clone();
            q[k] *= f;
            prop_assert!(pos(&rank(&q, &w)) <= before);
        }
    }
}
