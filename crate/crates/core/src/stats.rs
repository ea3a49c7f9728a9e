//! Small descriptive-statistics helpers.

use crate::scalar::Scalar;

pub fn mean<T: Scalar>(xs: &[T]) -> T {
    xs.iter().copied().sum::<T>() / T::of_usize(xs.len())
}

/// Unbiased sample variance (n − 1 denominator). Zero for fewer than two values.
pub fn variance<T: Scalar>(xs: &[T]) -> T {
    if xs.len() < 2 {
        return T::zero();
    }
    let m = mean(xs);
    xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::of_usize(xs.len() - 1)
}

/// Population standard deviation (n denominator), as used by maximum likelihood.
pub fn std_dev_ml<T: Scalar>(xs: &[T]) -> T {
    let m = mean(xs);
    (xs.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / T::of_usize(xs.len())).sqrt()
}

/// Median; even counts take the mean of the two middle values.
pub fn median<T: Scalar>(xs: &[T]) -> Option<T> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("median input must not contain NaN"));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) * T::half()
    })
}

/// Linear-interpolation quantile of sorted data at level `p ∈ [0, 1]`.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], p: T) -> T {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * T::of_usize(n - 1);
    let lo = pos.floor().to_usize().unwrap_or(0).min(n - 1);
    let hi = (lo + 1).min(n - 1);
    let frac = pos - T::of_usize(lo);
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Kolmogorov–Smirnov statistic of a sample against a continuous CDF.
pub fn ks_statistic<T: Scalar, F: Fn(T) -> T>(samples: &[T], cdf: F) -> T {
    let mut v = samples.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("KS input must not contain NaN"));
    let n = T::of_usize(v.len());
    let mut d = T::zero();
    for (i, &x) in v.iter().enumerate() {
        let f = cdf(x);
        let above = T::of_usize(i + 1) / n - f;
        let below = f - T::of_usize(i) / n;
        d = d.max(above).max(below);
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[1.0, 9.0, 5.0]), Some(5.0));
        assert_eq!(median(&[2.0, 4.0]), Some(3.0));
        assert_eq!(median::<f64>(&[]), None);
    }

    #[test]
    fn variance_is_unbiased() {
        assert_eq!(variance(&[1.0, 2.0, 3.0, 4.0]), 5.0 / 3.0);
        assert_eq!(std_dev_ml(&[1.0, 3.0]), 1.0);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [0.0, 10.0, 20.0];
        assert_eq!(quantile_sorted(&s, 0.25), 5.0);
        assert_eq!(quantile_sorted(&s, 1.0), 20.0);
    }

    #[test]
    fn ks_of_perfect_grid_is_small() {
        let n = 1000;
        let xs: Vec<f64> = (0..n).map(|i| (i as f64 + 0.5) / n as f64).collect();
        let d = ks_statistic(&xs, |x| x);
        assert!((d - 0.5 / n as f64).abs() < 1e-12);
    }
}
