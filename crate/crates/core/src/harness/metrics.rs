//! Empirical distributions of error samples.

use serde::{Deserialize, Serialize};

use crate::error::{DisacError, Result};

fn sorted(samples: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(DisacError::Empty("no samples".into()));
    }
    if samples.iter().any(|s| s.is_nan()) {
        return Err(DisacError::InvalidArgument("samples contain NaN".into()));
    }
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

/// Fraction of samples `≤ query`.
pub fn empirical_cdf(samples: &[f64], query: f64) -> Result<f64> {
    let v = sorted(samples)?;
    let count = v.partition_point(|s| *s <= query);
    Ok(count as f64 / v.len() as f64)
}

/// Inverse of the empirical CDF, interpolating linearly between the order
/// statistics `(x_(i), i/n)`. Levels below `1/n` map to the smallest sample.
pub fn percentile(samples: &[f64], level: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&level) {
        return Err(DisacError::InvalidArgument(format!("level {level} outside [0, 1]")));
    }
    let v = sorted(samples)?;
    Ok(percentile_sorted(&v, level))
}

fn percentile_sorted(v: &[f64], level: f64) -> f64 {
    let n = v.len();
    let mut pos = level * n as f64;
    // Levels i/n lose a few ulps in the product; snap them to the order statistic.
    if (pos - pos.round()).abs() < 1e-9 {
        pos = pos.round();
    }
    if pos <= 1.0 {
        return v[0];
    }
    let i = (pos.floor() as usize).min(n);
    if i >= n {
        return v[n - 1];
    }
    let frac = pos - i as f64;
    v[i - 1] + frac * (v[i] - v[i - 1])
}

/// Percentile table and CDF support points of one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub p50: f64,
    pub p80: f64,
    pub p90: f64,
    pub p95: f64,
    pub max: f64,
    /// `(x_(i), i/n)` for every order statistic.
    pub cdf: Vec<(f64, f64)>,
}

impl Distribution {
    /// `None` for an empty sample set.
    pub fn from_samples(samples: &[f64]) -> Option<Self> {
        let v = sorted(samples).ok()?;
        let n = v.len();
        Some(Self {
            count: n,
            mean: v.iter().sum::<f64>() / n as f64,
            p50: percentile_sorted(&v, 0.5),
            p80: percentile_sorted(&v, 0.8),
            p90: percentile_sorted(&v, 0.9),
            p95: percentile_sorted(&v, 0.95),
            max: v[n - 1],
            cdf: v.iter().enumerate().map(|(i, x)| (*x, (i + 1) as f64 / n as f64)).collect(),
        })
    }
}

/// Median, or `None` for no samples.
pub fn median(samples: &[f64]) -> Option<f64> {
    percentile(samples, 0.5).ok()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cdf_examples() {
        let s = [0.1, 0.2, 0.3, 0.4, 0.5];
        assert!((empirical_cdf(&s, 0.3).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(empirical_cdf(&s, 0.05).unwrap(), 0.0);
        assert_eq!(empirical_cdf(&s, 0.5).unwrap(), 1.0);
        assert_eq!(empirical_cdf(&s, 7.0).unwrap(), 1.0);
        assert!(empirical_cdf(&[], 0.0).is_err());
    }

    #[test]
    fn single_sample_is_a_step() {
        let d = Distribution::from_samples(&[0.7]).unwrap();
        assert_eq!(d.cdf, vec![(0.7, 1.0)]);
        assert_eq!(empirical_cdf(&[0.7], 0.69).unwrap(), 0.0);
        assert_eq!(empirical_cdf(&[0.7], 0.7).unwrap(), 1.0);
        assert_eq!(d.p50, 0.7);
    }

    #[test]
    fn percentile_interpolates() {
        let s = [4.0, 1.0, 3.0, 2.0];
        assert_eq!(percentile(&s, 0.5).unwrap(), 2.0);
        assert!((percentile(&s, 0.625).unwrap() - 2.5).abs() < 1e-15);
        assert_eq!(percentile(&s, 1.0).unwrap(), 4.0);
        assert_eq!(percentile(&s, 0.1).unwrap(), 1.0);
    }

    proptest! {
        #[test]
        fn cdf_is_monotone(samples in prop::collection::vec(-5.0f64..5.0, 1..40), a in -6.0f64..6.0, b in -6.0f64..6.0) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(empirical_cdf(&samples, lo).unwrap() <= empirical_cdf(&samples, hi).unwrap());
        }

        #[test]
        fn percentiles_invert_the_cdf(samples in prop::collection::hash_set(-1000i32..1000, 1..40)) {
            let s: Vec<f64> = samples.into_iter().map(|v| v as f64 * 0.01).collect();
            let n = s.len();
            for i in 1..=n {
                let level = i as f64 / n as f64;
                let q = percentile(&s, level).unwrap();
                prop_assert!((empirical_cdf(&s, q).unwrap() - level).abs() < 1e-9);
            }
        }
    }
}
