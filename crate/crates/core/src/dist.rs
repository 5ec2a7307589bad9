//! Sampling distributions used for token counts, service times and outcomes.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::rng::Stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Constant(f64),
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Number of Bernoulli(`p`) trials up to and including the first success,
    /// capped at `max`. Support is `1..=max`.
    GeometricTruncated {
        p: f64,
        max: u32,
    },
    /// Uniform pick from a list of observed values.
    Empirical(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DistError {
    #[error("distribution parameter is not finite")]
    NotFinite,
    #[error("negative value in a non-negative distribution")]
    Negative,
    #[error("uniform bounds out of order: lo={lo} > hi={hi}")]
    Bounds { lo: f64, hi: f64 },
    #[error("geometric success probability {0} not in (0, 1]")]
    GeometricP(f64),
    #[error("geometric cap must be at least 1")]
    GeometricMax,
    #[error("empirical distribution has no values")]
    EmptyEmpirical,
}

impl Dist {
    /// Checks that the distribution is well formed and has non-negative support.
    pub fn validate(&self) -> Result<(), DistError> {
        match self {
            Dist::Constant(v) => check_value(*v),
            Dist::Uniform { lo, hi } => {
                check_value(*lo)?;
                check_value(*hi)?;
                if lo > hi {
                    return Err(DistError::Bounds { lo: *lo, hi: *hi });
                }
                Ok(())
            }
            Dist::GeometricTruncated { p, max } => {
                if !p.is_finite() || *p <= 0.0 || *p > 1.0 {
                    return Err(DistError::GeometricP(*p));
                }
                if *max == 0 {
                    return Err(DistError::GeometricMax);
                }
                Ok(())
            }
            Dist::Empirical(values) => {
                if values.is_empty() {
                    return Err(DistError::EmptyEmpirical);
                }
                values.iter().try_for_each(|v| check_value(*v))
            }
        }
    }

    pub fn sample(&self, rng: &mut Stream) -> f64 {
        match self {
            Dist::Constant(v) => *v,
            Dist::Uniform { lo, hi } => {
                if lo == hi {
                    *lo
                } else {
                    lo + (hi - lo) * rng.gen::<f64>()
                }
            }
            Dist::GeometricTruncated { p, max } => {
                let mut k = 1;
                while k < *max && rng.gen::<f64>() >= *p {
                    k += 1;
                }
                f64::from(k)
            }
            Dist::Empirical(values) => values[rng.gen_range(0..values.len())],
        }
    }

    /// Sample rounded to a whole token count.
    pub fn sample_tokens(&self, rng: &mut Stream) -> u64 {
        self.sample(rng).round().max(0.0) as u64
    }

    pub fn mean(&self) -> f64 {
        match self {
            Dist::Constant(v) => *v,
            Dist::Uniform { lo, hi } => 0.5 * (lo + hi),
            Dist::GeometricTruncated { p, max } => {
                // E[min(G, max)] = sum_{k=0}^{max-1} P(G > k) = sum (1-p)^k
                let q = 1.0 - p;
                (0..*max).map(|k| q.powi(k as i32)).sum()
            }
            Dist::Empirical(values) => values.iter().sum::<f64>() / values.len() as f64,
        }
    }

    /// Same shape with every value multiplied by `factor`. Geometric counts
    /// are converted to an empirical support when scaled.
    pub fn scaled(&self, factor: f64) -> Dist {
        match self {
            Dist::Constant(v) => Dist::Constant(v * factor),
            Dist::Uniform { lo, hi } => Dist::Uniform { lo: lo * factor, hi: hi * factor },
            Dist::GeometricTruncated { .. } if factor == 1.0 => self.clone(),
            Dist::GeometricTruncated { p, max } => {
                // expand to weighted support via the pmf at fixed resolution
                let q = 1.0 - p;
                let mut values = Vec::new();
                for k in 1..=*max {
                    let mass = if k < *max { q.powi(k as i32 - 1) * p } else { q.powi(k as i32 - 1) };
                    let copies = (mass * 1000.0).round() as usize;
                    values.extend(std::iter::repeat_n(f64::from(k) * factor, copies));
                }
                Dist::Empirical(values)
            }
            Dist::Empirical(values) => Dist::Empirical(values.iter().map(|v| v * factor).collect()),
        }
    }
}

fn check_value(v: f64) -> Result<(), DistError> {
    if !v.is_finite() {
        Err(DistError::NotFinite)
    } else if v < 0.0 {
        Err(DistError::Negative)
    } else {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn degenerate_uniform_is_exact() {
        let mut rng = substream(1, "t", &[]);
        assert_eq!(Dist::Uniform { lo: 0.1, hi: 0.1 }.sample(&mut rng), 0.1);
        assert_eq!(Dist::Constant(0.3).sample(&mut rng), 0.3);
    }

    #[test]
    fn geometric_mean_matches_enumeration() {
        let d = Dist::GeometricTruncated { p: 0.3, max: 4 };
        // P(1)=.3, P(2)=.21, P(3)=.147, P(4)=.343
        let exact = 0.3 + 2.0 * 0.21 + 3.0 * 0.147 + 4.0 * 0.343;
        assert!((d.mean() - exact).abs() < 1e-12);
    }

    #[test]
    fn geometric_samples_within_support() {
        let d = Dist::GeometricTruncated { p: 0.2, max: 3 };
        let mut rng = substream(3, "g", &[]);
        for _ in 0..1000 {
            let v = d.sample(&mut rng);
            assert!((1.0..=3.0).contains(&v));
        }
    }

    #[test]
    fn validation_rejects_bad_params() {
        assert_eq!(Dist::Uniform { lo: 2.0, hi: 1.0 }.validate(), Err(DistError::Bounds { lo: 2.0, hi: 1.0 }));
        assert_eq!(Dist::Constant(-1.0).validate(), Err(DistError::Negative));
        assert_eq!(Dist::Empirical(vec![]).validate(), Err(DistError::EmptyEmpirical));
        assert!(Dist::GeometricTruncated { p: 0.0, max: 3 }.validate().is_err());
    }

    #[test]
    fn scaling_scales_the_mean() {
        let d = Dist::Uniform { lo: 50.0, hi: 150.0 };
        assert_eq!(d.scaled(4.0).mean(), 400.0);
    }
}
