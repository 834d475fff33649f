//! Hyperparameter samplers for the prior configuration table.

use crate::error::{Error, Result};
use crate::rng::Rng;
use rand::Rng as _;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};

/// One row of the resolved prior configuration: a distribution over a
/// scalar (or a categorical choice), with optional clamping and rounding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HyperSampler {
    Fixed { value: f64 },
    /// Continuous U[low, high), or integer-uniform over {low, …, high}
    /// (inclusive) when `int` is set.
    Uniform { low: f64, high: f64, int: bool },
    LogUniform { low: f64, high: f64 },
    /// Truncated normal with log-uniform location: a mean is drawn
    /// log-uniformly in [low, high], the value from N(mean, mean/2),
    /// clamped to [min, max] and rounded when integer-flagged.
    Tnlu {
        low: f64,
        high: f64,
        min: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        max: Option<f64>,
        #[serde(default)]
        int: bool,
    },
    /// alpha ~ U(alpha_low, alpha_high), beta ~ U(beta_low, beta_high),
    /// value = scale · Beta(alpha, beta).
    BetaMetaUniform {
        alpha_low: f64,
        alpha_high: f64,
        beta_low: f64,
        beta_high: f64,
        scale: f64,
    },
    Choice { options: Vec<String> },
}

impl HyperSampler {
    pub fn fixed(value: f64) -> Self {
        HyperSampler::Fixed { value }
    }

    pub fn uniform_int(low: i64, high: i64) -> Self {
        HyperSampler::Uniform { low: low as f64, high: high as f64, int: true }
    }

    pub fn choice(options: &[&str]) -> Self {
        HyperSampler::Choice { options: options.iter().map(|s| s.to_string()).collect() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match self {
            HyperSampler::Fixed { .. } => Ok(()),
            HyperSampler::Uniform { low, high, .. } if low > high => {
                bad(format!("uniform: low {low} > high {high}"))
            }
            HyperSampler::LogUniform { low, high } if *low <= 0.0 || low > high => {
                bad(format!("log_uniform: bad bounds [{low}, {high}]"))
            }
            HyperSampler::Tnlu { low, high, min, max, .. } => {
                if *low <= 0.0 || low > high {
                    return bad(format!("tnlu: bad location bounds [{low}, {high}]"));
                }
                if let Some(mx) = max {
                    if min > mx {
                        return bad(format!("tnlu: min {min} > max {mx}"));
                    }
                }
                Ok(())
            }
            HyperSampler::BetaMetaUniform { alpha_low, alpha_high, beta_low, beta_high, .. } => {
                if *alpha_low <= 0.0 || alpha_low > alpha_high || *beta_low <= 0.0 || beta_low > beta_high {
                    return bad("beta_meta_uniform: bad alpha/beta bounds".into());
                }
                Ok(())
            }
            HyperSampler::Choice { options } if options.is_empty() => {
                bad("choice: empty option list".into())
            }
            _ => Ok(()),
        }
    }

    /// Draw a numeric value. Errors on `Choice` samplers.
    pub fn sample_f64(&self, rng: &mut Rng) -> Result<f64> {
        self.validate()?;
        match self {
            HyperSampler::Fixed { value } => Ok(*value),
            HyperSampler::Uniform { low, high, int } => {
                if *int {
                    let (lo, hi) = (low.round() as i64, high.round() as i64);
                    Ok(rng.random_range(lo..=hi) as f64)
                } else {
                    Ok(rng.random_range(*low..*high))
                }
            }
            HyperSampler::LogUniform { low, high } => {
                let u = rng.random_range(low.ln()..high.ln());
                Ok(u.exp())
            }
            HyperSampler::Tnlu { low, high, min, max, int } => {
                let mean = if low == high {
                    *low
                } else {
                    rng.random_range(low.ln()..high.ln()).exp()
                };
                let normal = Normal::new(mean, mean / 2.0)
                    .map_err(|e| Error::Config(format!("tnlu: {e}")))?;
                let mut v: f64 = normal.sample(rng);
                v = v.max(*min);
                if let Some(mx) = max {
                    v = v.min(*mx);
                }
                if *int {
                    v = v.round();
                }
                Ok(v)
            }
            HyperSampler::BetaMetaUniform { alpha_low, alpha_high, beta_low, beta_high, scale } => {
                let a = rng.random_range(*alpha_low..*alpha_high);
                let b = rng.random_range(*beta_low..*beta_high);
                let beta = Beta::new(a, b).map_err(|e| Error::Config(format!("beta: {e}")))?;
                Ok(scale * beta.sample(rng))
            }
            HyperSampler::Choice { .. } => {
                Err(Error::Config("choice sampler drawn as numeric".into()))
            }
        }
    }

    pub fn sample_usize(&self, rng: &mut Rng) -> Result<usize> {
        let v = self.sample_f64(rng)?;
        if v < 0.0 {
            return Err(Error::Config(format!("expected non-negative draw, got {v}")));
        }
        Ok(v.round() as usize)
    }

    /// Draw one of the options. Errors on numeric samplers.
    pub fn sample_choice<'a>(&'a self, rng: &mut Rng) -> Result<&'a str> {
        self.validate()?;
        match self {
            HyperSampler::Choice { options } => {
                let i = rng.random_range(0..options.len());
                Ok(&options[i])
            }
            _ => Err(Error::Config("numeric sampler drawn as choice".into())),
        }
    }

    pub fn sample_bool(&self, rng: &mut Rng) -> Result<bool> {
        match self.sample_choice(rng)? {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!("expected true/false choice, got {other}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn fixed_returns_exact_value() {
        let mut rng = rng_from_seed(1);
        let s = HyperSampler::fixed(0.287047);
        for _ in 0..5 {
            assert_eq!(s.sample_f64(&mut rng).unwrap(), 0.287047);
        }
    }

    #[test]
    fn tnlu_respects_min_clamp() {
        let mut rng = rng_from_seed(2);
        let s = HyperSampler::Tnlu { low: 5.0, high: 8.0, min: 2.0, max: None, int: true };
        for _ in 0..2000 {
            let v = s.sample_f64(&mut rng).unwrap();
            assert!(v >= 2.0, "tnlu draw {v} below min");
            assert_eq!(v, v.round());
        }
    }

    #[test]
    fn integer_uniform_frequencies_within_three_sigma() {
        let mut rng = rng_from_seed(3);
        let s = HyperSampler::uniform_int(1, 5);
        let n = 10_000;
        let mut counts = [0usize; 5];
        for _ in 0..n {
            let v = s.sample_f64(&mut rng).unwrap() as usize;
            counts[v - 1] += 1;
        }
        let p = 0.2;
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        for &c in &counts {
            let freq = c as f64 / n as f64;
            assert!((freq - p).abs() <= 3.0 * sigma, "frequency {freq} off");
        }
    }

    #[test]
    fn malformed_bounds_error() {
        let mut rng = rng_from_seed(4);
        let s = HyperSampler::Uniform { low: 5.0, high: 1.0, int: false };
        assert!(s.sample_f64(&mut rng).is_err());
    }
}
