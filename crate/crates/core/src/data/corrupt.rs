use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EmbeddingBatch;
use crate::error::{Error, Result};

/// Vector analogues of common image corruptions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum CorruptionKind {
    /// Adds `N(0, σ²)` to every entry.
    Gaussian { sigma: f64 },
    /// Adds `U(−a, a)` to every entry.
    Uniform { amplitude: f64 },
    /// Each entry independently, with probability `rate`, becomes `±magnitude`.
    Impulse { rate: f64, magnitude: f64 },
    /// Each entry independently, with probability `p`, becomes 0.
    FeatureDropout { p: f64 },
    /// Multiplies every entry by `factor`.
    Scale { factor: f64 },
    /// Centred moving average over `window` adjacent columns, truncated at
    /// the edges.
    Smooth { window: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    #[serde(flatten)]
    pub kind: CorruptionKind,
    pub seed: u64,
}

impl CorruptionKind {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: String| Err(Error::Argument(what));
        match *self {
            CorruptionKind::Gaussian { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => {
                bad(format!("gaussian sigma must be finite and non-negative, got {sigma}"))
            }
            CorruptionKind::Uniform { amplitude } if !(amplitude >= 0.0 && amplitude.is_finite()) => {
                bad(format!("uniform amplitude must be finite and non-negative, got {amplitude}"))
            }
            CorruptionKind::Impulse { rate, magnitude } if !(0.0..=1.0).contains(&rate) || !magnitude.is_finite() => {
                bad(format!("impulse needs rate in [0,1] and finite magnitude, got {rate}, {magnitude}"))
            }
            CorruptionKind::FeatureDropout { p } if !(0.0..=1.0).contains(&p) => {
                bad(format!("dropout probability must lie in [0,1], got {p}"))
            }
            CorruptionKind::Scale { factor } if !factor.is_finite() => bad(format!("scale factor {factor} is not finite")),
            CorruptionKind::Smooth { window: 0 } => bad("smoothing window must be at least 1".into()),
            _ => Ok(()),
        }
    }
}

/// Applies a corruption to the feature columns. Labels are left untouched and
/// the result is a deterministic function of `(batch, spec)`.
pub fn corrupt(batch: &EmbeddingBatch, spec: &CorruptionSpec) -> Result<EmbeddingBatch> {
    spec.kind.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut x = batch.features.clone();
    match spec.kind {
        CorruptionKind::Gaussian { sigma } => {
            let normal = Normal::new(0.0, 1.0).expect("unit normal");
            for v in x.data_mut() {
                *v += sigma * normal.sample(&mut rng);
            }
        }
        CorruptionKind::Uniform { amplitude } => {
            for v in x.data_mut() {
                *v += amplitude * rng.random_range(-1.0..=1.0);
            }
        }
        CorruptionKind::Impulse { rate, magnitude } => {
            for v in x.data_mut() {
                if rng.random_bool(rate) {
                    *v = if rng.random_bool(0.5) { magnitude } else { -magnitude };
                }
            }
        }
        CorruptionKind::FeatureDropout { p } => {
            for v in x.data_mut() {
                if rng.random_bool(p) {
                    *v = 0.0;
                }
            }
        }
        CorruptionKind::Scale { factor } => {
            for v in x.data_mut() {
                *v *= factor;
            }
        }
        CorruptionKind::Smooth { window } => {
            let d = x.cols();
            let before = (window - 1) / 2;
            let after = window - 1 - before;
            for r in 0..x.rows() {
                let src = batch.features.row(r);
                let dst = x.row_mut(r);
                for (c, out) in dst.iter_mut().enumerate() {
                    let lo = c.saturating_sub(before);
                    let hi = (c + after).min(d - 1);
                    let span = &src[lo..=hi];
                    *out = span.iter().sum::<f64>() / span.len() as f64;
                }
            }
        }
    }
    Ok(batch.with_features(x))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Matrix;

    fn batch(n: usize, d: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = Matrix::from_fn(n, d, |_, _| rng.random_range(0.0..1.0));
        EmbeddingBatch::new(m, Some((0..n).map(|i| i % 3 == 0).collect()), None).unwrap()
    }

    fn spec(kind: CorruptionKind) -> CorruptionSpec {
        CorruptionSpec { kind, seed: 17 }
    }

    #[test]
    fn zero_sigma_is_identity() {
        let b = batch(20, 4, 1);
        let c = corrupt(&b, &spec(CorruptionKind::Gaussian { sigma: 0.0 })).unwrap();
        assert_eq!(c, b);
    }

    #[test]
    fn saturated_impulse() {
        let b = batch(20, 4, 2);
        let c = corrupt(
            &b,
            &spec(CorruptionKind::Impulse {
                rate: 1.0,
                magnitude: 1.0,
            }),
        )
        .unwrap();
        assert!(c.features.data().iter().all(|v| *v == 1.0 || *v == -1.0));
        assert_eq!(c.labels, b.labels);
    }

    #[test]
    fn gaussian_adds_expected_variance() {
        let b = batch(10_000, 3, 3);
        let c = corrupt(&b, &spec(CorruptionKind::Gaussian { sigma: 0.1 })).unwrap();
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
        };
        // variance of the added component, free of the sample cross term
        for col in 0..3 {
            let added: Vec<f64> = c.features.column(col).iter().zip(b.features.column(col)).map(|(x, y)| x - y).collect();
            let inc = var(&added);
            assert!((inc - 0.01).abs() < 0.001, "column {col}: variance increase {inc}");
        }
    }

    #[test]
    fn scale_smooth_dropout() {
        let b = EmbeddingBatch::unlabeled(Matrix::from_rows(&[[1.0, 2.0, 3.0, 4.0]]).unwrap());
        let s = corrupt(&b, &spec(CorruptionKind::Scale { factor: 2.0 })).unwrap();
        assert_eq!(s.features.data(), &[2.0, 4.0, 6.0, 8.0]);
        let sm = corrupt(&b, &spec(CorruptionKind::Smooth { window: 3 })).unwrap();
        assert_eq!(sm.features.data(), &[1.5, 2.0, 3.0, 3.5]);
        let id = corrupt(&b, &spec(CorruptionKind::Smooth { window: 1 })).unwrap();
        assert_eq!(id, b);
        let all = corrupt(&b, &spec(CorruptionKind::FeatureDropout { p: 1.0 })).unwrap();
        assert!(all.features.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn seeded_and_reproducible() {
        let b = batch(50, 5, 4);
        let k = CorruptionKind::Uniform { amplitude: 0.3 };
        assert_eq!(corrupt(&b, &spec(k)).unwrap(), corrupt(&b, &spec(k)).unwrap());
        let other = CorruptionSpec { kind: k, seed: 18 };
        assert_ne!(corrupt(&b, &spec(k)).unwrap(), corrupt(&b, &other).unwrap());
    }

    #[test]
    fn invalid_parameters() {
        let b = batch(5, 2, 5);
        for k in [
            CorruptionKind::Gaussian { sigma: -1.0 },
            CorruptionKind::Impulse { rate: 1.5, magnitude: 1.0 },
            CorruptionKind::FeatureDropout { p: -0.1 },
            CorruptionKind::Smooth { window: 0 },
            CorruptionKind::Scale { factor: f64::NAN },
        ] {
            assert!(matches!(corrupt(&b, &spec(k)), Err(Error::Argument(_))));
        }
    }
}
