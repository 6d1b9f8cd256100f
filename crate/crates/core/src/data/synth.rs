use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EmbeddingBatch;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Region cluster centres are drawn from, per coordinate.
const CENTER_RANGE: (f64, f64) = (0.3, 0.7);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum SynthPreset {
    /// `n` points spread over `k` isotropic Gaussian blobs.
    Clusters { k: usize, spread: f64, n: usize },
    /// `n_in` blob points plus `n_out` points uniform in the box
    /// `[lo, hi]^d`, the latter labelled as outliers.
    ClustersPlusOutliers {
        k: usize,
        spread: f64,
        n_in: usize,
        n_out: usize,
        outlier_box: (f64, f64),
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    #[serde(flatten)]
    pub preset: SynthPreset,
    pub dim: usize,
    pub seed: u64,
}

impl SynthSpec {
    /// The desk-scale anomaly benchmark: 2000 inliers in two blobs plus
    /// 100 box outliers in ten dimensions.
    pub fn anomaly_default(seed: u64) -> Self {
        Self {
            preset: SynthPreset::ClustersPlusOutliers {
                k: 2,
                spread: 0.05,
                n_in: 2000,
                n_out: 100,
                outlier_box: (0.0, 1.0),
            },
            dim: 10,
            seed,
        }
    }

    /// A single clean blob for shift tests.
    pub fn clusters_default(n: usize, seed: u64) -> Self {
        Self {
            preset: SynthPreset::Clusters { k: 1, spread: 0.05, n },
            dim: 10,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (k, spread) = match self.preset {
            SynthPreset::Clusters { k, spread, .. } => (k, spread),
            SynthPreset::ClustersPlusOutliers {
                k,
                spread,
                n_in,
                n_out,
                outlier_box: (lo, hi),
            } => {
                if n_out >= n_in {
                    return Err(Error::Argument(format!(
                        "outliers must be the minority (n_out = {n_out}, n_in = {n_in})"
                    )));
                }
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::Argument(format!("invalid outlier box [{lo}, {hi}]")));
                }
                (k, spread)
            }
        };
        if k == 0 || self.dim == 0 {
            return Err(Error::Argument("need at least one cluster and one dimension".into()));
        }
        if !(spread >= 0.0 && spread.is_finite()) {
            return Err(Error::Argument(format!("spread must be non-negative, got {spread}")));
        }
        Ok(())
    }
}

fn blobs(k: usize, spread: f64, n: usize, d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|_| (0..d).map(|_| rng.random_range(CENTER_RANGE.0..CENTER_RANGE.1)).collect())
        .collect();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let c = &centers[i % k];
        out.extend(c.iter().map(|m| m + spread * normal.sample(rng)));
    }
    out
}

/// Generates a labelled synthetic table; inliers come first, then outliers.
pub fn synthesize(spec: &SynthSpec) -> Result<EmbeddingBatch> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let (data, labels) = match spec.preset {
        SynthPreset::Clusters { k, spread, n } => (blobs(k, spread, n, d, &mut rng), vec![false; n]),
        SynthPreset::ClustersPlusOutliers {
            k,
            spread,
            n_in,
            n_out,
            outlier_box: (lo, hi),
        } => {
            let mut data = blobs(k, spread, n_in, d, &mut rng);
            data.extend((0..n_out * d).map(|_| rng.random_range(lo..hi)));
            let mut labels = vec![false; n_in];
            labels.resize(n_in + n_out, true);
            (data, labels)
        }
    };
    let n = labels.len();
    EmbeddingBatch::new(Matrix::new(n, d, data)?, Some(labels), None)
}
