//! Diagonal Gaussians and their product-of-experts aggregation.
//!
//! The product of `m` Gaussians with precisions `ωᵢ = 1/varᵢ` has, per
//! dimension, precision `Σ ωᵢ` and mean `(Σ μᵢ ωᵢ) / Σ ωᵢ`.

use crate::error::{Error, Result};

/// Smallest variance admitted before inversion.
pub const VAR_MIN: f64 = 1e-6;
/// Largest variance admitted before inversion.
pub const VAR_MAX: f64 = 1e6;

#[inline]
pub fn clamp_variance(v: f64) -> f64 {
    v.clamp(VAR_MIN, VAR_MAX)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagGaussian {
    pub mean: Vec<f64>,
    /// Diagonal of the covariance, clamped to `[VAR_MIN, VAR_MAX]`.
    pub variance: Vec<f64>,
}

impl DiagGaussian {
    /// Validates shapes and finiteness, clamping variances into range.
    pub fn new(mean: Vec<f64>, variance: Vec<f64>) -> Result<Self> {
        if mean.len() != variance.len() {
            return Err(Error::dim("DiagGaussian::new", mean.len(), variance.len()));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite("Gaussian mean".into()));
        }
        if variance.iter().any(|v| v.is_nan() || *v <= 0.0) {
            return Err(Error::Domain("Gaussian variance must be positive".into()));
        }
        let variance = variance.into_iter().map(clamp_variance).collect();
        Ok(Self { mean, variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn precision(&self) -> Vec<f64> {
        self.variance.iter().map(|v| 1.0 / v).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoeGaussian {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub experts: usize,
}

impl PoeGaussian {
    pub fn into_gaussian(self) -> DiagGaussian {
        DiagGaussian {
            mean: self.mean,
            variance: self.variance,
        }
    }
}

fn check_experts(experts: &[DiagGaussian]) -> Result<usize> {
    let first = experts
        .first()
        .ok_or_else(|| Error::Argument("product of experts needs at least one expert".into()))?;
    let d = first.dim();
    for (i, e) in experts.iter().enumerate() {
        if e.dim() != d || e.variance.len() != d {
            return Err(Error::dim("poe_combine", d, format!("{} (expert {i})", e.dim())));
        }
    }
    Ok(d)
}

/// Product of diagonal-Gaussian experts.
///
/// A single expert is returned unchanged. For two or more, each dimension's
/// sums are accumulated in a canonical order (ascending variance, then mean)
/// so the result is bit-identical under any reordering of `experts`.
pub fn poe_combine(experts: &[DiagGaussian]) -> Result<PoeGaussian> {
    let d = check_experts(experts)?;
    let m = experts.len();
    if m == 1 {
        return Ok(PoeGaussian {
            mean: experts[0].mean.clone(),
            variance: experts[0].variance.clone(),
            experts: 1,
        });
    }
    let mut mean = Vec::with_capacity(d);
    let mut variance = Vec::with_capacity(d);
    let mut order: Vec<usize> = (0..m).collect();
    for k in 0..d {
        order.sort_by(|&a, &b| {
            let (ea, eb) = (&experts[a], &experts[b]);
            ea.variance[k]
                .total_cmp(&eb.variance[k])
                .then(ea.mean[k].total_cmp(&eb.mean[k]))
        });
        let mut precision = 0.0;
        let mut weighted = 0.0;
        for &i in &order {
            let w = 1.0 / clamp_variance(experts[i].variance[k]);
            precision += w;
            weighted += experts[i].mean[k] * w;
        }
        mean.push(weighted / precision);
        variance.push(1.0 / precision);
    }
    Ok(PoeGaussian {
        mean,
        variance,
        experts: m,
    })
}

/// Gradient of a scalar objective with respect to one expert's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrad {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

/// Back-propagates gradients on the product's mean and variance to every
/// expert's mean and variance.
///
/// With `P = Σ ωᵢ`, `z` the product mean and `V = 1/P`:
/// `∂z/∂μᵢ = ωᵢ/P`, `∂z/∂varᵢ = −(μᵢ − z) ωᵢ²/P`, `∂V/∂varᵢ = (ωᵢ V)²`.
pub fn poe_backward(
    experts: &[DiagGaussian],
    combined: &PoeGaussian,
    grad_mean: &[f64],
    grad_variance: &[f64],
) -> Result<Vec<ExpertGrad>> {
    let d = check_experts(experts)?;
    if combined.mean.len() != d || grad_mean.len() != d || grad_variance.len() != d {
        return Err(Error::dim(
            "poe_backward",
            d,
            format!(
                "combined {}, grad_mean {}, grad_variance {}",
                combined.mean.len(),
                grad_mean.len(),
                grad_variance.len()
            ),
        ));
    }
    if experts.len() == 1 {
        return Ok(vec![ExpertGrad {
            mean: grad_mean.to_vec(),
            variance: grad_variance.to_vec(),
        }]);
    }
    let grads = experts
        .iter()
        .map(|e| {
            let mut gm = Vec::with_capacity(d);
            let mut gv = Vec::with_capacity(d);
            for k in 0..d {
                let v_out = combined.variance[k];
                let w = 1.0 / clamp_variance(e.variance[k]);
                let wv = w * v_out;
                gm.push(grad_mean[k] * wv);
                let dz_dvar = -(e.mean[k] - combined.mean[k]) * w * wv;
                gv.push(grad_mean[k] * dz_dvar + grad_variance[k] * wv * wv);
            }
            ExpertGrad {
                mean: gm,
                variance: gv,
            }
        })
        .collect();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn g(mean: &[f64], var: &[f64]) -> DiagGaussian {
        DiagGaussian::new(mean.to_vec(), var.to_vec()).unwrap()
    }

    fn random_expert(d: usize, rng: &mut impl Rng) -> DiagGaussian {
        let mean = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
        let var = (0..d).map(|_| 10f64.powf(rng.random_range(-2.0..2.0))).collect();
        DiagGaussian::new(mean, var).unwrap()
    }

    #[test]
    fn single_expert_is_identity() {
        let e = g(&[0.3, -1.7, 1e5], &[0.25, 3.0, 1e-3]);
        let p = poe_combine(std::slice::from_ref(&e)).unwrap();
        assert_eq!(p.mean, e.mean);
        assert_eq!(p.variance, e.variance);
        assert_eq!(p.experts, 1);
    }

    #[test]
    fn equal_variances_average() {
        let p = poe_combine(&[g(&[0.0], &[1.0]), g(&[2.0], &[1.0])]).unwrap();
        assert_eq!(p.mean, vec![1.0]);
        assert_eq!(p.variance, vec![0.5]);
    }

    #[test]
    fn unequal_variances_precision_weighted() {
        let p = poe_combine(&[g(&[0.0], &[0.1]), g(&[10.0], &[10.0])]).unwrap();
        // (0/0.1 + 10/10) / (1/0.1 + 1/10) = 1/10.1
        assert_relative_eq!(p.mean[0], 1.0 / 10.1, max_relative = 1e-14);
        assert_relative_eq!(p.variance[0], 1.0 / 10.1, max_relative = 1e-14);
    }

    #[test]
    fn argument_errors() {
        assert!(matches!(poe_combine(&[]), Err(Error::Argument(_))));
        let r = poe_combine(&[g(&[0.0], &[1.0]), g(&[0.0, 1.0], &[1.0, 1.0])]);
        assert!(matches!(r, Err(Error::Dimension { .. })));
        assert!(DiagGaussian::new(vec![0.0], vec![0.0]).is_err());
        assert!(DiagGaussian::new(vec![f64::NAN], vec![1.0]).is_err());
    }

    #[test]
    fn variance_is_clamped_on_construction() {
        let e = g(&[0.0, 0.0], &[1e-12, 1e12]);
        assert_eq!(e.variance, vec![VAR_MIN, VAR_MAX]);
    }

    #[test]
    fn backward_single_expert() {
        let e = g(&[1.0, 2.0], &[0.5, 4.0]);
        let p = poe_combine(std::slice::from_ref(&e)).unwrap();
        let gr = poe_backward(&[e], &p, &[1.0, 1.0], &[0.0, 0.0]).unwrap();
        assert_eq!(gr[0].mean, vec![1.0, 1.0]);
        assert_eq!(gr[0].variance, vec![0.0, 0.0]);
    }

    #[test]
    fn backward_symmetric_pair() {
        let es = [g(&[1.0], &[2.0]), g(&[5.0], &[2.0])];
        let p = poe_combine(&es).unwrap();
        let gr = poe_backward(&es, &p, &[1.0], &[0.0]).unwrap();
        assert_eq!(gr[0].mean, vec![0.5]);
        assert_eq!(gr[1].mean, vec![0.5]);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let (m, d) = (3, 4);
        let experts: Vec<_> = (0..m).map(|_| random_expert(d, &mut rng)).collect();
        let gm: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let objective = |es: &[DiagGaussian]| {
            let p = poe_combine(es).unwrap();
            (0..d).map(|k| gm[k] * p.mean[k] + gv[k] * p.variance[k]).sum::<f64>()
        };
        let p = poe_combine(&experts).unwrap();
        let grads = poe_backward(&experts, &p, &gm, &gv).unwrap();
        // five-point stencil with a step relative to the perturbed value
        let rel = 1e-3;
        for i in 0..m {
            for k in 0..d {
                for which in 0..2 {
                    let (analytic, step) = if which == 0 {
                        (grads[i].mean[k], rel)
                    } else {
                        (grads[i].variance[k], rel * experts[i].variance[k])
                    };
                    let at = |offset: f64| {
                        let mut es = experts.clone();
                        if which == 0 {
                            es[i].mean[k] += offset;
                        } else {
                            es[i].variance[k] += offset;
                        }
                        objective(&es)
                    };
                    let fd = (-at(2.0 * step) + 8.0 * at(step) - 8.0 * at(-step) + at(-2.0 * step)) / (12.0 * step);
                    let scale = analytic.abs().max(fd.abs()).max(1e-12);
                    assert!(
                        (analytic - fd).abs() / scale < 1e-6,
                        "expert {i} dim {k} which {which}: {analytic} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn degenerate_limit_tracks_confident_expert() {
        let es = [g(&[3.0, -2.0], &[VAR_MIN, VAR_MIN]), g(&[-1.0, 5.0], &[1.0, 0.5]), g(&[0.0, 0.0], &[2.0, 2.0])];
        let p = poe_combine(&es).unwrap();
        assert!((p.mean[0] - 3.0).abs() < 1e-5);
        assert!((p.mean[1] + 2.0).abs() < 1e-4);
    }

    fn experts_strategy() -> impl Strategy<Value = Vec<DiagGaussian>> {
        (1usize..6, 1usize..5).prop_flat_map(|(m, d)| {
            prop::collection::vec(
                (
                    prop::collection::vec(-10.0f64..10.0, d),
                    prop::collection::vec(-5.0f64..5.0, d),
                ),
                m,
            )
            .prop_map(|v| {
                v.into_iter()
                    .map(|(mean, logv)| {
                        DiagGaussian::new(mean, logv.into_iter().map(|l| 10f64.powf(l)).collect()).unwrap()
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn permutation_invariant_exactly(experts in experts_strategy(), seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = experts.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(poe_combine(&experts).unwrap(), poe_combine(&shuffled).unwrap());
        }

        #[test]
        fn contraction_and_mean_bounds(experts in experts_strategy()) {
            let p = poe_combine(&experts).unwrap();
            for k in 0..p.mean.len() {
                let vmin = experts.iter().map(|e| e.variance[k]).fold(f64::INFINITY, f64::min);
                if experts.len() >= 2 {
                    prop_assert!(p.variance[k] < vmin);
                } else {
                    prop_assert!(p.variance[k] <= vmin);
                }
                let lo = experts.iter().map(|e| e.mean[k]).fold(f64::INFINITY, f64::min);
                let hi = experts.iter().map(|e| e.mean[k]).fold(f64::NEG_INFINITY, f64::max);
                let tol = 1e-12 * lo.abs().max(hi.abs()).max(1.0);
                prop_assert!(p.mean[k] >= lo - tol && p.mean[k] <= hi + tol);
            }
        }

        #[test]
        fn pairwise_folding_is_associative(experts in experts_strategy()) {
            let all = poe_combine(&experts).unwrap();
            let mut acc = experts[0].clone();
            for e in &experts[1..] {
                acc = poe_combine(&[acc, e.clone()]).unwrap().into_gaussian();
            }
            for k in 0..all.mean.len() {
                let mscale = all.mean[k].abs().max(experts.iter().map(|e| e.mean[k].abs()).fold(0.0, f64::max)).max(1e-300);
                prop_assert!((all.mean[k] - acc.mean[k]).abs() <= 1e-10 * mscale);
                prop_assert!((all.variance[k] - acc.variance[k]).abs() <= 1e-10 * all.variance[k]);
            }
        }
    }
}
