use dum_core::dum::{dum_loss, GroupBatch, LossConfig, LossVariant, VarianceNet};
use dum_core::numkernel::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random_net(d: usize, h: usize, seed: u64) -> VarianceNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = VarianceNet::new(d, h, &mut rng).unwrap();
    for p in net.params_mut() {
        for v in p.value.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    net
}

fn random_batch(groups: usize, m: usize, d: usize, seed: u64) -> GroupBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Matrix::from_fn(groups * 2 * m, d, |_, _| rng.random_range(-1.0..1.0));
    GroupBatch::new(x, m).unwrap()
}

/// Largest relative disagreement between analytic and central-difference
/// gradients over every parameter entry.
fn max_rel_error(net: &VarianceNet, batch: &GroupBatch, cfg: &LossConfig) -> f64 {
    let analytic = dum_loss(batch, net, cfg).unwrap().grads;
    let mut worst: f64 = 0.0;
    for (pi, g) in analytic.0.iter().enumerate() {
        for k in 0..g.data().len() {
            let eval = |delta: f64| {
                let mut probe = net.clone();
                probe.params_mut()[pi].value.data_mut()[k] += delta;
                dum_loss(batch, &probe, cfg).unwrap().loss
            };
            let fd = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
            let a = g.data()[k];
            // entries whose true gradient vanishes are compared absolutely
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-5);
            worst = worst.max(rel);
        }
    }
    worst
}

fn cfg(variant: LossVariant, normalize: bool) -> LossConfig {
    LossConfig {
        variant,
        normalize_poe_means: normalize,
        ..LossConfig::default()
    }
}

#[test]
fn plain_loss_matches_finite_differences() {
    for groups in 1..=4 {
        for normalize in [false, true] {
            let net = random_net(4, 8, groups as u64);
            let batch = random_batch(groups, 2, 4, 100 + groups as u64);
            let err = max_rel_error(&net, &batch, &cfg(LossVariant::PlainDot, normalize));
            assert!(err < 1e-4, "B = {groups}, normalize = {normalize}: {err}");
        }
    }
}

#[test]
fn infonce_loss_matches_finite_differences() {
    for groups in 2..=4 {
        for normalize in [false, true] {
            let net = random_net(4, 8, 10 + groups as u64);
            let batch = random_batch(groups, 2, 4, 200 + groups as u64);
            let err = max_rel_error(&net, &batch, &cfg(LossVariant::InfoNce, normalize));
            assert!(err < 1e-4, "B = {groups}, normalize = {normalize}: {err}");
        }
    }
}

#[test]
fn larger_groups_match_finite_differences() {
    let net = random_net(3, 6, 7);
    let batch = random_batch(3, 3, 3, 8);
    for c in [cfg(LossVariant::PlainDot, false), cfg(LossVariant::InfoNce, true)] {
        let err = max_rel_error(&net, &batch, &c);
        assert!(err < 1e-4, "{c:?}: {err}");
    }
}

#[test]
fn single_expert_groups_have_no_gradient() {
    for (variant, groups) in [(LossVariant::PlainDot, 1), (LossVariant::PlainDot, 3), (LossVariant::InfoNce, 3)] {
        for normalize in [false, true] {
            let net = random_net(4, 8, 3);
            let batch = random_batch(groups, 1, 4, 4);
            let out = dum_loss(&batch, &net, &cfg(variant, normalize)).unwrap();
            assert!(out.grads.max_abs() <= 1e-15, "{variant:?}: {}", out.grads.max_abs());
        }
    }
}
