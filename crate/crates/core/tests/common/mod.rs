#![allow(dead_code)]

use dualstop::jetnet::{Network, NetworkConfig, ParamVector};
use dualstop::loss::{loss_and_gradient, loss_j1, loss_j2, sample_batch, BatchSizes, DomainSpec, LossContext, LossKind};
use dualstop::market::{MarketParams, Payoff, UtilityFamily};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random topology, optional input scaling, perturbed biases.
pub fn random_net(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let depth = rng.random_range(2..=5);
    let width = rng.random_range(3..=24);
    let mut cfg = NetworkConfig::new(depth, width, seed);
    if rng.random_bool(0.5) {
        cfg = cfg.with_domain_scaling(1.0 / 72.0, 1.5);
    }
    let mut net = Network::new(cfg).unwrap();
    for p in net.params_mut().0.iter_mut() {
        *p += rng.random_range(-0.2..0.2);
    }
    net
}

pub fn rel(a: f64, b: f64) -> f64 {
    // floor keeps near-zero derivatives from producing meaningless ratios
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

/// `(first-order error, second-order error)` of the jet against central
/// differences of the value lane.
pub fn jet_fd_errors(net: &Network, tau: f64, z: f64) -> (f64, f64) {
    let j = net.forward_jet(tau, z);
    let f = |t: f64, z: f64| net.forward_jet(t, z).val;
    let ht = 1e-7;
    let hz = 1e-5;
    let d_tau = (f(tau + ht, z) - f(tau - ht, z)) / (2.0 * ht);
    let d_z = (f(tau, z + hz) - f(tau, z - hz)) / (2.0 * hz);
    let h2 = 1e-4;
    let d_zz = (f(tau, z + h2) - 2.0 * j.val + f(tau, z - h2)) / (h2 * h2);
    (rel(j.d_tau, d_tau).max(rel(j.d_z, d_z)), rel(j.d_zz, d_zz))
}

/// Samples a point of the training box.
pub fn random_point(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (rng.random_range(0.0..1.0 / 72.0), rng.random_range(-1.5..1.5))
}

fn loss_at(kind: LossKind, net: &Network, batch: &dualstop::loss::Batch, ctx: &LossContext<'_>) -> f64 {
    match kind {
        LossKind::Dgm => loss_j1(net, batch, ctx).unwrap().total,
        LossKind::Fbr => loss_j2(net, batch, ctx).unwrap().total,
    }
}

/// Relative gap between the analytic directional derivative of the loss and
/// its central difference along a random direction.
pub fn directional_check(kind: LossKind, scaled: bool, family: UtilityFamily, seed: u64) -> f64 {
    let market = MarketParams::example_one();
    let consts = market.derived().unwrap();
    let domain = DomainSpec::standard(&consts);
    let mut cfg = NetworkConfig::new(3, 10, seed);
    if scaled {
        cfg = cfg.with_domain_scaling(consts.tau_max, domain.c_z);
    }
    let net = Network::new(cfg).unwrap();
    let payoff = Payoff::new(family, market.k);
    let ctx = LossContext::new(consts, domain, &payoff);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let sizes = BatchSizes { interior: 40, bottom: 20, lateral: 12 };
    let batch = sample_batch(&domain, &sizes, &mut rng);
    let (_, grad) = loss_and_gradient(kind, &net, &batch, &ctx).unwrap();
    let dir: Vec<f64> = (0..grad.len()).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
    let analytic = grad.dot(&ParamVector(dir.clone()));
    let h = 1e-6;
    let shifted = |s: f64| {
        let p: Vec<f64> = net.params().0.iter().zip(&dir).map(|(a, d)| a + s * d).collect();
        let n = Network::from_params(cfg, ParamVector(p)).unwrap();
        loss_at(kind, &n, &batch, &ctx)
    };
    let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
    (analytic - fd).abs() / analytic.abs().max(1e-12)
}
