use caama::mech::ValuationProfile;
use caama::mech::ama_outcome;
use caama::relaxation::{loss_and_grad, soft_payment_utility, RawAmaParams, Stage};
use caama::{distributions, CorPaymentNet, DistributionSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-6;

fn random_raw(rng: &mut ChaCha8Rng, n: usize, m: usize, s: usize) -> RawAmaParams {
    let mut raw = RawAmaParams::zeros(n, m, s);
    for x in raw.menu_logits.iter_mut() {
        *x = rng.random_range(-2.0..2.0);
    }
    for x in raw.weight_logits.iter_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    for x in raw.boosts.iter_mut() {
        *x = rng.random_range(-0.2..0.2);
    }
    raw
}

fn loss_at(batch: &[ValuationProfile], raw: &RawAmaParams, net: &CorPaymentNet, gamma: f64, t: f64, stage: Stage) -> f64 {
    loss_and_grad(batch, raw, Some(net), gamma, t, stage).unwrap().loss
}

fn far_from_kinks(batch: &[ValuationProfile], raw: &RawAmaParams, net: &CorPaymentNet, t: f64) -> bool {
    let p = raw.realize();
    batch.iter().all(|v| {
        let out = soft_payment_utility(v, &p, t).unwrap();
        (0..v.n()).all(|i| {
            let q = net.forward(i, &v.without_bidder(i)).unwrap();
            (q - out.util_hat[i]).abs() > 1e-3
        })
    })
}

/// max over coordinates of |a - f| / max(|a|, |f|), ignoring pairs below 1e-8
fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| {
            let d = (a - f).abs();
            if d <= 1e-8 { 0.0 } else { d / a.abs().max(f.abs()) }
        })
        .fold(0.0, f64::max)
}

#[test]
fn mutual_stage_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let spec = DistributionSpec::uniform(2, 2, 5);
    let mut checked = 0;
    let mut worst_raw: f64 = 0.0;
    let mut worst_net: f64 = 0.0;
    let mut attempt = 0u64;
    while checked < 100 {
        attempt += 1;
        let raw = random_raw(&mut rng, 2, 2, 4);
        let mut net = CorPaymentNet::init(2, 2, (6, 6), true, attempt).unwrap();
        for p in net.params_mut() { *p *= 0.5; }
        let batch = distributions::sample_stream(&spec, attempt, 3).unwrap().profiles;
        let t = rng.random_range(1.0..20.0);
        let gamma = rng.random_range(1.0..20.0);
        if !far_from_kinks(&batch, &raw, &net, t) { continue; }
        let lg = loss_and_grad(&batch, &raw, Some(&net), gamma, t, Stage::Mutual).unwrap();
        let flat = raw.flat();
        let fd: Vec<f64> = (0..flat.len()).map(|c| {
            let mut hi = raw.clone(); let mut x = flat.clone(); x[c] += H; hi.set_flat(&x).unwrap();
            let mut lo = raw.clone(); let mut x = flat.clone(); x[c] -= H; lo.set_flat(&x).unwrap();
            (loss_at(&batch, &hi, &net, gamma, t, Stage::Mutual) - loss_at(&batch, &lo, &net, gamma, t, Stage::Mutual)) / (2.0 * H)
        }).collect();
        worst_raw = worst_raw.max(worst(&lg.grad_raw.flat(), &fd));
        let g = lg.grad_cor.unwrap();
        let fdn: Vec<f64> = (0..net.param_count()).map(|c| {
            let mut hi = net.clone(); hi.params_mut()[c] += H;
            let mut lo = net.clone(); lo.params_mut()[c] -= H;
            (loss_at(&batch, &raw, &hi, gamma, t, Stage::Mutual) - loss_at(&batch, &raw, &lo, gamma, t, Stage::Mutual)) / (2.0 * H)
        }).collect();
        worst_net = worst_net.max(worst(&g, &fdn));
        checked += 1;
    }
    eprintln!("worst raw {worst_raw:e} net {worst_net:e} after {attempt} attempts");
    assert!(worst_raw <= 1e-4);
    assert!(worst_net <= 1e-4);
}

#[test]
fn post_stage_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let spec = DistributionSpec::dirichlet(2, 2, 0.5, 6);
    let mut checked = 0;
    let mut worst_net: f64 = 0.0;
    let mut attempt = 0u64;
    while checked < 100 {
        attempt += 1;
        let raw = random_raw(&mut rng, 2, 2, 4);
        let p = raw.realize();
        let net = CorPaymentNet::init(2, 2, (6, 6), true, attempt).unwrap();
        let batch = distributions::sample_stream(&spec, attempt, 3).unwrap().profiles;
        let gamma = rng.random_range(1.0..20.0);
        let clear = batch.iter().all(|v| {
            let out = ama_outcome(v, &p).unwrap();
            (0..2).all(|i| (net.forward(i, &v.without_bidder(i)).unwrap() - out.utilities[i]).abs() > 1e-3)
        });
        if !clear { continue; }
        let lg = loss_and_grad(&batch, &raw, Some(&net), gamma, 500.0, Stage::Post).unwrap();
        assert!(lg.grad_raw.is_zero());
        let g = lg.grad_cor.unwrap();
        let fd: Vec<f64> = (0..net.param_count()).map(|c| {
            let mut hi = net.clone(); hi.params_mut()[c] += H;
            let mut lo = net.clone(); lo.params_mut()[c] -= H;
            (loss_at(&batch, &raw, &hi, gamma, 500.0, Stage::Post) - loss_at(&batch, &raw, &lo, gamma, 500.0, Stage::Post)) / (2.0 * H)
        }).collect();
        worst_net = worst_net.max(worst(&g, &fd));
        checked += 1;
    }
    assert!(worst_net <= 1e-4, "{worst_net:e}");
}

#[test]
fn ama_only_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let spec = DistributionSpec::uniform(3, 2, 7);
    for attempt in 0..20u64 {
        let raw = random_raw(&mut rng, 3, 2, 5);
        let batch = distributions::sample_stream(&spec, attempt, 4).unwrap().profiles;
        let t = rng.random_range(1.0..20.0);
        let f = |r: &RawAmaParams| loss_and_grad(&batch, r, None, 1.0, t, Stage::Mutual).unwrap().loss;
        let lg = loss_and_grad(&batch, &raw, None, 1.0, t, Stage::Mutual).unwrap();
        assert!(lg.grad_cor.is_none());
        assert_eq!(lg.regret_ir_mean, 0.0);
        let flat = raw.flat();
        let fd: Vec<f64> = (0..flat.len()).map(|c| {
            let mut hi = raw.clone(); let mut x = flat.clone(); x[c] += H; hi.set_flat(&x).unwrap();
            let mut lo = raw.clone(); let mut x = flat.clone(); x[c] -= H; lo.set_flat(&x).unwrap();
            (f(&hi) - f(&lo)) / (2.0 * H)
        }).collect();
        assert!(worst(&lg.grad_raw.flat(), &fd) <= 1e-4);
    }
}
