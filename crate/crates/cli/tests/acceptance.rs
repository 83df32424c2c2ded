//! Acceptance suite. Each test prints one `criterion N PASS|FAIL` line to
//! stderr (visible without `--nocapture`) and then asserts.
//!
//! Training runs shared by several criteria are built once.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use caama::distributions::{self, analytic_moments, DistributionKind};
use caama::mech::{ama_outcome, vcg_outcome};
use caama::relaxation::{loss_and_grad, soft_payment_utility, RawAmaParams, Stage};
use caama::trainer::{self, update_gamma, FreshSampler, Mode};
use caama::verify::{self, BruteGrid, CaAma, GapProbeConfig, MisreportGrid, PostProcessed};
use caama::{CorPaymentNet, DistributionSpec, TrainConfig, TrainState, ValuationProfile};
use caama_cli::experiments::{self, EvalOptions, ModeRun};
use caama_cli::{ExperimentConfig, ModeSel};
use rand::Rng;

const ER_OPTIMUM: f64 = 0.2558;
const DIRICHLET_CAAMA: f64 = 0.8532;

fn report(id: u32, pass: bool, detail: &str, t0: Instant) {
    let line = format!(
        "criterion {id:>2} {} {detail} [{:.1}s]\n",
        if pass { "PASS" } else { "FAIL" },
        t0.elapsed().as_secs_f64()
    );
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(pass, "criterion {id}: {detail}");
}

struct Runs {
    dir: PathBuf,
    modes: Vec<ModeRun>,
}

impl Runs {
    fn get(&self, m: ModeSel) -> &ModeRun {
        self.modes.iter().find(|r| r.row.mode == m).unwrap()
    }

    fn metrics(&self, m: ModeSel) -> &trainer::ExactMetrics {
        &self.get(m).outcome.as_ref().unwrap().metrics
    }
}

fn scratch(name: &str) -> PathBuf {
    static ROOT: OnceLock<tempfile::TempDir> = OnceLock::new();
    let root = ROOT.get_or_init(|| tempfile::tempdir().unwrap());
    let p = root.path().join(name);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn er_train() -> TrainConfig {
    TrainConfig {
        total_iters: 32_000,
        batch_size: 512,
        step_size: 1e-4,
        widths: (32, 32),
        menu_size: 8,
        gamma0: 3.0,
        eval_every: 1000,
        ..TrainConfig::default()
    }
}

fn dirichlet_train() -> TrainConfig {
    TrainConfig {
        total_iters: 16_000,
        batch_size: 512,
        step_size: 3e-4,
        widths: (32, 32),
        menu_size: 32,
        gamma0: 5.0,
        eval_every: 1000,
        ..TrainConfig::default()
    }
}

fn dirichlet_spec() -> DistributionSpec {
    DistributionSpec::dirichlet(2, 2, 0.5, 1)
}

fn train_modes(name: &str, spec: DistributionSpec, train: TrainConfig, modes: Vec<ModeSel>) -> Runs {
    let dir = scratch(name);
    let cfg = ExperimentConfig::new(spec, train, modes);
    let modes = experiments::cmd_train(&cfg, &dir).unwrap();
    Runs { dir, modes }
}

fn er_runs() -> &'static Runs {
    static R: OnceLock<Runs> = OnceLock::new();
    R.get_or_init(|| {
        train_modes(
            "er",
            DistributionSpec::equal_revenue_figure(0.1, 1),
            er_train(),
            vec![ModeSel::Caama, ModeSel::AmaOnly],
        )
    })
}

fn dirichlet_runs() -> &'static Runs {
    static R: OnceLock<Runs> = OnceLock::new();
    R.get_or_init(|| {
        train_modes(
            "dirichlet",
            dirichlet_spec(),
            dirichlet_train(),
            vec![ModeSel::Caama, ModeSel::AmaOnly, ModeSel::Vcg],
        )
    })
}

fn random_profile(rng: &mut impl Rng, n: usize, m: usize) -> ValuationProfile {
    ValuationProfile::new(n, m, (0..n * m).map(|_| rng.random::<f64>()).collect()).unwrap()
}

/// Per-item second price, computed directly.
fn second_price(v: &ValuationProfile) -> (Vec<Option<usize>>, Vec<f64>) {
    let mut owners = Vec::new();
    let mut pay = vec![0.0; v.n()];
    for j in 0..v.m() {
        let mut order: Vec<usize> = (0..v.n()).collect();
        order.sort_by(|a, b| v.value(*b, j).total_cmp(&v.value(*a, j)));
        owners.push(Some(order[0]));
        pay[order[0]] += v.value(order[1], j);
    }
    (owners, pay)
}

#[test]
fn criterion_01_mechanism_correctness() {
    let t0 = Instant::now();
    let mut rng = verify::rng(101);
    let shapes = [(2, 1), (2, 2), (3, 2)];
    let (mut min_u, mut max_col, mut vcg_err, mut vcg_alloc_ok) = (f64::INFINITY, 0.0f64, 0.0f64, true);
    for k in 0..10_000 {
        let (n, m) = shapes[k % 3];
        let s = rng.random_range(1..=10);
        let params = verify::random_ama(n, m, s, &mut rng);
        let v = random_profile(&mut rng, n, m);
        let out = ama_outcome(&v, &params).unwrap();
        min_u = min_u.min(out.min_utility());
        max_col = max_col.max(out.allocation.max_column_sum());
        assert!(out.allocation.entries().iter().all(|x| *x >= 0.0));

        let vcg = ama_outcome(&v, &caama::AmaParams::vcg(n, m)).unwrap();
        let (owners, pay) = second_price(&v);
        vcg_alloc_ok &= vcg.allocation == caama::Allocation::deterministic(n, &owners);
        vcg_alloc_ok &= vcg_outcome(&v).allocation == vcg.allocation;
        for i in 0..n {
            vcg_err = vcg_err.max((vcg.pay_ama[i] - pay[i]).abs());
        }
    }
    let pass = min_u >= -1e-9 && max_col <= 1.0 + 1e-12 && vcg_alloc_ok && vcg_err <= 1e-12;
    report(
        1,
        pass,
        &format!("min utility {min_u:.3e}, max column sum {max_col:.12}, VCG allocation match {vcg_alloc_ok}, VCG payment err {vcg_err:.1e}"),
        t0,
    );
}

fn dsic_specs() -> Vec<DistributionSpec> {
    DistributionKind::ALL
        .iter()
        .map(|k| match k {
            DistributionKind::UniformIid => DistributionSpec::uniform(2, 2, 21),
            DistributionKind::DirichletValueShare => DistributionSpec::dirichlet(2, 2, 0.5, 22),
            DistributionKind::LinearMixtureSym => DistributionSpec::linear_mixture(true, 2, 0.5, 23),
            DistributionKind::LinearMixtureAsym => DistributionSpec::linear_mixture(false, 2, 0.5, 24),
            DistributionKind::EqualRevenueCorrelated => DistributionSpec::equal_revenue(2, 0.1, 0.05, 25),
            DistributionKind::PerfectNegativeLinear => DistributionSpec::perfect_negative(2, 26),
        })
        .collect()
}

#[test]
fn criterion_02_dsic() {
    let t0 = Instant::now();
    let mut rng = verify::rng(202);
    let mut worst = [0.0f64; 3];
    for (k, spec) in dsic_specs().iter().enumerate() {
        let profiles = distributions::sample(spec, 1000).unwrap().profiles;
        let params = verify::random_ama(spec.n, spec.m, 6, &mut rng);
        let net = CorPaymentNet::init(spec.n, spec.m, (8, 8), true, 300 + k as u64).unwrap();
        let grid = MisreportGrid::for_items(spec.m);
        let ca = CaAma { params: &params, cor: &net };
        worst[0] = worst[0].max(verify::measure_dsic_regret(&verify::Ama(&params), &profiles, grid).unwrap());
        worst[1] = worst[1].max(verify::measure_dsic_regret(&ca, &profiles, grid).unwrap());
        worst[2] = worst[2].max(verify::measure_dsic_regret(&PostProcessed(ca), &profiles, grid).unwrap());
    }
    let pass = worst.iter().all(|w| *w <= 1e-9);
    report(
        2,
        pass,
        &format!(
            "grid regret over 6 kinds x 1000 profiles: AMA {:.1e}, CA-AMA {:.1e}, post-processed {:.1e}",
            worst[0], worst[1], worst[2]
        ),
        t0,
    );
}

const H: f64 = 1e-6;
/// Central differences carry ~eps·|loss|/H ≈ 1e-9 of roundoff, so smaller
/// discrepancies are not evidence of a wrong gradient.
const FD_FLOOR: f64 = 1e-8;

/// (worst relative error above the floor, worst absolute difference)
fn rel_worst(analytic: &[f64], numeric: &[f64]) -> (f64, f64) {
    analytic.iter().zip(numeric).fold((0.0f64, 0.0f64), |(r, d_max), (a, f)| {
        let d = (a - f).abs();
        let rel = if d <= FD_FLOOR { 0.0 } else { d / a.abs().max(f.abs()) };
        (r.max(rel), d_max.max(d))
    })
}

fn random_raw(rng: &mut impl Rng) -> RawAmaParams {
    let mut raw = RawAmaParams::zeros(2, 2, 4);
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

fn central(f: impl Fn(usize, f64) -> f64, len: usize) -> Vec<f64> {
    (0..len).map(|c| (f(c, H) - f(c, -H)) / (2.0 * H)).collect()
}

#[test]
fn criterion_03_gradients() {
    let t0 = Instant::now();
    let mut rng = verify::rng(303);
    let spec = DistributionSpec::dirichlet(2, 2, 0.5, 31);
    let (mut w_raw, mut w_mutual_net, mut w_post, mut w_net) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    let mut abs_max = 0.0f64;
    let mut done = [0usize; 2];
    let mut attempt = 0u64;
    while done[0] < 100 || done[1] < 100 {
        attempt += 1;
        let raw = random_raw(&mut rng);
        let net = CorPaymentNet::init(2, 2, (6, 6), true, attempt).unwrap();
        let batch = distributions::sample_stream(&spec, attempt, 3).unwrap().profiles;
        let gamma = rng.random_range(1.0..20.0);
        let t = rng.random_range(1.0..20.0);
        let p = raw.realize();
        let stage = if done[0] < 100 { Stage::Mutual } else { Stage::Post };
        // skip instances sitting on an IR kink, where the loss has no gradient
        let clear = batch.iter().all(|v| {
            let util: Vec<f64> = match stage {
                Stage::Mutual => soft_payment_utility(v, &p, t).unwrap().util_hat,
                Stage::Post => ama_outcome(v, &p).unwrap().utilities,
            };
            (0..2).all(|i| (net.forward(i, &v.without_bidder(i)).unwrap() - util[i]).abs() > 1e-3)
        });
        if !clear {
            continue;
        }
        let loss = |r: &RawAmaParams, c: &CorPaymentNet| loss_and_grad(&batch, r, Some(c), gamma, t, stage).unwrap().loss;
        let lg = loss_and_grad(&batch, &raw, Some(&net), gamma, t, stage).unwrap();
        let fd_net = central(
            |c, h| {
                let mut x = net.clone();
                x.params_mut()[c] += h;
                loss(&raw, &x)
            },
            net.param_count(),
        );
        let (g_net, d) = rel_worst(lg.grad_cor.as_ref().unwrap(), &fd_net);
        abs_max = abs_max.max(d);
        match stage {
            Stage::Mutual => {
                let flat = raw.flat();
                let fd_raw = central(
                    |c, h| {
                        let mut x = flat.clone();
                        x[c] += h;
                        let mut r = raw.clone();
                        r.set_flat(&x).unwrap();
                        loss(&r, &net)
                    },
                    flat.len(),
                );
                let (r, d) = rel_worst(&lg.grad_raw.flat(), &fd_raw);
                w_raw = w_raw.max(r);
                abs_max = abs_max.max(d);
                w_mutual_net = w_mutual_net.max(g_net);
                done[0] += 1;
            }
            Stage::Post => {
                assert!(lg.grad_raw.is_zero());
                w_post = w_post.max(g_net);
                done[1] += 1;
            }
        }
        // the network on its own
        let x = batch[0].without_bidder(0);
        let g = net.backward(0, &x, 1.0).unwrap();
        let fd = central(
            |c, h| {
                let mut y = net.clone();
                y.params_mut()[c] += h;
                y.forward(0, &x).unwrap()
            },
            net.param_count(),
        );
        let (r, d) = rel_worst(&g, &fd);
        w_net = w_net.max(r);
        abs_max = abs_max.max(d);
    }
    let worst = w_raw.max(w_mutual_net).max(w_post).max(w_net);
    report(
        3,
        worst <= 1e-4,
        &format!(
            "worst relative error: mutual theta {w_raw:.1e}, mutual phi {w_mutual_net:.1e}, post phi {w_post:.1e}, net {w_net:.1e}; worst absolute difference {abs_max:.1e} (200 instances)"
        ),
        t0,
    );
}

#[test]
fn criterion_04_deterministic_ama_separation() {
    let t0 = Instant::now();
    let r = experiments::cmd_verify_appendix_b(0.1, 0.05, 2, &BruteGrid::default(), 0, None).unwrap();
    let pass = r.dama_best_revenue <= 0.1611 + 0.005
        && (r.optimum_mc - ER_OPTIMUM).abs() <= 0.005
        && (r.optimum_analytic - ER_OPTIMUM).abs() <= 0.005
        && (r.oracle_revenue - ER_OPTIMUM).abs() <= 0.005
        && r.oracle_regret_ir_max <= 1e-12;
    report(
        4,
        pass,
        &format!(
            "D-AMA best {:.4} (bound {:.4}), optimum MC {:.4} / analytic {:.5}, oracle CA-AMA {:.4} with IR regret max {:.1e}",
            r.dama_best_revenue, r.dama_bound, r.optimum_mc, r.optimum_analytic, r.oracle_revenue, r.oracle_regret_ir_max
        ),
        t0,
    );
}

#[test]
fn criterion_05_equal_revenue_learning() {
    let t0 = Instant::now();
    let runs = er_runs();
    let ca = runs.metrics(ModeSel::Caama);
    let ama = runs.metrics(ModeSel::AmaOnly);
    let pass = ca.revenue >= 0.95 * ER_OPTIMUM
        && ca.regret_ir_mean <= 1e-3
        && ama.revenue < 0.90 * ER_OPTIMUM
        && ca.pay_cor_share() > ca.pay_ama_share();
    report(
        5,
        pass,
        &format!(
            "CA-AMA {:.4} (>= {:.4}), regret {:.2e}, pay_cor share {:.3} vs pay_ama {:.3}; AMA-only {:.4} (< {:.4})",
            ca.revenue,
            0.95 * ER_OPTIMUM,
            ca.regret_ir_mean,
            ca.pay_cor_share(),
            ca.pay_ama_share(),
            ama.revenue,
            0.90 * ER_OPTIMUM
        ),
        t0,
    );
}

#[test]
fn criterion_06_dirichlet_ordering() {
    let t0 = Instant::now();
    let runs = dirichlet_runs();
    let ca = &runs.get(ModeSel::Caama).row;
    let ama = &runs.get(ModeSel::AmaOnly).row;
    let vcg = &runs.get(ModeSel::Vcg).row;
    let target = dirichlet_train().r_target;
    let pass = ca.revenue > ama.revenue
        && ama.revenue > vcg.revenue
        && ca.regret_ir_mean <= 3.0 * target
        && ca.regret_ir_mean >= target / 3.0;
    let stretch = (ca.revenue - DIRICHLET_CAAMA).abs() <= 0.1 * DIRICHLET_CAAMA;
    report(
        6,
        pass,
        &format!(
            "CA-AMA {:.4} > AMA-only {:.4} > VCG {:.4}; regret {:.2e} (target {target}); within 10% of {DIRICHLET_CAAMA}: {stretch}",
            ca.revenue, ama.revenue, vcg.revenue, ca.regret_ir_mean
        ),
        t0,
    );
}

#[test]
fn criterion_07_post_processing() {
    let t0 = Instant::now();
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, runs) in [("equal-revenue", er_runs()), ("dirichlet", dirichlet_runs())] {
        let ck = runs.get(ModeSel::Caama).checkpoint.clone().unwrap();
        let out = runs.dir.join("eval-post");
        let raw = experiments::cmd_eval(&ck, None, EvalOptions::default(), None).unwrap();
        let post = experiments::cmd_eval(&ck, None, EvalOptions { post_process: true, ..Default::default() }, Some(&out))
            .unwrap();
        let drop = (raw.revenue_mean - post.revenue_mean) / raw.revenue_mean;
        pass &= post.min_utility >= 0.0 && post.dsic_regret_max <= 1e-9 && drop <= 0.10;
        parts.push(format!(
            "{name}: {:.4} -> {:.4} (drop {:.1}%), min utility {:.2e}, DSIC {:.1e}",
            raw.revenue_mean,
            post.revenue_mean,
            100.0 * drop,
            post.min_utility,
            post.dsic_regret_max
        ));
    }
    report(7, pass, &parts.join("; "), t0);
}

#[test]
fn criterion_08_gamma_schedule() {
    let t0 = Instant::now();
    let cfg = TrainConfig::default();
    let a = update_gamma(7.0, cfg.r_target, &cfg);
    let b = update_gamma(5.0, 10.0 * cfg.r_target, &cfg);
    let c = update_gamma(19.999, 100.0 * cfg.r_target, &cfg);
    let examples = a == 7.0 && (b - (5.0 + 0.01 * 10f64.ln())).abs() <= 1e-12 && (b - 5.02303).abs() < 5e-6 && c == 20.0;

    // every step of a full (short) schedule
    let spec = dirichlet_spec();
    let short = TrainConfig {
        total_iters: 1500,
        batch_size: 128,
        widths: (16, 16),
        menu_size: 16,
        ..dirichlet_train()
    };
    let mut state = TrainState::new(&short, 2, 2, Mode::Caama).unwrap();
    let mut sampler = FreshSampler::new(&spec, short.seed);
    let (mut lo, mut hi) = (state.gamma, state.gamma);
    for _ in 0..short.total_iters {
        state.step(&short, &mut sampler).unwrap();
        lo = lo.min(state.gamma);
        hi = hi.max(state.gamma);
    }
    // and the logged values of the long runs
    for runs in [er_runs(), dirichlet_runs()] {
        for row in &runs.get(ModeSel::Caama).outcome.as_ref().unwrap().state.log {
            lo = lo.min(row.gamma);
            hi = hi.max(row.gamma);
        }
    }
    let pass = examples && lo >= 1.0 && hi <= 20.0;
    report(
        8,
        pass,
        &format!("examples -> {a}, {b:.5}, {c}; gamma range over runs [{lo:.3}, {hi:.3}]"),
        t0,
    );
}

#[test]
fn criterion_09_generalization_probe() {
    let t0 = Instant::now();
    let cfg = GapProbeConfig {
        k_list: vec![500, 2000, 8000],
        seeds: (0..5).collect(),
        widths: (32, 32),
        iters: 2000,
        batch_size: 256,
        test_size: 20_000,
        delta: 0.05,
        train: TrainConfig {
            step_size: 1e-3,
            ..TrainConfig::default()
        },
    };
    let rows = verify::empirical_gap_probe(&cfg, &DistributionSpec::dirichlet(2, 2, 0.5, 3)).unwrap();
    let medians: Vec<f64> = cfg
        .k_list
        .iter()
        .map(|k| verify::median(&rows.iter().filter(|r| r.k == *k).map(|r| r.gap).collect::<Vec<_>>()))
        .collect();
    let monotone = medians.windows(2).all(|w| w[1] <= w[0]);
    let below = rows.iter().all(|r| r.gap < r.bound);
    let min_slack = rows.iter().map(|r| r.bound - r.gap).fold(f64::INFINITY, f64::min);
    report(
        9,
        monotone && below,
        &format!(
            "median gap at K=500/2000/8000: {:.2e} / {:.2e} / {:.2e}; all below bound: {below} (smallest bound-gap {min_slack:.3})",
            medians[0], medians[1], medians[2]
        ),
        t0,
    );
}

#[test]
fn criterion_10_rtarget_sweep() {
    let t0 = Instant::now();
    let cfg = ExperimentConfig::new(dirichlet_spec(), dirichlet_train(), vec![ModeSel::Caama]);
    let targets = [0.01, 0.005, 0.001];
    let r = experiments::cmd_sweep_rtarget(&cfg, &targets, &[0], &scratch("sweep")).unwrap();
    let within = r
        .points
        .iter()
        .all(|p| p.regret_median <= 3.0 * p.r_target && p.regret_median >= p.r_target / 3.0);
    // tighter target, no more revenue (0.005 of slack for seed noise)
    let monotone = r.points.windows(2).all(|w| w[1].revenue_median <= w[0].revenue_median + 0.005);
    let beats = r.points.iter().all(|p| p.revenue_median > r.ama_only_median);
    let pts: Vec<String> = r
        .points
        .iter()
        .map(|p| format!("{}: rev {:.4} regret {:.2e}", p.r_target, p.revenue_median, p.regret_median))
        .collect();
    let drops: Vec<String> = r
        .rows
        .iter()
        .filter(|x| x.mode == ModeSel::Caama)
        .map(|x| format!("{:.1}%", 100.0 * (x.revenue - x.revenue_postproc) / x.revenue))
        .collect();
    report(
        10,
        within && monotone && beats,
        &format!(
            "{}; AMA-only {:.4}, VCG {:.4}; post-processing drops {}",
            pts.join(", "),
            r.ama_only_median,
            r.vcg_revenue,
            drops.join("/")
        ),
        t0,
    );
}

#[test]
fn analytic_reference_lines() {
    let m = analytic_moments(&DistributionSpec::equal_revenue_figure(0.1, 0)).unwrap();
    assert!((m.optimal_full_surplus - 0.25584).abs() < 1e-5);
    assert!((m.vcg_revenue.unwrap() - 0.08268).abs() < 1e-5);
}
