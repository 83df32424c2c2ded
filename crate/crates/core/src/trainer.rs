//! Two-stage training: mutual (AMA parameters and payment nets jointly,
//! relaxed payments), then post (nets only, exact AMA payments).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cor_net::{CorPaymentNet, DEFAULT_WIDTHS};
use crate::distributions::{self, DistributionSpec};
use crate::error::{Error, Result};
use crate::mech::{self, AmaParams, CorPayment, ValuationProfile, ZeroCor};
use crate::optim::Adam;
use crate::relaxation::{self, RawAmaParams};

pub use crate::relaxation::Stage;

/// Mixed into the config seed so training batches never coincide with the
/// test set drawn from the distribution seed.
const TRAIN_SALT: u64 = 0x7E_A10F_BA7C;
const NET_SALT: u64 = 0xC01_24E7;
pub const REGRET_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    #[serde(rename = "caama")]
    Caama,
    AmaOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Caama => "caama",
            Mode::AmaOnly => "ama-only",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub mutual_fraction: f64,
    pub batch_size: usize,
    /// Softmax temperature of the relaxed argmax.
    pub temperature: f64,
    pub r_target: f64,
    pub gamma0: f64,
    pub gamma_delta: f64,
    pub gamma_max: f64,
    pub gamma_min: f64,
    pub step_size: f64,
    pub menu_size: usize,
    pub seed: u64,
    /// Metric log cadence; 0 logs only the last iteration.
    pub eval_every: usize,
    pub widths: (usize, usize),
    pub bias: bool,
    pub test_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 32_000,
            mutual_fraction: 0.75,
            batch_size: 2048,
            temperature: relaxation::DEFAULT_TEMPERATURE,
            r_target: 1e-3,
            gamma0: 3.0,
            gamma_delta: 0.01,
            gamma_max: 20.0,
            gamma_min: 1.0,
            step_size: 3e-4,
            menu_size: 32,
            seed: 0,
            eval_every: 500,
            widths: DEFAULT_WIDTHS,
            bias: true,
            test_size: 20_000,
        }
    }
}

impl TrainConfig {
    /// Halved budget used for quick runs.
    pub fn desk() -> Self {
        Self {
            total_iters: 16_000,
            batch_size: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("temperature", self.temperature),
            ("r_target", self.r_target),
            ("gamma_delta", self.gamma_delta),
            ("gamma_min", self.gamma_min),
            ("step_size", self.step_size),
        ];
        for (what, x) in positive {
            if !(x > 0.0 && x.is_finite()) {
                return Err(Error::invalid(what, format!("must be positive, got {x}")));
            }
        }
        if !(self.mutual_fraction > 0.0 && self.mutual_fraction < 1.0) {
            return Err(Error::invalid("mutual_fraction", "must lie in (0, 1)"));
        }
        if !(self.gamma_min <= self.gamma0 && self.gamma0 <= self.gamma_max) {
            return Err(Error::invalid(
                "gamma0",
                format!("need {} <= {} <= {}", self.gamma_min, self.gamma0, self.gamma_max),
            ));
        }
        let counts = [
            ("total_iters", self.total_iters),
            ("batch_size", self.batch_size),
            ("menu_size", self.menu_size),
            ("widths.0", self.widths.0),
            ("widths.1", self.widths.1),
            ("test_size", self.test_size),
        ];
        for (what, c) in counts {
            if c == 0 {
                return Err(Error::invalid(what, "must be positive"));
            }
        }
        Ok(())
    }

    /// First iteration of the post stage.
    pub fn switch_iter(&self) -> usize {
        (self.mutual_fraction * self.total_iters as f64).round() as usize
    }
}

/// `clip(γ + γ_Δ (ln max(R, 1e-8) - ln R_target), γ_min, γ_max)`
pub fn update_gamma(gamma: f64, regret_batch: f64, cfg: &TrainConfig) -> f64 {
    let step = cfg.gamma_delta * (regret_batch.max(REGRET_FLOOR).ln() - cfg.r_target.ln());
    (gamma + step).clamp(cfg.gamma_min, cfg.gamma_max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub iter: usize,
    pub stage: Stage,
    pub revenue_soft: f64,
    pub revenue_exact: f64,
    pub pay_ama: f64,
    pub pay_cor: f64,
    pub regret_ir: f64,
    pub gamma: f64,
}

/// Source of training batches; `iter` is the 0-based step index.
pub trait BatchSource {
    fn batch(&mut self, iter: usize, size: usize) -> Vec<ValuationProfile>;
}

/// Fresh i.i.d. draws every step.
#[derive(Clone, Debug)]
pub struct FreshSampler {
    spec: DistributionSpec,
}

impl FreshSampler {
    pub fn new(spec: &DistributionSpec, seed: u64) -> Self {
        Self {
            spec: spec.with_seed(seed ^ TRAIN_SALT),
        }
    }
}

impl BatchSource for FreshSampler {
    fn batch(&mut self, iter: usize, size: usize) -> Vec<ValuationProfile> {
        (0..size as u64)
            .map(|b| self.spec.draw(iter as u64 + 1, b))
            .collect()
    }
}

/// Minibatches with replacement from a fixed pool; the whole pool when the
/// batch is at least as large.
#[derive(Clone, Debug)]
pub struct PoolSampler {
    pool: Vec<ValuationProfile>,
    seed: u64,
}

impl PoolSampler {
    pub fn new(pool: Vec<ValuationProfile>, seed: u64) -> Self {
        Self { pool, seed }
    }

    pub fn pool(&self) -> &[ValuationProfile] {
        &self.pool
    }
}

impl BatchSource for PoolSampler {
    fn batch(&mut self, iter: usize, size: usize) -> Vec<ValuationProfile> {
        if size >= self.pool.len() {
            return self.pool.clone();
        }
        let mut rng = distributions::profile_rng(self.seed, 0x9001, iter as u64);
        (0..size)
            .map(|_| self.pool[rng.random_range(0..self.pool.len())].clone())
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub raw: RawAmaParams,
    /// `None` in AMA-only mode.
    pub cor: Option<CorPaymentNet>,
    pub gamma: f64,
    pub iter: usize,
    pub stage: Stage,
    pub mode: Mode,
    pub adam_raw: Adam,
    pub adam_cor: Option<Adam>,
    pub log: Vec<MetricRow>,
    frozen: Option<AmaParams>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, n: usize, m: usize, mode: Mode) -> Result<Self> {
        cfg.validate()?;
        let raw = RawAmaParams::init(n, m, cfg.menu_size, cfg.seed)?;
        let cor = match mode {
            Mode::Caama => Some(CorPaymentNet::init(n, m, cfg.widths, cfg.bias, cfg.seed ^ NET_SALT)?),
            Mode::AmaOnly => None,
        };
        Ok(Self::from_parts(cfg, raw, cor, cfg.gamma0, 0, mode))
    }

    /// Rebuilds a state from checkpointed parameters with fresh moments.
    pub fn from_parts(
        cfg: &TrainConfig,
        raw: RawAmaParams,
        cor: Option<CorPaymentNet>,
        gamma: f64,
        iter: usize,
        mode: Mode,
    ) -> Self {
        let adam_raw = Adam::new(raw.flat().len(), cfg.step_size);
        let adam_cor = cor.as_ref().map(|c| Adam::new(c.param_count(), cfg.step_size));
        let stage = if mode == Mode::Caama && iter >= cfg.switch_iter() {
            Stage::Post
        } else {
            Stage::Mutual
        };
        Self {
            raw,
            cor,
            gamma,
            iter,
            stage,
            mode,
            adam_raw,
            adam_cor,
            log: Vec::new(),
            frozen: None,
        }
    }

    /// AMA parameters currently in force.
    pub fn ama_params(&self) -> AmaParams {
        self.raw.realize()
    }

    fn should_log(&self, cfg: &TrainConfig) -> bool {
        let last = self.iter + 1 == cfg.total_iters;
        last || (cfg.eval_every > 0 && self.iter.is_multiple_of(cfg.eval_every))
    }

    /// One optimisation step on a batch from `sampler`.
    pub fn step(&mut self, cfg: &TrainConfig, sampler: &mut dyn BatchSource) -> Result<()> {
        if self.iter >= cfg.total_iters {
            return Err(Error::invalid("step", "schedule already finished"));
        }
        let batch = sampler.batch(self.iter, cfg.batch_size);
        let k = batch.len() as f64;
        let (loss, revenue_soft, regret) = match self.stage {
            Stage::Mutual => {
                let lg = relaxation::loss_and_grad(
                    &batch,
                    &self.raw,
                    self.cor.as_ref(),
                    self.gamma,
                    cfg.temperature,
                    Stage::Mutual,
                )?;
                let g_raw = lg.grad_raw.flat();
                check_finite(self.iter, "AMA gradient", &g_raw)?;
                let mut flat = self.raw.flat();
                self.adam_raw.step(&mut flat, &g_raw);
                self.raw.set_flat(&flat)?;
                if let (Some(net), Some(adam), Some(g)) =
                    (self.cor.as_mut(), self.adam_cor.as_mut(), lg.grad_cor.as_ref())
                {
                    check_finite(self.iter, "payment-net gradient", g)?;
                    adam.step(net.params_mut(), g);
                }
                (lg.loss, lg.revenue_mean, lg.regret_ir_mean)
            }
            Stage::Post => {
                let params = self.frozen.get_or_insert_with(|| self.raw.realize());
                let net = self.cor.as_mut().expect("post stage has a net");
                let (loss, rev, reg, g) =
                    relaxation::post_loss_and_grad(&batch, params, net, self.gamma)?;
                check_finite(self.iter, "payment-net gradient", &g)?;
                self.adam_cor
                    .as_mut()
                    .expect("post stage has a net optimizer")
                    .step(net.params_mut(), &g);
                (loss, rev, reg)
            }
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                iter: self.iter,
                detail: format!("loss = {loss} over {k} profiles"),
            });
        }
        if self.should_log(cfg) {
            let exact = exact_metrics(&self.ama_params(), self.cor.as_ref(), &batch)?;
            self.log.push(MetricRow {
                iter: self.iter,
                stage: self.stage,
                revenue_soft,
                revenue_exact: exact.revenue,
                pay_ama: exact.pay_ama,
                pay_cor: exact.pay_cor,
                regret_ir: exact.regret_ir_mean,
                gamma: self.gamma,
            });
        }
        if self.mode == Mode::Caama {
            self.gamma = update_gamma(self.gamma, regret, cfg);
        }
        self.iter += 1;
        if self.mode == Mode::Caama && self.stage == Stage::Mutual && self.iter >= cfg.switch_iter()
        {
            self.stage = Stage::Post;
            self.frozen = Some(self.raw.realize());
        }
        Ok(())
    }
}

fn check_finite(iter: usize, what: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        None => Ok(()),
        Some(p) => Err(Error::NonFinite {
            iter,
            detail: format!("{what} coordinate {p} is {}", xs[p]),
        }),
    }
}

/// Exact test-set statistics, with and without the opt-out transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactMetrics {
    pub revenue: f64,
    pub revenue_postproc: f64,
    pub pay_ama: f64,
    pub pay_cor: f64,
    pub regret_ir_mean: f64,
    pub regret_ir_max: f64,
    pub min_utility: f64,
    pub count: usize,
}

impl ExactMetrics {
    /// Fraction of revenue collected by the correlation payment.
    pub fn pay_cor_share(&self) -> f64 {
        if self.revenue == 0.0 {
            0.0
        } else {
            self.pay_cor / self.revenue
        }
    }

    pub fn pay_ama_share(&self) -> f64 {
        if self.revenue == 0.0 {
            0.0
        } else {
            self.pay_ama / self.revenue
        }
    }
}

/// Exact CA-AMA (or plain AMA with `cor = None`) metrics over `profiles`.
pub fn exact_metrics(
    params: &AmaParams,
    cor: Option<&CorPaymentNet>,
    profiles: &[ValuationProfile],
) -> Result<ExactMetrics> {
    match cor {
        Some(c) => exact_metrics_with(params, c, profiles),
        None => exact_metrics_with(params, &ZeroCor, profiles),
    }
}

pub fn exact_metrics_with<C: CorPayment + ?Sized>(
    params: &AmaParams,
    cor: &C,
    profiles: &[ValuationProfile],
) -> Result<ExactMetrics> {
    if profiles.is_empty() {
        return Err(Error::invalid("profiles", "empty"));
    }
    let mut acc = ExactMetrics {
        revenue: 0.0,
        revenue_postproc: 0.0,
        pay_ama: 0.0,
        pay_cor: 0.0,
        regret_ir_mean: 0.0,
        regret_ir_max: 0.0,
        min_utility: f64::INFINITY,
        count: profiles.len(),
    };
    for v in profiles {
        let out = mech::caama_outcome(v, params, cor)?;
        acc.pay_ama += out.pay_ama.iter().sum::<f64>();
        acc.pay_cor += out.pay_cor.iter().sum::<f64>();
        let reg = out.regret_ir();
        acc.regret_ir_mean += reg;
        acc.regret_ir_max = acc.regret_ir_max.max(reg);
        acc.min_utility = acc.min_utility.min(out.min_utility());
        acc.revenue_postproc += mech::post_process_ir(out).revenue();
    }
    let k = profiles.len() as f64;
    acc.pay_ama /= k;
    acc.pay_cor /= k;
    acc.revenue = acc.pay_ama + acc.pay_cor;
    acc.revenue_postproc /= k;
    acc.regret_ir_mean /= k;
    Ok(acc)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: ExactMetrics,
}

/// Full schedule on fresh batches, then exact evaluation on the held-out
/// test set (`cfg.test_size` profiles, stream 0 of the distribution seed).
pub fn train(cfg: &TrainConfig, spec: &DistributionSpec, mode: Mode) -> Result<TrainOutcome> {
    spec.validate()?;
    let mut state = TrainState::new(cfg, spec.n, spec.m, mode)?;
    let mut sampler = FreshSampler::new(spec, cfg.seed);
    run_schedule(&mut state, cfg, &mut sampler)?;
    let test = distributions::sample(spec, cfg.test_size)?;
    let metrics = exact_metrics(&state.ama_params(), state.cor.as_ref(), &test.profiles)?;
    Ok(TrainOutcome { state, metrics })
}

pub fn run_schedule(state: &mut TrainState, cfg: &TrainConfig, sampler: &mut dyn BatchSource) -> Result<()> {
    while state.iter < cfg.total_iters {
        state.step(cfg, sampler)?;
    }
    Ok(())
}

/// Deterministic stream of seeds for repeated runs.
pub fn seed_sequence(base: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    (0..count).map(|_| rng.random()).collect()
}
