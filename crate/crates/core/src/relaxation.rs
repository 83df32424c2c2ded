//! Softmax-relaxed AMA and exact gradients of the IR-penalised loss.
//!
//! The AMA side is parameterised directly: every menu entry has, per item,
//! `n + 1` logits (bidders then a reserve slot) pushed through a softmax, so
//! any raw parameter vector realises a feasible menu. Weights are
//! `softplus(ω) + 1e-3` and boosts pass through unchanged.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cor_net::{Activations, CorPaymentNet};
use crate::error::{check_len, Error, Result};
use crate::mech::{self, Allocation, AmaParams, ValuationProfile};

pub const WEIGHT_FLOOR: f64 = 1e-3;
/// asw softmax temperature used during mutual training.
pub const DEFAULT_TEMPERATURE: f64 = 500.0;
/// Logit given to the chosen coordinate of a deterministic starting entry.
const DETERMINISTIC_LOGIT: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RawAmaParams {
    pub n: usize,
    pub m: usize,
    pub s: usize,
    /// `[k][j][c]` with `c = n` the reserve slot.
    pub menu_logits: Vec<f64>,
    pub weight_logits: Vec<f64>,
    pub boosts: Vec<f64>,
    pub temperature_feas: f64,
}

/// Gradient with the same layout as [`RawAmaParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct RawGrad {
    pub menu_logits: Vec<f64>,
    pub weight_logits: Vec<f64>,
    pub boosts: Vec<f64>,
}

impl RawGrad {
    pub fn zeros(raw: &RawAmaParams) -> Self {
        Self {
            menu_logits: vec![0.0; raw.menu_logits.len()],
            weight_logits: vec![0.0; raw.n],
            boosts: vec![0.0; raw.s],
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.menu_logits[..], &self.weight_logits, &self.boosts].concat()
    }

    pub fn is_zero(&self) -> bool {
        self.flat().iter().all(|g| *g == 0.0)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RawAmaParams {
    /// All-zero logits and boosts (uniform lotteries, `w = ln 2 + 1e-3`).
    pub fn zeros(n: usize, m: usize, s: usize) -> Self {
        Self {
            n,
            m,
            s,
            menu_logits: vec![0.0; s * m * (n + 1)],
            weight_logits: vec![0.0; n],
            boosts: vec![0.0; s],
            temperature_feas: 1.0,
        }
    }

    /// Starting point near VCG: unit weights, zero boosts, the first
    /// `min(S, (n+1)^m)` entries close to the deterministic allocations and
    /// the rest random lotteries.
    pub fn init(n: usize, m: usize, s: usize, seed: u64) -> Result<Self> {
        if n == 0 || m == 0 || s == 0 {
            return Err(Error::invalid("menu shape", format!("n={n} m={m} S={s}")));
        }
        let mut raw = Self::zeros(n, m, s);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA11C_A7E5);
        let det = (n + 1).checked_pow(m as u32).unwrap_or(usize::MAX);
        for k in 0..s {
            for j in 0..m {
                let base = (k * m + j) * (n + 1);
                let slots = &mut raw.menu_logits[base..base + n + 1];
                if k < det {
                    // same digit convention as mech::deterministic_menu
                    let digit = (k / (n + 1).pow((m - 1 - j) as u32)) % (n + 1);
                    let slot = if digit == 0 { n } else { digit - 1 };
                    slots[slot] = DETERMINISTIC_LOGIT;
                } else {
                    slots
                        .iter_mut()
                        .for_each(|x| *x = rng.random_range(-2.0..2.0));
                }
            }
        }
        // softplus(ω) + floor = 1
        let w0 = ((1.0 - WEIGHT_FLOOR).exp() - 1.0).ln();
        raw.weight_logits.fill(w0);
        Ok(raw)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.weight_logits
            .iter()
            .map(|x| softplus(*x) + WEIGHT_FLOOR)
            .collect()
    }

    fn column_softmax(&self, k: usize, j: usize, out: &mut [f64]) {
        let n = self.n;
        let base = (k * self.m + j) * (n + 1);
        let logits = &self.menu_logits[base..base + n + 1];
        softmax_into(logits, self.temperature_feas, out);
    }

    /// Maps raw parameters onto a feasible [`AmaParams`].
    pub fn realize(&self) -> AmaParams {
        let (n, m) = (self.n, self.m);
        let mut sm = vec![0.0; n + 1];
        let menu = (0..self.s)
            .map(|k| {
                let mut entries = vec![0.0; n * m];
                for j in 0..m {
                    self.column_softmax(k, j, &mut sm);
                    for i in 0..n {
                        entries[i * m + j] = sm[i];
                    }
                }
                Allocation::new(n, m, entries).expect("softmax columns are feasible")
            })
            .collect();
        AmaParams::new(menu, self.weights(), self.boosts.clone())
            .expect("realized parameters are valid")
    }

    /// Pulls a gradient on the realised menu/weights/boosts back to raw
    /// coordinates. `d_menu[k][i][j]`, `d_weights[i]`, `d_boosts[k]`.
    pub fn pullback(&self, d_menu: &[f64], d_weights: &[f64], d_boosts: &[f64]) -> RawGrad {
        let (n, m) = (self.n, self.m);
        let tau = self.temperature_feas;
        let mut g = RawGrad::zeros(self);
        let mut sm = vec![0.0; n + 1];
        for k in 0..self.s {
            for j in 0..m {
                self.column_softmax(k, j, &mut sm);
                let da = |c: usize| {
                    if c < n {
                        d_menu[(k * n + c) * m + j]
                    } else {
                        0.0
                    }
                };
                let mean: f64 = (0..=n).map(|c| sm[c] * da(c)).sum();
                let base = (k * m + j) * (n + 1);
                for c in 0..=n {
                    g.menu_logits[base + c] = tau * sm[c] * (da(c) - mean);
                }
            }
        }
        for i in 0..n {
            g.weight_logits[i] = d_weights[i] * sigmoid(self.weight_logits[i]);
        }
        g.boosts.copy_from_slice(d_boosts);
        g
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.menu_logits[..], &self.weight_logits, &self.boosts].concat()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let a = self.menu_logits.len();
        let b = a + self.weight_logits.len();
        check_len("raw parameter vector", b + self.boosts.len(), flat.len())?;
        self.menu_logits.copy_from_slice(&flat[..a]);
        self.weight_logits.copy_from_slice(&flat[a..b]);
        self.boosts.copy_from_slice(&flat[b..]);
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        check_len("menu logits", self.s * self.m * (self.n + 1), self.menu_logits.len())?;
        check_len("weight logits", self.n, self.weight_logits.len())?;
        check_len("boosts", self.s, self.boosts.len())?;
        if !(self.temperature_feas > 0.0) {
            return Err(Error::invalid("temperature_feas", "must be > 0"));
        }
        if self.flat().iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("raw parameters", "non-finite entry"));
        }
        Ok(())
    }
}

/// `out = softmax(temperature · z)`, max-subtracted.
pub fn softmax_into(z: &[f64], temperature: f64, out: &mut [f64]) {
    let top = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, x) in out.iter_mut().zip(z) {
        *o = ((x - top) * temperature).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
}

/// Menu mixtures `ĝ` and `ĝ_{-i}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftAllocation {
    pub soft_alloc: Allocation,
    pub soft_alloc_minus: Vec<Allocation>,
    /// Softmax weight of each menu entry under `asw`.
    pub menu_weights: Vec<f64>,
    /// Per bidder, weights under `asw_{-i}`.
    pub menu_weights_minus: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftOutcome {
    pub soft_alloc: Allocation,
    pub soft_alloc_minus: Vec<Allocation>,
    pub pay_hat: Vec<f64>,
    pub util_hat: Vec<f64>,
}

/// Scratch for one profile's relaxed forward pass.
#[derive(Clone, Debug, Default)]
struct SoftPass {
    /// `v_i · (A_k)_i` at `k * n + i`
    bv: Vec<f64>,
    asw: Vec<f64>,
    pi: Vec<f64>,
    /// `asw_{-i}(k)` at `i * S + k`
    minus: Vec<f64>,
    rho: Vec<f64>,
    e_minus: Vec<f64>,
    e_plus: Vec<f64>,
    pay: Vec<f64>,
    own: Vec<f64>,
}

impl SoftPass {
    fn run(&mut self, v: &ValuationProfile, p: &AmaParams, t: f64) {
        let (n, s) = (p.n(), p.menu_size());
        p.bidder_values(v, &mut self.bv);
        let w = p.weights();
        self.asw.clear();
        for k in 0..s {
            let welfare: f64 = (0..n).map(|i| w[i] * self.bv[k * n + i]).sum();
            self.asw.push(welfare + p.boosts()[k]);
        }
        self.pi.resize(s, 0.0);
        softmax_into(&self.asw, t, &mut self.pi);

        self.minus.resize(n * s, 0.0);
        self.rho.resize(n * s, 0.0);
        self.e_minus.clear();
        self.e_plus.clear();
        self.pay.clear();
        self.own.clear();
        for i in 0..n {
            let row = &mut self.minus[i * s..(i + 1) * s];
            for k in 0..s {
                row[k] = self.asw[k] - w[i] * self.bv[k * n + i];
            }
            softmax_into(row, t, &mut self.rho[i * s..(i + 1) * s]);
            let rho = &self.rho[i * s..(i + 1) * s];
            let em: f64 = rho.iter().zip(row.iter()).map(|(r, a)| r * a).sum();
            let ep: f64 = self.pi.iter().zip(row.iter()).map(|(r, a)| r * a).sum();
            let own: f64 = (0..s).map(|k| self.pi[k] * self.bv[k * n + i]).sum();
            self.e_minus.push(em);
            self.e_plus.push(ep);
            self.pay.push((em - ep) / w[i]);
            self.own.push(own);
        }
    }

    fn util(&self, i: usize) -> f64 {
        self.own[i] - self.pay[i]
    }

    /// Accumulates `∂L/∂(A, w, λ)` given `g_pay[i] = ∂L/∂p̂_i` and
    /// `g_own[i] = ∂L/∂(v_i · ĝ_i)`.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        v: &ValuationProfile,
        p: &AmaParams,
        t: f64,
        g_pay: &[f64],
        g_own: &[f64],
        acc: &mut AmaGradAcc,
        scratch: &mut BackScratch,
    ) {
        let (n, m, s) = (p.n(), p.m(), p.menu_size());
        let w = p.weights();
        scratch.reset(n, s);
        let BackScratch {
            d_pi,
            d_asw,
            d_minus,
            d_bv,
        } = scratch;

        for i in 0..n {
            let gp = g_pay[i];
            let wi = w[i];
            let row = &self.minus[i * s..(i + 1) * s];
            let rho = &self.rho[i * s..(i + 1) * s];
            let dm = &mut d_minus[i * s..(i + 1) * s];
            if gp != 0.0 {
                let g_em = gp / wi;
                let g_ep = -gp / wi;
                acc.weights[i] -= gp * self.pay[i] / wi;
                let em = self.e_minus[i];
                for k in 0..s {
                    dm[k] += g_em * rho[k] * (1.0 + t * (row[k] - em));
                    dm[k] += g_ep * self.pi[k];
                    d_pi[k] += g_ep * row[k];
                }
            }
            let gu = g_own[i];
            if gu != 0.0 {
                for k in 0..s {
                    d_bv[k * n + i] += gu * self.pi[k];
                    d_pi[k] += gu * self.bv[k * n + i];
                }
            }
        }
        let mean: f64 = (0..s).map(|k| self.pi[k] * d_pi[k]).sum();
        for k in 0..s {
            d_asw[k] += t * self.pi[k] * (d_pi[k] - mean);
        }
        for i in 0..n {
            for k in 0..s {
                let dm = d_minus[i * s + k];
                if dm != 0.0 {
                    d_asw[k] += dm;
                    acc.weights[i] -= dm * self.bv[k * n + i];
                    d_bv[k * n + i] -= dm * w[i];
                }
            }
        }
        for k in 0..s {
            let da = d_asw[k];
            acc.boosts[k] += da;
            for i in 0..n {
                acc.weights[i] += da * self.bv[k * n + i];
                d_bv[k * n + i] += da * w[i];
            }
        }
        for k in 0..s {
            for i in 0..n {
                let db = d_bv[k * n + i];
                if db == 0.0 {
                    continue;
                }
                let base = (k * n + i) * m;
                for (j, x) in v.row(i).iter().enumerate() {
                    acc.menu[base + j] += db * x;
                }
            }
        }
    }
}

#[derive(Default)]
struct BackScratch {
    d_pi: Vec<f64>,
    d_asw: Vec<f64>,
    d_minus: Vec<f64>,
    d_bv: Vec<f64>,
}

impl BackScratch {
    fn reset(&mut self, n: usize, s: usize) {
        for (buf, len) in [
            (&mut self.d_pi, s),
            (&mut self.d_asw, s),
            (&mut self.d_minus, n * s),
            (&mut self.d_bv, n * s),
        ] {
            buf.clear();
            buf.resize(len, 0.0);
        }
    }
}

/// Gradient accumulated on realised AMA parameters.
struct AmaGradAcc {
    menu: Vec<f64>,
    weights: Vec<f64>,
    boosts: Vec<f64>,
}

impl AmaGradAcc {
    fn new(n: usize, m: usize, s: usize) -> Self {
        Self {
            menu: vec![0.0; s * n * m],
            weights: vec![0.0; n],
            boosts: vec![0.0; s],
        }
    }
}

fn check_soft_inputs(v: &ValuationProfile, params: &AmaParams, t: f64) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("temperature", format!("{t}")));
    }
    check_len("profile bidders", params.n(), v.n())?;
    check_len("profile items", params.m(), v.m())
}

fn mixture(params: &AmaParams, weights: &[f64]) -> Allocation {
    let (n, m) = (params.n(), params.m());
    let mut entries = vec![0.0; n * m];
    for (a, w) in params.menu().iter().zip(weights) {
        for (e, x) in entries.iter_mut().zip(a.entries()) {
            *e += w * x;
        }
    }
    // convex combination of feasible entries; clamp rounding past 1
    for j in 0..m {
        let s: f64 = (0..n).map(|i| entries[i * m + j]).sum();
        if s > 1.0 {
            (0..n).for_each(|i| entries[i * m + j] /= s);
        }
    }
    Allocation::new(n, m, entries).expect("mixture of feasible allocations")
}

/// `ĝ = Σ_k softmax_k(T·asw) A_k` and `ĝ_{-i} = Σ_k softmax_k(T·asw_{-i}) A_k`.
pub fn soft_allocate(v: &ValuationProfile, params: &AmaParams, t: f64) -> Result<SoftAllocation> {
    check_soft_inputs(v, params, t)?;
    let mut pass = SoftPass::default();
    pass.run(v, params, t);
    let s = params.menu_size();
    let menu_weights_minus: Vec<Vec<f64>> = (0..params.n())
        .map(|i| pass.rho[i * s..(i + 1) * s].to_vec())
        .collect();
    Ok(SoftAllocation {
        soft_alloc: mixture(params, &pass.pi),
        soft_alloc_minus: menu_weights_minus.iter().map(|w| mixture(params, w)).collect(),
        menu_weights: pass.pi.clone(),
        menu_weights_minus,
    })
}

/// Relaxed payments `p̂_i = (asw_{-i}(ĝ_{-i}) - asw_{-i}(ĝ)) / w_i` and
/// utilities `û_i = v_i · ĝ_i - p̂_i`, with `asw_{-i}` extended linearly to
/// menu mixtures.
pub fn soft_payment_utility(v: &ValuationProfile, params: &AmaParams, t: f64) -> Result<SoftOutcome> {
    let alloc = soft_allocate(v, params, t)?;
    let mut pass = SoftPass::default();
    pass.run(v, params, t);
    Ok(SoftOutcome {
        soft_alloc: alloc.soft_alloc,
        soft_alloc_minus: alloc.soft_alloc_minus,
        pay_hat: pass.pay.clone(),
        util_hat: (0..params.n()).map(|i| pass.util(i)).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    /// Soft AMA payments, gradients to both sides.
    Mutual,
    /// Exact AMA payments, gradients to the payment networks only.
    Post,
}

#[derive(Clone, Debug)]
pub struct LossGrad {
    /// `Σ_k (-Revenue(V_k) + γ Regret_IR(V_k))`
    pub loss: f64,
    pub revenue_mean: f64,
    pub regret_ir_mean: f64,
    pub grad_raw: RawGrad,
    pub grad_cor: Option<Vec<f64>>,
}

/// Loss and exact gradients over a batch.
///
/// `cor = None` trains the AMA alone (no correlation payment, no regret
/// term). Kinks of `max(0, ·)` take subgradient 0.
pub fn loss_and_grad(
    batch: &[ValuationProfile],
    raw: &RawAmaParams,
    cor: Option<&CorPaymentNet>,
    gamma: f64,
    t: f64,
    stage: Stage,
) -> Result<LossGrad> {
    match stage {
        Stage::Mutual => mutual_loss_and_grad(batch, raw, cor, gamma, t),
        Stage::Post => {
            let cor = cor.ok_or_else(|| {
                Error::invalid("post stage", "requires a correlation payment network")
            })?;
            let (loss, rev, reg, g) = post_loss_and_grad(batch, &raw.realize(), cor, gamma)?;
            Ok(LossGrad {
                loss,
                revenue_mean: rev,
                regret_ir_mean: reg,
                grad_raw: RawGrad::zeros(raw),
                grad_cor: Some(g),
            })
        }
    }
}

fn check_batch(batch: &[ValuationProfile], n: usize, m: usize, gamma: f64) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::invalid("batch", "empty"));
    }
    if !(gamma >= 0.0) {
        return Err(Error::invalid("gamma", "must be >= 0"));
    }
    for v in batch {
        check_len("profile bidders", n, v.n())?;
        check_len("profile items", m, v.m())?;
    }
    Ok(())
}

fn check_net(cor: &CorPaymentNet, n: usize, m: usize) -> Result<()> {
    check_len("net bidders", n, cor.n())?;
    check_len("net items", m, cor.m())
}

fn mutual_loss_and_grad(
    batch: &[ValuationProfile],
    raw: &RawAmaParams,
    cor: Option<&CorPaymentNet>,
    gamma: f64,
    t: f64,
) -> Result<LossGrad> {
    let (n, m, s) = (raw.n, raw.m, raw.s);
    check_batch(batch, n, m, gamma)?;
    if let Some(c) = cor {
        check_net(c, n, m)?;
    }
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::invalid("temperature", format!("{t}")));
    }
    let params = raw.realize();
    let mut acc = AmaGradAcc::new(n, m, s);
    let mut grad_cor = cor.map(|c| vec![0.0; c.param_count()]);
    let mut pass = SoftPass::default();
    let mut scratch = BackScratch::default();
    let mut acts: Vec<Activations> = vec![Activations::default(); n];
    let mut others = Vec::new();
    let mut q = vec![0.0; n];
    let mut g_pay = vec![0.0; n];
    let mut g_own = vec![0.0; n];
    let (mut loss, mut rev_sum, mut reg_sum) = (0.0, 0.0, 0.0);

    for v in batch {
        pass.run(v, &params, t);
        let mut rev = 0.0;
        let mut reg = 0.0;
        for i in 0..n {
            q[i] = match cor {
                Some(c) => {
                    v.write_without_bidder(i, &mut others);
                    c.forward_unchecked(i, &others, &mut acts[i])
                }
                None => 0.0,
            };
            let shortfall = q[i] - pass.util(i);
            let viol = cor.is_some() && shortfall > 0.0;
            rev += pass.pay[i] + q[i];
            if viol {
                reg += shortfall;
            }
            let ind = if viol { gamma } else { 0.0 };
            g_pay[i] = -1.0 + ind;
            g_own[i] = -ind;
            if let (Some(c), Some(g)) = (cor, grad_cor.as_mut()) {
                v.write_without_bidder(i, &mut others);
                c.backward_into(i, &others, &acts[i], -1.0 + ind, g);
            }
        }
        pass.backward(v, &params, t, &g_pay, &g_own, &mut acc, &mut scratch);
        loss += -rev + gamma * reg;
        rev_sum += rev;
        reg_sum += reg;
    }
    if let (Some(c), Some(g)) = (cor, grad_cor.as_mut()) {
        c.mask_gradient(g);
    }
    let k = batch.len() as f64;
    Ok(LossGrad {
        loss,
        revenue_mean: rev_sum / k,
        regret_ir_mean: reg_sum / k,
        grad_raw: raw.pullback(&acc.menu, &acc.weights, &acc.boosts),
        grad_cor,
    })
}

/// Post-stage loss with exact AMA payments for fixed `params`.
/// Returns `(loss, revenue_mean, regret_ir_mean, grad_cor)`.
pub fn post_loss_and_grad(
    batch: &[ValuationProfile],
    params: &AmaParams,
    cor: &CorPaymentNet,
    gamma: f64,
) -> Result<(f64, f64, f64, Vec<f64>)> {
    let (n, m) = (params.n(), params.m());
    check_batch(batch, n, m, gamma)?;
    check_net(cor, n, m)?;
    let mut grad = vec![0.0; cor.param_count()];
    let mut act = Activations::default();
    let mut others = Vec::new();
    let mut bv = Vec::new();
    let (mut loss, mut rev_sum, mut reg_sum) = (0.0, 0.0, 0.0);
    for v in batch {
        params.bidder_values(v, &mut bv);
        let out = mech::ama_outcome_from_values(v, params, &bv);
        let mut rev = out.pay_ama.iter().sum::<f64>();
        let mut reg = 0.0;
        for i in 0..n {
            v.write_without_bidder(i, &mut others);
            let q = cor.forward_unchecked(i, &others, &mut act);
            rev += q;
            let shortfall = q - out.utilities[i];
            let ind = if shortfall > 0.0 {
                reg += shortfall;
                gamma
            } else {
                0.0
            };
            cor.backward_into(i, &others, &act, -1.0 + ind, &mut grad);
        }
        loss += -rev + gamma * reg;
        rev_sum += rev;
        reg_sum += reg;
    }
    cor.mask_gradient(&mut grad);
    let k = batch.len() as f64;
    Ok((loss, rev_sum / k, reg_sum / k, grad))
}
