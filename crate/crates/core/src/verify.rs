//! Incentive and participation checks, analytic oracles and the
//! generalisation bound.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cor_net::CorPaymentNet;
use crate::distributions::{self, conditional_support, DistributionKind, DistributionSpec, Support};
use crate::error::{check_index, check_len, Error, Result};
use crate::mech::{self, AmaParams, AuctionOutcome, CorPayment, ValuationProfile};
use crate::optim::Adam;
use crate::relaxation::post_loss_and_grad;
use crate::trainer::{exact_metrics_with, update_gamma, BatchSource, PoolSampler, TrainConfig};

/// Largest grid `opt_core_oracle` and `dama_brute_search` will enumerate.
pub const GRID_LIMIT: u128 = 10_000_000;
pub const ORACLE_GRID: usize = 65;

/// A direct mechanism evaluated on reported bids.
pub trait Mechanism {
    fn n(&self) -> usize;
    fn m(&self) -> usize;
    fn outcome(&self, bids: &ValuationProfile) -> Result<AuctionOutcome>;
}

impl<T: Mechanism + ?Sized> Mechanism for &T {
    fn n(&self) -> usize {
        (**self).n()
    }
    fn m(&self) -> usize {
        (**self).m()
    }
    fn outcome(&self, bids: &ValuationProfile) -> Result<AuctionOutcome> {
        (**self).outcome(bids)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Ama<'a>(pub &'a AmaParams);

impl Mechanism for Ama<'_> {
    fn n(&self) -> usize {
        self.0.n()
    }
    fn m(&self) -> usize {
        self.0.m()
    }
    fn outcome(&self, bids: &ValuationProfile) -> Result<AuctionOutcome> {
        mech::ama_outcome(bids, self.0)
    }
}

pub struct CaAma<'a, C: ?Sized> {
    pub params: &'a AmaParams,
    pub cor: &'a C,
}

impl<C: CorPayment + ?Sized> Mechanism for CaAma<'_, C> {
    fn n(&self) -> usize {
        self.params.n()
    }
    fn m(&self) -> usize {
        self.params.m()
    }
    fn outcome(&self, bids: &ValuationProfile) -> Result<AuctionOutcome> {
        mech::caama_outcome(bids, self.params, self.cor)
    }
}

/// Any mechanism followed by the opt-out transform.
pub struct PostProcessed<M>(pub M);

impl<M: Mechanism> Mechanism for PostProcessed<M> {
    fn n(&self) -> usize {
        self.0.n()
    }
    fn m(&self) -> usize {
        self.0.m()
    }
    fn outcome(&self, bids: &ValuationProfile) -> Result<AuctionOutcome> {
        Ok(mech::post_process_ir(self.0.outcome(bids)?))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Vcg {
    pub n: usize,
    pub m: usize,
}

impl Mechanism for Vcg {
    fn n(&self) -> usize {
        self.n
    }
    fn m(&self) -> usize {
        self.m
    }
    fn outcome(&self, bids: &ValuationProfile) -> Result<AuctionOutcome> {
        check_len("profile bidders", self.n, bids.n())?;
        check_len("profile items", self.m, bids.m())?;
        Ok(mech::vcg_outcome(bids))
    }
}

/// How misreports are probed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MisreportGrid {
    /// Full product grid with this many points per item on `[0, 1]`.
    Grid(usize),
    /// This many uniform random misreports per (profile, bidder).
    Random { count: usize, seed: u64 },
}

impl MisreportGrid {
    /// 21-point grids up to two items, 256 random probes beyond.
    pub fn for_items(m: usize) -> Self {
        if m <= 2 {
            MisreportGrid::Grid(21)
        } else {
            MisreportGrid::Random { count: 256, seed: 0 }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            MisreportGrid::Grid(p) if p < 2 => Err(Error::invalid("grid", "need >= 2 points per item")),
            MisreportGrid::Random { count: 0, .. } => Err(Error::invalid("grid", "need >= 1 probe")),
            _ => Ok(()),
        }
    }

    fn probes(&self, m: usize, profile: usize, bidder: usize) -> Result<Vec<Vec<f64>>> {
        match *self {
            MisreportGrid::Grid(p) => {
                let cells = (p as u128).checked_pow(m as u32).unwrap_or(u128::MAX);
                if cells > GRID_LIMIT {
                    return Err(Error::GridTooLarge { cells, limit: GRID_LIMIT });
                }
                let axis: Vec<f64> = (0..p).map(|k| k as f64 / (p - 1) as f64).collect();
                Ok(product_grid(&vec![axis; m]))
            }
            MisreportGrid::Random { count, seed } => {
                let mut rng = distributions::profile_rng(seed ^ 0xD51C, profile as u64, bidder as u64);
                Ok((0..count)
                    .map(|_| (0..m).map(|_| rng.random::<f64>()).collect())
                    .collect())
            }
        }
    }
}

fn product_grid(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::with_capacity(axes.len())];
    for axis in axes {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                axis.iter().map(move |x| {
                    let mut p = prefix.clone();
                    p.push(*x);
                    p
                })
            })
            .collect();
    }
    out
}

/// Largest gain from a probed misreport, floored at 0.
pub fn measure_dsic_regret<M: Mechanism + ?Sized>(
    mech: &M,
    profiles: &[ValuationProfile],
    grid: MisreportGrid,
) -> Result<f64> {
    grid.validate()?;
    let mut worst = 0.0f64;
    for (p, v) in profiles.iter().enumerate() {
        let truthful = mech.outcome(v)?;
        for i in 0..v.n() {
            let base = truthful.utility_for(i, v.row(i));
            for bid in grid.probes(v.m(), p, i)? {
                let out = mech.outcome(&v.with_row(i, &bid)?)?;
                worst = worst.max(out.utility_for(i, v.row(i)) - base);
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IrStats {
    pub ir_regret_mean: f64,
    pub ir_regret_max: f64,
    pub min_utility: f64,
}

pub fn measure_ir<M: Mechanism + ?Sized>(mech: &M, profiles: &[ValuationProfile]) -> Result<IrStats> {
    if profiles.is_empty() {
        return Err(Error::invalid("profiles", "empty"));
    }
    let mut s = IrStats {
        ir_regret_mean: 0.0,
        ir_regret_max: 0.0,
        min_utility: f64::INFINITY,
    };
    for v in profiles {
        let out = mech.outcome(v)?;
        let r = out.regret_ir();
        s.ir_regret_mean += r;
        s.ir_regret_max = s.ir_regret_max.max(r);
        s.min_utility = s.min_utility.min(out.min_utility());
    }
    s.ir_regret_mean /= profiles.len() as f64;
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub dsic_regret_max: f64,
    pub ir_regret_mean: f64,
    pub ir_regret_max: f64,
    pub revenue_mean: f64,
    pub revenue_post_processed: f64,
    pub min_utility: f64,
    pub sample_count: usize,
}

impl VerificationReport {
    pub const CSV_HEADER: &'static str = "dsic_regret_max,ir_regret_mean,ir_regret_max,revenue_mean,revenue_post_processed,min_utility,sample_count";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.dsic_regret_max,
            self.ir_regret_mean,
            self.ir_regret_max,
            self.revenue_mean,
            self.revenue_post_processed,
            self.min_utility,
            self.sample_count
        )
    }
}

/// IR and revenue on all of `profiles`; DSIC probing on the first
/// `dsic_profiles` of them.
pub fn evaluate<M: Mechanism + ?Sized>(
    mech: &M,
    profiles: &[ValuationProfile],
    grid: MisreportGrid,
    dsic_profiles: usize,
) -> Result<VerificationReport> {
    let ir = measure_ir(mech, profiles)?;
    let k = profiles.len() as f64;
    let mut revenue = 0.0;
    let mut post = 0.0;
    for v in profiles {
        let out = mech.outcome(v)?;
        revenue += out.revenue();
        post += mech::post_process_ir(out).revenue();
    }
    let probe = &profiles[..dsic_profiles.min(profiles.len())];
    Ok(VerificationReport {
        dsic_regret_max: measure_dsic_regret(mech, probe, grid)?,
        ir_regret_mean: ir.ir_regret_mean,
        ir_regret_max: ir.ir_regret_max,
        revenue_mean: revenue / k,
        revenue_post_processed: post / k,
        min_utility: ir.min_utility,
        sample_count: profiles.len(),
    })
}

/// `p^OPT-core_i(V_{-i})`: infimum of bidder `i`'s AMA utility over the
/// conditional support of `v_i`.
pub fn opt_core_oracle(
    params: &AmaParams,
    i: usize,
    v_minus_i: &[f64],
    spec: &DistributionSpec,
) -> Result<f64> {
    let (n, m) = (params.n(), params.m());
    check_index("bidder", i, n)?;
    check_len("distribution bidders", n, spec.n)?;
    check_len("distribution items", m, spec.m)?;
    let support = conditional_support(spec, i, v_minus_i)?;
    let mut rows: Vec<Vec<f64>> = v_minus_i.chunks(m).map(|r| r.to_vec()).collect();
    rows.insert(i, vec![0.0; m]);
    let base = ValuationProfile::from_rows(&rows)?;
    infimum_over(&support, &|x: &[f64]| {
        let v = base.with_row(i, x)?;
        Ok(mech::ama_outcome(&v, params)?.utilities[i])
    })
}

fn infimum_over(support: &Support, u: &dyn Fn(&[f64]) -> Result<f64>) -> Result<f64> {
    match support {
        Support::Point(x) => u(x),
        Support::Box { lo, hi } => {
            let cells = (ORACLE_GRID as u128)
                .checked_pow(lo.len() as u32)
                .unwrap_or(u128::MAX);
            if cells > GRID_LIMIT {
                return Err(Error::GridTooLarge { cells, limit: GRID_LIMIT });
            }
            let axes: Vec<Vec<f64>> = lo
                .iter()
                .zip(hi)
                .map(|(l, h)| {
                    (0..ORACLE_GRID)
                        .map(|k| l + (h - l) * k as f64 / (ORACLE_GRID - 1) as f64)
                        .collect()
                })
                .collect();
            let mut best = f64::INFINITY;
            for x in product_grid(&axes) {
                best = best.min(u(&x)?);
            }
            Ok(best)
        }
        Support::Union(parts) => {
            let mut best = f64::INFINITY;
            for p in parts {
                best = best.min(infimum_over(p, u)?);
            }
            Ok(best)
        }
    }
}

/// Mean over profiles of `Σ_j max_i v_ij`.
pub fn full_surplus(profiles: &[ValuationProfile]) -> Result<f64> {
    if profiles.is_empty() {
        return Err(Error::invalid("profiles", "empty"));
    }
    let total: f64 = profiles
        .iter()
        .map(|v| {
            (0..v.m())
                .map(|j| (0..v.n()).map(|i| v.value(i, j)).fold(0.0, f64::max))
                .sum::<f64>()
        })
        .sum();
    Ok(total / profiles.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteGrid {
    pub weight_points: usize,
    pub weight_lo: f64,
    pub weight_hi: f64,
    pub boost_points: usize,
    pub boost_lo: f64,
    pub boost_hi: f64,
    pub samples: usize,
}

impl Default for BruteGrid {
    fn default() -> Self {
        Self {
            weight_points: 33,
            weight_lo: 0.1,
            weight_hi: 10.0,
            boost_points: 41,
            boost_lo: -1.0,
            boost_hi: 1.0,
            samples: 100_000,
        }
    }
}

impl BruteGrid {
    fn axis_weights(&self) -> Vec<f64> {
        let (a, b) = (self.weight_lo.ln(), self.weight_hi.ln());
        let p = self.weight_points;
        if p == 1 {
            return vec![1.0];
        }
        (0..p)
            .map(|k| (a + (b - a) * k as f64 / (p - 1) as f64).exp())
            .collect()
    }

    fn axis_boosts(&self) -> Vec<f64> {
        let p = self.boost_points;
        if p == 1 {
            return vec![0.0];
        }
        (0..p)
            .map(|k| self.boost_lo + (self.boost_hi - self.boost_lo) * k as f64 / (p - 1) as f64)
            .collect()
    }

    pub fn cells(&self, n: usize) -> u128 {
        let w = (self.weight_points as u128).checked_pow(n as u32 - 1);
        let l = (self.boost_points as u128).checked_pow(n as u32 + 1);
        match (w, l) {
            (Some(w), Some(l)) => w.saturating_mul(l),
            _ => u128::MAX,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BruteResult {
    pub best_revenue: f64,
    pub best_params: AmaParams,
    pub cells: u128,
    pub samples: usize,
}

/// Line `a + b·v_1` in the first bidder's value.
#[derive(Clone, Copy, Debug)]
struct Line {
    a: f64,
    b: f64,
}

impl Line {
    fn at(&self, x: f64) -> f64 {
        self.a + self.b * x
    }
}

/// Best deterministic single-item AMA on an equal-revenue sample, by
/// exhaustive search over the weight/boost grid.
///
/// Every bidder's value is affine in `v_1` for this family, so on each
/// interval between crossings of the asw lines the winner and its payment
/// are fixed affine functions; the sample revenue of a grid cell is then a
/// few prefix-sum lookups over the sorted `v_1`. The result equals the plain
/// per-profile Monte-Carlo sum up to rounding.
pub fn dama_brute_search(spec: &DistributionSpec, grid: &BruteGrid) -> Result<BruteResult> {
    spec.validate()?;
    if spec.kind != DistributionKind::EqualRevenueCorrelated || spec.m != 1 || spec.n < 2 {
        return Err(Error::invalid(
            "dama_brute_search",
            "needs a single-item equal-revenue spec with n >= 2",
        ));
    }
    if grid.weight_points == 0 || grid.boost_points == 0 || grid.samples == 0 {
        return Err(Error::invalid("grid", "empty axis or sample"));
    }
    if !(grid.weight_lo > 0.0 && grid.weight_hi >= grid.weight_lo) || grid.boost_hi < grid.boost_lo {
        return Err(Error::invalid("grid", "bad axis bounds"));
    }
    let n = spec.n;
    let cells = grid.cells(n);
    if cells > GRID_LIMIT {
        return Err(Error::GridTooLarge { cells, limit: GRID_LIMIT });
    }
    let data = distributions::sample(spec, grid.samples)?;
    let slope = spec.equal_revenue_slope();
    let mut v1: Vec<f64> = data.profiles.iter().map(|v| v.value(0, 0)).collect();
    v1.sort_by(f64::total_cmp);
    let mut prefix = vec![0.0; v1.len() + 1];
    for (k, x) in v1.iter().enumerate() {
        prefix[k + 1] = prefix[k] + x;
    }
    // v_1 itself, v_i = slope (1 - v_1) for the rest
    let value_line = |i: usize| {
        if i == 0 {
            Line { a: 0.0, b: 1.0 }
        } else {
            Line { a: slope, b: -slope }
        }
    };

    let weights_axis = grid.axis_weights();
    let boosts_axis = grid.axis_boosts();
    let mut w = vec![1.0; n];
    let mut lam = vec![0.0; n + 1];
    let mut best = (f64::NEG_INFINITY, w.clone(), lam.clone());
    let w_count = (grid.weight_points).pow(n as u32 - 1);
    let l_count = (grid.boost_points).pow(n as u32 + 1);
    let mut cuts = Vec::new();
    for wc in 0..w_count {
        let mut r = wc;
        for wi in w.iter_mut().skip(1) {
            *wi = weights_axis[r % grid.weight_points];
            r /= grid.weight_points;
        }
        for lc in 0..l_count {
            let mut r = lc;
            for l in lam.iter_mut() {
                *l = boosts_axis[r % grid.boost_points];
                r /= grid.boost_points;
            }
            let rev = interval_revenue(&w, &lam, &value_line, &v1, &prefix, &mut cuts);
            if rev > best.0 {
                best = (rev, w.clone(), lam.clone());
            }
        }
    }
    let best_params = AmaParams::deterministic(n, 1, best.1, best.2)?;
    Ok(BruteResult {
        best_revenue: best.0 / v1.len() as f64,
        best_params,
        cells,
        samples: v1.len(),
    })
}

/// Total revenue of the deterministic single-item AMA `(w, λ)` over the
/// sorted sample. Entry 0 is the reserve, entry `i + 1` gives the item to `i`.
fn interval_revenue(
    w: &[f64],
    lam: &[f64],
    value_line: &dyn Fn(usize) -> Line,
    v1: &[f64],
    prefix: &[f64],
    cuts: &mut Vec<f64>,
) -> f64 {
    let n = w.len();
    let entry = |k: usize| -> Line {
        if k == 0 {
            Line { a: lam[0], b: 0.0 }
        } else {
            let v = value_line(k - 1);
            Line {
                a: lam[k] + w[k - 1] * v.a,
                b: w[k - 1] * v.b,
            }
        }
    };
    let lines: Vec<Line> = (0..=n).map(entry).collect();
    cuts.clear();
    // asw_{-i}(k) differs from asw(k) only at k = i + 1, where it is λ_{i+1};
    // crossings among asw lines and those boosts bound every regime
    let mut all = lines.clone();
    all.extend((1..=n).map(|k| Line { a: lam[k], b: 0.0 }));
    for p in 0..all.len() {
        for q in p + 1..all.len() {
            let db = all[p].b - all[q].b;
            if db != 0.0 {
                let x = (all[q].a - all[p].a) / db;
                if x > v1[0] && x < v1[v1.len() - 1] {
                    cuts.push(x);
                }
            }
        }
    }
    cuts.push(f64::NEG_INFINITY);
    cuts.push(f64::INFINITY);
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();

    let mut total = 0.0;
    for win in cuts.windows(2) {
        let (lo, hi) = (win[0], win[1]);
        let a = v1.partition_point(|x| *x < lo);
        let b = v1.partition_point(|x| *x < hi);
        if a == b {
            continue;
        }
        let mid = 0.5 * (v1[a] + v1[b - 1]);
        let asw: Vec<f64> = lines.iter().map(|l| l.at(mid)).collect();
        let k_star = mech::argmax_first(&asw);
        if k_star == 0 {
            continue;
        }
        let i = k_star - 1;
        let minus = |k: usize| -> Line {
            if k == k_star {
                Line { a: lam[k], b: 0.0 }
            } else {
                lines[k]
            }
        };
        let minus_at: Vec<f64> = (0..=n).map(|k| minus(k).at(mid)).collect();
        let k_minus = mech::argmax_first(&minus_at);
        let (top, own) = (minus(k_minus), minus(k_star));
        let pay = Line {
            a: (top.a - own.a) / w[i],
            b: (top.b - own.b) / w[i],
        };
        total += pay.a * (b - a) as f64 + pay.b * (prefix[b] - prefix[a]);
    }
    total
}

/// The full-surplus correlation payment on the equal-revenue family with
/// unit weights and zero boosts: bidder 1 always wins, pays `v_2` to the
/// AMA and the rest of `v_1 = 1 - v_2 / slope` through `p^Cor`.
#[derive(Clone, Copy, Debug)]
pub struct ForcedValueCor {
    pub slope: f64,
}

impl ForcedValueCor {
    pub fn for_spec(spec: &DistributionSpec) -> Result<Self> {
        spec.validate()?;
        if spec.kind != DistributionKind::EqualRevenueCorrelated {
            return Err(Error::invalid("spec", "needs the equal-revenue family"));
        }
        Ok(Self {
            slope: spec.equal_revenue_slope(),
        })
    }
}

impl CorPayment for ForcedValueCor {
    fn payment(&self, bidder: usize, others: &[f64]) -> Result<f64> {
        if bidder != 0 {
            return Ok(0.0);
        }
        let v2 = others[0];
        Ok((1.0 - v2 / self.slope) - v2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenBoundInputs {
    /// Spectral norms of the three layers.
    pub spectral: [f64; 3],
    pub h1: usize,
    pub h2: usize,
    pub n: usize,
    pub m: usize,
    /// Training sample size.
    pub k: usize,
    pub delta: f64,
}

/// `2n B_p √(2 ln 2d) / √K + n B_p √(ln(2/δ) / 2K)` with
/// `B_x = √((n-1)m)`, `B_p = B_x Π M_l`, `d = max((n-1)m, h1, h2, 1)`.
pub fn gen_bound(g: &GenBoundInputs) -> Result<f64> {
    if g.spectral.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
        return Err(Error::invalid("spectral norms", "must be positive"));
    }
    if g.h1 == 0 || g.h2 == 0 || g.n < 2 || g.m == 0 || g.k == 0 {
        return Err(Error::invalid("bound inputs", "sizes must be positive, n >= 2"));
    }
    if !(g.delta > 0.0 && g.delta < 1.0) {
        return Err(Error::invalid("delta", "must lie in (0, 1)"));
    }
    let din = (g.n - 1) * g.m;
    let bx = (din as f64).sqrt();
    let bp = bx * g.spectral.iter().product::<f64>();
    let d = din.max(g.h1).max(g.h2).max(1) as f64;
    let (n, k) = (g.n as f64, g.k as f64);
    Ok(2.0 * n * bp * (2.0 * (2.0 * d).ln()).sqrt() / k.sqrt()
        + n * bp * ((2.0 / g.delta).ln() / (2.0 * k)).sqrt())
}

/// Largest per-layer spectral norm across the bidders' blocks.
pub fn layer_norms(net: &CorPaymentNet) -> Result<[f64; 3]> {
    let mut out = [0.0f64; 3];
    for i in 0..net.n() {
        let s = net.spectral_norms(i)?;
        for l in 0..3 {
            out[l] = out[l].max(s[l]);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapProbeConfig {
    pub k_list: Vec<usize>,
    pub seeds: Vec<u64>,
    pub widths: (usize, usize),
    pub iters: usize,
    pub batch_size: usize,
    pub test_size: usize,
    pub delta: f64,
    /// γ schedule and step size.
    pub train: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub k: usize,
    pub seed: u64,
    pub train_regret: f64,
    pub test_regret: f64,
    pub gap: f64,
    pub bound: f64,
}

/// Fits bias-free payment nets on `K` training profiles against the fixed
/// VCG menu and compares train and test Regret_IR.
pub fn empirical_gap_probe(cfg: &GapProbeConfig, spec: &DistributionSpec) -> Result<Vec<GapRow>> {
    spec.validate()?;
    cfg.train.validate()?;
    if cfg.k_list.windows(2).any(|w| w[0] >= w[1]) || cfg.k_list.is_empty() {
        return Err(Error::invalid("k_list", "must be non-empty and increasing"));
    }
    if cfg.iters == 0 || cfg.batch_size == 0 || cfg.seeds.is_empty() {
        return Err(Error::invalid("gap probe", "iters, batch and seeds must be non-empty"));
    }
    let params = AmaParams::vcg(spec.n, spec.m);
    let test = distributions::sample(spec, cfg.test_size)?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        for &k in &cfg.k_list {
            let pool = distributions::sample_stream(spec, 1 + (seed % 1_000_003), k)?.profiles;
            let mut net = CorPaymentNet::init(spec.n, spec.m, cfg.widths, false, seed)?;
            let mut adam = Adam::new(net.param_count(), cfg.train.step_size);
            let mut gamma = cfg.train.gamma0;
            let mut sampler = PoolSampler::new(pool, seed);
            for it in 0..cfg.iters {
                let batch = sampler.batch(it, cfg.batch_size);
                let (loss, _, reg, g) = post_loss_and_grad(&batch, &params, &net, gamma)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        iter: it,
                        detail: format!("gap probe loss {loss} at K={k}"),
                    });
                }
                adam.step(net.params_mut(), &g);
                gamma = update_gamma(gamma, reg, &cfg.train);
            }
            let train_regret = exact_metrics_with(&params, &net, sampler.pool())?.regret_ir_mean;
            let test_regret = exact_metrics_with(&params, &net, &test.profiles)?.regret_ir_mean;
            let bound = gen_bound(&GenBoundInputs {
                spectral: layer_norms(&net)?,
                h1: cfg.widths.0,
                h2: cfg.widths.1,
                n: spec.n,
                m: spec.m,
                k,
                delta: cfg.delta,
            })?;
            rows.push(GapRow {
                k,
                seed,
                train_regret,
                test_regret,
                gap: (train_regret - test_regret).abs(),
                bound,
            });
        }
    }
    Ok(rows)
}

/// Median of `xs` (mean of the middle pair for even lengths).
pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let h = v.len() / 2;
    if v.len() % 2 == 1 {
        v[h]
    } else {
        0.5 * (v[h - 1] + v[h])
    }
}

/// Random feasible AMA parameters for property checks.
pub fn random_ama(n: usize, m: usize, s: usize, rng: &mut ChaCha8Rng) -> AmaParams {
    let mut raw = crate::relaxation::RawAmaParams::zeros(n, m, s);
    for x in raw.menu_logits.iter_mut() {
        *x = rng.random_range(-3.0..3.0);
    }
    for x in raw.weight_logits.iter_mut() {
        *x = rng.random_range(-1.5..1.5);
    }
    for x in raw.boosts.iter_mut() {
        *x = rng.random_range(-0.3..0.3);
    }
    raw.realize()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mech::{FnCor, ZeroCor};

    #[test]
    fn gen_bound_example() {
        let g = GenBoundInputs {
            spectral: [1.0; 3],
            h1: 64,
            h2: 64,
            n: 2,
            m: 2,
            k: 2048,
            delta: 0.05,
        };
        let b = gen_bound(&g).unwrap();
        // 4√2·√(2 ln 128)/√2048 + 2√2·√(ln 40 / 4096)
        let bx = 2f64.sqrt();
        let direct = 4.0 * bx * (2.0 * 128f64.ln()).sqrt() / 2048f64.sqrt()
            + 2.0 * bx * (40f64.ln() / 4096.0).sqrt();
        assert!((b - direct).abs() < 1e-12);
        assert!((b - 0.474).abs() < 1e-3);
        let doubled = gen_bound(&GenBoundInputs { spectral: [2.0; 3], ..g }).unwrap();
        assert!((doubled / b - 8.0).abs() < 1e-12);
        let big = gen_bound(&GenBoundInputs { k: 1 << 40, ..g }).unwrap();
        assert!(big < 1e-4);
    }

    #[test]
    fn full_surplus_single_profile() {
        let v = ValuationProfile::new(2, 1, vec![0.8, 0.3]).unwrap();
        assert_eq!(full_surplus(&[v]).unwrap(), 0.8);
    }

    #[test]
    fn oracle_on_perfect_negative() {
        let spec = DistributionSpec::perfect_negative(1, 0);
        let p = AmaParams::vcg(2, 1);
        let u = opt_core_oracle(&p, 0, &[0.4], &spec).unwrap();
        assert!((u - 0.2).abs() < 1e-12);
    }

    #[test]
    fn oracle_on_uniform_is_zero() {
        let spec = DistributionSpec::uniform(2, 1, 0);
        let p = AmaParams::vcg(2, 1);
        assert_eq!(opt_core_oracle(&p, 0, &[0.4], &spec).unwrap(), 0.0);
    }

    #[test]
    fn broken_mechanism_is_caught() {
        // p_i = p_i^AMA + 0.1 v_i1 rewards underbidding
        struct Broken(AmaParams);
        impl Mechanism for Broken {
            fn n(&self) -> usize {
                2
            }
            fn m(&self) -> usize {
                1
            }
            fn outcome(&self, bids: &ValuationProfile) -> Result<AuctionOutcome> {
                let mut out = mech::ama_outcome(bids, &self.0)?;
                for i in 0..2 {
                    out.pay_ama[i] += 0.1 * bids.value(i, 0);
                }
                Ok(out)
            }
        }
        let spec = DistributionSpec::uniform(2, 1, 4);
        let data = distributions::sample(&spec, 200).unwrap();
        let r = measure_dsic_regret(&Broken(AmaParams::vcg(2, 1)), &data.profiles, MisreportGrid::Grid(21)).unwrap();
        assert!(r >= 0.05, "{r}");
        let ok = measure_dsic_regret(&Ama(&AmaParams::vcg(2, 1)), &data.profiles, MisreportGrid::Grid(21)).unwrap();
        assert!(ok <= 1e-9);
    }

    #[test]
    fn constant_cor_regret_contribution() {
        // AMA utility 0.02, p^Cor = 0.05 → 0.03
        let p = AmaParams::vcg(2, 1);
        let v = ValuationProfile::new(2, 1, vec![0.52, 0.5]).unwrap();
        let cor = FnCor(|i: usize, _: &[f64]| if i == 0 { 0.05 } else { 0.0 });
        let ir = measure_ir(&CaAma { params: &p, cor: &cor }, &[v]).unwrap();
        assert!((ir.ir_regret_mean - 0.03).abs() < 1e-12);
        let plain = measure_ir(&CaAma { params: &p, cor: &ZeroCor }, &[ValuationProfile::new(2, 1, vec![0.52, 0.5]).unwrap()]).unwrap();
        assert_eq!(plain.ir_regret_max, 0.0);
    }

    #[test]
    fn interval_revenue_matches_per_profile_sum() {
        let spec = DistributionSpec::equal_revenue(3, 0.1, 0.05, 8);
        let data = distributions::sample(&spec, 3000).unwrap();
        let mut v1: Vec<f64> = data.profiles.iter().map(|v| v.value(0, 0)).collect();
        v1.sort_by(f64::total_cmp);
        let mut prefix = vec![0.0];
        for x in &v1 {
            prefix.push(prefix.last().unwrap() + x);
        }
        let slope = spec.equal_revenue_slope();
        let line = |i: usize| if i == 0 { Line { a: 0.0, b: 1.0 } } else { Line { a: slope, b: -slope } };
        let mut r = rng(5);
        let mut cuts = Vec::new();
        for _ in 0..300 {
            let w: Vec<f64> = (0..3).map(|i| if i == 0 { 1.0 } else { r.random_range(0.1..10.0) }).collect();
            let lam: Vec<f64> = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let fast = interval_revenue(&w, &lam, &line, &v1, &prefix, &mut cuts);
            let p = AmaParams::deterministic(3, 1, w.clone(), lam.clone()).unwrap();
            let slow: f64 = data.profiles.iter().map(|v| mech::ama_outcome(v, &p).unwrap().revenue()).sum();
            assert!((fast - slow).abs() < 1e-8 * data.len() as f64, "{fast} vs {slow}");
        }
    }

    #[test]
    fn brute_grid_guard() {
        let spec = DistributionSpec::equal_revenue(4, 0.1, 0.05, 0);
        assert!(matches!(
            dama_brute_search(&spec, &BruteGrid::default()),
            Err(Error::GridTooLarge { .. })
        ));
        assert_eq!(BruteGrid::default().cells(2), 33 * 41 * 41 * 41);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
