//! Exact evaluation of VCG, AMA and CA-AMA.
//!
//! Matrices are stored row-major with bidders as rows and items as
//! columns. Menu argmax ties are broken towards the lowest menu index.

use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};

/// Slack allowed on feasibility and IR checks along exact evaluation paths.
pub const FEAS_TOL: f64 = 1e-9;

/// Per-bidder, per-item values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValuationProfile {
    n: usize,
    m: usize,
    values: Vec<f64>,
}

impl ValuationProfile {
    pub fn new(n: usize, m: usize, values: Vec<f64>) -> Result<Self> {
        if n == 0 || m == 0 {
            return Err(Error::invalid("profile shape", format!("{n}x{m}")));
        }
        check_len("profile values", n * m, values.len())?;
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid("valuation", format!("{bad} not in [0,1]")));
        }
        Ok(Self { n, m, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("profile rows", "ragged rows"));
        }
        Self::new(n, m, rows.concat())
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            values: vec![0.0; n * m],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn value(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.m..(i + 1) * self.m]
    }

    /// `V_{-i}` flattened row-major, remaining bidders in original order.
    pub fn without_bidder(&self, i: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity((self.n - 1) * self.m);
        self.write_without_bidder(i, &mut out);
        out
    }

    pub(crate) fn write_without_bidder(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.extend_from_slice(&self.values[..i * self.m]);
        out.extend_from_slice(&self.values[(i + 1) * self.m..]);
    }

    /// Copy of the profile with bidder `i`'s row replaced (a misreport).
    pub fn with_row(&self, i: usize, row: &[f64]) -> Result<Self> {
        check_index("bidder", i, self.n)?;
        check_len("replacement row", self.m, row.len())?;
        if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("valuation", "replacement row outside [0,1]"));
        }
        let mut values = self.values.clone();
        values[i * self.m..(i + 1) * self.m].copy_from_slice(row);
        Ok(Self {
            n: self.n,
            m: self.m,
            values,
        })
    }
}

/// Fractional allocation matrix; every item is allocated at most once.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    n: usize,
    m: usize,
    entries: Vec<f64>,
}

impl Allocation {
    pub fn new(n: usize, m: usize, entries: Vec<f64>) -> Result<Self> {
        check_len("allocation entries", n * m, entries.len())?;
        if let Some(bad) = entries
            .iter()
            .find(|e| !(-FEAS_TOL..=1.0 + FEAS_TOL).contains(*e))
        {
            return Err(Error::invalid("allocation entry", format!("{bad}")));
        }
        let alloc = Self { n, m, entries };
        for j in 0..m {
            let s = alloc.column_sum(j);
            if s > 1.0 + FEAS_TOL {
                return Err(Error::invalid(
                    "allocation",
                    format!("item {j} over-allocated: column sum {s}"),
                ));
            }
        }
        Ok(alloc)
    }

    pub fn zeros(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            entries: vec![0.0; n * m],
        }
    }

    /// Deterministic allocation; `owners[j]` is `Some(bidder)` or `None` for reserve.
    pub fn deterministic(n: usize, owners: &[Option<usize>]) -> Self {
        let m = owners.len();
        let mut entries = vec![0.0; n * m];
        for (j, owner) in owners.iter().enumerate() {
            if let Some(i) = owner {
                entries[i * m + j] = 1.0;
            }
        }
        Self { n, m, entries }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.m + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.entries[i * self.m..(i + 1) * self.m]
    }

    pub fn column_sum(&self, j: usize) -> f64 {
        (0..self.n).map(|i| self.get(i, j)).sum()
    }

    pub fn max_column_sum(&self) -> f64 {
        (0..self.m)
            .map(|j| self.column_sum(j))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// `v_i · A_i`
    pub fn bidder_value(&self, i: usize, values: &[f64]) -> f64 {
        dot(self.row(i), values)
    }

    pub(crate) fn zero_row(&mut self, i: usize) {
        let m = self.m;
        self.entries[i * m..(i + 1) * m].fill(0.0);
    }

    fn max_abs_diff(&self, other: &Allocation) -> f64 {
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// AMA parameters: candidate menu, bidder weights and per-entry boosts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmaParams {
    n: usize,
    m: usize,
    menu: Vec<Allocation>,
    weights: Vec<f64>,
    boosts: Vec<f64>,
}

impl AmaParams {
    pub fn new(menu: Vec<Allocation>, weights: Vec<f64>, boosts: Vec<f64>) -> Result<Self> {
        let first = menu
            .first()
            .ok_or_else(|| Error::invalid("menu", "empty menu"))?;
        let (n, m) = (first.n, first.m);
        if n == 0 || m == 0 {
            return Err(Error::invalid("menu", "zero-sized allocation"));
        }
        for a in &menu {
            if a.n != n || a.m != m {
                return Err(Error::invalid("menu", "allocations of mixed shape"));
            }
        }
        check_len("weights", n, weights.len())?;
        check_len("boosts", menu.len(), boosts.len())?;
        if let Some(w) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(Error::invalid("weight", format!("{w} is not strictly positive")));
        }
        if boosts.iter().any(|l| !l.is_finite()) {
            return Err(Error::invalid("boost", "non-finite"));
        }
        Ok(Self {
            n,
            m,
            menu,
            weights,
            boosts,
        })
    }

    /// AMA over every deterministic allocation, in [`deterministic_menu`] order.
    pub fn deterministic(n: usize, m: usize, weights: Vec<f64>, boosts: Vec<f64>) -> Result<Self> {
        Self::new(deterministic_menu(n, m), weights, boosts)
    }

    /// Full deterministic menu with unit weights and zero boosts (VCG).
    pub fn vcg(n: usize, m: usize) -> Self {
        let menu = deterministic_menu(n, m);
        let s = menu.len();
        Self {
            n,
            m,
            menu,
            weights: vec![1.0; n],
            boosts: vec![0.0; s],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn menu(&self) -> &[Allocation] {
        &self.menu
    }

    pub fn menu_size(&self) -> usize {
        self.menu.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn boosts(&self) -> &[f64] {
        &self.boosts
    }

    /// Multiplies weights and boosts by `c > 0`; the argmax is unchanged.
    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(
            self.menu.clone(),
            self.weights.iter().map(|w| w * c).collect(),
            self.boosts.iter().map(|l| l * c).collect(),
        )
    }

    /// Whether every pair of menu entries differs by more than `tol` somewhere.
    pub fn menu_is_distinct(&self, tol: f64) -> bool {
        for (a, x) in self.menu.iter().enumerate() {
            for y in &self.menu[a + 1..] {
                if x.max_abs_diff(y) <= tol {
                    return false;
                }
            }
        }
        true
    }

    fn check_profile(&self, v: &ValuationProfile) -> Result<()> {
        check_len("profile bidders", self.n, v.n)?;
        check_len("profile items", self.m, v.m)
    }

    /// `values[k * n + i] = v_i · (A_k)_i`
    pub(crate) fn bidder_values(&self, v: &ValuationProfile, out: &mut Vec<f64>) {
        out.clear();
        for a in &self.menu {
            for i in 0..self.n {
                out.push(dot(a.row(i), v.row(i)));
            }
        }
    }
}

/// All `(n+1)^m` deterministic allocations.
///
/// Item-major order: item 0 is the most significant digit, and digit 0
/// means the item is reserved while digit `i + 1` gives it to bidder `i`.
pub fn deterministic_menu(n: usize, m: usize) -> Vec<Allocation> {
    let base = n + 1;
    let count = base.pow(m as u32);
    (0..count)
        .map(|idx| {
            let owners = menu_owners(idx, n, m);
            Allocation::deterministic(n, &owners)
        })
        .collect()
}

fn menu_owners(mut idx: usize, n: usize, m: usize) -> Vec<Option<usize>> {
    let base = n + 1;
    let mut owners = vec![None; m];
    for j in (0..m).rev() {
        let d = idx % base;
        idx /= base;
        owners[j] = d.checked_sub(1);
    }
    owners
}

fn menu_index(owners: &[Option<usize>], n: usize) -> usize {
    owners
        .iter()
        .fold(0, |acc, o| acc * (n + 1) + o.map_or(0, |i| i + 1))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub allocation: Allocation,
    pub pay_ama: Vec<f64>,
    pub pay_cor: Vec<f64>,
    pub utilities: Vec<f64>,
    pub winner_index: usize,
}

impl AuctionOutcome {
    pub fn revenue(&self) -> f64 {
        self.pay_ama.iter().sum::<f64>() + self.pay_cor.iter().sum::<f64>()
    }

    /// `p^CA_i = p^AMA_i + p^Cor_i`
    pub fn total_payment(&self, i: usize) -> f64 {
        self.pay_ama[i] + self.pay_cor[i]
    }

    pub fn min_utility(&self) -> f64 {
        self.utilities.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// `Σ_i max(0, -u_i)`
    pub fn regret_ir(&self) -> f64 {
        self.utilities.iter().map(|u| (-u).max(0.0)).sum()
    }

    /// Utility of bidder `i` with true values `values_i` under this outcome.
    pub fn utility_for(&self, i: usize, values_i: &[f64]) -> f64 {
        self.allocation.bidder_value(i, values_i) - self.total_payment(i)
    }
}

/// Correlation-aware payment `p^Cor_i(V_{-i})`.
pub trait CorPayment {
    /// `others` is `V_{-i}` flattened row-major.
    fn payment(&self, bidder: usize, others: &[f64]) -> Result<f64>;
}

impl<T: CorPayment + ?Sized> CorPayment for &T {
    fn payment(&self, bidder: usize, others: &[f64]) -> Result<f64> {
        (**self).payment(bidder, others)
    }
}

/// `p^Cor ≡ 0`, which reduces CA-AMA to the plain AMA.
#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroCor;

impl CorPayment for ZeroCor {
    fn payment(&self, _bidder: usize, _others: &[f64]) -> Result<f64> {
        Ok(0.0)
    }
}

/// Wraps a closure as a correlation payment.
pub struct FnCor<F>(pub F);

impl<F: Fn(usize, &[f64]) -> f64> CorPayment for FnCor<F> {
    fn payment(&self, bidder: usize, others: &[f64]) -> Result<f64> {
        Ok((self.0)(bidder, others))
    }
}

/// Affine social welfare `Σ_i w_i (v_i · (A_k)_i) + λ_k`.
pub fn asw(k: usize, v: &ValuationProfile, params: &AmaParams) -> Result<f64> {
    params.check_profile(v)?;
    check_index("menu", k, params.menu_size())?;
    let a = &params.menu[k];
    let welfare: f64 = (0..params.n)
        .map(|i| params.weights[i] * a.bidder_value(i, v.row(i)))
        .sum();
    Ok(welfare + params.boosts[k])
}

/// `asw(k) - w_i (v_i · (A_k)_i)`
pub fn asw_minus(i: usize, k: usize, v: &ValuationProfile, params: &AmaParams) -> Result<f64> {
    check_index("bidder", i, params.n)?;
    let total = asw(k, v, params)?;
    Ok(total - params.weights[i] * params.menu[k].bidder_value(i, v.row(i)))
}

/// Exact AMA allocation and payments.
pub fn ama_outcome(v: &ValuationProfile, params: &AmaParams) -> Result<AuctionOutcome> {
    params.check_profile(v)?;
    let mut bv = Vec::with_capacity(params.menu_size() * params.n);
    params.bidder_values(v, &mut bv);
    Ok(ama_outcome_from_values(v, params, &bv))
}

pub(crate) fn ama_outcome_from_values(
    v: &ValuationProfile,
    params: &AmaParams,
    bv: &[f64],
) -> AuctionOutcome {
    let n = params.n;
    let s = params.menu_size();
    let asw: Vec<f64> = (0..s)
        .map(|k| {
            let welfare: f64 = (0..n).map(|i| params.weights[i] * bv[k * n + i]).sum();
            welfare + params.boosts[k]
        })
        .collect();
    let winner = argmax_first(&asw);
    let alloc = params.menu[winner].clone();

    let mut pay_ama = Vec::with_capacity(n);
    let mut utilities = Vec::with_capacity(n);
    for i in 0..n {
        let w = params.weights[i];
        let minus = |k: usize| asw[k] - w * bv[k * n + i];
        let at_winner = minus(winner);
        let best = (0..s).map(minus).fold(f64::NEG_INFINITY, f64::max);
        let p = (best - at_winner) / w;
        pay_ama.push(p);
        utilities.push(alloc.bidder_value(i, v.row(i)) - p);
    }
    AuctionOutcome {
        allocation: alloc,
        pay_ama,
        pay_cor: vec![0.0; n],
        utilities,
        winner_index: winner,
    }
}

/// CA-AMA: the AMA outcome plus `p^Cor_i(V_{-i})` charged to each bidder.
pub fn caama_outcome<C: CorPayment + ?Sized>(
    v: &ValuationProfile,
    params: &AmaParams,
    cor: &C,
) -> Result<AuctionOutcome> {
    let mut out = ama_outcome(v, params)?;
    let mut others = Vec::with_capacity((v.n - 1) * v.m);
    for i in 0..v.n {
        v.write_without_bidder(i, &mut others);
        let p = cor.payment(i, &others)?;
        out.pay_cor[i] = p;
        out.utilities[i] -= p;
    }
    Ok(out)
}

/// VCG for additive bidders: each item goes to its highest bidder at the
/// second-highest value. Matches the full-menu AMA with `w = 1`, `λ = 0`,
/// including tie-breaking (lowest bidder index; reserve if every value is 0).
pub fn vcg_outcome(v: &ValuationProfile) -> AuctionOutcome {
    let (n, m) = (v.n, v.m);
    let mut owners = vec![None; m];
    let mut pay_ama = vec![0.0; n];
    for (j, owner) in owners.iter_mut().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_val = 0.0;
        for i in 0..n {
            if v.value(i, j) > best_val {
                best = Some(i);
                best_val = v.value(i, j);
            }
        }
        if let Some(w) = best {
            let second = (0..n)
                .filter(|&i| i != w)
                .map(|i| v.value(i, j))
                .fold(0.0, f64::max);
            pay_ama[w] += second;
        }
        *owner = best;
    }
    let allocation = Allocation::deterministic(n, &owners);
    let utilities = (0..n)
        .map(|i| allocation.bidder_value(i, v.row(i)) - pay_ama[i])
        .collect();
    AuctionOutcome {
        winner_index: menu_index(&owners, n),
        allocation,
        pay_ama,
        pay_cor: vec![0.0; n],
        utilities,
    }
}

/// Ex-post IR opt-out: any bidder with negative utility receives nothing
/// and pays nothing.
pub fn post_process_ir(mut out: AuctionOutcome) -> AuctionOutcome {
    for i in 0..out.utilities.len() {
        if out.utilities[i] < 0.0 {
            out.allocation.zero_row(i);
            out.pay_ama[i] = 0.0;
            out.pay_cor[i] = 0.0;
            out.utilities[i] = 0.0;
        }
    }
    out
}

pub(crate) fn argmax_first(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, x) in xs.iter().enumerate().skip(1) {
        if *x > xs[best] {
            best = k;
        }
    }
    best
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
