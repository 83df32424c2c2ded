//! Valuation samplers and their conditional supports.
//!
//! Every profile is drawn from its own ChaCha8 stream keyed by
//! `(seed, stream, index)`, so any profile can be regenerated on its own and
//! the order in which profiles are produced never changes their values.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{check_index, check_len, Error, Result};
use crate::mech::ValuationProfile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistributionKind {
    UniformIid,
    DirichletValueShare,
    LinearMixtureSym,
    LinearMixtureAsym,
    EqualRevenueCorrelated,
    PerfectNegativeLinear,
}

impl DistributionKind {
    pub const ALL: [DistributionKind; 6] = [
        DistributionKind::UniformIid,
        DistributionKind::DirichletValueShare,
        DistributionKind::LinearMixtureSym,
        DistributionKind::LinearMixtureAsym,
        DistributionKind::EqualRevenueCorrelated,
        DistributionKind::PerfectNegativeLinear,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DistributionKind::UniformIid => "uniform-iid",
            DistributionKind::DirichletValueShare => "dirichlet-value-share",
            DistributionKind::LinearMixtureSym => "linear-mixture-sym",
            DistributionKind::LinearMixtureAsym => "linear-mixture-asym",
            DistributionKind::EqualRevenueCorrelated => "equal-revenue-correlated",
            DistributionKind::PerfectNegativeLinear => "perfect-negative-linear",
        }
    }
}

/// Slope linking the other bidders to bidder 1 in the equal-revenue family.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EqualRevenueMode {
    /// `v_i = ε₁ (1 - v_1)` for every `i ≥ 2`.
    #[default]
    NBidder,
    /// Two bidders, `v_2 = ε/(1-ε) (1 - v_1)`.
    TwoBidderFigure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSpec {
    pub kind: DistributionKind,
    pub n: usize,
    pub m: usize,
    /// Dirichlet concentration, or the correlated-branch probability of a mixture.
    #[serde(default)]
    pub alpha: f64,
    /// Lower support bound of the equal-revenue distribution.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub epsilon1: f64,
    #[serde(default)]
    pub er_mode: EqualRevenueMode,
    pub seed: u64,
}

impl DistributionSpec {
    pub fn uniform(n: usize, m: usize, seed: u64) -> Self {
        Self::base(DistributionKind::UniformIid, n, m, seed)
    }

    pub fn dirichlet(n: usize, m: usize, alpha: f64, seed: u64) -> Self {
        Self {
            alpha,
            ..Self::base(DistributionKind::DirichletValueShare, n, m, seed)
        }
    }

    pub fn linear_mixture(symmetric: bool, m: usize, alpha: f64, seed: u64) -> Self {
        let kind = if symmetric {
            DistributionKind::LinearMixtureSym
        } else {
            DistributionKind::LinearMixtureAsym
        };
        Self {
            alpha,
            ..Self::base(kind, 2, m, seed)
        }
    }

    /// n-bidder construction with slope `ε₁`.
    pub fn equal_revenue(n: usize, epsilon: f64, epsilon1: f64, seed: u64) -> Self {
        Self {
            epsilon,
            epsilon1,
            er_mode: EqualRevenueMode::NBidder,
            ..Self::base(DistributionKind::EqualRevenueCorrelated, n, 1, seed)
        }
    }

    /// Two-bidder variant with slope `ε/(1-ε)`.
    pub fn equal_revenue_figure(epsilon: f64, seed: u64) -> Self {
        Self {
            epsilon,
            er_mode: EqualRevenueMode::TwoBidderFigure,
            ..Self::base(DistributionKind::EqualRevenueCorrelated, 2, 1, seed)
        }
    }

    pub fn perfect_negative(m: usize, seed: u64) -> Self {
        Self::base(DistributionKind::PerfectNegativeLinear, 2, m, seed)
    }

    fn base(kind: DistributionKind, n: usize, m: usize, seed: u64) -> Self {
        Self {
            kind,
            n,
            m,
            alpha: 0.0,
            epsilon: 0.0,
            epsilon1: 0.0,
            er_mode: EqualRevenueMode::NBidder,
            seed,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self {
            seed,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        use DistributionKind::*;
        if self.n == 0 || self.m == 0 {
            return Err(Error::invalid("distribution shape", format!("{}x{}", self.n, self.m)));
        }
        match self.kind {
            UniformIid => {}
            DirichletValueShare => {
                if !(self.alpha > 0.0 && self.alpha.is_finite()) {
                    return Err(Error::invalid("alpha", "Dirichlet concentration must be > 0"));
                }
            }
            LinearMixtureSym | LinearMixtureAsym | PerfectNegativeLinear => {
                if self.n != 2 {
                    return Err(Error::Unsupported(format!(
                        "{} requires exactly 2 bidders (got {})",
                        self.kind.name(),
                        self.n
                    )));
                }
                if self.kind != PerfectNegativeLinear && !(0.0..=1.0).contains(&self.alpha) {
                    return Err(Error::invalid("alpha", "mixture probability must be in [0,1]"));
                }
            }
            EqualRevenueCorrelated => {
                if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
                    return Err(Error::invalid("epsilon", "must lie in (0,1)"));
                }
                if self.n < 2 {
                    return Err(Error::Unsupported("equal-revenue needs n >= 2".into()));
                }
                match self.er_mode {
                    EqualRevenueMode::NBidder => {
                        if !(self.epsilon1 > 0.0 && self.epsilon1 < self.epsilon) {
                            return Err(Error::invalid("epsilon1", "need 0 < epsilon1 < epsilon"));
                        }
                    }
                    EqualRevenueMode::TwoBidderFigure => {
                        if self.n != 2 {
                            return Err(Error::Unsupported(
                                "two-bidder equal-revenue mode requires n = 2".into(),
                            ));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Slope `c` with `v_i = c (1 - v_1)` for the equal-revenue family.
    pub fn equal_revenue_slope(&self) -> f64 {
        match self.er_mode {
            EqualRevenueMode::NBidder => self.epsilon1,
            EqualRevenueMode::TwoBidderFigure => self.epsilon / (1.0 - self.epsilon),
        }
    }

    /// Profile `index` of stream `stream`; pure in `(self, stream, index)`.
    pub fn draw(&self, stream: u64, index: u64) -> ValuationProfile {
        let mut rng = profile_rng(self.seed, stream, index);
        let values = self.draw_values(&mut rng);
        ValuationProfile::new(self.n, self.m, values).expect("sampler produced an invalid profile")
    }

    fn draw_values(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        use DistributionKind::*;
        let (n, m) = (self.n, self.m);
        let mut v = vec![0.0; n * m];
        match self.kind {
            UniformIid => v.iter_mut().for_each(|x| *x = rng.random::<f64>()),
            DirichletValueShare => {
                let mut shares = vec![0.0; n];
                for j in 0..m {
                    let total = 0.5 + 0.5 * rng.random::<f64>();
                    dirichlet_shares(self.alpha, rng, &mut shares);
                    for i in 0..n {
                        v[i * m + j] = (shares[i] * total).clamp(0.0, 1.0);
                    }
                }
            }
            LinearMixtureSym | LinearMixtureAsym => {
                let sym = self.kind == LinearMixtureSym;
                for j in 0..m {
                    let v1 = rng.random::<f64>();
                    let correlated = rng.random::<f64>() < self.alpha;
                    let indep = rng.random::<f64>();
                    v[j] = v1;
                    v[m + j] = match (sym, correlated) {
                        (true, true) => 1.0 - v1,
                        (true, false) => indep,
                        (false, true) => (1.0 - v1) / 4.0,
                        (false, false) => indep / 4.0,
                    };
                }
            }
            EqualRevenueCorrelated => {
                let slope = self.equal_revenue_slope();
                for j in 0..m {
                    let u = rng.random::<f64>();
                    let v1 = equal_revenue_inverse_cdf(u, self.epsilon)
                        .expect("u drawn from [0,1)");
                    v[j] = v1;
                    for i in 1..n {
                        v[i * m + j] = slope * (1.0 - v1);
                    }
                }
            }
            PerfectNegativeLinear => {
                for j in 0..m {
                    let v1 = rng.random::<f64>();
                    v[j] = v1;
                    v[m + j] = 1.0 - v1;
                }
            }
        }
        v
    }
}

pub(crate) fn profile_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let key = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17);
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Symmetric Dirichlet draw via normalised Gamma variates, computed in log
/// space so that small concentrations do not underflow to an all-zero vector.
fn dirichlet_shares(alpha: f64, rng: &mut ChaCha8Rng, out: &mut [f64]) {
    // Gamma(α) = Gamma(α + 1) · U^{1/α}
    let boost = alpha < 1.0;
    let gamma = Gamma::new(if boost { alpha + 1.0 } else { alpha }, 1.0)
        .expect("alpha validated positive");
    for x in out.iter_mut() {
        let g: f64 = gamma.sample(rng);
        let mut lg = g.max(f64::MIN_POSITIVE).ln();
        if boost {
            let u = 1.0 - rng.random::<f64>();
            lg += u.ln() / alpha;
        }
        *x = lg;
    }
    let top = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in out.iter_mut() {
        *x = (*x - top).exp();
        sum += *x;
    }
    out.iter_mut().for_each(|x| *x /= sum);
}

/// Inverse CDF of the equal-revenue law on `[ε, 1]`,
/// whose CDF is `F(v) = (1 - ε/v) / (1 - ε)`.
pub fn equal_revenue_inverse_cdf(u: f64, epsilon: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&u) {
        return Err(Error::invalid("quantile", format!("{u} not in [0,1)")));
    }
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::invalid("epsilon", "must lie in (0,1)"));
    }
    Ok(epsilon / (1.0 - (1.0 - epsilon) * u))
}

pub fn equal_revenue_cdf(v: f64, epsilon: f64) -> f64 {
    if v <= epsilon {
        0.0
    } else if v >= 1.0 {
        1.0
    } else {
        (1.0 - epsilon / v) / (1.0 - epsilon)
    }
}

/// Provenance of a sampled dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: DistributionSpec,
    pub seed: u64,
    pub stream: u64,
    pub count: usize,
    pub generator: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub profiles: Vec<ValuationProfile>,
    pub spec: DistributionSpec,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.profiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.profiles.is_empty()
    }
}

/// `count` i.i.d. profiles from stream 0.
pub fn sample(spec: &DistributionSpec, count: usize) -> Result<Dataset> {
    sample_stream(spec, 0, count)
}

pub fn sample_stream(spec: &DistributionSpec, stream: u64, count: usize) -> Result<Dataset> {
    spec.validate()?;
    if count == 0 {
        return Err(Error::invalid("count", "dataset needs at least one profile"));
    }
    let profiles = (0..count as u64).map(|k| spec.draw(stream, k)).collect();
    Ok(Dataset {
        profiles,
        spec: spec.clone(),
        manifest: Manifest {
            spec: spec.clone(),
            seed: spec.seed,
            stream,
            count,
            generator: concat!("caama ", env!("CARGO_PKG_VERSION")).to_string(),
        },
    })
}

/// Conditional support of `v_i` given `V_{-i}`.
#[derive(Clone, Debug, PartialEq)]
pub enum Support {
    /// `v_i` is fully determined.
    Point(Vec<f64>),
    /// Axis-aligned box `Π_j [lo_j, hi_j]`.
    Box { lo: Vec<f64>, hi: Vec<f64> },
    Union(Vec<Support>),
}

impl Support {
    pub fn full_box(m: usize) -> Self {
        Support::Box {
            lo: vec![0.0; m],
            hi: vec![1.0; m],
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            Support::Point(p) => p.iter().zip(x).all(|(a, b)| (a - b).abs() <= tol),
            Support::Box { lo, hi } => x
                .iter()
                .zip(lo.iter().zip(hi))
                .all(|(v, (l, h))| *v >= l - tol && *v <= h + tol),
            Support::Union(parts) => parts.iter().any(|p| p.contains(x, tol)),
        }
    }
}

/// Support of bidder `i`'s values given the others, `others = V_{-i}` flattened.
pub fn conditional_support(spec: &DistributionSpec, i: usize, others: &[f64]) -> Result<Support> {
    use DistributionKind::*;
    spec.validate()?;
    check_index("bidder", i, spec.n)?;
    let m = spec.m;
    check_len("V_-i", (spec.n - 1) * m, others.len())?;
    // row `r` of V_{-i} belongs to bidder r (r < i) or r + 1 (r >= i)
    let other = |r: usize, j: usize| others[r * m + j];
    Ok(match spec.kind {
        UniformIid => Support::full_box(m),
        PerfectNegativeLinear => Support::Point((0..m).map(|j| 1.0 - other(0, j)).collect()),
        EqualRevenueCorrelated => {
            let slope = spec.equal_revenue_slope();
            if i == 0 {
                Support::Point((0..m).map(|j| 1.0 - other(0, j) / slope).collect())
            } else {
                Support::Point((0..m).map(|j| slope * (1.0 - other(0, j))).collect())
            }
        }
        LinearMixtureSym => {
            let point = (0..m).map(|j| 1.0 - other(0, j)).collect();
            Support::Union(vec![Support::Point(point), Support::full_box(m)])
        }
        LinearMixtureAsym => {
            if i == 0 {
                // correlated branch inverts v2 = (1 - v1)/4; only feasible for v2 <= 1/4
                let point: Vec<f64> = (0..m).map(|j| 1.0 - 4.0 * other(0, j)).collect();
                let mut parts = vec![Support::full_box(m)];
                if point.iter().all(|x| (0.0..=1.0).contains(x)) {
                    parts.insert(0, Support::Point(point));
                }
                Support::Union(parts)
            } else {
                let point = (0..m).map(|j| (1.0 - other(0, j)) / 4.0).collect();
                Support::Union(vec![
                    Support::Point(point),
                    Support::Box {
                        lo: vec![0.0; m],
                        hi: vec![0.25; m],
                    },
                ])
            }
        }
        DirichletValueShare => {
            // v_ij = T_j - Σ_{l≠i} v_lj with T_j ∈ [0.5, 1]
            let mut lo = Vec::with_capacity(m);
            let mut hi = Vec::with_capacity(m);
            for j in 0..m {
                let s: f64 = (0..spec.n - 1).map(|r| other(r, j)).sum();
                let h = (1.0 - s).clamp(0.0, 1.0);
                lo.push((0.5 - s).clamp(0.0, h));
                hi.push(h);
            }
            Support::Box { lo, hi }
        }
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyticMoments {
    /// `E[Σ_j max_i v_ij]`, the first-price / full-surplus revenue.
    pub optimal_full_surplus: f64,
    pub vcg_revenue: Option<f64>,
}

/// Closed-form full surplus and VCG revenue where they exist.
pub fn analytic_moments(spec: &DistributionSpec) -> Result<AnalyticMoments> {
    spec.validate()?;
    let m = spec.m as f64;
    match spec.kind {
        DistributionKind::EqualRevenueCorrelated => {
            let e = spec.epsilon;
            let mean_v1 = e * (1.0 / e).ln() / (1.0 - e);
            // bidder 1 has v1 >= ε > slope·(1 - v1), so always wins and pays v2
            let slope = spec.equal_revenue_slope();
            Ok(AnalyticMoments {
                optimal_full_surplus: m * mean_v1,
                vcg_revenue: Some(m * slope * (1.0 - mean_v1)),
            })
        }
        DistributionKind::PerfectNegativeLinear => Ok(AnalyticMoments {
            optimal_full_surplus: 0.75 * m,
            vcg_revenue: Some(0.25 * m),
        }),
        k => Err(Error::Unsupported(format!("no closed form for {}", k.name()))),
    }
}
