//! The subcommands as library calls, so tests can drive them directly.

use std::path::{Path, PathBuf};
use std::time::Instant;

use caama::distributions::{self, analytic_moments, DistributionSpec};
use caama::mech::{AmaParams, ZeroCor};
use caama::persist::{self, Checkpoint};
use caama::trainer::{self, exact_metrics_with, ExactMetrics, Mode, TrainConfig, TrainOutcome};
use caama::verify::{
    self, Ama, BruteGrid, CaAma, ForcedValueCor, MisreportGrid, PostProcessed, VerificationReport,
};
use caama::Error;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, ModeSel, ReportFormat};
use crate::CliResult;

pub const SUMMARY_HEADER: [&str; 7] = [
    "mode",
    "revenue",
    "revenue_postproc",
    "regret_ir_mean",
    "regret_ir_max",
    "pay_cor_share",
    "wallclock_s",
];

pub const DEFAULT_SWEEP_TARGETS: [f64; 8] = [0.05, 0.02, 0.01, 0.005, 0.002, 0.001, 0.0005, 0.0001];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub mode: ModeSel,
    pub revenue: f64,
    pub revenue_postproc: f64,
    pub regret_ir_mean: f64,
    pub regret_ir_max: f64,
    pub pay_cor_share: f64,
    pub wallclock_s: f64,
    /// Penalty strength at the end of training (absent for VCG).
    pub gamma_final: Option<f64>,
}

impl SummaryRow {
    fn from_metrics(mode: ModeSel, m: &ExactMetrics, wallclock_s: f64, gamma_final: Option<f64>) -> Self {
        Self {
            mode,
            revenue: m.revenue,
            revenue_postproc: m.revenue_postproc,
            regret_ir_mean: m.regret_ir_mean,
            regret_ir_max: m.regret_ir_max,
            pay_cor_share: m.pay_cor_share(),
            wallclock_s,
            gamma_final,
        }
    }

    pub fn csv_fields(&self) -> Vec<String> {
        vec![
            self.mode.name().to_string(),
            self.revenue.to_string(),
            self.revenue_postproc.to_string(),
            self.regret_ir_mean.to_string(),
            self.regret_ir_max.to_string(),
            self.pay_cor_share.to_string(),
            format!("{:.3}", self.wallclock_s),
        ]
    }
}

/// Writes `count` profiles and their manifest.
pub fn cmd_sample(spec: &DistributionSpec, count: usize, path: &Path) -> CliResult<(PathBuf, PathBuf)> {
    let data = distributions::sample(spec, count)?;
    let manifest = persist::write_dataset(path, &data)?;
    Ok((path.to_path_buf(), manifest))
}

/// VCG on `profiles`, through the full deterministic menu.
pub fn vcg_metrics(n: usize, m: usize, profiles: &[caama::ValuationProfile]) -> CliResult<ExactMetrics> {
    Ok(exact_metrics_with(&AmaParams::vcg(n, m), &ZeroCor, profiles)?)
}

#[derive(Clone, Debug)]
pub struct ModeRun {
    pub row: SummaryRow,
    pub outcome: Option<TrainOutcome>,
    pub checkpoint: Option<PathBuf>,
}

/// Trains every configured mode and writes checkpoints, metric logs and the
/// summary table into `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<ModeRun>> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let spec = &cfg.distribution;
    let mut runs = Vec::new();
    for &mode in &cfg.modes {
        let t0 = Instant::now();
        let run = match mode.trained() {
            Some(m) => {
                let outcome = trainer::train(&cfg.train, spec, m)?;
                let secs = t0.elapsed().as_secs_f64();
                let ck = out.join(format!("{}.checkpoint.json", mode.name()));
                Checkpoint::from_state(&outcome.state, &cfg.train, spec).save(&ck)?;
                persist::write_metric_log(
                    &out.join(format!("{}.metrics.csv", mode.name())),
                    &outcome.state.log,
                    cfg.train.seed,
                )?;
                ModeRun {
                    row: SummaryRow::from_metrics(mode, &outcome.metrics, secs, Some(outcome.state.gamma)),
                    outcome: Some(outcome),
                    checkpoint: Some(ck),
                }
            }
            None => {
                let test = distributions::sample(spec, cfg.train.test_size)?;
                let m = vcg_metrics(spec.n, spec.m, &test.profiles)?;
                ModeRun {
                    row: SummaryRow::from_metrics(mode, &m, t0.elapsed().as_secs_f64(), None),
                    outcome: None,
                    checkpoint: None,
                }
            }
        };
        runs.push(run);
    }
    let rows: Vec<SummaryRow> = runs.iter().map(|r| r.row.clone()).collect();
    if cfg.wants(ReportFormat::Csv) {
        let fields: Vec<Vec<String>> = rows.iter().map(SummaryRow::csv_fields).collect();
        persist::write_table(&out.join("summary.csv"), &SUMMARY_HEADER, &fields, cfg.train.seed)?;
    }
    if cfg.wants(ReportFormat::Json) {
        persist::write_json(&out.join("summary.json"), &rows)?;
    }
    Ok(runs)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub post_process: bool,
    /// Profiles used for misreport probing (the first ones of the dataset).
    pub dsic_profiles: usize,
    /// Test-set size when no dataset file is given; 0 uses the checkpoint's.
    pub count: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            post_process: false,
            dsic_profiles: 1000,
            count: 0,
        }
    }
}

/// Evaluates a checkpoint on a dataset file, or on the checkpoint's own
/// test set, and writes `eval.json` / `eval.csv` into `out`.
pub fn cmd_eval(
    checkpoint: &Path,
    dataset: Option<&Path>,
    opts: EvalOptions,
    out: Option<&Path>,
) -> CliResult<VerificationReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let profiles = match dataset {
        Some(p) => persist::read_dataset(p)?.profiles,
        None => {
            let count = if opts.count == 0 { ck.config.test_size } else { opts.count };
            distributions::sample(&ck.spec, count)?.profiles
        }
    };
    let params = ck.raw.realize();
    if let Some(v) = profiles.first() {
        if v.n() != params.n() || v.m() != params.m() {
            return Err(Error::invalid(
                "dataset",
                format!(
                    "{}x{} profiles do not fit a {}x{} checkpoint",
                    v.n(),
                    v.m(),
                    params.n(),
                    params.m()
                ),
            )
            .into());
        }
    }
    let grid = MisreportGrid::for_items(params.m());
    let report = match (&ck.cor, opts.post_process) {
        (Some(net), false) => verify::evaluate(&CaAma { params: &params, cor: net }, &profiles, grid, opts.dsic_profiles)?,
        (Some(net), true) => verify::evaluate(
            &PostProcessed(CaAma { params: &params, cor: net }),
            &profiles,
            grid,
            opts.dsic_profiles,
        )?,
        (None, false) => verify::evaluate(&Ama(&params), &profiles, grid, opts.dsic_profiles)?,
        (None, true) => verify::evaluate(&PostProcessed(Ama(&params)), &profiles, grid, opts.dsic_profiles)?,
    };
    if let Some(dir) = out {
        persist::write_json(&dir.join("eval.json"), &report)?;
        let header: Vec<&str> = VerificationReport::CSV_HEADER.split(',').collect();
        let row: Vec<String> = report.csv_row().split(',').map(String::from).collect();
        persist::write_table(&dir.join("eval.csv"), &header, &[row], ck.seed)?;
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: ModeSel,
    /// `None` for the reference rows.
    pub r_target: Option<f64>,
    pub seed: u64,
    pub revenue: f64,
    pub revenue_postproc: f64,
    pub regret_ir_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub r_target: f64,
    pub regret_median: f64,
    pub revenue_median: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    pub points: Vec<SweepPoint>,
    pub ama_only_median: f64,
    pub vcg_revenue: f64,
}

/// One CA-AMA run per (target, seed), plus AMA-only and VCG references.
/// Writes `sweep.csv` and the two-column `sweep.dat` (regret, revenue).
pub fn cmd_sweep_rtarget(
    cfg: &ExperimentConfig,
    targets: &[f64],
    seeds: &[u64],
    out: &Path,
) -> CliResult<SweepReport> {
    cfg.validate()?;
    if targets.is_empty() || targets.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::invalid("targets", "need positive targets").into());
    }
    if targets.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::invalid("targets", "must be strictly descending").into());
    }
    if seeds.is_empty() {
        return Err(Error::invalid("seeds", "need at least one seed").into());
    }
    let spec = &cfg.distribution;
    let test = distributions::sample(spec, cfg.train.test_size)?;
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &t in targets {
        let mut regrets = Vec::new();
        let mut revenues = Vec::new();
        for &seed in seeds {
            let tc = TrainConfig {
                r_target: t,
                seed,
                ..cfg.train.clone()
            };
            let o = trainer::train(&tc, spec, Mode::Caama)?;
            regrets.push(o.metrics.regret_ir_mean);
            revenues.push(o.metrics.revenue);
            rows.push(SweepRow {
                mode: ModeSel::Caama,
                r_target: Some(t),
                seed,
                revenue: o.metrics.revenue,
                revenue_postproc: o.metrics.revenue_postproc,
                regret_ir_mean: o.metrics.regret_ir_mean,
            });
        }
        points.push(SweepPoint {
            r_target: t,
            regret_median: verify::median(&regrets),
            revenue_median: verify::median(&revenues),
        });
    }
    let mut ama = Vec::new();
    for &seed in seeds {
        let tc = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        let o = trainer::train(&tc, spec, Mode::AmaOnly)?;
        ama.push(o.metrics.revenue);
        rows.push(SweepRow {
            mode: ModeSel::AmaOnly,
            r_target: None,
            seed,
            revenue: o.metrics.revenue,
            revenue_postproc: o.metrics.revenue_postproc,
            regret_ir_mean: o.metrics.regret_ir_mean,
        });
    }
    let vcg = vcg_metrics(spec.n, spec.m, &test.profiles)?;
    rows.push(SweepRow {
        mode: ModeSel::Vcg,
        r_target: None,
        seed: spec.seed,
        revenue: vcg.revenue,
        revenue_postproc: vcg.revenue_postproc,
        regret_ir_mean: 0.0,
    });
    let report = SweepReport {
        rows,
        points,
        ama_only_median: verify::median(&ama),
        vcg_revenue: vcg.revenue,
    };
    write_sweep(&report, cfg.train.seed, out)?;
    Ok(report)
}

fn write_sweep(report: &SweepReport, seed: u64, out: &Path) -> CliResult<()> {
    let header = ["mode", "r_target", "seed", "revenue", "revenue_postproc", "regret_ir_mean"];
    let fields: Vec<Vec<String>> = report
        .rows
        .iter()
        .map(|r| {
            vec![
                r.mode.name().into(),
                r.r_target.map_or(String::new(), |t| t.to_string()),
                r.seed.to_string(),
                r.revenue.to_string(),
                r.revenue_postproc.to_string(),
                r.regret_ir_mean.to_string(),
            ]
        })
        .collect();
    persist::write_table(&out.join("sweep.csv"), &header, &fields, seed)?;
    let mut dat = String::from("# achieved_regret revenue (median over seeds, one line per target)\n");
    for p in &report.points {
        dat.push_str(&format!("{} {}\n", p.regret_median, p.revenue_median));
    }
    dat.push_str(&format!("{}\n", persist::footer(seed)));
    std::fs::write(out.join("sweep.dat"), dat).map_err(Error::from)?;
    persist::write_json(&out.join("sweep.json"), report)?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureReport {
    pub epsilon: f64,
    /// Full-surplus (first-price) reference line.
    pub fpa_line: f64,
    pub vcg_line: f64,
    /// Monte-Carlo values of the two lines on the test set.
    pub fpa_mc: f64,
    pub vcg_mc: f64,
    pub caama: ExactMetrics,
    pub ama_only: ExactMetrics,
}

/// Trains CA-AMA and AMA-only on the two-bidder equal-revenue family for
/// each ε and writes training curves plus reference lines.
pub fn cmd_figure_equal_revenue(
    train: &TrainConfig,
    epsilons: &[f64],
    dist_seed: u64,
    out: &Path,
) -> CliResult<Vec<FigureReport>> {
    train.validate()?;
    std::fs::create_dir_all(out).map_err(Error::from)?;
    let mut reports = Vec::new();
    for &eps in epsilons {
        let spec = DistributionSpec::equal_revenue_figure(eps, dist_seed);
        spec.validate()?;
        let moments = analytic_moments(&spec)?;
        let test = distributions::sample(&spec, train.test_size)?;
        let fpa_mc = verify::full_surplus(&test.profiles)?;
        let vcg_mc = vcg_metrics(2, 1, &test.profiles)?.revenue;
        let ca = trainer::train(train, &spec, Mode::Caama)?;
        let ao = trainer::train(train, &spec, Mode::AmaOnly)?;
        let mut curve = Vec::new();
        for (name, o) in [("caama", &ca), ("ama-only", &ao)] {
            for r in &o.state.log {
                let share = |x: f64| if r.revenue_exact == 0.0 { 0.0 } else { x / r.revenue_exact };
                curve.push(vec![
                    name.to_string(),
                    r.iter.to_string(),
                    r.revenue_exact.to_string(),
                    share(r.pay_ama).to_string(),
                    share(r.pay_cor).to_string(),
                ]);
            }
        }
        let tag = format!("eps{eps}");
        persist::write_table(
            &out.join(format!("figure_{tag}.csv")),
            &["mode", "iter", "revenue_exact", "pay_ama_share", "pay_cor_share"],
            &curve,
            train.seed,
        )?;
        let vcg_line = moments.vcg_revenue.unwrap_or(vcg_mc);
        let refs = format!(
            "# line value (horizontal references)\nfpa {}\nvcg {}\n{}\n",
            moments.optimal_full_surplus,
            vcg_line,
            persist::footer(train.seed)
        );
        std::fs::write(out.join(format!("figure_{tag}_refs.dat")), refs).map_err(Error::from)?;
        reports.push(FigureReport {
            epsilon: eps,
            fpa_line: moments.optimal_full_surplus,
            vcg_line,
            fpa_mc,
            vcg_mc,
            caama: ca.metrics,
            ama_only: ao.metrics,
        });
    }
    persist::write_json(&out.join("figure.json"), &reports)?;
    Ok(reports)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AppendixBReport {
    pub epsilon: f64,
    pub epsilon1: f64,
    pub n: usize,
    pub samples: usize,
    pub dama_best_revenue: f64,
    pub dama_best_weights: Vec<f64>,
    pub dama_best_boosts: Vec<f64>,
    /// `ε/(1-ε) + ε₁`
    pub dama_bound: f64,
    pub optimum_analytic: f64,
    pub optimum_mc: f64,
    pub oracle_revenue: f64,
    pub oracle_regret_ir_mean: f64,
    pub oracle_regret_ir_max: f64,
}

/// Brute-force deterministic AMA versus the hand-set CA-AMA on the
/// n-bidder equal-revenue family.
pub fn cmd_verify_appendix_b(
    epsilon: f64,
    epsilon1: f64,
    n: usize,
    grid: &BruteGrid,
    seed: u64,
    out: Option<&Path>,
) -> CliResult<AppendixBReport> {
    let spec = DistributionSpec::equal_revenue(n, epsilon, epsilon1, seed);
    spec.validate()?;
    let brute = verify::dama_brute_search(&spec, grid)?;
    let data = distributions::sample(&spec, grid.samples)?;
    let params = AmaParams::vcg(n, 1);
    let cor = ForcedValueCor::for_spec(&spec)?;
    let m = exact_metrics_with(&params, &cor, &data.profiles)?;
    let report = AppendixBReport {
        epsilon,
        epsilon1,
        n,
        samples: grid.samples,
        dama_best_revenue: brute.best_revenue,
        dama_best_weights: brute.best_params.weights().to_vec(),
        dama_best_boosts: brute.best_params.boosts().to_vec(),
        dama_bound: epsilon / (1.0 - epsilon) + epsilon1,
        optimum_analytic: analytic_moments(&spec)?.optimal_full_surplus,
        optimum_mc: verify::full_surplus(&data.profiles)?,
        oracle_revenue: m.revenue,
        oracle_regret_ir_mean: m.regret_ir_mean,
        oracle_regret_ir_max: m.regret_ir_max,
    };
    if let Some(dir) = out {
        persist::write_json(&dir.join("appendix_b.json"), &report)?;
    }
    Ok(report)
}
