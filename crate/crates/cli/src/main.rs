use std::path::{Path, PathBuf};
use std::process::ExitCode;

use caama::distributions::{DistributionKind, DistributionSpec, EqualRevenueMode};
use caama::trainer::TrainConfig;
use caama::verify::BruteGrid;
use caama_cli::config::{output_root, ExperimentConfig, ModeSel, OUTPUT_ROOT_ENV};
use caama_cli::experiments::{self, EvalOptions, DEFAULT_SWEEP_TARGETS, SUMMARY_HEADER};
use caama_cli::CliResult;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "caama", version, about = "Correlation-aware affine maximizer auction experiments")]
struct Cli {
    /// Default root for outputs when no directory is given.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Draw a dataset and write it as CSV plus a JSON manifest.
    Sample {
        #[command(flatten)]
        dist: DistArgs,
        #[arg(long, default_value_t = 20_000)]
        count: usize,
        /// Output CSV (default: <output-root>/<kind>.csv).
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train the configured modes; writes checkpoints, metric logs and a summary.
    Train {
        #[command(flatten)]
        exp: ExpArgs,
    },
    /// Verify a checkpoint (DSIC grid regret, IR, revenue).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset CSV; defaults to the checkpoint's own test set.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Evaluate with the IR opt-out applied.
        #[arg(long)]
        post_process: bool,
        #[arg(long, default_value_t = 1000)]
        dsic_profiles: usize,
        #[arg(long, default_value_t = 0)]
        count: usize,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// One CA-AMA run per regret target, with AMA-only and VCG reference rows.
    SweepRtarget {
        #[command(flatten)]
        exp: ExpArgs,
        /// Descending targets (default: 0.05 … 0.0001).
        #[arg(long, value_delimiter = ',')]
        targets: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
    },
    /// Training curves and reference lines on the two-bidder equal-revenue family.
    FigureEqualRevenue {
        #[command(flatten)]
        exp: ExpArgs,
        #[arg(long, value_delimiter = ',', default_value = "0.1")]
        epsilons: Vec<f64>,
    },
    /// Brute-force deterministic AMA bound versus the hand-set CA-AMA.
    VerifyAppendixB {
        #[arg(long, default_value_t = 0.1)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        epsilon1: f64,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Uniform,
    Dirichlet,
    LinearMixtureSym,
    LinearMixtureAsym,
    EqualRevenue,
    PerfectNegative,
}

impl From<KindArg> for DistributionKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Uniform => DistributionKind::UniformIid,
            KindArg::Dirichlet => DistributionKind::DirichletValueShare,
            KindArg::LinearMixtureSym => DistributionKind::LinearMixtureSym,
            KindArg::LinearMixtureAsym => DistributionKind::LinearMixtureAsym,
            KindArg::EqualRevenue => DistributionKind::EqualRevenueCorrelated,
            KindArg::PerfectNegative => DistributionKind::PerfectNegativeLinear,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ErModeArg {
    NBidder,
    Figure,
}

#[derive(Args, Clone)]
struct DistArgs {
    #[arg(long, value_enum, default_value = "uniform")]
    kind: KindArg,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value_t = 0.5)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    epsilon: f64,
    #[arg(long, default_value_t = 0.05)]
    epsilon1: f64,
    #[arg(long, value_enum, default_value = "n-bidder")]
    er_mode: ErModeArg,
    /// Distribution seed (fixes the test set).
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl DistArgs {
    fn spec(&self) -> DistributionSpec {
        DistributionSpec {
            kind: self.kind.into(),
            n: self.n,
            m: self.m,
            alpha: self.alpha,
            epsilon: self.epsilon,
            epsilon1: self.epsilon1,
            er_mode: match self.er_mode {
                ErModeArg::NBidder => EqualRevenueMode::NBidder,
                ErModeArg::Figure => EqualRevenueMode::TwoBidderFigure,
            },
            seed: self.seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// 16,000 iterations, batch 512.
    Desk,
    /// 32,000 iterations, batch 2,048.
    Full,
}

/// A config file, or distribution flags; individual train flags override either.
#[derive(Args, Clone)]
struct ExpArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    dist: DistArgs,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long, value_delimiter = ',')]
    modes: Vec<ModeArg>,
    #[arg(long)]
    total_iters: Option<usize>,
    #[arg(long)]
    mutual_fraction: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    r_target: Option<f64>,
    #[arg(long)]
    gamma0: Option<f64>,
    #[arg(long)]
    gamma_delta: Option<f64>,
    #[arg(long)]
    gamma_max: Option<f64>,
    #[arg(long)]
    gamma_min: Option<f64>,
    #[arg(long)]
    step_size: Option<f64>,
    #[arg(long)]
    menu_size: Option<usize>,
    /// Training seed.
    #[arg(long)]
    train_seed: Option<u64>,
    #[arg(long)]
    eval_every: Option<usize>,
    /// Payment-net hidden widths, e.g. 64,64.
    #[arg(long, value_parser = parse_widths)]
    widths: Option<(usize, usize)>,
    #[arg(long)]
    no_bias: bool,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Caama,
    AmaOnly,
    Vcg,
}

impl From<ModeArg> for ModeSel {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Caama => ModeSel::Caama,
            ModeArg::AmaOnly => ModeSel::AmaOnly,
            ModeArg::Vcg => ModeSel::Vcg,
        }
    }
}

impl ExpArgs {
    fn config(&self) -> CliResult<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::new(
                self.dist.spec(),
                TrainConfig::desk(),
                vec![ModeSel::Caama, ModeSel::AmaOnly, ModeSel::Vcg],
            ),
        };
        let t = &mut cfg.train;
        match self.preset {
            Some(Preset::Desk) => {
                t.total_iters = 16_000;
                t.batch_size = 512;
            }
            Some(Preset::Full) => {
                t.total_iters = 32_000;
                t.batch_size = 2048;
            }
            None => {}
        }
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(x) = self.$f { t.$f = x; } )* };
        }
        set!(total_iters, mutual_fraction, batch_size, temperature, r_target, gamma0, gamma_delta, gamma_max, gamma_min, step_size, menu_size, eval_every, test_size);
        if let Some(s) = self.train_seed {
            t.seed = s;
        }
        if let Some(w) = self.widths {
            t.widths = w;
        }
        if self.no_bias {
            t.bias = false;
        }
        if !self.modes.is_empty() {
            cfg.modes = self.modes.iter().map(|m| (*m).into()).collect();
        }
        if let Some(o) = &self.out {
            cfg.output_dir = Some(o.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_widths(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two widths, e.g. 64,64")?;
    let p = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn out_dir(explicit: &Option<PathBuf>, root: &Path, name: &str) -> PathBuf {
    explicit.clone().unwrap_or_else(|| root.join(name))
}

fn run(cli: Cli) -> CliResult<()> {
    let root = cli.output_root.clone().unwrap_or_else(output_root);
    match cli.cmd {
        Cmd::Sample { dist, count, out } => {
            let spec = dist.spec();
            let path = out.unwrap_or_else(|| root.join(format!("{}.csv", spec.kind.name())));
            let (csv, manifest) = experiments::cmd_sample(&spec, count, &path)?;
            println!("{}\n{}", csv.display(), manifest.display());
        }
        Cmd::Train { exp } => {
            let cfg = exp.config()?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| root.join("train"));
            let runs = experiments::cmd_train(&cfg, &dir)?;
            println!("{}", SUMMARY_HEADER.join(","));
            for r in runs {
                println!("{}", r.row.csv_fields().join(","));
            }
        }
        Cmd::Eval {
            checkpoint,
            dataset,
            post_process,
            dsic_profiles,
            count,
            out,
        } => {
            let dir = out_dir(&out, &root, "eval");
            let opts = EvalOptions {
                post_process,
                dsic_profiles,
                count,
            };
            let report = experiments::cmd_eval(&checkpoint, dataset.as_deref(), opts, Some(&dir))?;
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
        }
        Cmd::SweepRtarget { exp, targets, seeds } => {
            let cfg = exp.config()?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| root.join("sweep"));
            let targets = if targets.is_empty() {
                DEFAULT_SWEEP_TARGETS.to_vec()
            } else {
                targets
            };
            let report = experiments::cmd_sweep_rtarget(&cfg, &targets, &seeds, &dir)?;
            println!("r_target,regret_median,revenue_median");
            for p in &report.points {
                println!("{},{},{}", p.r_target, p.regret_median, p.revenue_median);
            }
            println!("ama-only,,{}", report.ama_only_median);
            println!("vcg,,{}", report.vcg_revenue);
        }
        Cmd::FigureEqualRevenue { exp, epsilons } => {
            let cfg = exp.config()?;
            let dir = cfg.output_dir.clone().unwrap_or_else(|| root.join("figure"));
            let reports =
                experiments::cmd_figure_equal_revenue(&cfg.train, &epsilons, cfg.distribution.seed, &dir)?;
            println!("epsilon,fpa_line,vcg_line,caama_revenue,caama_regret,ama_only_revenue");
            for r in reports {
                println!(
                    "{},{},{},{},{},{}",
                    r.epsilon, r.fpa_line, r.vcg_line, r.caama.revenue, r.caama.regret_ir_mean, r.ama_only.revenue
                );
            }
        }
        Cmd::VerifyAppendixB {
            epsilon,
            epsilon1,
            n,
            samples,
            seed,
            out,
        } => {
            let dir = out_dir(&out, &root, "appendix_b");
            let grid = BruteGrid {
                samples,
                ..BruteGrid::default()
            };
            let r = experiments::cmd_verify_appendix_b(epsilon, epsilon1, n, &grid, seed, Some(&dir))?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

