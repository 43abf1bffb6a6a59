use clap::{Args, Parser, Subcommand, ValueEnum};
use kernel_sobol::cli::{
    run_with_threads, BandwidthMode, CliError, CliResult, Command, InputSource, KernelConfig, RunConfig, StudyConfig,
};
use kernel_sobol::estimator::VarianceMode;
use kernel_sobol::kernel::{BaseSpec, CustomBase};
use kernel_sobol::testbed::{DensityPlugin, EstimatorKind, ModelKind};
use std::path::PathBuf;
use std::process::ExitCode;

/// Mirror-corrected kernel estimates of closed Sobol' indices.
#[derive(Parser)]
#[command(name = "ksobol", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Estimate one index from a CSV or a builtin model.
    Estimate(Flags),
    /// Run the pilot bandwidth selection and report the target check.
    Bandwidth(Flags),
    /// Bias, RMSE and scaled variance over an n grid.
    Convergence(Flags),
    /// Empirical coverage of the confidence interval.
    Coverage(Flags),
    /// Kernel estimator against pick-freeze, nearest-neighbour and rank baselines.
    Compare(Flags),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Linear,
    WeightedLinear,
    Ishigami,
    Product,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Plain,
    Debiased,
    SecondOrder,
}

#[derive(Args)]
struct Flags {
    /// JSON run config; other flags except --threads and --out are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Print the resolved config and exit.
    #[arg(long)]
    print_config: bool,

    /// CSV with header v1,...,vp,y.
    #[arg(long, conflicts_with = "model")]
    csv: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Dimension of the linear models.
    #[arg(long, default_value_t = 3)]
    p: usize,
    /// Weight ratio of the weighted linear model.
    #[arg(long, default_value_t = 2.0)]
    alpha: f64,
    #[arg(long, default_value_t = 7.0)]
    ishigami_a: f64,
    #[arg(long, default_value_t = 0.1)]
    ishigami_b: f64,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,

    /// One-based inputs, comma separated.
    #[arg(long, value_delimiter = ',')]
    mask: Vec<usize>,
    #[arg(long, default_value_t = 2)]
    order: usize,
    /// Beta base shapes `a,b` instead of the uniform base.
    #[arg(long, value_delimiter = ',')]
    beta_base: Option<Vec<f64>>,

    /// Fixed bandwidth.
    #[arg(long, conflicts_with_all = ["rule", "auto"])]
    h: Option<f64>,
    /// Bandwidth rule `c,gamma` for h = c n^-gamma.
    #[arg(long, value_delimiter = ',', conflicts_with = "auto")]
    rule: Option<Vec<f64>>,
    /// Pilot-based bandwidth selection.
    #[arg(long)]
    auto: bool,
    /// Width times n^-gamma with gamma mid-window for the kernel order.
    #[arg(long, conflicts_with_all = ["h", "rule", "auto"])]
    default_h: bool,
    /// Refine the pilot grid around its minimum.
    #[arg(long, requires = "auto")]
    refine: bool,

    /// exact, uniform-max, beta:<b> or kde:<aux_n>:<eta>[:<h>].
    #[arg(long, default_value = "exact")]
    density: String,
    #[arg(long, default_value_t = 0.95)]
    ci_level: f64,
    #[arg(long, value_enum, default_value_t = VarianceArg::SecondOrder)]
    variance: VarianceArg,

    /// Sample sizes for studies, comma separated.
    #[arg(long, value_delimiter = ',')]
    n_grid: Vec<usize>,
    /// Number of seeds for studies, starting at --seed.
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    /// Estimators for compare: kernel, pf, nn, rank.
    #[arg(long, value_delimiter = ',', default_value = "kernel")]
    estimators: Vec<String>,
    #[arg(long, default_value_t = 1.0)]
    variance_scale: f64,

    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

fn bad(field: &str, message: impl Into<String>) -> CliError {
    CliError::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn parse_density(s: &str) -> CliResult<DensityPlugin> {
    let parts: Vec<&str> = s.split(':').collect();
    let num = |t: &str| t.parse::<f64>().map_err(|_| bad("density", format!("cannot parse `{t}`")));
    match parts.as_slice() {
        ["exact"] => Ok(DensityPlugin::Exact),
        ["uniform-max"] => Ok(DensityPlugin::UniformMax),
        ["beta", b] => Ok(DensityPlugin::BetaMoment { b: num(b)? }),
        ["kde", m, eta, rest @ ..] if rest.len() <= 1 => Ok(DensityPlugin::MirrorKde {
            aux_n: m.parse().map_err(|_| bad("density", format!("cannot parse `{m}`")))?,
            eta: num(eta)?,
            h: rest.first().map(|h| num(h)).transpose()?,
        }),
        _ => Err(bad("density", format!("unknown plug-in `{s}`"))),
    }
}

fn parse_estimator(s: &str) -> CliResult<EstimatorKind> {
    match s {
        "kernel" => Ok(EstimatorKind::Kernel),
        "pf" => Ok(EstimatorKind::Pf),
        "nn" => Ok(EstimatorKind::Nn),
        "rank" => Ok(EstimatorKind::Rank),
        _ => Err(bad("study.estimators", format!("unknown estimator `{s}`"))),
    }
}

fn resolve(command: Command, f: &Flags) -> CliResult<RunConfig> {
    let mut cfg = match &f.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::Io {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            let cfg = RunConfig::from_json(&text)?;
            if cfg.command != command {
                return Err(bad("command", format!("config is for `{}`", cfg.command.as_str())));
            }
            cfg
        }
        None => from_flags(command, f)?,
    };
    if f.out.is_some() {
        cfg.output = f.out.clone();
    }
    if f.threads.is_some() {
        cfg.threads = f.threads;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn from_flags(command: Command, f: &Flags) -> CliResult<RunConfig> {
    let input = match (&f.csv, f.model) {
        (Some(path), None) => InputSource::Csv {
            path: path.clone(),
            inputs: None,
        },
        (None, Some(m)) => InputSource::Builtin {
            model: match m {
                ModelArg::Linear => ModelKind::Linear { p: f.p },
                ModelArg::WeightedLinear => ModelKind::WeightedLinear { alpha: f.alpha, p: f.p },
                ModelArg::Ishigami => ModelKind::Ishigami {
                    a: f.ishigami_a,
                    b: f.ishigami_b,
                },
                ModelArg::Product => ModelKind::Product,
            },
            n: f.n,
            seed: f.seed,
        },
        _ => return Err(bad("input", "pass exactly one of --csv or --model")),
    };
    let pair = |v: &Option<Vec<f64>>, field: &str| -> CliResult<Option<[f64; 2]>> {
        match v.as_deref() {
            None => Ok(None),
            Some(&[a, b]) => Ok(Some([a, b])),
            Some(_) => Err(bad(field, "expects two comma-separated numbers")),
        }
    };
    let rule = pair(&f.rule, "bandwidth")?;
    let beta_base = pair(&f.beta_base, "kernel.base")?;
    let bandwidth = match (f.h, rule, f.auto, f.default_h) {
        (Some(h), None, false, false) => BandwidthMode::Fixed { h },
        (None, Some([c, gamma]), false, false) => BandwidthMode::Rule { c, gamma },
        (None, None, true, false) => BandwidthMode::Auto { refine: f.refine },
        (None, None, false, true) => BandwidthMode::Default,
        _ => return Err(bad("bandwidth", "pass one of --h, --rule, --auto or --default-h")),
    };
    let base = match beta_base {
        Some(ab) => BaseSpec::Custom(CustomBase::Beta(ab)),
        None => BaseSpec::UniformHalf,
    };
    let study = if f.n_grid.is_empty() {
        None
    } else {
        Some(StudyConfig {
            n_grid: f.n_grid.clone(),
            seeds: f.seeds,
            estimators: f.estimators.iter().map(|s| parse_estimator(s)).collect::<CliResult<_>>()?,
            variance_scale: f.variance_scale,
        })
    };
    Ok(RunConfig {
        command,
        input,
        mask: f.mask.clone(),
        kernel: KernelConfig { order: f.order, base },
        bandwidth,
        density: parse_density(&f.density)?,
        ci_level: f.ci_level,
        variance: match f.variance {
            VarianceArg::Plain => VarianceMode::Plain,
            VarianceArg::Debiased => VarianceMode::Debiased,
            VarianceArg::SecondOrder => VarianceMode::SecondOrder,
        },
        study,
        output: None,
        threads: None,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, flags) = match &cli.command {
        Sub::Estimate(f) => (Command::Estimate, f),
        Sub::Bandwidth(f) => (Command::Bandwidth, f),
        Sub::Convergence(f) => (Command::Convergence, f),
        Sub::Coverage(f) => (Command::Coverage, f),
        Sub::Compare(f) => (Command::Compare, f),
    };
    let result = resolve(command, flags).and_then(|cfg| {
        if flags.print_config {
            println!("{}", cfg.to_json());
            return Ok(());
        }
        let out = run_with_threads(&cfg)?;
        let files: Vec<String> = out.files.iter().map(|p| p.display().to_string()).collect();
        println!("{}", serde_json::json!({ "files": files }));
        Ok(())
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(2)
        }
    }
}
