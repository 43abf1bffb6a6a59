//! Run configuration, dispatch and artifact writing for the `ksobol` binary.

use crate::bandwidth::{check_target_normalization, select_bandwidth, BandwidthSelection, PilotConfig, TargetCheck};
use crate::domain::Domain;
use crate::error::SobolError;
use crate::estimator::{default_bandwidth, estimate_sobol, EstimateResult, EstimatorOptions, FullSample, SubsetSpec, VarianceMode};
use crate::inputs::{InputModel, InputModelSpec};
use crate::kernel::{BaseSpec, KernelD, KernelSpec};
use crate::testbed::{
    compare_study, convergence_study, coverage_study, plugin_density, write_csv, AnalyticModel, DensityPlugin,
    EstimatorKind, ExperimentPlan, HRule, ModelKind,
};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "KSOBOL_OUT_DIR";

const DEFAULT_OUT_DIR: &str = "ksobol-out";

/// Monte Carlo draws for the pilot target check in `bandwidth` output.
const TARGET_CHECK_DRAWS: usize = 40_000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {message}")]
    Io { path: String, message: String },

    #[error("{path}, line {line}: {message}")]
    Data { path: String, line: u64, message: String },

    #[error(transparent)]
    Estimation(#[from] SobolError),
}

impl CliError {
    fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        CliError::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    fn io(path: &Path, e: impl ToString) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        }
    }

    /// Machine-readable error document.
    pub fn to_json(&self) -> serde_json::Value {
        let (kind, field, line) = match self {
            CliError::Config { field, .. } => ("config", Some(field.clone()), None),
            CliError::Io { .. } => ("io", None, None),
            CliError::Data { line, .. } => ("data", None, Some(*line)),
            CliError::Estimation(SobolError::InvalidArgument { name, .. }) => {
                ("estimation", Some(name.to_string()), None)
            }
            CliError::Estimation(_) => ("estimation", None, None),
        };
        serde_json::json!({
            "schema_version": SCHEMA_VERSION,
            "error": {
                "kind": kind,
                "field": field,
                "line": line,
                "message": self.to_string(),
            }
        })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Estimate,
    Bandwidth,
    Convergence,
    Coverage,
    Compare,
}

impl Command {
    pub fn as_str(&self) -> &'static str {
        match self {
            Command::Estimate => "estimate",
            Command::Bandwidth => "bandwidth",
            Command::Convergence => "convergence",
            Command::Coverage => "coverage",
            Command::Compare => "compare",
        }
    }

    fn is_study(&self) -> bool {
        matches!(self, Command::Convergence | Command::Coverage | Command::Compare)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum InputSource {
    /// CSV with header `v1,...,vp,y`. Without `inputs`, the law is `U(0,1)^p`.
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        inputs: Option<InputModelSpec>,
    },
    /// Builtin model sampled with `n` rows from `seed`. Studies use `seed` as the first seed.
    Builtin { model: ModelKind, n: usize, seed: u64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    #[serde(default = "default_order")]
    pub order: usize,
    #[serde(default = "default_base")]
    pub base: BaseSpec,
}

fn default_order() -> usize {
    2
}

fn default_base() -> BaseSpec {
    BaseSpec::UniformHalf
}

impl Default for KernelConfig {
    fn default() -> Self {
        Self {
            order: default_order(),
            base: default_base(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BandwidthMode {
    Fixed {
        h: f64,
    },
    /// Pilot-based selection.
    Auto {
        #[serde(default)]
        refine: bool,
    },
    /// `h = c n^{-γ}`.
    Rule {
        c: f64,
        gamma: f64,
    },
    /// Smallest masked width times `n^{-γ}`, `γ` the midpoint of the admissible window.
    Default,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub n_grid: Vec<usize>,
    /// Number of seeds, starting at the input seed.
    pub seeds: usize,
    #[serde(default = "default_estimators")]
    pub estimators: Vec<EstimatorKind>,
    #[serde(default = "one")]
    pub variance_scale: f64,
}

fn default_estimators() -> Vec<EstimatorKind> {
    vec![EstimatorKind::Kernel]
}

fn one() -> f64 {
    1.0
}

fn default_ci() -> f64 {
    0.95
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: Command,
    pub input: InputSource,
    /// One-based input indices.
    pub mask: Vec<usize>,
    #[serde(default)]
    pub kernel: KernelConfig,
    pub bandwidth: BandwidthMode,
    #[serde(default)]
    pub density: DensityPlugin,
    #[serde(default = "default_ci")]
    pub ci_level: f64,
    #[serde(default)]
    pub variance: VarianceMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudyConfig>,
    /// Output directory; falls back to the environment, then `ksobol-out`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Worker threads (default 1).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." || path.is_empty() {
                missing_field(e.inner()).unwrap_or_else(|| "config".into())
            } else {
                path
            };
            CliError::config(field, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn threads(&self) -> usize {
        self.threads.unwrap_or(1)
    }

    /// The config without execution-only settings (output directory, threads).
    pub fn canonical(&self) -> RunConfig {
        RunConfig {
            output: None,
            threads: None,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.mask.is_empty() {
            return Err(CliError::config("mask", "must be nonempty"));
        }
        if self.mask.contains(&0) {
            return Err(CliError::config("mask", "indices are one-based"));
        }
        if self.threads == Some(0) {
            return Err(CliError::config("threads", "must be at least 1"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(CliError::config("ci_level", format!("must lie in (0, 1), got {}", self.ci_level)));
        }
        match self.bandwidth {
            BandwidthMode::Fixed { h } if !(h > 0.0 && h.is_finite()) => {
                return Err(CliError::config("bandwidth.h", format!("must be positive, got {h}")));
            }
            BandwidthMode::Rule { c, gamma } if !(c > 0.0 && c.is_finite() && gamma.is_finite()) => {
                return Err(CliError::config("bandwidth", format!("rule needs c > 0 and finite gamma, got ({c}, {gamma})")));
            }
            _ => {}
        }
        if let InputSource::Builtin { n, .. } = self.input {
            if n < 2 {
                return Err(CliError::config("input.n", "must be at least 2"));
            }
        }
        if self.command.is_study() {
            let Some(study) = &self.study else {
                return Err(CliError::config("study", format!("required by `{}`", self.command.as_str())));
            };
            if !matches!(self.input, InputSource::Builtin { .. }) {
                return Err(CliError::config("input", "studies need a builtin model"));
            }
            if matches!(self.bandwidth, BandwidthMode::Auto { .. }) {
                return Err(CliError::config("bandwidth", "studies need a fixed, rule or default bandwidth"));
            }
            if study.seeds == 0 {
                return Err(CliError::config("study.seeds", "must be positive"));
            }
        } else if self.command == Command::Bandwidth && !matches!(self.bandwidth, BandwidthMode::Auto { .. }) {
            return Err(CliError::config("bandwidth", "`bandwidth` needs mode auto"));
        }
        if matches!(self.input, InputSource::Csv { .. }) && matches!(self.density, DensityPlugin::MirrorKde { .. }) {
            return Err(CliError::config("density", "mirror_kde needs an auxiliary sample from a builtin model"));
        }
        Ok(())
    }

    fn out_dir(&self) -> PathBuf {
        self.output
            .clone()
            .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR))
    }

    fn zero_based_mask(&self) -> Vec<usize> {
        self.mask.iter().map(|i| i - 1).collect()
    }
}

fn missing_field(e: &serde_json::Error) -> Option<String> {
    let msg = e.to_string();
    let start = msg.find("missing field `")? + "missing field `".len();
    let end = msg[start..].find('`')?;
    Some(msg[start..start + end].to_string())
}

/// Reads a `v1,...,vp,y` CSV into a sample on `domain` (the unit cube when `None`).
pub fn load_sample_csv(path: &Path, domain: Option<&Domain>) -> CliResult<FullSample> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::io(path, e))?;
    let data_err = |line: u64, message: String| CliError::Data {
        path: path.display().to_string(),
        line,
        message,
    };
    let header = rdr.headers().map_err(|e| data_err(1, e.to_string()))?.clone();
    let cols = header.len();
    let p = cols.saturating_sub(1);
    let expected: Vec<String> = (1..=p).map(|i| format!("v{i}")).chain(["y".to_string()]).collect();
    if p == 0 || header.iter().ne(expected.iter().map(String::as_str)) {
        return Err(data_err(
            1,
            format!("header must be `{}`, got `{}`", expected.join(","), header.iter().collect::<Vec<_>>().join(",")),
        ));
    }
    let mut v = Vec::new();
    let mut y = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            data_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for (k, cell) in rec.iter().enumerate() {
            let x: f64 = cell
                .parse()
                .map_err(|_| data_err(line, format!("column `{}`: cannot parse `{cell}`", &header[k])))?;
            if !x.is_finite() {
                return Err(data_err(line, format!("column `{}`: non-finite value `{cell}`", &header[k])));
            }
            if k < p {
                v.push(x);
            } else {
                y.push(x);
            }
        }
    }
    let n = y.len();
    let v = Array2::from_shape_vec((n, p), v).expect("rows have p inputs");
    let domain = domain.cloned().unwrap_or_else(|| Domain::unit(p));
    Ok(FullSample::new(v, y, domain)?)
}

/// Sample, input law and (for builtin inputs) the analytic model.
struct Loaded {
    sample: FullSample,
    inputs: InputModel,
    seed: u64,
}

fn load_input(cfg: &RunConfig) -> CliResult<Loaded> {
    match &cfg.input {
        InputSource::Builtin { model, n, seed } => {
            let m = AnalyticModel::new(*model).map_err(|e| CliError::config("input.model", e.to_string()))?;
            Ok(Loaded {
                sample: m.sample(*n, *seed)?,
                inputs: m.inputs().clone(),
                seed: *seed,
            })
        }
        InputSource::Csv { path, inputs } => {
            let model = match inputs {
                Some(spec) => Some(InputModel::from_spec(spec).map_err(|e| CliError::config("input.inputs", e.to_string()))?),
                None => None,
            };
            let sample = load_sample_csv(path, model.as_ref().map(|m| m.domain()))?;
            let inputs = model.unwrap_or_else(|| InputModel::uniform_unit(sample.p()));
            if inputs.p() != sample.p() {
                return Err(CliError::config(
                    "input.inputs",
                    format!("{} marginals for {} input columns", inputs.p(), sample.p()),
                ));
            }
            Ok(Loaded { sample, inputs, seed: 0 })
        }
    }
}

#[derive(Debug, Serialize)]
struct EstimateOutput<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    result: EstimateResult,
    #[serde(skip_serializing_if = "Option::is_none")]
    bandwidth_selection: Option<BandwidthSelection>,
}

#[derive(Debug, Serialize)]
struct BandwidthOutput<'a> {
    schema_version: u32,
    config: &'a RunConfig,
    pilot: PilotConfig,
    selection: BandwidthSelection,
    target_check: TargetCheck,
}

#[derive(Debug, Serialize)]
struct StudyOutput<'a, T: Serialize> {
    schema_version: u32,
    config: &'a RunConfig,
    table: &'a str,
    rows: T,
    #[serde(skip_serializing_if = "Option::is_none")]
    slopes: Option<Vec<crate::testbed::SlopeFit>>,
}

/// Files written by one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub files: Vec<PathBuf>,
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn json_bytes<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(v).expect("output serializes");
    s.push('\n');
    s.into_bytes()
}

/// Executes `cfg` on the current rayon pool and writes its artifacts.
pub fn run(cfg: &RunConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let canonical = cfg.canonical();
    let name = cfg.command.as_str();
    let json_path = dir.join(format!("{name}.json"));
    let mut files = vec![json_path.clone()];
    match cfg.command {
        Command::Estimate | Command::Bandwidth => {
            let loaded = load_input(cfg)?;
            let p = loaded.sample.p();
            if let Some(&i) = cfg.mask.iter().find(|&&i| i > p) {
                return Err(CliError::config("mask", format!("input {i} out of range for p = {p}")));
            }
            let spec = SubsetSpec::new(cfg.zero_based_mask(), p)?;
            let kernel = KernelSpec {
                order: cfg.kernel.order,
                dim: spec.d(),
                base: cfg.kernel.base.clone(),
            }
            .build()?;
            let (f_x, sample) = plugin_density(&cfg.density, &loaded.inputs, &loaded.sample, &spec, &kernel, loaded.seed)?;
            let selection = |refine: bool| -> CliResult<(PilotConfig, BandwidthSelection)> {
                let mut pilot = PilotConfig::default_for(&sample, &spec)?;
                pilot.refine = refine;
                let sel = select_bandwidth(&sample, &spec, &kernel, &pilot, f_x.as_ref(), &loaded.inputs)?;
                Ok((pilot, sel))
            };
            if cfg.command == Command::Bandwidth {
                let BandwidthMode::Auto { refine } = cfg.bandwidth else {
                    unreachable!("validated")
                };
                let (pilot, sel) = selection(refine)?;
                let target_check =
                    check_target_normalization(&sample, &spec, &pilot.h0, &loaded.inputs, TARGET_CHECK_DRAWS, loaded.seed)?;
                let out = BandwidthOutput {
                    schema_version: SCHEMA_VERSION,
                    config: &canonical,
                    pilot,
                    selection: sel,
                    target_check,
                };
                write_file(&json_path, &json_bytes(&out))?;
            } else {
                let (h, bandwidth_selection) = match cfg.bandwidth {
                    BandwidthMode::Fixed { h } => (h, None),
                    BandwidthMode::Rule { c, gamma } => (c * (sample.n() as f64).powf(-gamma), None),
                    BandwidthMode::Default => {
                        let dom = sample.domain().restrict(spec.mask())?;
                        (default_bandwidth(sample.n(), cfg.kernel.order, &dom)?, None)
                    }
                    BandwidthMode::Auto { refine } => {
                        let (_, sel) = selection(refine)?;
                        (sel.h_star, Some(sel))
                    }
                };
                let opts = EstimatorOptions {
                    ci_level: cfg.ci_level,
                    variance: cfg.variance,
                };
                let result = estimate_sobol(&sample, &spec, &kernel, h, f_x.as_ref(), &opts)?;
                let out = EstimateOutput {
                    schema_version: SCHEMA_VERSION,
                    config: &canonical,
                    result,
                    bandwidth_selection,
                };
                write_file(&json_path, &json_bytes(&out))?;
            }
        }
        Command::Convergence | Command::Coverage | Command::Compare => {
            let plan = study_plan(cfg)?;
            let csv_path = dir.join(format!("{name}.csv"));
            let mut csv_bytes = Vec::new();
            let json = match cfg.command {
                Command::Convergence => {
                    let t = convergence_study(&plan)?;
                    write_csv(&t.rows, &mut csv_bytes)?;
                    json_bytes(&StudyOutput {
                        schema_version: SCHEMA_VERSION,
                        config: &canonical,
                        table: "convergence.csv",
                        rows: &t.rows,
                        slopes: Some(t.slopes),
                    })
                }
                Command::Coverage => {
                    let rows = coverage_study(&plan, cfg.ci_level)?;
                    write_csv(&rows, &mut csv_bytes)?;
                    json_bytes(&StudyOutput {
                        schema_version: SCHEMA_VERSION,
                        config: &canonical,
                        table: "coverage.csv",
                        rows: &rows,
                        slopes: None,
                    })
                }
                _ => {
                    let rows = compare_study(&plan)?;
                    write_csv(&rows, &mut csv_bytes)?;
                    json_bytes(&StudyOutput {
                        schema_version: SCHEMA_VERSION,
                        config: &canonical,
                        table: "compare.csv",
                        rows: &rows,
                        slopes: None,
                    })
                }
            };
            write_file(&csv_path, &csv_bytes)?;
            write_file(&json_path, &json)?;
            files.push(csv_path);
        }
    }
    Ok(RunOutput { files })
}

fn study_plan(cfg: &RunConfig) -> CliResult<ExperimentPlan> {
    let InputSource::Builtin { model, seed, .. } = cfg.input else {
        unreachable!("validated")
    };
    let study = cfg.study.as_ref().expect("validated");
    let h_rule = match cfg.bandwidth {
        BandwidthMode::Fixed { h } => HRule::Fixed { h },
        BandwidthMode::Rule { c, gamma } => HRule::Power { c, gamma },
        BandwidthMode::Default => HRule::Default,
        BandwidthMode::Auto { .. } => unreachable!("validated"),
    };
    if cfg.kernel.base != BaseSpec::UniformHalf {
        return Err(CliError::config("kernel.base", "studies use the uniform base"));
    }
    let mut plan = ExperimentPlan::new(
        model,
        vec![cfg.zero_based_mask()],
        study.n_grid.clone(),
        h_rule,
        (seed..seed + study.seeds as u64).collect(),
    );
    plan.kernel_order = cfg.kernel.order;
    plan.estimators = study.estimators.clone();
    plan.density = cfg.density;
    plan.variance = cfg.variance;
    plan.variance_scale = study.variance_scale;
    plan.validate().map_err(|e| match e {
        SobolError::InvalidArgument { name, reason } => CliError::config(format!("study.{name}"), reason),
        other => CliError::Estimation(other),
    })?;
    Ok(plan)
}

/// Runs `cfg` on a dedicated pool with `cfg.threads()` workers.
pub fn run_with_threads(cfg: &RunConfig) -> CliResult<RunOutput> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads())
        .build()
        .map_err(|e| CliError::config("threads", e.to_string()))?;
    pool.install(|| run(cfg))
}

/// Kernel used for an estimate of dimension `d` (exposed for tests).
pub fn kernel_for(cfg: &KernelConfig, d: usize) -> CliResult<KernelD> {
    Ok(KernelSpec {
        order: cfg.order,
        dim: d,
        base: cfg.base.clone(),
    }
    .build()?)
}
