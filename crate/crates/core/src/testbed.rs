//! Analytic test models, a brute-force oracle for `T_{n,h}` and Monte Carlo
//! experiment drivers (convergence, coverage, comparison with baselines).

use crate::baselines::{
    limiting_variance_kernel_sobol, limiting_variance_sobol_efficient, nn_estimate, pick_freeze_design,
    pick_freeze_estimate, rank_estimate, VarianceOracles,
};
use crate::density::{beta_moment_estimator, default_kde_bandwidth, mirror_kde, uniform_max_estimator};
use crate::domain::{apply_mirror, sigma_at, Domain};
use crate::error::{invalid, Result, SobolError};
use crate::estimator::{
    default_bandwidth, estimate_sobol, normal_quantile, DensityOracle, EstimatorOptions, FullSample,
    SubsetSpec, VarianceMode,
};
use crate::inputs::InputModel;
use crate::kernel::KernelD;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fmt;

/// Largest sample accepted by [`brute_force_t`].
pub const BRUTE_FORCE_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum ModelKind {
    /// `Y = Σ V_i`, `V_i ~ U(0, 1)`.
    Linear { p: usize },
    /// `Y = α V_1 + Σ_{i≥2} V_i`, `V_i ~ U(0, 1)`.
    WeightedLinear { alpha: f64, p: usize },
    /// `Y = sin V_1 + a sin² V_2 + b V_3⁴ sin V_1`, `V_i ~ U(-π, π)`.
    Ishigami { a: f64, b: f64 },
    /// `Y = V_1 V_2`, `V_i ~ U(0, 1)`.
    Product,
}

/// Test function with closed-form conditional moments and indices.
#[derive(Debug, Clone)]
pub struct AnalyticModel {
    kind: ModelKind,
    inputs: InputModel,
}

/// `(E[Z], E[Z²])` of one independent model component, given or integrated out.
fn part(known: Option<f64>, mean: f64, second: f64) -> (f64, f64) {
    match known {
        Some(z) => (z, z * z),
        None => (mean, second),
    }
}

impl AnalyticModel {
    pub fn new(kind: ModelKind) -> Result<Self> {
        let inputs = match kind {
            ModelKind::Linear { p } => {
                if p == 0 {
                    return Err(invalid("p", "must be positive"));
                }
                InputModel::uniform_unit(p)
            }
            ModelKind::WeightedLinear { alpha, p } => {
                if p == 0 || !alpha.is_finite() {
                    return Err(invalid("model", format!("weighted linear needs p > 0 and finite alpha, got p = {p}, alpha = {alpha}")));
                }
                InputModel::uniform_unit(p)
            }
            ModelKind::Ishigami { a, b } => {
                if !(a.is_finite() && b.is_finite()) {
                    return Err(invalid("model", "ishigami constants must be finite"));
                }
                let m = crate::inputs::Marginal::uniform(-PI, PI)?;
                InputModel::new(vec![m.clone(), m.clone(), m])?
            }
            ModelKind::Product => InputModel::uniform_unit(2),
        };
        Ok(Self { kind, inputs })
    }

    pub fn linear(p: usize) -> Self {
        Self::new(ModelKind::Linear { p }).expect("p > 0")
    }

    pub fn weighted_linear(alpha: f64, p: usize) -> Self {
        Self::new(ModelKind::WeightedLinear { alpha, p }).expect("valid weighted linear")
    }

    pub fn ishigami() -> Self {
        Self::new(ModelKind::Ishigami { a: 7.0, b: 0.1 }).expect("standard constants")
    }

    pub fn product() -> Self {
        Self::new(ModelKind::Product).expect("fixed model")
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            ModelKind::Linear { .. } => "linear",
            ModelKind::WeightedLinear { .. } => "weighted_linear",
            ModelKind::Ishigami { .. } => "ishigami",
            ModelKind::Product => "product",
        }
    }

    pub fn p(&self) -> usize {
        self.inputs.p()
    }

    pub fn inputs(&self) -> &InputModel {
        &self.inputs
    }

    fn weights(&self) -> Vec<f64> {
        match self.kind {
            ModelKind::Linear { p } => vec![1.0; p],
            ModelKind::WeightedLinear { alpha, p } => {
                let mut w = vec![1.0; p];
                w[0] = alpha;
                w
            }
            _ => Vec::new(),
        }
    }

    /// Model output at a full input point.
    pub fn eval(&self, v: &[f64]) -> f64 {
        match self.kind {
            ModelKind::Linear { .. } => v.iter().sum(),
            ModelKind::WeightedLinear { alpha, .. } => alpha * v[0] + v[1..].iter().sum::<f64>(),
            ModelKind::Ishigami { a, b } => {
                let s1 = v[0].sin();
                let s2 = v[1].sin();
                s1 + a * s2 * s2 + b * v[2].powi(4) * s1
            }
            ModelKind::Product => v[0] * v[1],
        }
    }

    pub fn evaluate(&self, v: &ndarray::Array2<f64>) -> Vec<f64> {
        v.rows()
            .into_iter()
            .map(|r| self.eval(r.as_slice().expect("standard layout")))
            .collect()
    }

    /// Sample of size `n` from stream 0 of `seed` with model outputs.
    pub fn sample(&self, n: usize, seed: u64) -> Result<FullSample> {
        let v = self.inputs.sample(n, seed);
        let y = self.evaluate(&v);
        FullSample::new(v, y, self.inputs.domain().clone())
    }

    fn check_mask(&self, mask: &[usize]) -> Result<()> {
        if mask.is_empty() {
            return Err(invalid("mask", "must select at least one input"));
        }
        if let Some(&i) = mask.iter().find(|&&i| i >= self.p()) {
            return Err(invalid("mask", format!("axis {i} out of range for p = {}", self.p())));
        }
        Ok(())
    }

    /// `(E[Y|X=x], E[Y²|X=x])` with `x` in mask order (zero-based axes).
    pub fn conditional_moments(&self, mask: &[usize], x: &[f64]) -> (f64, f64) {
        let known = |i: usize| mask.iter().position(|&m| m == i).map(|k| x[k]);
        match self.kind {
            ModelKind::Linear { .. } | ModelKind::WeightedLinear { .. } => {
                let mut m = 0.0;
                let mut var = 0.0;
                for (i, c) in self.weights().into_iter().enumerate() {
                    match known(i) {
                        Some(xi) => m += c * xi,
                        None => {
                            m += 0.5 * c;
                            var += c * c / 12.0;
                        }
                    }
                }
                (m, m * m + var)
            }
            ModelKind::Ishigami { a, b } => {
                let pi4 = PI.powi(4);
                let (ea, ea2) = part(known(0).map(f64::sin), 0.0, 0.5);
                let (eb, eb2) = part(
                    known(2).map(|t| 1.0 + b * t.powi(4)),
                    1.0 + b * pi4 / 5.0,
                    1.0 + 2.0 * b * pi4 / 5.0 + b * b * pi4 * pi4 / 9.0,
                );
                let (ec, ec2) = part(known(1).map(|t| a * t.sin().powi(2)), 0.5 * a, 0.375 * a * a);
                (ea * eb + ec, ea2 * eb2 + 2.0 * ea * eb * ec + ec2)
            }
            ModelKind::Product => {
                let (e1, s1) = part(known(0), 0.5, 1.0 / 3.0);
                let (e2, s2) = part(known(1), 0.5, 1.0 / 3.0);
                (e1 * e2, s1 * s2)
            }
        }
    }

    pub fn g1(&self, mask: &[usize], x: &[f64]) -> f64 {
        self.conditional_moments(mask, x).0
    }

    pub fn g2(&self, mask: &[usize], x: &[f64]) -> f64 {
        self.conditional_moments(mask, x).1
    }

    pub fn mean_y(&self) -> f64 {
        match self.kind {
            ModelKind::Linear { .. } | ModelKind::WeightedLinear { .. } => 0.5 * self.weights().iter().sum::<f64>(),
            ModelKind::Ishigami { a, .. } => 0.5 * a,
            ModelKind::Product => 0.25,
        }
    }

    pub fn var_y(&self) -> f64 {
        self.var_g1(&(0..self.p()).collect::<Vec<_>>())
    }

    /// `Var(E[Y|X])` for the group `mask`.
    fn var_g1(&self, mask: &[usize]) -> f64 {
        let has = |i: usize| mask.contains(&i);
        match self.kind {
            ModelKind::Linear { .. } | ModelKind::WeightedLinear { .. } => self
                .weights()
                .iter()
                .enumerate()
                .filter(|(i, _)| has(*i))
                .map(|(_, c)| c * c / 12.0)
                .sum(),
            ModelKind::Ishigami { a, b } => {
                let pi4 = PI.powi(4);
                // g1 = E[A|X]E[B|X] + E[C|X] with independent parts and E[A] = 0.
                let ea2 = if has(0) { 0.5 } else { 0.0 };
                let eb2 = if has(2) {
                    1.0 + 2.0 * b * pi4 / 5.0 + b * b * pi4 * pi4 / 9.0
                } else {
                    (1.0 + b * pi4 / 5.0).powi(2)
                };
                let vc = if has(1) { a * a / 8.0 } else { 0.0 };
                ea2 * eb2 + vc
            }
            ModelKind::Product => {
                let s1 = if has(0) { 1.0 / 3.0 } else { 0.25 };
                let s2 = if has(1) { 1.0 / 3.0 } else { 0.25 };
                s1 * s2 - 1.0 / 16.0
            }
        }
    }

    /// Closed-form `S^X` for the group `mask` (zero-based axes).
    pub fn true_sobol(&self, mask: &[usize]) -> Result<f64> {
        self.check_mask(mask)?;
        Ok(self.var_g1(mask) / self.var_y())
    }

    /// Closed-form `E[E[Y|X]²]`.
    pub fn true_t(&self, mask: &[usize]) -> Result<f64> {
        self.check_mask(mask)?;
        Ok(self.var_g1(mask) + self.mean_y().powi(2))
    }

    /// Variance oracles for the group `mask`.
    pub fn oracles(&self, mask: &[usize]) -> Result<VarianceOracles> {
        self.check_mask(mask)?;
        let (m1, m2, m3) = (self.clone(), self.clone(), self.clone());
        let (k1, k2) = (mask.to_vec(), mask.to_vec());
        VarianceOracles::new(
            move |v| m1.eval(v),
            move |x| m2.g1(&k1, x),
            move |x| m3.g2(&k2, x),
            self.inputs.clone(),
            mask.to_vec(),
        )
    }
}

impl fmt::Display for AnalyticModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Linear (p = 3), weighted linear (α = 2, p = 3), Ishigami (7, 0.1) and product.
pub fn builtin_models() -> Vec<AnalyticModel> {
    vec![
        AnalyticModel::linear(3),
        AnalyticModel::weighted_linear(2.0, 3),
        AnalyticModel::ishigami(),
        AnalyticModel::product(),
    ]
}

/// Naive double loop for `T_{n,h}` with plain summation.
pub fn brute_force_t(
    sample: &FullSample,
    spec: &SubsetSpec,
    kernel: &KernelD,
    h: f64,
    f_x: &dyn DensityOracle,
) -> Result<f64> {
    let n = sample.n();
    if n > BRUTE_FORCE_LIMIT {
        return Err(SobolError::GuardExceeded {
            n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    if n < 2 {
        return Err(SobolError::InsufficientSample { needed: 2, got: n });
    }
    let domain = sample.domain().restrict(spec.mask())?;
    let y = sample.y();
    let mut total = 0.0;
    for j in 0..n {
        let xj = sample.point(j, spec.mask());
        let signs = sigma_at(&domain, &xj)?;
        let fj = f_x.density(&xj);
        for jp in 0..n {
            if jp == j {
                continue;
            }
            let xk = sample.point(jp, spec.mask());
            let diff: Vec<f64> = xk.iter().zip(&xj).map(|(a, b)| a - b).collect();
            let u = apply_mirror(&signs, &diff)?;
            total += y[j] * y[jp] * kernel.eval_scaled(&u, h)? / fj;
        }
    }
    Ok(total / (n as f64 * (n - 1) as f64))
}

/// Bandwidth as a function of the sample size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum HRule {
    Fixed { h: f64 },
    /// `h = c n^{-γ}`.
    Power { c: f64, gamma: f64 },
    /// Midpoint of the admissible exponent window, scaled by the smallest width.
    Default,
}

impl HRule {
    pub fn bandwidth(&self, n: usize, order: usize, domain: &Domain) -> Result<f64> {
        let h = match *self {
            HRule::Fixed { h } => h,
            HRule::Power { c, gamma } => c * (n as f64).powf(-gamma),
            HRule::Default => default_bandwidth(n, order, domain)?,
        };
        if !(h > 0.0 && h.is_finite()) {
            return Err(SobolError::InvalidBandwidth(h));
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimatorKind {
    Kernel,
    Pf,
    Nn,
    Rank,
}

impl EstimatorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            EstimatorKind::Kernel => "kernel",
            EstimatorKind::Pf => "pf",
            EstimatorKind::Nn => "nn",
            EstimatorKind::Rank => "rank",
        }
    }

    /// Model evaluations per replicate of size `n`.
    pub fn budget(&self, n: usize) -> usize {
        match self {
            EstimatorKind::Kernel | EstimatorKind::Rank => n,
            EstimatorKind::Pf | EstimatorKind::Nn => 2 * n,
        }
    }
}

/// Density used by the kernel estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DensityPlugin {
    Exact,
    /// Per-axis `U(0, θ̂)` with `θ̂` the sample maximum.
    UniformMax,
    /// Per-axis clipped beta moment estimate with known second shape `b`.
    BetaMoment { b: f64 },
    /// Mirror KDE from an independent auxiliary sample of size `aux_n`.
    MirrorKde {
        aux_n: usize,
        eta: f64,
        #[serde(default)]
        h: Option<f64>,
    },
}

impl Default for DensityPlugin {
    fn default() -> Self {
        DensityPlugin::Exact
    }
}

/// Stream of the auxiliary density sample.
const AUX_STREAM: u64 = 4;

/// Density oracle for the masked inputs, and the sample to estimate on.
///
/// Parametric plug-ins with an estimated support rebuild the sample on that
/// support so the mirror map uses it.
pub fn plugin_density(
    plugin: &DensityPlugin,
    model: &InputModel,
    sample: &FullSample,
    spec: &SubsetSpec,
    kernel: &KernelD,
    seed: u64,
) -> Result<(Box<dyn DensityOracle + Send>, FullSample)> {
    match *plugin {
        DensityPlugin::Exact => {
            let inputs = model.clone();
            let mask = spec.mask().to_vec();
            let f = move |x: &[f64]| inputs.density_subset(&mask, x).unwrap_or(0.0);
            Ok((Box::new(f), sample.clone()))
        }
        DensityPlugin::UniformMax | DensityPlugin::BetaMoment { .. } => {
            let mut factors = Vec::with_capacity(spec.d());
            let mut lower = sample.domain().lower().to_vec();
            let mut upper = sample.domain().upper().to_vec();
            for &i in spec.mask() {
                let col = sample.v().column(i).to_vec();
                let est = match *plugin {
                    DensityPlugin::UniformMax => uniform_max_estimator(&col)?,
                    DensityPlugin::BetaMoment { b } => beta_moment_estimator(&col, b)?,
                    _ => unreachable!(),
                };
                let dom = est.domain();
                lower[i] = dom.lower()[0];
                upper[i] = dom.upper()[0];
                factors.push(est);
            }
            let domain = Domain::new(lower, upper)?;
            let rebuilt = FullSample::new(sample.v().clone(), sample.y().to_vec(), domain)?;
            let f = move |x: &[f64]| -> f64 { factors.iter().zip(x).map(|(e, &xi)| e.density(&[xi])).product() };
            Ok((Box::new(f), rebuilt))
        }
        DensityPlugin::MirrorKde { aux_n, eta, h } => {
            let full = model.sample_stream(aux_n, seed, AUX_STREAM);
            let aux = full.select(ndarray::Axis(1), spec.mask());
            let domain = sample.domain().restrict(spec.mask())?;
            let h = h.unwrap_or_else(|| default_kde_bandwidth(aux_n, kernel, &domain));
            let est = mirror_kde(aux, kernel.clone(), h, eta, domain)?;
            Ok((Box::new(est), sample.clone()))
        }
    }
}

/// Monte Carlo experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub model: ModelKind,
    /// Zero-based input groups.
    pub masks: Vec<Vec<usize>>,
    pub n_grid: Vec<usize>,
    pub h_rule: HRule,
    pub kernel_order: usize,
    pub seeds: Vec<u64>,
    pub estimators: Vec<EstimatorKind>,
    #[serde(default)]
    pub density: DensityPlugin,
    #[serde(default)]
    pub variance: VarianceMode,
    /// Multiplies the plug-in variance before forming intervals (1 = nominal).
    #[serde(default = "one")]
    pub variance_scale: f64,
}

fn one() -> f64 {
    1.0
}

impl ExperimentPlan {
    pub fn new(model: ModelKind, masks: Vec<Vec<usize>>, n_grid: Vec<usize>, h_rule: HRule, seeds: Vec<u64>) -> Self {
        Self {
            model,
            masks,
            n_grid,
            h_rule,
            kernel_order: 2,
            seeds,
            estimators: vec![EstimatorKind::Kernel],
            density: DensityPlugin::Exact,
            variance: VarianceMode::default(),
            variance_scale: 1.0,
        }
    }

    /// Seeds `0..count`.
    pub fn seed_range(count: usize) -> Vec<u64> {
        (0..count as u64).collect()
    }

    pub fn validate(&self) -> Result<AnalyticModel> {
        let model = AnalyticModel::new(self.model)?;
        if self.masks.is_empty() {
            return Err(invalid("masks", "at least one mask is required"));
        }
        for m in &self.masks {
            model.check_mask(m)?;
        }
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid("n_grid", "must be nonempty and strictly ascending"));
        }
        if self.n_grid[0] < 2 {
            return Err(invalid("n_grid", "sample sizes must be at least 2"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        if s.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("seeds", "must be distinct"));
        }
        if self.estimators.is_empty() {
            return Err(invalid("estimators", "at least one estimator is required"));
        }
        if self.estimators.contains(&EstimatorKind::Rank) && self.masks.iter().any(|m| m.len() != 1) {
            return Err(invalid("estimators", "rank estimator needs single-input masks"));
        }
        if !(self.variance_scale > 0.0 && self.variance_scale.is_finite()) {
            return Err(invalid("variance_scale", "must be positive"));
        }
        Ok(model)
    }
}

/// One replicate of one estimator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Replicate {
    pub estimate: f64,
    /// Bandwidth (kernel estimator only).
    pub h: Option<f64>,
    /// Whether the interval at the requested level covers the truth (kernel only).
    pub covered: Option<bool>,
}

/// Runs one estimator on one seed.
pub fn run_replicate(
    plan: &ExperimentPlan,
    model: &AnalyticModel,
    mask: &[usize],
    estimator: EstimatorKind,
    n: usize,
    seed: u64,
    level: f64,
) -> Result<Replicate> {
    let truth = model.true_sobol(mask)?;
    match estimator {
        EstimatorKind::Kernel => {
            let sample = model.sample(n, seed)?;
            let spec = SubsetSpec::new(mask.to_vec(), model.p())?;
            let kernel = KernelD::uniform(plan.kernel_order, spec.d())?;
            let (f_x, sample) = plugin_density(&plan.density, model.inputs(), &sample, &spec, &kernel, seed)?;
            let h = plan.h_rule.bandwidth(n, plan.kernel_order, &sample.domain().restrict(mask)?)?;
            let opts = EstimatorOptions {
                ci_level: level,
                variance: plan.variance,
            };
            let r = estimate_sobol(&sample, &spec, &kernel, h, f_x.as_ref(), &opts)?;
            let hw = normal_quantile(level)? * (plan.variance_scale * r.var_sobol / n as f64).sqrt();
            Ok(Replicate {
                estimate: r.sobol,
                h: Some(h),
                covered: Some((r.sobol - truth).abs() <= hw),
            })
        }
        EstimatorKind::Pf => {
            let g = |v: &[f64]| model.eval(v);
            let pf = pick_freeze_design(model.inputs(), mask, &g, n, seed)?;
            Ok(Replicate {
                estimate: pick_freeze_estimate(&pf)?,
                h: None,
                covered: None,
            })
        }
        EstimatorKind::Nn => {
            let a = model.inputs().sample_stream(n, seed, 2);
            let b = model.inputs().sample_stream(n, seed, 3);
            let (ya, yb) = (model.evaluate(&a), model.evaluate(&b));
            let xa = a.select(ndarray::Axis(1), mask);
            let xb = b.select(ndarray::Axis(1), mask);
            let t = nn_estimate(xa.view(), &ya, xb.view(), &yb)?.value;
            let (m, var) = crate::estimator::output_moments(&yb)?;
            Ok(Replicate {
                estimate: (t - m * m) / var,
                h: None,
                covered: None,
            })
        }
        EstimatorKind::Rank => {
            let sample = model.sample(n, seed)?;
            let x = sample.v().select(ndarray::Axis(1), mask);
            Ok(Replicate {
                estimate: rank_estimate(x.view(), sample.y())?,
                h: None,
                covered: None,
            })
        }
    }
}

/// One output row: columns model, mask, estimator, n, h, seed_count, mean, rmse,
/// var_scaled_by_n, coverage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub model: String,
    /// One-based inputs joined by `+`.
    pub mask: String,
    pub estimator: String,
    pub n: usize,
    pub h: Option<f64>,
    pub seed_count: usize,
    pub mean: f64,
    pub rmse: f64,
    pub var_scaled_by_n: f64,
    pub coverage: Option<f64>,
}

pub fn mask_label(mask: &[usize]) -> String {
    mask.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join("+")
}

fn summarize(
    model: &AnalyticModel,
    mask: &[usize],
    estimator: EstimatorKind,
    n: usize,
    truth: f64,
    reps: &[Replicate],
) -> StudyRow {
    let r = reps.len() as f64;
    let mean = reps.iter().map(|x| x.estimate).sum::<f64>() / r;
    let mse = reps.iter().map(|x| (x.estimate - truth).powi(2)).sum::<f64>() / r;
    let var = if reps.len() > 1 {
        reps.iter().map(|x| (x.estimate - mean).powi(2)).sum::<f64>() / (r - 1.0)
    } else {
        f64::NAN
    };
    let coverage = reps
        .iter()
        .map(|x| x.covered)
        .collect::<Option<Vec<bool>>>()
        .map(|c| c.iter().filter(|&&b| b).count() as f64 / r);
    StudyRow {
        model: model.name().to_string(),
        mask: mask_label(mask),
        estimator: estimator.as_str().to_string(),
        n,
        h: reps.first().and_then(|x| x.h),
        seed_count: reps.len(),
        mean,
        rmse: mse.sqrt(),
        var_scaled_by_n: var * n as f64,
        coverage,
    }
}

fn study_rows(plan: &ExperimentPlan, level: f64) -> Result<Vec<StudyRow>> {
    let model = plan.validate()?;
    normal_quantile(level)?;
    let mut rows = Vec::new();
    for mask in &plan.masks {
        let truth = model.true_sobol(mask)?;
        for &est in &plan.estimators {
            for &n in &plan.n_grid {
                let reps = plan
                    .seeds
                    .par_iter()
                    .map(|&s| run_replicate(plan, &model, mask, est, n, s, level))
                    .collect::<Result<Vec<_>>>()?;
                rows.push(summarize(&model, mask, est, n, truth, &reps));
            }
        }
    }
    Ok(rows)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(invalid("slope", "need at least two paired points"));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(invalid("slope", "values must be positive"));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    Ok(sxy / sxx)
}

/// RMSE slope per (mask, estimator).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub mask: String,
    pub estimator: String,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceTable {
    pub rows: Vec<StudyRow>,
    pub slopes: Vec<SlopeFit>,
}

/// RMSE against the closed-form index for every n, with log-log slopes.
pub fn convergence_study(plan: &ExperimentPlan) -> Result<ConvergenceTable> {
    let rows = study_rows(plan, 0.95)?;
    let mut slopes = Vec::new();
    for chunk in rows.chunks(plan.n_grid.len()) {
        let ns: Vec<f64> = chunk.iter().map(|r| r.n as f64).collect();
        let rm: Vec<f64> = chunk.iter().map(|r| r.rmse).collect();
        slopes.push(SlopeFit {
            mask: chunk[0].mask.clone(),
            estimator: chunk[0].estimator.clone(),
            slope: if ns.len() > 1 { log_log_slope(&ns, &rm)? } else { f64::NAN },
        });
    }
    Ok(ConvergenceTable { rows, slopes })
}

/// Fraction of seeds whose interval at `level` covers the closed-form index.
pub fn coverage_study(plan: &ExperimentPlan, level: f64) -> Result<Vec<StudyRow>> {
    study_rows(plan, level)
}

/// Study row with theoretical limiting variances attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub model: String,
    pub mask: String,
    pub estimator: String,
    pub n: usize,
    pub h: Option<f64>,
    pub seed_count: usize,
    pub mean: f64,
    pub rmse: f64,
    pub var_scaled_by_n: f64,
    /// Model evaluations per replicate.
    pub budget: usize,
    /// Limiting variance of `√n (Ŝ - S)` where known (kernel estimator).
    pub limiting_variance: Option<f64>,
    /// Efficient bound `σ_min²` for the index.
    pub efficient_bound: f64,
}

/// Baseline comparison: every estimator in the plan with limiting variances.
pub fn compare_study(plan: &ExperimentPlan) -> Result<Vec<CompareRow>> {
    let model = plan.validate()?;
    let rows = study_rows(plan, 0.95)?;
    let mut bounds = Vec::with_capacity(plan.masks.len());
    for mask in &plan.masks {
        let o = model.oracles(mask)?;
        let s = model.true_sobol(mask)?;
        let bound = limiting_variance_sobol_efficient(&o, model.mean_y(), model.var_y(), s)?;
        let kernel = limiting_variance_kernel_sobol(&o)?;
        bounds.push((mask_label(mask), bound, kernel));
    }
    Ok(rows
        .into_iter()
        .map(|row| {
            let (_, bound, kernel) = bounds.iter().find(|b| b.0 == row.mask).expect("mask in plan");
            let kind = plan
                .estimators
                .iter()
                .find(|e| e.as_str() == row.estimator)
                .copied()
                .expect("estimator in plan");
            CompareRow {
                budget: kind.budget(row.n),
                limiting_variance: (kind == EstimatorKind::Kernel).then_some(*kernel),
                efficient_bound: *bound,
                model: row.model,
                mask: row.mask,
                estimator: row.estimator,
                n: row.n,
                h: row.h,
                seed_count: row.seed_count,
                mean: row.mean,
                rmse: row.rmse,
                var_scaled_by_n: row.var_scaled_by_n,
            }
        })
        .collect())
}

/// Writes serializable rows as CSV with a header.
pub fn write_csv<T: Serialize>(rows: &[T], out: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| SobolError::InvalidData(e.to_string()))?;
    }
    w.flush().map_err(|e| SobolError::InvalidData(e.to_string()))?;
    Ok(())
}
