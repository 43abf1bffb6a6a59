//! Mirror-corrected kernel U-statistic for `E[E[Y|X]^2]` and Sobol' indices.
//!
//! With `a_{jj'} = Y_j Y_{j'} K_h(A_{X_j}(X_{j'} - X_j)) / f_X(X_j)` the
//! statistic is
//!
//! ```text
//! T = 1/(n(n-1)) Σ_{j ≠ j'} a_{jj'} = 1/n Σ_j Y_j ĝ1(X_j)
//! ```
//!
//! where `ĝ1` is the leave-one-out mirror-corrected regression estimate. Only
//! pairs whose mirrored difference falls in the kernel support contribute, so
//! each row scans a window of sorted neighbours instead of the whole sample.
//! Rows are processed independently and reduced sequentially with
//! compensated summation, which makes results independent of the thread count.

use crate::domain::{check_mirror_condition, sigma_at, Domain};
use crate::error::{invalid, Result, SobolError};
use crate::inputs::InputModel;
use crate::kernel::KernelD;
use crate::sum::{covariance, mean, variance, NeumaierSum};
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Densities at or below this value are rejected when dividing by `f_X`.
pub const DENSITY_FLOOR: f64 = 1e-12;

const PARALLEL_MIN_ROWS: usize = 512;

/// Inputs `V` (n×p) paired with outputs `Y`, plus the domain the inputs live in.
#[derive(Debug, Clone, PartialEq)]
pub struct FullSample {
    v: Array2<f64>,
    y: Vec<f64>,
    domain: Domain,
}

impl FullSample {
    pub fn new(v: Array2<f64>, y: Vec<f64>, domain: Domain) -> Result<Self> {
        if v.nrows() != y.len() {
            return Err(SobolError::DimensionMismatch {
                expected: v.nrows(),
                got: y.len(),
            });
        }
        if v.ncols() != domain.dim() {
            return Err(SobolError::DimensionMismatch {
                expected: domain.dim(),
                got: v.ncols(),
            });
        }
        if let Some(j) = y.iter().position(|v| !v.is_finite()) {
            return Err(SobolError::InvalidData(format!("non-finite output at row {j}")));
        }
        for row in v.rows() {
            let r = row.to_vec();
            if !domain.contains(&r) {
                return Err(SobolError::DomainViolation { point: r });
            }
        }
        Ok(Self { v, y, domain })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn p(&self) -> usize {
        self.v.ncols()
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Same inputs, different outputs.
    pub fn with_outputs(&self, y: Vec<f64>) -> Result<Self> {
        Self::new(self.v.clone(), y, self.domain.clone())
    }

    /// Row `j` restricted to `mask`.
    pub fn point(&self, j: usize, mask: &[usize]) -> Vec<f64> {
        mask.iter().map(|&i| self.v[(j, i)]).collect()
    }
}

/// The input group `X = (V_i)_{i ∈ mask}`, zero-based and sorted.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SubsetSpec {
    mask: Vec<usize>,
}

impl SubsetSpec {
    pub fn new(mut mask: Vec<usize>, p: usize) -> Result<Self> {
        mask.sort_unstable();
        mask.dedup();
        if mask.is_empty() {
            return Err(invalid("mask", "must select at least one input"));
        }
        if let Some(&i) = mask.iter().find(|&&i| i >= p) {
            return Err(invalid("mask", format!("index {} out of range 1..={p}", i + 1)));
        }
        Ok(Self { mask })
    }

    /// Build from one-based indices as used in configs and reports.
    pub fn from_one_based(mask: &[usize], p: usize) -> Result<Self> {
        if mask.contains(&0) {
            return Err(invalid("mask", "indices are one-based"));
        }
        Self::new(mask.iter().map(|i| i - 1).collect(), p)
    }

    pub fn single(i: usize, p: usize) -> Result<Self> {
        Self::new(vec![i], p)
    }

    pub fn mask(&self) -> &[usize] {
        &self.mask
    }

    pub fn one_based(&self) -> Vec<usize> {
        self.mask.iter().map(|i| i + 1).collect()
    }

    pub fn d(&self) -> usize {
        self.mask.len()
    }

    pub fn complement(&self, p: usize) -> Option<SubsetSpec> {
        let rest: Vec<usize> = (0..p).filter(|i| !self.mask.contains(i)).collect();
        (!rest.is_empty()).then(|| SubsetSpec { mask: rest })
    }
}

/// Density of `X` evaluated at masked points.
pub trait DensityOracle: Sync {
    fn density(&self, x: &[f64]) -> f64;
}

impl<F: Fn(&[f64]) -> f64 + Sync> DensityOracle for F {
    fn density(&self, x: &[f64]) -> f64 {
        self(x)
    }
}

/// Exact product density of the masked inputs of a model.
#[derive(Debug, Clone)]
pub struct ExactDensity<'a> {
    model: &'a InputModel,
    mask: Vec<usize>,
}

impl<'a> ExactDensity<'a> {
    pub fn new(model: &'a InputModel, spec: &SubsetSpec) -> Self {
        Self {
            model,
            mask: spec.mask.clone(),
        }
    }
}

impl DensityOracle for ExactDensity<'_> {
    fn density(&self, x: &[f64]) -> f64 {
        self.model.density_subset(&self.mask, x).unwrap_or(0.0)
    }
}

/// How the limiting variances are estimated from the leave-one-out regression.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    /// Empirical variance of `Y_j ĝ1(X_j)`.
    Plain,
    /// Replace `ĝ1(X_j)^2` by its unbiased pairwise counterpart, removing the
    /// `O(1/(n h^d))` inflation caused by the noise in `ĝ1`.
    Debiased,
    /// `Debiased` plus the variance of the degenerate second-order part of
    /// the U-statistic, `E[a²]/(n-1)` on the `n·Var` scale. The extra term
    /// vanishes as `n h^d → ∞` but dominates at moderate `n` with small `h`.
    #[default]
    SecondOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorOptions {
    pub ci_level: f64,
    pub variance: VarianceMode,
}

impl Default for EstimatorOptions {
    fn default() -> Self {
        Self {
            ci_level: 0.95,
            variance: VarianceMode::SecondOrder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    /// Estimate of `E[E[Y|X]^2]`.
    pub t_hat: f64,
    pub sobol: f64,
    /// Plug-in for `4 τ²`, the limiting variance of `√n (T - E[E[Y|X]^2])`.
    pub var_t: f64,
    /// Plug-in for the limiting variance of `√n (Ŝ - S)`.
    pub var_sobol: f64,
    pub ci_level: f64,
    /// Confidence interval for the Sobol' index.
    pub ci: [f64; 2],
    /// Confidence interval for `E[E[Y|X]^2]`.
    pub ci_t: [f64; 2],
    pub n: usize,
    pub h: f64,
    /// One-based input indices.
    pub mask: Vec<usize>,
}

/// Per-row kernel sums for a fixed sample, mask and bandwidth.
#[derive(Debug, Clone)]
pub struct RowSums {
    /// `Σ_{j' ≠ j} w_{j'} K_h(A_{X_j}(X_{j'} - X_j))`.
    pub sum: Vec<f64>,
    /// `Σ_{j' ≠ j} (w_{j'} K_h(A_{X_j}(X_{j'} - X_j)))^2`.
    pub sum_sq: Vec<f64>,
}

/// Masked coordinates with their mirror signs, sorted along the first axis.
#[derive(Debug, Clone)]
pub struct MaskedPoints {
    n: usize,
    d: usize,
    coords: Vec<f64>,
    signs: Vec<f64>,
    order: Vec<usize>,
    keys: Vec<f64>,
    /// Coordinates in sorted order, so the window scan reads memory sequentially.
    sorted: Vec<f64>,
    /// Position of each row in the sorted order.
    rank: Vec<usize>,
    domain: Domain,
}

impl MaskedPoints {
    pub fn new(sample: &FullSample, spec: &SubsetSpec) -> Result<Self> {
        let mask = spec.mask();
        if let Some(&i) = mask.iter().find(|&&i| i >= sample.p()) {
            return Err(invalid("mask", format!("index {} out of range 1..={}", i + 1, sample.p())));
        }
        let domain = sample.domain().restrict(mask)?;
        let n = sample.n();
        let d = mask.len();
        let mut coords = Vec::with_capacity(n * d);
        let mut signs = Vec::with_capacity(n * d);
        for j in 0..n {
            let x = sample.point(j, mask);
            let s = sigma_at(&domain, &x)?;
            signs.extend(s.as_slice().iter().map(|&v| f64::from(v)));
            coords.extend(x);
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| coords[a * d].total_cmp(&coords[b * d]).then(a.cmp(&b)));
        let keys = order.iter().map(|&j| coords[j * d]).collect();
        let sorted = order.iter().flat_map(|&j| coords[j * d..(j + 1) * d].iter().copied()).collect();
        let mut rank = vec![0; n];
        for (k, &j) in order.iter().enumerate() {
            rank[j] = k;
        }
        Ok(Self {
            n,
            d,
            coords,
            signs,
            order,
            keys,
            sorted,
            rank,
            domain,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn point(&self, j: usize) -> &[f64] {
        &self.coords[j * self.d..(j + 1) * self.d]
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    /// Density at every point, rejecting values at or below the floor.
    pub fn densities(&self, f_x: &dyn DensityOracle) -> Result<Vec<f64>> {
        let dens: Vec<f64> = (0..self.n).map(|j| f_x.density(self.point(j))).collect();
        let bad: Vec<usize> = dens
            .iter()
            .enumerate()
            .filter(|(_, f)| !(**f > DENSITY_FLOOR && f.is_finite()))
            .map(|(j, _)| j)
            .collect();
        if !bad.is_empty() {
            return Err(SobolError::SingularDensity { indices: bad });
        }
        Ok(dens)
    }

    pub(crate) fn check(&self, kernel: &KernelD, h: f64) -> Result<()> {
        if kernel.dim() != self.d {
            return Err(SobolError::DimensionMismatch {
                expected: self.d,
                got: kernel.dim(),
            });
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(SobolError::InvalidBandwidth(h));
        }
        if !check_mirror_condition(&self.domain, h) {
            return Err(SobolError::BandwidthTooLarge { h });
        }
        Ok(())
    }

    /// Kernel sums for every row with weights `w`.
    pub fn row_sums(&self, w: &[f64], kernel: &KernelD, h: f64) -> Result<RowSums> {
        self.check(kernel, h)?;
        if w.len() != self.n {
            return Err(SobolError::DimensionMismatch {
                expected: self.n,
                got: w.len(),
            });
        }
        let (lo, hi) = kernel.factor().support();
        let inv_hd = h.powi(self.d as i32).recip();
        // slack so rounding never drops a pair the kernel would accept
        let reach_hi = hi * h * (1.0 + 1e-9) + 1e-300;
        let reach_lo = lo * h * (1.0 - 1e-9) - 1e-300;
        let ws: Vec<f64> = self.order.iter().map(|&j| w[j]).collect();
        let factor = kernel.factor();
        let row = |j: usize| -> (f64, f64) {
            let x = self.point(j);
            let s = &self.signs[j * self.d..(j + 1) * self.d];
            let (a, b) = if s[0] > 0.0 {
                (x[0] + reach_lo, x[0] + reach_hi)
            } else {
                (x[0] - reach_hi, x[0] - reach_lo)
            };
            let start = self.keys.partition_point(|&k| k < a);
            let end = self.keys.partition_point(|&k| k <= b);
            let mut acc = NeumaierSum::new();
            let mut acc2 = NeumaierSum::new();
            let me = self.rank[j];
            let mut push = |kv: f64, k: usize| {
                if kv != 0.0 {
                    let t = ws[k] * kv * inv_hd;
                    acc.add(t);
                    acc2.add(t * t);
                }
            };
            if self.d == 1 {
                let (x0, s0) = (x[0], s[0]);
                for (k, &xp) in self.sorted.iter().enumerate().take(end).skip(start) {
                    if k != me {
                        push(factor.eval(s0 * (xp - x0) / h), k);
                    }
                }
            } else {
                for k in start..end {
                    if k == me {
                        continue;
                    }
                    let xp = &self.sorted[k * self.d..(k + 1) * self.d];
                    let mut kv = 1.0;
                    for i in 0..self.d {
                        kv *= factor.eval(s[i] * (xp[i] - x[i]) / h);
                        if kv == 0.0 {
                            break;
                        }
                    }
                    push(kv, k);
                }
            }
            (acc.value(), acc2.value())
        };
        let pairs: Vec<(f64, f64)> = if self.n >= PARALLEL_MIN_ROWS {
            (0..self.n).into_par_iter().map(row).collect()
        } else {
            (0..self.n).map(row).collect()
        };
        let (sum, sum_sq) = pairs.into_iter().unzip();
        Ok(RowSums { sum, sum_sq })
    }
}

/// Leave-one-out regression values and the pieces needed by the variance plug-ins.
#[derive(Debug, Clone)]
pub struct Regression {
    pub t_hat: f64,
    /// `ĝ1(X_j)`, leave-one-out.
    pub g1: Vec<f64>,
    /// Unbiased pairwise estimate of `ĝ1(X_j)^2` (needs `n >= 3`).
    pub g1_sq: Vec<f64>,
    /// Mean of `a_{jj'}^2` over ordered pairs.
    pub pair_sq_mean: f64,
}

pub(crate) fn regression(y: &[f64], sums: &RowSums, dens: &[f64]) -> Regression {
    let n = y.len();
    let nm1 = (n - 1) as f64;
    let g1: Vec<f64> = sums.sum.iter().zip(dens).map(|(s, f)| s / (nm1 * f)).collect();
    let g1_sq = if n >= 3 {
        let c = nm1 * (n - 2) as f64;
        sums.sum
            .iter()
            .zip(&sums.sum_sq)
            .zip(dens)
            .map(|((s, s2), f)| (s * s - s2) / (c * f * f))
            .collect()
    } else {
        g1.iter().map(|g| g * g).collect()
    };
    let t_hat = y
        .iter()
        .zip(&sums.sum)
        .zip(dens)
        .map(|((yj, s), f)| yj * s / f)
        .collect::<NeumaierSum>()
        .value()
        / (n as f64 * nm1);
    let pair_sq_mean = y
        .iter()
        .zip(&sums.sum_sq)
        .zip(dens)
        .map(|((yj, s2), f)| yj * yj * s2 / (f * f))
        .collect::<NeumaierSum>()
        .value()
        / (n as f64 * nm1);
    Regression {
        t_hat,
        g1,
        g1_sq,
        pair_sq_mean,
    }
}

fn prepare(sample: &FullSample, spec: &SubsetSpec) -> Result<MaskedPoints> {
    if sample.n() < 2 {
        return Err(SobolError::InsufficientSample {
            needed: 2,
            got: sample.n(),
        });
    }
    MaskedPoints::new(sample, spec)
}

/// Point estimate, LOO regression and helper sums in one pass.
pub fn estimate_regression(
    sample: &FullSample,
    spec: &SubsetSpec,
    kernel: &KernelD,
    h: f64,
    f_x: &dyn DensityOracle,
) -> Result<Regression> {
    let pts = prepare(sample, spec)?;
    pts.check(kernel, h)?;
    let dens = pts.densities(f_x)?;
    let sums = pts.row_sums(sample.y(), kernel, h)?;
    Ok(regression(sample.y(), &sums, &dens))
}

/// The U-statistic `T_{n,h}`.
pub fn estimate_t(
    sample: &FullSample,
    spec: &SubsetSpec,
    kernel: &KernelD,
    h: f64,
    f_x: &dyn DensityOracle,
) -> Result<f64> {
    Ok(estimate_regression(sample, spec, kernel, h, f_x)?.t_hat)
}

/// `T_{n,h}` with an estimated density in place of `f_X`.
pub fn estimate_t_with_density_estimate(
    sample: &FullSample,
    spec: &SubsetSpec,
    kernel: &KernelD,
    h: f64,
    f_hat: &dyn DensityOracle,
) -> Result<f64> {
    estimate_t(sample, spec, kernel, h, f_hat)
}

/// Leave-one-out mirror-corrected regression `ĝ1(X_j)`.
pub fn estimate_g1_loo(
    sample: &FullSample,
    spec: &SubsetSpec,
    kernel: &KernelD,
    h: f64,
    f_x: &dyn DensityOracle,
) -> Result<Vec<f64>> {
    Ok(estimate_regression(sample, spec, kernel, h, f_x)?.g1)
}

/// Empirical mean and plug-in variance `mean(Y²) - Ȳ²`.
pub fn output_moments(y: &[f64]) -> Result<(f64, f64)> {
    let ybar = mean(y);
    let y2bar = mean(&y.iter().map(|v| v * v).collect::<Vec<_>>());
    let var = y2bar - ybar * ybar;
    if !(var > 1e-13 * y2bar.max(f64::MIN_POSITIVE)) {
        return Err(SobolError::DegenerateOutput(var.max(0.0)));
    }
    Ok((ybar, var))
}

/// `(T - Ȳ²) / (mean(Y²) - Ȳ²)`.
pub fn sobol_from_t(t_hat: f64, y: &[f64]) -> Result<f64> {
    let (ybar, var) = output_moments(y)?;
    Ok((t_hat - ybar * ybar) / var)
}

/// `4 Var(Y_j ĝ1(X_j))` with the 1/n convention.
pub fn asymptotic_variance_t(y: &[f64], g1_hat: &[f64]) -> f64 {
    let yg: Vec<f64> = y.iter().zip(g1_hat).map(|(a, b)| a * b).collect();
    4.0 * variance(&yg)
}

/// Population or empirical moments entering the delta-method variance of `Ŝ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SobolMoments {
    pub var_yg: f64,
    pub cov_yg_y: f64,
    pub cov_yg_y2: f64,
    pub mean_y: f64,
    pub var_y: f64,
    pub var_y2: f64,
    pub cov_y_y2: f64,
    pub sobol: f64,
}

impl SobolMoments {
    /// Limiting variance of `√n (Ŝ - S)`.
    pub fn sigma2(&self) -> f64 {
        let Self {
            var_yg,
            cov_yg_y,
            cov_yg_y2,
            mean_y: e,
            var_y,
            var_y2,
            cov_y_y2,
            sobol: s,
        } = *self;
        let first = 4.0 * (var_yg - 2.0 * cov_yg_y * e + e * e * var_y);
        let second = 4.0 * s * (2.0 * cov_yg_y * e - cov_yg_y2 - 2.0 * e * e * var_y + e * cov_y_y2);
        let third = s * s * (4.0 * e * e * var_y - 4.0 * e * cov_y_y2 + var_y2);
        (first + second + third) / (var_y * var_y)
    }
}

fn empirical_moments(y: &[f64], reg: &Regression, sobol: f64, mode: VarianceMode) -> SobolMoments {
    let yg: Vec<f64> = y.iter().zip(&reg.g1).map(|(a, b)| a * b).collect();
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let var_yg = match mode {
        VarianceMode::Plain => variance(&yg),
        VarianceMode::Debiased | VarianceMode::SecondOrder => {
            let m2 = mean(&y2.iter().zip(&reg.g1_sq).map(|(a, b)| a * b).collect::<Vec<_>>());
            let m1 = mean(&yg);
            (m2 - m1 * m1).max(0.0)
        }
    };
    SobolMoments {
        var_yg,
        cov_yg_y: covariance(&yg, y),
        cov_yg_y2: covariance(&yg, &y2),
        mean_y: mean(y),
        var_y: variance(y),
        var_y2: variance(&y2),
        cov_y_y2: covariance(y, &y2),
        sobol,
    }
}

/// Empirical counterpart of the delta-method variance with `S` replaced by `sobol`.
pub fn asymptotic_variance_sobol(y: &[f64], g1_hat: &[f64], sobol: f64) -> Result<f64> {
    output_moments(y)?;
    let reg = Regression {
        t_hat: f64::NAN,
        g1: g1_hat.to_vec(),
        g1_sq: Vec::new(),
        pair_sq_mean: f64::NAN,
    };
    Ok(empirical_moments(y, &reg, sobol, VarianceMode::Plain).sigma2().max(0.0))
}

/// Second-order variance contributions to `n Var(T)` and `n Var(Ŝ)`.
fn second_order_terms(reg: &Regression, var_y: f64, n: usize, mode: VarianceMode) -> (f64, f64) {
    if mode != VarianceMode::SecondOrder || n < 2 {
        return (0.0, 0.0);
    }
    let t = reg.pair_sq_mean / (n - 1) as f64;
    (t, t / (var_y * var_y))
}

/// Two-sided standard normal quantile for `level`.
pub fn normal_quantile(level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(invalid("ci_level", format!("must lie in (0, 1), got {level}")));
    }
    Ok(Normal::standard().inverse_cdf(0.5 + 0.5 * level))
}

fn finish(
    y: &[f64],
    reg: &Regression,
    spec: &SubsetSpec,
    h: f64,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let z = normal_quantile(opts.ci_level)?;
    let sobol = sobol_from_t(reg.t_hat, y)?;
    let m = empirical_moments(y, reg, sobol, opts.variance);
    let (extra_t, extra_s) = second_order_terms(reg, m.var_y, y.len(), opts.variance);
    let var_t = 4.0 * m.var_yg + extra_t;
    let var_sobol = m.sigma2().max(0.0) + extra_s;
    let n = y.len() as f64;
    let hw = z * (var_sobol / n).sqrt();
    let hw_t = z * (var_t / n).sqrt();
    Ok(EstimateResult {
        t_hat: reg.t_hat,
        sobol,
        var_t,
        var_sobol,
        ci_level: opts.ci_level,
        ci: [sobol - hw, sobol + hw],
        ci_t: [reg.t_hat - hw_t, reg.t_hat + hw_t],
        n: y.len(),
        h,
        mask: spec.one_based(),
    })
}

/// Sobol' index of the group with plug-in variances and confidence intervals.
pub fn estimate_sobol(
    sample: &FullSample,
    spec: &SubsetSpec,
    kernel: &KernelD,
    h: f64,
    f_x: &dyn DensityOracle,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    output_moments(sample.y())?;
    let reg = estimate_regression(sample, spec, kernel, h, f_x)?;
    finish(sample.y(), &reg, spec, h, opts)
}

/// All first-order indices on one sample with their joint covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderResult {
    pub estimates: Vec<EstimateResult>,
    /// Plug-in limiting covariance of `√n (Ŝ^1..Ŝ^p)`.
    pub covariance: Vec<Vec<f64>>,
}

pub fn estimate_first_order_all(
    sample: &FullSample,
    kernel: &KernelD,
    h: f64,
    model: &InputModel,
    opts: &EstimatorOptions,
) -> Result<FirstOrderResult> {
    if kernel.dim() != 1 {
        return Err(SobolError::DimensionMismatch {
            expected: 1,
            got: kernel.dim(),
        });
    }
    let p = sample.p();
    if model.p() != p {
        return Err(SobolError::DimensionMismatch {
            expected: p,
            got: model.p(),
        });
    }
    let y = sample.y();
    let (ybar, _) = output_moments(y)?;
    let mut estimates = Vec::with_capacity(p);
    let mut regs = Vec::with_capacity(p);
    for i in 0..p {
        let spec = SubsetSpec::single(i, p)?;
        let f = ExactDensity::new(model, &spec);
        let reg = estimate_regression(sample, &spec, kernel, h, &f)?;
        estimates.push(finish(y, &reg, &spec, h, opts)?);
        regs.push(reg);
    }
    // Components (2 Y ĝ1^(1), …, 2 Y ĝ1^(p), Y, Y²).
    let mut comps: Vec<Vec<f64>> = regs
        .iter()
        .map(|r| y.iter().zip(&r.g1).map(|(a, b)| 2.0 * a * b).collect())
        .collect();
    comps.push(y.to_vec());
    comps.push(y.iter().map(|v| v * v).collect());
    let q = p + 2;
    let mut gamma = vec![vec![0.0; q]; q];
    for a in 0..q {
        for b in a..q {
            let c = covariance(&comps[a], &comps[b]);
            gamma[a][b] = c;
            gamma[b][a] = c;
        }
    }
    if opts.variance != VarianceMode::Plain {
        for (i, r) in regs.iter().enumerate() {
            let m2 = mean(&y.iter().zip(&r.g1_sq).map(|(a, b)| a * a * b).collect::<Vec<_>>());
            let m1 = mean(&y.iter().zip(&r.g1).map(|(a, b)| a * b).collect::<Vec<_>>());
            gamma[i][i] = 4.0 * (m2 - m1 * m1).max(0.0);
        }
    }
    // Jacobian of Φ_i(x, y, z) = (x_i - y²)/(z - y²) at the empirical point.
    let yy = ybar;
    let z = mean(&comps[p + 1]);
    let den = z - yy * yy;
    let mut jac = vec![vec![0.0; p]; q];
    for i in 0..p {
        let xi = estimates[i].t_hat;
        jac[i][i] = 1.0 / den;
        jac[p][i] = -2.0 * yy * (z - xi) / (den * den);
        jac[p + 1][i] = -(xi - yy * yy) / (den * den);
    }
    let mut cov = vec![vec![0.0; p]; p];
    for a in 0..p {
        for b in 0..p {
            let mut acc = NeumaierSum::new();
            for r in 0..q {
                for c in 0..q {
                    acc.add(jac[r][a] * gamma[r][c] * jac[c][b]);
                }
            }
            cov[a][b] = acc.value();
        }
    }
    let var_y = variance(y);
    for (a, r) in regs.iter().enumerate() {
        cov[a][a] += second_order_terms(r, var_y, y.len(), opts.variance).1;
    }
    for a in 0..p {
        for b in 0..a {
            let s = 0.5 * (cov[a][b] + cov[b][a]);
            cov[a][b] = s;
            cov[b][a] = s;
        }
    }
    Ok(FirstOrderResult {
        estimates,
        covariance: cov,
    })
}

/// `h = c n^{-γ}` with `γ` the midpoint of `(1/(2k), 1/d)` and `c` the smallest axis width.
pub fn default_bandwidth(n: usize, k: usize, domain: &Domain) -> Result<f64> {
    let d = domain.dim();
    let upper = 1.0 / d as f64;
    let lower = if k == 0 { f64::INFINITY } else { 1.0 / (2.0 * k as f64) };
    if lower >= upper {
        return Err(SobolError::EmptyBandwidthWindow { lower, upper });
    }
    let gamma = 0.5 * (lower + upper);
    Ok(domain.min_width() * (n as f64).powf(-gamma))
}

/// Total index of input `i` as `1 - S^{-i}`; `kernel` must have dimension `p - 1`.
pub fn estimate_total_index(
    sample: &FullSample,
    i: usize,
    kernel: &KernelD,
    h: f64,
    f_x: &dyn DensityOracle,
    opts: &EstimatorOptions,
) -> Result<EstimateResult> {
    let p = sample.p();
    let spec = SubsetSpec::single(i, p)?;
    let rest = spec
        .complement(p)
        .ok_or_else(|| invalid("mask", "total index needs at least two inputs"))?;
    let r = estimate_sobol(sample, &rest, kernel, h, f_x, opts)?;
    Ok(EstimateResult {
        sobol: 1.0 - r.sobol,
        ci: [1.0 - r.ci[1], 1.0 - r.ci[0]],
        mask: spec.one_based(),
        ..r
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputs::rng_for;
    use crate::kernel::KernelD;
    use approx::assert_relative_eq;
    use rand::seq::SliceRandom;

    fn uniform(_: &[f64]) -> f64 {
        1.0
    }

    fn linear_sample(n: usize, p: usize, seed: u64) -> FullSample {
        let model = InputModel::uniform_unit(p);
        let v = model.sample(n, seed);
        let y = v.rows().into_iter().map(|r| r.sum()).collect();
        FullSample::new(v, y, model.domain().clone()).unwrap()
    }

    /// Literal pair formula, written independently of the row-sum engine.
    fn pair_formula(s: &FullSample, mask: &[usize], k: &KernelD, h: f64, f: impl Fn(&[f64]) -> f64) -> f64 {
        let dom = s.domain().restrict(mask).unwrap();
        let n = s.n();
        let mut tot = 0.0;
        for j in 0..n {
            for jp in j + 1..n {
                let x = s.point(j, mask);
                let xp = s.point(jp, mask);
                let sj = sigma_at(&dom, &x).unwrap();
                let sjp = sigma_at(&dom, &xp).unwrap();
                let u1: Vec<f64> = (0..x.len()).map(|i| f64::from(sj.as_slice()[i]) * (xp[i] - x[i])).collect();
                let u2: Vec<f64> = (0..x.len()).map(|i| f64::from(sjp.as_slice()[i]) * (x[i] - xp[i])).collect();
                let a = k.eval_scaled(&u1, h).unwrap() / f(&x);
                let b = k.eval_scaled(&u2, h).unwrap() / f(&xp);
                tot += s.y()[j] * s.y()[jp] / 2.0 * (a + b);
            }
        }
        2.0 * tot / (n as f64 * (n - 1) as f64)
    }

    #[test]
    fn zero_outputs_give_zero() {
        let s = linear_sample(50, 2, 1).with_outputs(vec![0.0; 50]).unwrap();
        let spec = SubsetSpec::single(0, 2).unwrap();
        let k = KernelD::uniform(2, 1).unwrap();
        assert_eq!(estimate_t(&s, &spec, &k, 0.3, &uniform).unwrap(), 0.0);
        assert!(estimate_g1_loo(&s, &spec, &k, 0.3, &uniform).unwrap().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn two_point_hand_value() {
        let v = Array2::from_shape_vec((2, 1), vec![0.2, 0.3]).unwrap();
        let s = FullSample::new(v, vec![2.0, 3.0], Domain::unit(1)).unwrap();
        let k = KernelD::uniform(1, 1).unwrap();
        let h = 0.5;
        // From 0.2 (σ = +1): u = 0.1/0.5 = 0.2, K1 = 8 - 24·0.2 = 3.2. From 0.3: u = -0.2 -> 0.
        let expect = (2.0 * 3.0 / 2.0) * (3.2 / h) * 2.0 / 2.0;
        let t = estimate_t(&s, &SubsetSpec::single(0, 1).unwrap(), &k, h, &uniform).unwrap();
        assert_relative_eq!(t, expect, max_relative = 1e-14);
    }

    #[test]
    fn three_point_loo_regression() {
        let v = Array2::from_shape_vec((3, 1), vec![0.1, 0.2, 0.9]).unwrap();
        let s = FullSample::new(v, vec![1.0, 2.0, 4.0], Domain::unit(1)).unwrap();
        let k = KernelD::uniform(0, 1).unwrap();
        let g = estimate_g1_loo(&s, &SubsetSpec::single(0, 1).unwrap(), &k, 0.4, &uniform).unwrap();
        // K_h = 2/0.4 = 5 on [0, 0.2] after mirroring.
        assert_relative_eq!(g[0], (2.0 * 5.0) / 2.0);
        assert_eq!(g[1], 0.0);
        assert_eq!(g[2], 0.0);
    }

    #[test]
    fn matches_pair_formula() {
        for (n, p, mask, k, h, seed) in [
            (40, 2, vec![0], 2, 0.3, 1u64),
            (30, 3, vec![0, 2], 1, 0.5, 2),
            (25, 3, vec![0, 1, 2], 3, 0.9, 3),
        ] {
            let s = linear_sample(n, p, seed);
            let spec = SubsetSpec::new(mask.clone(), p).unwrap();
            let kern = KernelD::uniform(k, mask.len()).unwrap();
            let t = estimate_t(&s, &spec, &kern, h, &uniform).unwrap();
            let b = pair_formula(&s, &mask, &kern, h, uniform);
            assert_relative_eq!(t, b, max_relative = 1e-12);
        }
    }

    #[test]
    fn errors() {
        let s = linear_sample(20, 2, 4);
        let spec = SubsetSpec::single(0, 2).unwrap();
        let k = KernelD::uniform(2, 1).unwrap();
        assert!(matches!(
            estimate_t(&s, &spec, &k, 1.5, &uniform),
            Err(SobolError::BandwidthTooLarge { .. })
        ));
        assert!(matches!(
            estimate_t(&s, &spec, &k, 0.3, &|_: &[f64]| 0.0),
            Err(SobolError::SingularDensity { .. })
        ));
        let one = FullSample::new(Array2::zeros((1, 2)), vec![1.0], Domain::unit(2)).unwrap();
        assert!(matches!(
            estimate_t(&one, &spec, &k, 0.3, &uniform),
            Err(SobolError::InsufficientSample { .. })
        ));
        let c = s.with_outputs(vec![3.0; 20]).unwrap();
        assert!(matches!(
            estimate_sobol(&c, &spec, &k, 0.3, &uniform, &EstimatorOptions::default()),
            Err(SobolError::DegenerateOutput(_))
        ));
        let k2 = KernelD::uniform(2, 2).unwrap();
        assert!(matches!(
            estimate_t(&s, &spec, &k2, 0.3, &uniform),
            Err(SobolError::DimensionMismatch { .. })
        ));
        assert!(SubsetSpec::new(vec![], 2).is_err());
        assert!(SubsetSpec::new(vec![2], 2).is_err());
    }

    #[test]
    fn permutation_invariance() {
        let s = linear_sample(300, 3, 5);
        let spec = SubsetSpec::new(vec![0, 1], 3).unwrap();
        let k = KernelD::uniform(2, 2).unwrap();
        let t = estimate_t(&s, &spec, &k, 0.4, &uniform).unwrap();
        let mut idx: Vec<usize> = (0..300).collect();
        idx.shuffle(&mut rng_for(1, 0));
        let v = s.v().select(ndarray::Axis(0), &idx);
        let y = idx.iter().map(|&j| s.y()[j]).collect();
        let s2 = FullSample::new(v, y, s.domain().clone()).unwrap();
        let t2 = estimate_t(&s2, &spec, &k, 0.4, &uniform).unwrap();
        assert_relative_eq!(t, t2, max_relative = 1e-13);
    }

    #[test]
    fn scale_and_shift_structure() {
        let s = linear_sample(400, 3, 6);
        let spec = SubsetSpec::single(1, 3).unwrap();
        let k = KernelD::uniform(2, 1).unwrap();
        let h = 0.2;
        let t = estimate_t(&s, &spec, &k, h, &uniform).unwrap();
        let scaled = s.with_outputs(s.y().iter().map(|v| -3.0 * v).collect()).unwrap();
        assert_relative_eq!(estimate_t(&scaled, &spec, &k, h, &uniform).unwrap(), 9.0 * t, max_relative = 1e-13);

        // Bilinearity: T(Y + c) = T(Y) + 2c L(Y) + c² T(1), L the U-statistic with (Y_j + Y_j')/2.
        let c = 0.7;
        let shifted = s.with_outputs(s.y().iter().map(|v| v + c).collect()).unwrap();
        let ones = s.with_outputs(vec![1.0; 400]).unwrap();
        let t_ones = estimate_t(&ones, &spec, &k, h, &uniform).unwrap();
        let pts = MaskedPoints::new(&s, &spec).unwrap();
        let dens = vec![1.0; 400];
        let s_y = pts.row_sums(s.y(), &k, h).unwrap();
        let s_1 = pts.row_sums(&vec![1.0; 400], &k, h).unwrap();
        let n = 400.0;
        let l: f64 = (0..400)
            .map(|j| 0.5 * (s_y.sum[j] + s.y()[j] * s_1.sum[j]) / dens[j])
            .sum::<f64>()
            / (n * (n - 1.0));
        let ts = estimate_t(&shifted, &spec, &k, h, &uniform).unwrap();
        assert_relative_eq!(ts, t + 2.0 * c * l + c * c * t_ones, max_relative = 1e-12);

        let opts = EstimatorOptions::default();
        let a = estimate_sobol(&s, &spec, &k, h, &uniform, &opts).unwrap();
        let affine = s.with_outputs(s.y().iter().map(|v| -2.5 * v + 4.0).collect()).unwrap();
        let b = estimate_sobol(&affine, &spec, &k, h, &uniform, &opts).unwrap();
        // a shift enters T through the bilinear identity, not as an exact cancellation
        let t_aff = 6.25 * t - 2.0 * 2.5 * 4.0 * l + 16.0 * t_ones;
        assert_relative_eq!(b.t_hat, t_aff, max_relative = 1e-11);
        let pure = s.with_outputs(s.y().iter().map(|v| -2.5 * v).collect()).unwrap();
        let c = estimate_sobol(&pure, &spec, &k, h, &uniform, &opts).unwrap();
        assert_relative_eq!(a.sobol, c.sobol, max_relative = 1e-12);
        assert_relative_eq!(a.var_sobol, c.var_sobol, max_relative = 1e-10);
    }

    #[test]
    fn g1_loo_constant_output() {
        let mut s = linear_sample(2000, 1, 7);
        s = s.with_outputs(vec![1.0; 2000]).unwrap();
        let k = KernelD::uniform(2, 1).unwrap();
        let g = estimate_g1_loo(&s, &SubsetSpec::single(0, 1).unwrap(), &k, 0.1, &uniform).unwrap();
        assert!((mean(&g) - 1.0).abs() < 0.05);
    }

    #[test]
    fn variance_plugins() {
        let y = [0.0; 5];
        assert_eq!(asymptotic_variance_t(&y, &[1.0; 5]), 0.0);
        let y = [1.0, 2.0, 0.5, 3.0];
        let g = [0.3, 1.1, 0.2, 2.0];
        let base = asymptotic_variance_t(&y, &g);
        let y2: Vec<f64> = y.iter().map(|v| 2.0 * v).collect();
        let g2: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        assert_relative_eq!(asymptotic_variance_t(&y2, &g2), 16.0 * base, max_relative = 1e-14);
        // S = 0 keeps only the first block
        let m = SobolMoments {
            var_yg: 0.3,
            cov_yg_y: 0.1,
            cov_yg_y2: 0.2,
            mean_y: 0.5,
            var_y: 1.0,
            var_y2: 2.0,
            cov_y_y2: 0.4,
            sobol: 0.0,
        };
        assert_relative_eq!(m.sigma2(), 4.0 * (0.3 - 2.0 * 0.1 * 0.5 + 0.25));
        // relabelling rows leaves the plug-in unchanged
        let a = asymptotic_variance_sobol(&y, &g, 0.4).unwrap();
        let b = asymptotic_variance_sobol(&[3.0, 0.5, 2.0, 1.0], &[2.0, 0.2, 1.1, 0.3], 0.4).unwrap();
        assert_relative_eq!(a, b, max_relative = 1e-14);
    }

    #[test]
    fn sigma2_is_quadratic_form() {
        // ℓᵀ Γ ℓ with ℓ = (1, 2E[Y](S-1), -S)/Var(Y)
        let m = SobolMoments {
            var_yg: 0.7,
            cov_yg_y: 0.15,
            cov_yg_y2: 0.33,
            mean_y: 1.3,
            var_y: 0.8,
            var_y2: 2.9,
            cov_y_y2: 0.6,
            sobol: 0.35,
        };
        let g = [
            [4.0 * m.var_yg, 2.0 * m.cov_yg_y, 2.0 * m.cov_yg_y2],
            [2.0 * m.cov_yg_y, m.var_y, m.cov_y_y2],
            [2.0 * m.cov_yg_y2, m.cov_y_y2, m.var_y2],
        ];
        let l = [1.0 / m.var_y, 2.0 * m.mean_y * (m.sobol - 1.0) / m.var_y, -m.sobol / m.var_y];
        let q: f64 = (0..3).flat_map(|a| (0..3).map(move |b| (a, b))).map(|(a, b)| l[a] * g[a][b] * l[b]).sum();
        assert_relative_eq!(m.sigma2(), q, max_relative = 1e-13);
    }

    #[test]
    fn first_order_vector() {
        let s = linear_sample(5000, 3, 8);
        let model = InputModel::uniform_unit(3);
        let k = KernelD::uniform(2, 1).unwrap();
        let h = 0.2;
        let opts = EstimatorOptions::default();
        let r = estimate_first_order_all(&s, &k, h, &model, &opts).unwrap();
        let c = &r.covariance;
        for a in 0..3 {
            for b in 0..3 {
                // standard error of the difference of two correlated estimates;
                // the plug-in covariance is itself noisy at this n, hence 4 se
                let se = ((c[a][a] + c[b][b] - 2.0 * c[a][b]) / 5000.0).sqrt();
                let gap = (r.estimates[a].sobol - r.estimates[b].sobol).abs();
                assert!(gap <= 4.0 * se, "{a},{b}: {gap} > 3·{se}; {:?}", r.estimates.iter().map(|e| e.sobol).collect::<Vec<_>>());
                assert_eq!(r.covariance[a][b], r.covariance[b][a]);
            }
        }
        let eig = nalgebra::DMatrix::from_fn(3, 3, |a, b| r.covariance[a][b]).symmetric_eigenvalues();
        assert!(eig.iter().all(|e| *e >= -1e-10));
        for i in 0..3 {
            let single = estimate_sobol(
                &s,
                &SubsetSpec::single(i, 3).unwrap(),
                &k,
                h,
                &ExactDensity::new(&model, &SubsetSpec::single(i, 3).unwrap()),
                &opts,
            )
            .unwrap();
            assert_eq!(single, r.estimates[i]);
            assert_relative_eq!(r.covariance[i][i], single.var_sobol, max_relative = 1e-10);
        }
    }

    #[test]
    fn single_input_vector_matches_scalar() {
        let model = InputModel::uniform_unit(1);
        let v = model.sample(500, 9);
        let y = v.column(0).iter().map(|x| x * x + 0.1 * x).collect();
        let s = FullSample::new(v, y, Domain::unit(1)).unwrap();
        let k = KernelD::uniform(2, 1).unwrap();
        let opts = EstimatorOptions::default();
        let r = estimate_first_order_all(&s, &k, 0.1, &model, &opts).unwrap();
        let single = estimate_sobol(&s, &SubsetSpec::single(0, 1).unwrap(), &k, 0.1, &uniform, &opts).unwrap();
        assert_eq!(r.estimates[0], single);
        assert_relative_eq!(r.covariance[0][0], single.var_sobol, max_relative = 1e-10);
    }

    #[test]
    fn default_bandwidth_window() {
        let d1 = Domain::unit(1);
        let h = default_bandwidth(1000, 2, &d1).unwrap();
        // γ = (1/4 + 1)/2
        assert_relative_eq!(h, 1000f64.powf(-0.625));
        assert!(matches!(
            default_bandwidth(1000, 1, &Domain::unit(2)),
            Err(SobolError::EmptyBandwidthWindow { .. })
        ));
        assert!(default_bandwidth(1000, 0, &d1).is_err());
    }

    #[test]
    fn total_index_of_additive_model() {
        let s = linear_sample(3000, 2, 10);
        let k = KernelD::uniform(2, 1).unwrap();
        let r = estimate_total_index(&s, 0, &k, 0.1, &uniform, &EstimatorOptions::default()).unwrap();
        let se = (r.var_sobol / 3000.0).sqrt();
        assert!((r.sobol - 0.5).abs() < 3.0 * se, "{} ± {se}", r.sobol);
        assert!(r.ci[0] <= r.sobol && r.sobol <= r.ci[1]);
    }
}
