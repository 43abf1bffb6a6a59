//! Estimated input densities to plug in place of `f_X`.
//!
//! Two parametric estimators (uniform endpoint by the sample maximum, beta
//! shape by moments with a constant fallback) and the mirror kernel density
//! estimator floored at `η/2`.

use crate::domain::{check_mirror_condition, sigma_at, Domain};
use crate::error::{invalid, Result, SobolError};
use crate::estimator::{DensityOracle, DENSITY_FLOOR};
use crate::kernel::KernelD;
use crate::sum::NeumaierSum;
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;
use std::f64::consts::PI;

/// `(2 ∫₀¹ √(x(1-x)) dx)^{-1}`.
pub const BETA_FALLBACK: f64 = 4.0 / PI;

/// Accepted range for the moment estimate of the first beta shape.
pub const BETA_SHAPE_RANGE: (f64, f64) = (1.0, 1.5);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DensityKind {
    UniformMax { theta: f64 },
    BetaMoment { a_hat: f64, b: f64, fallback: bool },
    MirrorKde { h: f64, eta: f64, m: usize },
}

#[derive(Debug, Clone)]
enum Inner {
    Uniform { theta: f64 },
    Beta { a: f64, b: f64, ln_norm: f64 },
    Constant(f64),
    Kde { aux: Array2<f64>, kernel: KernelD, h: f64, domain: Domain },
}

/// A plug-in density; `eval` never falls below `floor` inside its support.
#[derive(Debug, Clone)]
pub struct DensityEstimate {
    kind: DensityKind,
    floor: f64,
    inner: Inner,
}

impl DensityEstimate {
    pub fn kind(&self) -> DensityKind {
        self.kind
    }

    pub fn floor(&self) -> f64 {
        self.floor
    }

    pub fn dim(&self) -> usize {
        match &self.inner {
            Inner::Kde { domain, .. } => domain.dim(),
            _ => 1,
        }
    }

    /// Support of the estimate; for the uniform plug-in this is `[0, θ̂]`.
    pub fn domain(&self) -> Domain {
        match &self.inner {
            Inner::Uniform { theta } => Domain::new(vec![0.0], vec![*theta]).expect("θ̂ > 0"),
            Inner::Kde { domain, .. } => domain.clone(),
            _ => Domain::unit(1),
        }
    }

    /// Density at `x`; errors outside the support.
    pub fn try_eval(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(SobolError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        if !self.domain().contains(x) {
            return Err(SobolError::DomainViolation { point: x.to_vec() });
        }
        Ok(match &self.inner {
            Inner::Uniform { theta } => theta.recip(),
            Inner::Beta { a, b, ln_norm } => {
                let t = x[0];
                let lx = if *a == 1.0 { 0.0 } else { (a - 1.0) * t.ln() };
                let l1x = if *b == 1.0 { 0.0 } else { (b - 1.0) * (1.0 - t).ln() };
                (lx + l1x - ln_norm).exp().max(self.floor)
            }
            Inner::Constant(c) => *c,
            Inner::Kde { aux, kernel, h, domain } => kde_value(aux.view(), kernel, *h, domain, x)?.max(self.floor),
        })
    }
}

impl DensityOracle for DensityEstimate {
    /// Zero outside the support, which the estimator rejects.
    fn density(&self, x: &[f64]) -> f64 {
        self.try_eval(x).unwrap_or(0.0)
    }
}

/// Uniform on `[0, θ]` with `θ̂ = max(aux)`.
pub fn uniform_max_estimator(aux: &[f64]) -> Result<DensityEstimate> {
    if aux.is_empty() {
        return Err(SobolError::InsufficientSample { needed: 1, got: 0 });
    }
    if aux.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(SobolError::InvalidData("uniform_max needs finite values >= 0".into()));
    }
    let theta = aux.iter().copied().fold(0.0, f64::max);
    if theta <= 0.0 {
        return Err(SobolError::InvalidData("uniform_max needs a positive maximum".into()));
    }
    Ok(DensityEstimate {
        kind: DensityKind::UniformMax { theta },
        floor: theta.recip(),
        inner: Inner::Uniform { theta },
    })
}

/// `[1/(1+b), (3/2)/((3/2)+b)]`: sample means for which the shape estimate is accepted.
pub fn beta_mean_window(b: f64) -> (f64, f64) {
    let (lo, hi) = BETA_SHAPE_RANGE;
    (lo / (lo + b), hi / (hi + b))
}

/// Beta(â, b) with `â = b X̄/(1 - X̄)` when `â ∈ [1, 3/2]`, else the constant `4/π`.
pub fn beta_moment_estimator(aux: &[f64], b: f64) -> Result<DensityEstimate> {
    if !(b > 1.0 && b < 1.5) {
        return Err(invalid("b", format!("must lie in (1, 3/2), got {b}")));
    }
    if aux.is_empty() {
        return Err(SobolError::InsufficientSample { needed: 1, got: 0 });
    }
    if aux.iter().any(|v| !(*v > 0.0 && *v < 1.0)) {
        return Err(SobolError::InvalidData("beta_moment needs values in (0, 1)".into()));
    }
    let m = aux.iter().copied().collect::<NeumaierSum>().value() / aux.len() as f64;
    if m >= 1.0 {
        return Err(SobolError::InvalidData(format!("sample mean {m} >= 1")));
    }
    let a_hat = b * m / (1.0 - m);
    // a few ulps of slack so that â = 3/2 up to rounding stays inside
    let tol = 4.0 * f64::EPSILON;
    let (lo, hi) = BETA_SHAPE_RANGE;
    let accepted = a_hat >= lo * (1.0 - tol) && a_hat <= hi * (1.0 + tol);
    if accepted {
        Ok(DensityEstimate {
            kind: DensityKind::BetaMoment {
                a_hat,
                b,
                fallback: false,
            },
            floor: DENSITY_FLOOR,
            inner: Inner::Beta {
                a: a_hat,
                b,
                ln_norm: ln_beta(a_hat, b),
            },
        })
    } else {
        Ok(DensityEstimate {
            kind: DensityKind::BetaMoment {
                a_hat,
                b,
                fallback: true,
            },
            floor: BETA_FALLBACK,
            inner: Inner::Constant(BETA_FALLBACK),
        })
    }
}

fn kde_value(aux: ArrayView2<f64>, kernel: &KernelD, h: f64, domain: &Domain, x: &[f64]) -> Result<f64> {
    let s = sigma_at(domain, x)?;
    let d = domain.dim();
    let inv = h.powi(d as i32).recip();
    let mut acc = NeumaierSum::new();
    for row in aux.rows() {
        let mut k = 1.0;
        for i in 0..d {
            k *= kernel.factor().eval(f64::from(s.as_slice()[i]) * (row[i] - x[i]) / h);
            if k == 0.0 {
                break;
            }
        }
        acc.add(k);
    }
    Ok(acc.value() * inv / aux.nrows() as f64)
}

/// Default KDE bandwidth `width · m^{-1/(2k+d)}`.
pub fn default_kde_bandwidth(m: usize, kernel: &KernelD, domain: &Domain) -> f64 {
    let e = 2 * kernel.order() + kernel.dim();
    domain.min_width() * (m as f64).powf(-1.0 / e as f64)
}

/// `max((1/m) Σ_j K_h(A_x(X̃_j - x)), η/2)` from an auxiliary input sample.
pub fn mirror_kde(aux: Array2<f64>, kernel: KernelD, h_kde: f64, eta: f64, domain: Domain) -> Result<DensityEstimate> {
    let m = aux.nrows();
    if m == 0 {
        return Err(SobolError::InsufficientSample { needed: 1, got: 0 });
    }
    if !(eta > 0.0 && eta.is_finite()) {
        return Err(invalid("eta", format!("must be positive, got {eta}")));
    }
    if kernel.dim() != domain.dim() || aux.ncols() != domain.dim() {
        return Err(SobolError::DimensionMismatch {
            expected: domain.dim(),
            got: if aux.ncols() != domain.dim() { aux.ncols() } else { kernel.dim() },
        });
    }
    if !(h_kde > 0.0 && h_kde.is_finite()) {
        return Err(SobolError::InvalidBandwidth(h_kde));
    }
    if !check_mirror_condition(&domain, h_kde) {
        return Err(SobolError::BandwidthTooLarge { h: h_kde });
    }
    if let Some(r) = aux.rows().into_iter().find(|r| !domain.contains(&r.to_vec())) {
        return Err(SobolError::DomainViolation { point: r.to_vec() });
    }
    Ok(DensityEstimate {
        kind: DensityKind::MirrorKde { h: h_kde, eta, m },
        floor: 0.5 * eta,
        inner: Inner::Kde {
            aux,
            kernel,
            h: h_kde,
            domain,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PluginMseReport {
    /// Mean of `((f - f̂)/f̂)²` over the supplied points.
    pub mean_sq_rel_error: f64,
    /// `h^d / n`.
    pub scale: f64,
    pub ratio: f64,
}

/// Relative squared error of a plug-in against the `h^d/n` scale it must beat.
///
/// Advisory: the requirement is asymptotic, so a single sample cannot confirm it.
pub fn plugin_mse_diagnostic(f_true: &[f64], f_hat: &[f64], h: f64, n: usize, d: usize) -> Result<PluginMseReport> {
    if f_true.len() != f_hat.len() {
        return Err(SobolError::DimensionMismatch {
            expected: f_true.len(),
            got: f_hat.len(),
        });
    }
    if f_true.is_empty() {
        return Err(SobolError::InsufficientSample { needed: 1, got: 0 });
    }
    let m = f_true
        .iter()
        .zip(f_hat)
        .map(|(f, g)| ((f - g) / g).powi(2))
        .collect::<NeumaierSum>()
        .value()
        / f_true.len() as f64;
    let scale = h.powi(d as i32) / n as f64;
    Ok(PluginMseReport {
        mean_sq_rel_error: m,
        scale,
        ratio: m / scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inputs::{rng_for, InputModel};
    use crate::quadrature::integrate_adaptive;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn uniform_max_basics() {
        let e = uniform_max_estimator(&[0.2, 0.9, 0.5]).unwrap();
        assert_eq!(e.kind(), DensityKind::UniformMax { theta: 0.9 });
        assert_relative_eq!(e.try_eval(&[0.3]).unwrap(), 1.0 / 0.9);
        assert_relative_eq!(e.try_eval(&[0.9]).unwrap(), 1.0 / 0.9);
        assert!(matches!(e.try_eval(&[0.95]), Err(SobolError::DomainViolation { .. })));
        assert_eq!(e.density(&[0.95]), 0.0);
        assert!(uniform_max_estimator(&[]).is_err());
        assert!(uniform_max_estimator(&[0.4, -0.1]).is_err());
        let same = uniform_max_estimator(&[0.7; 5]).unwrap();
        assert_eq!(same.kind(), DensityKind::UniformMax { theta: 0.7 });
    }

    #[test]
    fn uniform_max_error_rate() {
        let n = 10_000;
        let reps = 1000;
        let mut sq = 0.0;
        let mut scaled = Vec::with_capacity(reps);
        for r in 0..reps {
            let mut rng = rng_for(r as u64, 9);
            let aux: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let DensityKind::UniformMax { theta } = uniform_max_estimator(&aux).unwrap().kind() else {
                unreachable!()
            };
            assert!(theta <= 1.0);
            sq += (theta - 1.0).powi(2);
            scaled.push(n as f64 * (1.0 - theta));
        }
        let mse = sq / reps as f64;
        let exact = 2.0 / ((n as f64 + 1.0) * (n as f64 + 2.0));
        assert!(mse < 3.0 * exact && mse > exact / 3.0, "{mse} vs {exact}");
        // n(θ - θ̂) is asymptotically exponential with mean θ = 1
        let m = crate::sum::mean(&scaled);
        let se = (crate::sum::variance(&scaled) / reps as f64).sqrt();
        assert!((m - 1.0).abs() < 3.0 * se, "{m} ± {se}");
    }

    #[test]
    fn beta_moment_cases() {
        let e = beta_moment_estimator(&[0.25, 0.75], 1.2).unwrap();
        assert_eq!(e.kind(), DensityKind::BetaMoment { a_hat: 1.2, b: 1.2, fallback: false });
        let oracle = statrs::distribution::Continuous::pdf(&statrs::distribution::Beta::new(1.2, 1.2).unwrap(), 0.3);
        assert_relative_eq!(e.try_eval(&[0.3]).unwrap(), oracle, max_relative = 1e-12);

        let f = beta_moment_estimator(&[0.85, 0.95], 1.2).unwrap();
        let DensityKind::BetaMoment { a_hat, fallback, .. } = f.kind() else { unreachable!() };
        assert!(fallback);
        assert_relative_eq!(a_hat, 10.8, max_relative = 1e-12);
        let area = integrate_adaptive(|x| (x * (1.0 - x)).sqrt(), 0.0, 1.0, 1e-14, 1e-13).unwrap();
        assert_relative_eq!(f.try_eval(&[0.5]).unwrap(), 1.0 / (2.0 * area), max_relative = 1e-9);
        assert_relative_eq!(BETA_FALLBACK, 1.2732395447351628, max_relative = 1e-15);

        // mean 0.6 with b = 1: b must be in the open interval
        assert!(beta_moment_estimator(&[0.6], 1.0).is_err());
        assert!(beta_moment_estimator(&[0.6, 1.0], 1.2).is_err());
        assert!(beta_moment_estimator(&[], 1.2).is_err());

        // â = 3/2 lies on the closed boundary: b = 1.25, mean = 6/11
        let m = 6.0 / 11.0;
        let e = beta_moment_estimator(&[m], 1.25).unwrap();
        let DensityKind::BetaMoment { a_hat, fallback, .. } = e.kind() else { unreachable!() };
        assert!((a_hat - 1.5).abs() < 1e-14);
        assert!(!fallback);
    }

    proptest! {
        #[test]
        fn fallback_iff_mean_outside_window(m in 0.01f64..0.99, b in 1.01f64..1.49) {
            let e = beta_moment_estimator(&[m], b).unwrap();
            let DensityKind::BetaMoment { fallback, .. } = e.kind() else { unreachable!() };
            let (lo, hi) = beta_mean_window(b);
            // skip a rounding band around the window edges
            prop_assume!((m - lo).abs() > 1e-12 && (m - hi).abs() > 1e-12);
            prop_assert_eq!(fallback, !(lo..=hi).contains(&m));
        }

        #[test]
        fn kde_never_below_floor(xs in prop::collection::vec(0.0f64..=1.0, 1..20), q in 0.0f64..=1.0, eta in 0.01f64..2.0) {
            let aux = Array2::from_shape_vec((xs.len(), 1), xs).unwrap();
            let e = mirror_kde(aux, KernelD::uniform(2, 1).unwrap(), 0.2, eta, Domain::unit(1)).unwrap();
            prop_assert!(e.try_eval(&[q]).unwrap() >= 0.5 * eta);
        }
    }

    #[test]
    fn kde_single_point() {
        let k = KernelD::uniform(2, 1).unwrap();
        let aux = ndarray::array![[0.3]];
        let e = mirror_kde(aux, k.clone(), 0.1, 0.2, Domain::unit(1)).unwrap();
        let k0 = k.eval_scaled(&[0.0], 0.1).unwrap();
        assert_relative_eq!(e.try_eval(&[0.3]).unwrap(), k0.max(0.1), max_relative = 1e-14);
        // far away: only the floor remains
        assert_eq!(e.try_eval(&[0.9]).unwrap(), 0.1);
        assert!(mirror_kde(ndarray::array![[0.3]], k.clone(), 1.5, 0.2, Domain::unit(1)).is_err());
        assert!(mirror_kde(ndarray::array![[1.3]], k, 0.1, 0.2, Domain::unit(1)).is_err());
    }

    #[test]
    fn kde_mise_on_uniform() {
        let m = 5000;
        let model = InputModel::uniform_unit(1);
        let aux = model.sample(m, 11);
        let k = KernelD::uniform(2, 1).unwrap();
        let h = default_kde_bandwidth(m, &k, &Domain::unit(1));
        assert_relative_eq!(h, (m as f64).powf(-0.2), max_relative = 1e-14);
        let e = mirror_kde(aux, k, h, 0.5, Domain::unit(1)).unwrap();
        let grid: Vec<f64> = (0..200).map(|i| (i as f64 + 0.5) / 200.0).collect();
        let ise = grid.iter().map(|x| (e.try_eval(&[*x]).unwrap() - 1.0).powi(2)).sum::<f64>() / 200.0;
        assert!(ise <= 0.05, "{ise}");
    }

    #[test]
    fn mse_diagnostic() {
        let f = [1.0, 2.0, 0.5];
        let r = plugin_mse_diagnostic(&f, &f, 0.1, 100, 1).unwrap();
        assert_eq!(r.mean_sq_rel_error, 0.0);
        assert_eq!(r.ratio, 0.0);
        let a = plugin_mse_diagnostic(&[1.0, 1.0], &[1.1, 1.0], 0.1, 100, 1).unwrap();
        let b = plugin_mse_diagnostic(&[1.0, 1.0], &[1.2, 1.0], 0.1, 100, 1).unwrap();
        assert!(b.mean_sq_rel_error > a.mean_sq_rel_error && b.ratio > a.ratio);
        assert_relative_eq!(a.scale, 0.1 / 100.0);
        assert!(plugin_mse_diagnostic(&[1.0], &[1.0, 2.0], 0.1, 10, 1).is_err());
    }

    #[test]
    fn uniform_plugin_meets_rate_condition() {
        let n = 10_000;
        let h = (n as f64).powf(-0.4);
        let mut errs = Vec::new();
        for r in 0..200u64 {
            let mut rng = rng_for(r, 10);
            let x: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let e = uniform_max_estimator(&x).unwrap();
            let fh: Vec<f64> = x.iter().map(|v| e.try_eval(&[*v]).unwrap()).collect();
            errs.push(plugin_mse_diagnostic(&vec![1.0; n], &fh, h, n, 1).unwrap());
        }
        let mse = errs.iter().map(|e| e.mean_sq_rel_error).sum::<f64>() / errs.len() as f64;
        let exact = 2.0 / ((n as f64 + 1.0) * (n as f64 + 2.0));
        assert!(mse < 3.0 * exact && mse > exact / 3.0, "{mse} vs {exact}");
        assert!(mse < 0.05 * h / n as f64);
    }
}
