//! Signed product kernels of prescribed order.
//!
//! A one-dimensional kernel of order `k` is built from a base density `f0`
//! with support inside `[0, 1/2]`:
//!
//! ```text
//! K1(x) = (Σ_i c_i ψ_i(x)) f0(x),      Σ_i λ_i^m c_i = δ_{m0},  m = 0..=k
//! ```
//!
//! where `ψ_0..ψ_k` are the `f0`-orthonormal polynomials and `λ^m` are the
//! coordinates of `x^m` in that basis. The kernel then integrates to one and
//! annihilates moments `1..=k`. A `d`-dimensional kernel is the tensor
//! product `K(u) = Π K1(u_i)`, and `K_h(u) = K(u/h) / h^d`.
//!
//! The support is one-sided on purpose: the estimator reflects it inward with
//! the mirror map of [`crate::domain`], so it never leaves the input domain.

use crate::error::{invalid, Result, SobolError};
use crate::quadrature::{gauss_beta, gauss_legendre, integrate_adaptive, tensor_rule, Rule};
use crate::sum::NeumaierSum;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::sync::Arc;

/// Highest supported kernel order.
pub const MAX_ORDER: usize = 10;

/// Canonical one-dimensional kernel support.
pub const SUPPORT: (f64, f64) = (0.0, 0.5);

const NORMALIZATION_TOL: f64 = 1e-12;

/// Above this order kernel evaluation switches to compensated Horner.
const PLAIN_HORNER_MAX_ORDER: usize = 5;

/// Serializable description of a base density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSpec {
    /// Uniform on `[0, 1/2]`.
    UniformHalf,
    Custom(CustomBase),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CustomBase {
    /// Beta(a, b) rescaled onto `[0, 1/2]`; requires `a, b >= 1` so the density is bounded.
    Beta([f64; 2]),
}

type DensityFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Probability density `f0` used to shape the kernel.
#[derive(Clone)]
pub struct BaseDensity {
    spec: Option<BaseSpec>,
    support: (f64, f64),
    density: DensityFn,
    constant: Option<f64>,
    /// Raw moments `m_0..=m_{2 MAX_ORDER}`.
    moments: Vec<f64>,
    /// Rule whose weights already include `f0`: `∫ p f0 ≈ Σ w_i p(x_i)`.
    rule: Rule,
}

impl fmt::Debug for BaseDensity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BaseDensity")
            .field("spec", &self.spec)
            .field("support", &self.support)
            .finish_non_exhaustive()
    }
}

impl BaseDensity {
    pub fn uniform_half() -> Self {
        let (a, b) = SUPPORT;
        let height = 1.0 / (b - a);
        let gl = gauss_legendre(MAX_ORDER + 2).mapped(a, b);
        let rule = Rule {
            nodes: gl.nodes,
            weights: gl.weights.iter().map(|w| w * height).collect(),
        };
        let moments = (0..=2 * MAX_ORDER)
            .map(|j| {
                let e = j as i32 + 1;
                (b.powi(e) - a.powi(e)) / ((j as f64 + 1.0) * (b - a))
            })
            .collect();
        Self {
            spec: Some(BaseSpec::UniformHalf),
            support: SUPPORT,
            density: Arc::new(move |x| if (a..=b).contains(&x) { height } else { 0.0 }),
            constant: Some(height),
            moments,
            rule,
        }
    }

    /// Beta(a, b) rescaled onto `[0, 1/2]`.
    pub fn beta_half(a: f64, b: f64) -> Result<Self> {
        if !(a >= 1.0 && b >= 1.0 && a.is_finite() && b.is_finite()) {
            return Err(invalid("base", format!("beta base needs a, b >= 1, got ({a}, {b})")));
        }
        let scale = SUPPORT.1;
        let log_norm = statrs::function::beta::ln_beta(a, b);
        let unit = gauss_beta(MAX_ORDER + 2, a, b);
        let rule = Rule {
            nodes: unit.nodes.iter().map(|x| x * scale).collect(),
            weights: unit.weights,
        };
        let mut moments = Vec::with_capacity(2 * MAX_ORDER + 1);
        let mut m = 1.0;
        for j in 0..=2 * MAX_ORDER {
            moments.push(m * scale.powi(j as i32));
            m *= (a + j as f64) / (a + b + j as f64);
        }
        let density = Arc::new(move |x: f64| {
            let t = x / scale;
            if !(0.0..=1.0).contains(&t) {
                return 0.0;
            }
            ((a - 1.0) * t.ln() + (b - 1.0) * (1.0 - t).ln() - log_norm).exp() / scale
        });
        Ok(Self {
            spec: Some(BaseSpec::Custom(CustomBase::Beta([a, b]))),
            support: SUPPORT,
            density,
            constant: None,
            moments,
            rule,
        })
    }

    /// Arbitrary bounded density on `support ⊂ [0, 1/2]`.
    ///
    /// Moments come from adaptive quadrature; inner products use a composite
    /// Gauss–Legendre rule, so the density should be piecewise smooth.
    pub fn from_fn(
        support: (f64, f64),
        density: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        let (a, b) = support;
        if !(SUPPORT.0 <= a && a < b && b <= SUPPORT.1) {
            return Err(invalid("base", format!("support ({a}, {b}) must lie in [0, 1/2]")));
        }
        let density: DensityFn = Arc::new(density);
        let mass = integrate_adaptive(|x| density(x), a, b, 1e-15, 1e-14)?;
        if (mass - 1.0).abs() > NORMALIZATION_TOL {
            return Err(SobolError::DegenerateBase(format!("density integrates to {mass}")));
        }
        let mut moments = Vec::with_capacity(2 * MAX_ORDER + 1);
        for j in 0..=2 * MAX_ORDER {
            let m = integrate_adaptive(|x| x.powi(j as i32) * density(x), a, b, 1e-16, 1e-13)?;
            moments.push(m);
        }
        let gl = gauss_legendre(24).composite(a, b, 64);
        let rule = Rule {
            weights: gl.nodes.iter().zip(&gl.weights).map(|(&x, &w)| w * density(x)).collect(),
            nodes: gl.nodes,
        };
        Ok(Self {
            spec: None,
            support,
            density,
            constant: None,
            moments,
            rule,
        })
    }

    pub fn from_spec(spec: &BaseSpec) -> Result<Self> {
        match spec {
            BaseSpec::UniformHalf => Ok(Self::uniform_half()),
            BaseSpec::Custom(CustomBase::Beta([a, b])) => Self::beta_half(*a, *b),
        }
    }

    pub fn spec(&self) -> Option<&BaseSpec> {
        self.spec.as_ref()
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    #[inline]
    pub fn density(&self, x: f64) -> f64 {
        (self.density)(x)
    }

    /// `∫ φ(x) f0(x) dx` using the base rule.
    pub fn expect(&self, phi: impl FnMut(f64) -> f64) -> f64 {
        self.rule.integrate(phi)
    }
}

/// `f0`-orthonormal polynomials `ψ_0..=ψ_k` in the monomial basis.
#[derive(Debug, Clone, PartialEq)]
pub struct OrthonormalBasis {
    degree: usize,
    /// Row `m` holds the `m + 1` monomial coefficients of `ψ_m`, lowest power first.
    coeffs: Vec<Vec<f64>>,
    /// Rounding residue of `coeffs`.
    coeffs_lo: Vec<Vec<f64>>,
    /// Coefficients in the centred variable `t = α x + β`.
    tcoeffs: Vec<Vec<f64>>,
    centring: (f64, f64),
}

impl OrthonormalBasis {
    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn coeffs(&self, m: usize) -> &[f64] {
        &self.coeffs[m]
    }

    /// Dense lower-triangular `(k+1)×(k+1)` coefficient matrix.
    pub fn coeff_matrix(&self) -> Vec<Vec<f64>> {
        let n = self.degree + 1;
        self.coeffs
            .iter()
            .map(|row| {
                let mut full = row.clone();
                full.resize(n, 0.0);
                full
            })
            .collect()
    }

    pub fn eval(&self, m: usize, x: f64) -> f64 {
        compensated_horner(&self.coeffs[m], &self.coeffs_lo[m], x)
    }
}

/// Horner with error-free transformations over double-double coefficients.
#[inline]
fn compensated_horner(hi: &[f64], lo: &[f64], x: f64) -> f64 {
    let mut s = 0.0f64;
    let mut c = 0.0f64;
    for (&a, &al) in hi.iter().zip(lo).rev() {
        let (p, pe) = two_prod(s, x);
        let (t, se) = two_sum(p, a);
        s = t;
        c = c.mul_add(x, pe + se + al);
    }
    s + c
}

#[inline]
fn horner(coeffs: &[f64], x: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

fn weighted_dot(rule: &Rule, a: &[f64], b: &[f64]) -> f64 {
    rule.weights
        .iter()
        .zip(a.iter().zip(b))
        .map(|(w, (x, y))| w * x * y)
        .collect::<NeumaierSum>()
        .value()
}

/// Orthonormalize `1, x, …, x^k` under `⟨p, q⟩ = ∫ p q f0`.
///
/// The work is done in the centred variable `t = α x + β` mapping the support
/// onto `[-1, 1]`, where the basis is well conditioned. Each new direction is
/// `t ψ_{m-1}` (same span as `t^m`), orthogonalized twice against the previous
/// polynomials. The result is expanded into monomials of `x` in double-double
/// arithmetic; the high parts form the public coefficient matrix and the low
/// parts keep evaluation accurate at high degree.
pub fn build_orthonormal_basis(base: &BaseDensity, k: usize) -> Result<OrthonormalBasis> {
    if k > MAX_ORDER {
        return Err(invalid("k", format!("order {k} exceeds maximum {MAX_ORDER}")));
    }
    let (alpha, beta) = centring(base.support);
    let rule = &base.rule;
    let tn: Vec<f64> = rule.nodes.iter().map(|x| alpha * x + beta).collect();
    let ones = vec![1.0; tn.len()];
    let m0 = weighted_dot(rule, &ones, &ones);
    if m0 <= 0.0 {
        return Err(SobolError::DegenerateBase("zero total mass".into()));
    }
    let s0 = m0.sqrt();
    let mut values: Vec<Vec<f64>> = vec![vec![1.0 / s0; tn.len()]];
    let mut tcoeffs: Vec<Vec<f64>> = vec![vec![1.0 / s0]];

    for m in 1..=k {
        let mut v: Vec<f64> = tn.iter().zip(&values[m - 1]).map(|(t, p)| t * p).collect();
        let mut c = vec![0.0; m + 1];
        c[1..].copy_from_slice(&tcoeffs[m - 1]);
        let start_norm = weighted_dot(rule, &v, &v);
        for _pass in 0..2 {
            for i in 0..m {
                let r = weighted_dot(rule, &v, &values[i]);
                for (vj, pj) in v.iter_mut().zip(&values[i]) {
                    *vj -= r * pj;
                }
                for (cj, pj) in c.iter_mut().zip(&tcoeffs[i]) {
                    *cj -= r * pj;
                }
            }
        }
        let norm2 = weighted_dot(rule, &v, &v);
        if !(norm2 > 1e-13 * start_norm) {
            return Err(SobolError::DegenerateBase(format!(
                "moment matrix singular at degree {m}"
            )));
        }
        let s = norm2.sqrt();
        v.iter_mut().for_each(|x| *x /= s);
        c.iter_mut().for_each(|x| *x /= s);
        values.push(v);
        tcoeffs.push(c);
    }
    let (coeffs, coeffs_lo) = tcoeffs.iter().map(|row| expand_centred(row, alpha, beta)).unzip();
    Ok(OrthonormalBasis {
        degree: k,
        coeffs,
        coeffs_lo,
        tcoeffs,
        centring: (alpha, beta),
    })
}

fn centring(support: (f64, f64)) -> (f64, f64) {
    let (a, b) = support;
    (2.0 / (b - a), -(a + b) / (b - a))
}

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let z = s - a;
    (s, (a - (s - z)) + (b - z))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

#[derive(Clone, Copy, Default)]
struct Dd(f64, f64);

impl Dd {
    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.0, o.0);
        let (s, e2) = two_sum(s, e + self.1 + o.1);
        Dd(s, e2)
    }

    fn mul(self, b: f64) -> Dd {
        let (p, e) = two_prod(self.0, b);
        let (s, e2) = two_sum(p, e + self.1 * b);
        Dd(s, e2)
    }
}

/// Expand `Σ_j a_j (α x + β)^j` into monomials of `x`, returned as (high, low) parts.
fn expand_centred(a: &[f64], alpha: f64, beta: f64) -> (Vec<f64>, Vec<f64>) {
    let n = a.len();
    // Horner in polynomial arithmetic: acc ← acc·(α x + β) + a_j.
    let mut acc = vec![Dd::default(); n];
    for (j, &aj) in a.iter().enumerate().rev() {
        let deg = n - 1 - j;
        let mut next = vec![Dd::default(); n];
        for i in 0..deg {
            next[i + 1] = next[i + 1].add(acc[i].mul(alpha));
            next[i] = next[i].add(acc[i].mul(beta));
        }
        next[0] = next[0].add(Dd(aj, 0.0));
        acc = next;
    }
    acc.iter().map(|d| (d.0, d.1)).unzip()
}

/// Coordinates `λ^m` of `x^m` in the basis, i.e. `x^m = Σ_i λ_i^m ψ_i(x)`.
///
/// Solves the triangular system `Lᵀ λ = e_m`, so entries `i > m` are exactly zero.
pub fn monomial_coordinates(m: usize, basis: &OrthonormalBasis) -> Result<Vec<f64>> {
    let k = basis.degree;
    if m > k {
        return Err(invalid("m", format!("power {m} exceeds basis degree {k}")));
    }
    let mut lambda = vec![0.0; k + 1];
    for j in (0..=k).rev() {
        let mut rhs = if j == m { 1.0 } else { 0.0 };
        for i in j + 1..=k {
            rhs -= basis.coeffs[i][j] * lambda[i];
        }
        lambda[j] = rhs / basis.coeffs[j][j];
    }
    Ok(lambda)
}

/// Solve `Σ_i λ_i^m c_i = δ_{m0}` for `m = 0..=k`.
pub fn solve_kernel_coefficients(basis: &OrthonormalBasis) -> Result<Vec<f64>> {
    let k = basis.degree;
    let rows: Vec<Vec<f64>> = (0..=k)
        .map(|m| monomial_coordinates(m, basis))
        .collect::<Result<_>>()?;
    let diag: Vec<f64> = (0..=k).map(|m| rows[m][m].abs()).collect();
    let max = diag.iter().cloned().fold(0.0, f64::max);
    let min = diag.iter().cloned().fold(f64::INFINITY, f64::min);
    let ratio = max / min;
    if !(ratio.is_finite() && ratio < 1e14) {
        return Err(SobolError::IllConditioned { ratio });
    }
    // Lower-triangular forward substitution.
    let mut c = vec![0.0; k + 1];
    for m in 0..=k {
        let mut rhs = if m == 0 { 1.0 } else { 0.0 };
        for (i, ci) in c.iter().enumerate().take(m) {
            rhs -= rows[m][i] * ci;
        }
        c[m] = rhs / rows[m][m];
    }
    Ok(c)
}

/// One-dimensional signed kernel of order `k`.
#[derive(Debug, Clone)]
pub struct Kernel1D {
    order: usize,
    poly: Vec<f64>,
    poly_lo: Vec<f64>,
    base: BaseDensity,
    support: (f64, f64),
}

impl Kernel1D {
    pub fn order(&self) -> usize {
        self.order
    }

    /// Monomial coefficients of `Σ c_i ψ_i`, lowest power first.
    pub fn poly_coeffs(&self) -> &[f64] {
        &self.poly
    }

    pub fn base(&self) -> &BaseDensity {
        &self.base
    }

    pub fn support(&self) -> (f64, f64) {
        self.support
    }

    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        if !(self.support.0..=self.support.1).contains(&x) {
            return 0.0;
        }
        let p = if self.order <= PLAIN_HORNER_MAX_ORDER {
            horner(&self.poly, x)
        } else {
            compensated_horner(&self.poly, &self.poly_lo, x)
        };
        match self.base.constant {
            Some(h) => p * h,
            None => p * self.base.density(x),
        }
    }
}

pub fn build_kernel_1d(base: &BaseDensity, k: usize) -> Result<Kernel1D> {
    let basis = build_orthonormal_basis(base, k)?;
    let c = solve_kernel_coefficients(&basis)?;
    let mut tpoly = vec![NeumaierSum::new(); k + 1];
    for (ci, row) in c.iter().zip(&basis.tcoeffs) {
        for (pj, rj) in tpoly.iter_mut().zip(row) {
            pj.add(ci * rj);
        }
    }
    let tpoly: Vec<f64> = tpoly.iter().map(|s| s.value()).collect();
    let (alpha, beta) = basis.centring;
    let (poly, poly_lo) = expand_centred(&tpoly, alpha, beta);
    Ok(Kernel1D {
        order: k,
        poly,
        poly_lo,
        base: base.clone(),
        support: base.support(),
    })
}

/// Tensor-product kernel `K(u) = Π K1(u_i)` on `support^d`.
#[derive(Debug, Clone)]
pub struct KernelD {
    factor: Kernel1D,
    dim: usize,
}

pub fn tensorize(factor: Kernel1D, d: usize) -> Result<KernelD> {
    if d == 0 {
        return Err(invalid("d", "kernel dimension must be at least 1"));
    }
    Ok(KernelD { factor, dim: d })
}

impl KernelD {
    /// Order-`k` kernel in dimension `d` with the canonical uniform base.
    pub fn uniform(k: usize, d: usize) -> Result<Self> {
        tensorize(build_kernel_1d(&BaseDensity::uniform_half(), k)?, d)
    }

    pub fn factor(&self) -> &Kernel1D {
        &self.factor
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.factor.order
    }

    pub fn eval(&self, u: &[f64]) -> f64 {
        debug_assert_eq!(u.len(), self.dim);
        u.iter().map(|&x| self.factor.eval(x)).product()
    }

    /// `K_h(x) = K(x / h) / h^d`.
    pub fn eval_scaled(&self, x: &[f64], h: f64) -> Result<f64> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(SobolError::InvalidBandwidth(h));
        }
        if x.len() != self.dim {
            return Err(SobolError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(self.eval_scaled_unchecked(x, h))
    }

    #[inline]
    pub(crate) fn eval_scaled_unchecked(&self, x: &[f64], h: f64) -> f64 {
        let mut v = 1.0;
        for &xi in x {
            v *= self.factor.eval(xi / h);
            if v == 0.0 {
                return 0.0;
            }
        }
        v / h.powi(self.dim as i32)
    }

    pub fn spec(&self) -> Option<KernelSpec> {
        self.factor.base.spec().map(|b| KernelSpec {
            order: self.order(),
            dim: self.dim,
            base: b.clone(),
        })
    }
}

/// JSON form of a kernel; coefficients are rebuilt on load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub order: usize,
    pub dim: usize,
    pub base: BaseSpec,
}

impl KernelSpec {
    pub fn build(&self) -> Result<KernelD> {
        let base = BaseDensity::from_spec(&self.base)?;
        tensorize(build_kernel_1d(&base, self.order)?, self.dim)
    }
}

/// Result of [`verify_order`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrderReport {
    pub order: usize,
    pub dim: usize,
    /// `|∫ K - 1|`.
    pub mass_error: f64,
    /// `max_{0<|β|<=k} |∫ u^β K(u) du|`.
    pub max_moment: f64,
    pub worst_index: Option<Vec<usize>>,
    pub passed: bool,
}

/// All multi-indices `β ∈ N^d` with `1 <= |β| <= k`.
pub fn multi_indices(d: usize, k: usize) -> Vec<Vec<usize>> {
    fn rec(d: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == d {
            if cur.iter().sum::<usize>() > 0 {
                out.push(cur.clone());
            }
            return;
        }
        for b in 0..=left {
            cur.push(b);
            rec(d, left - b, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(d, k, &mut Vec::with_capacity(d), &mut out);
    out
}

/// Check the moment conditions of `kernel` by tensor Gauss–Legendre quadrature.
pub fn verify_order(kernel: &KernelD, tol: f64) -> OrderReport {
    let k = kernel.order();
    let d = kernel.dim();
    let nodes = (2 * k + 2).max(16);
    let (a, b) = kernel.factor.support;
    let r = gauss_legendre(nodes).mapped(a, b);
    let (points, weights) = tensor_rule(&vec![r; d]);
    let kvals: Vec<f64> = points
        .iter()
        .zip(&weights)
        .map(|(p, w)| w * kernel.eval(p))
        .collect();
    let mass: f64 = kvals.iter().copied().collect::<NeumaierSum>().value();
    let mut max_moment = 0.0;
    let mut worst_index = None;
    for beta in multi_indices(d, k) {
        let m = points
            .iter()
            .zip(&kvals)
            .map(|(p, kv)| {
                kv * p
                    .iter()
                    .zip(&beta)
                    .map(|(x, &e)| x.powi(e as i32))
                    .product::<f64>()
            })
            .collect::<NeumaierSum>()
            .value()
            .abs();
        if m > max_moment {
            max_moment = m;
            worst_index = Some(beta);
        }
    }
    let mass_error = (mass - 1.0).abs();
    OrderReport {
        order: k,
        dim: d,
        mass_error,
        max_moment,
        worst_index,
        passed: mass_error <= tol && max_moment <= tol,
    }
}
