//! Baseline estimators (pick-freeze, two-sample nearest neighbour, rank) and
//! oracle evaluation of limiting variances for efficiency comparisons.

use crate::error::{invalid, Result, SobolError};
use crate::estimator::SobolMoments;
use crate::inputs::InputModel;
use crate::quadrature::Rule;
use crate::sum::NeumaierSum;
use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Outputs on a pick-freeze design: `y_pf[j]` shares `X_j` with `y[j]` and
/// uses an independent copy of the remaining inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PickFreezeSample {
    pub y: Vec<f64>,
    pub y_pf: Vec<f64>,
}

impl PickFreezeSample {
    pub fn new(y: Vec<f64>, y_pf: Vec<f64>) -> Result<Self> {
        if y.len() != y_pf.len() {
            return Err(SobolError::DimensionMismatch {
                expected: y.len(),
                got: y_pf.len(),
            });
        }
        Ok(Self { y, y_pf })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }
}

/// Draws `V` (stream 0) and `V'` (stream 1), freezes the `mask` columns of
/// `V` into `V'` and evaluates `g` on both designs.
pub fn pick_freeze_design(
    inputs: &InputModel,
    mask: &[usize],
    g: &(dyn Fn(&[f64]) -> f64 + Sync),
    n: usize,
    seed: u64,
) -> Result<PickFreezeSample> {
    let p = inputs.p();
    if let Some(&i) = mask.iter().find(|&&i| i >= p) {
        return Err(invalid("mask", format!("axis {i} out of range for p = {p}")));
    }
    let v = inputs.sample_stream(n, seed, 0);
    let mut w = inputs.sample_stream(n, seed, 1);
    for &i in mask {
        w.column_mut(i).assign(&v.column(i));
    }
    let eval = |m: &Array2<f64>| -> Vec<f64> {
        (0..n)
            .into_par_iter()
            .map(|j| g(m.row(j).as_slice().expect("standard layout")))
            .collect()
    };
    PickFreezeSample::new(eval(&v), eval(&w))
}

/// Symmetrised pick-freeze estimate of the first-order index of the frozen group.
pub fn pick_freeze_estimate(pf: &PickFreezeSample) -> Result<f64> {
    let n = pf.n();
    if n < 2 {
        return Err(SobolError::InsufficientSample { needed: 2, got: n });
    }
    let nf = n as f64;
    let mut cross = NeumaierSum::new();
    let mut first = NeumaierSum::new();
    let mut second = NeumaierSum::new();
    for (&a, &b) in pf.y.iter().zip(&pf.y_pf) {
        cross.add(a * b);
        first.add(0.5 * (a + b));
        second.add(0.5 * (a * a + b * b));
    }
    let m = first.value() / nf;
    let num = cross.value() / nf - m * m;
    let den = second.value() / nf - m * m;
    if !(den > 0.0) || !den.is_finite() {
        return Err(SobolError::DegenerateOutput(den));
    }
    Ok(num / den)
}

/// Two-sample nearest-neighbour estimate with an optional validity warning.
#[derive(Debug, Clone, PartialEq)]
pub struct NnEstimate {
    pub value: f64,
    pub warning: Option<String>,
}

/// `(1/n) Σ_j Y2_j · Y1_{NN(j)}`, where `NN(j)` is the Euclidean nearest
/// neighbour of `X2_j` among the rows of `x1` (ties to the lowest index).
pub fn nn_estimate(
    x1: ArrayView2<f64>,
    y1: &[f64],
    x2: ArrayView2<f64>,
    y2: &[f64],
) -> Result<NnEstimate> {
    let (n1, d) = x1.dim();
    let (n2, d2) = x2.dim();
    if n1 == 0 || n2 == 0 {
        return Err(SobolError::InsufficientSample {
            needed: 1,
            got: n1.min(n2),
        });
    }
    if d2 != d {
        return Err(SobolError::DimensionMismatch { expected: d, got: d2 });
    }
    if y1.len() != n1 {
        return Err(SobolError::DimensionMismatch { expected: n1, got: y1.len() });
    }
    if y2.len() != n2 {
        return Err(SobolError::DimensionMismatch { expected: n2, got: y2.len() });
    }
    if d == 0 {
        return Err(SobolError::UnsupportedDimension(0));
    }
    let nn = if d == 1 {
        nn_sorted(x1.column(0).to_vec(), x2.column(0).to_vec())
    } else {
        nn_brute(x1, x2)
    };
    let value = nn.iter().zip(y2).map(|(&k, &y)| y * y1[k]).collect::<NeumaierSum>().value() / n2 as f64;
    let warning = (d > 3).then(|| {
        format!("nearest-neighbour bias is not negligible for d = {d} > 3")
    });
    Ok(NnEstimate { value, warning })
}

fn nn_sorted(x1: Vec<f64>, q: Vec<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..x1.len()).collect();
    order.sort_by(|&a, &b| x1[a].total_cmp(&x1[b]).then(a.cmp(&b)));
    let keys: Vec<f64> = order.iter().map(|&i| x1[i]).collect();
    q.par_iter()
        .map(|&v| {
            let pos = keys.partition_point(|&k| k < v);
            let right = (pos < keys.len()).then_some(pos);
            let left = (pos > 0).then(|| {
                let key = keys[pos - 1];
                keys.partition_point(|&k| k < key)
            });
            match (left, right) {
                (Some(l), Some(r)) => {
                    let dl = v - keys[l];
                    let dr = keys[r] - v;
                    if dl < dr || (dl == dr && order[l] < order[r]) {
                        order[l]
                    } else {
                        order[r]
                    }
                }
                (Some(l), None) => order[l],
                (None, Some(r)) => order[r],
                (None, None) => unreachable!("first sample is nonempty"),
            }
        })
        .collect()
}

fn nn_brute(x1: ArrayView2<f64>, x2: ArrayView2<f64>) -> Vec<usize> {
    let n2 = x2.nrows();
    (0..n2)
        .into_par_iter()
        .map(|j| {
            let q = x2.row(j);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (k, r) in x1.rows().into_iter().enumerate() {
                let dist: f64 = r.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Right-neighbour rank estimate of the first-order index of a scalar input.
///
/// Sorts by `x` (ties ordered by row index) and returns
/// `((1/n) Σ_{j<n} Y_(j) Y_(j+1) - Ȳ²) / Var(Y)` with the 1/n variance.
pub fn rank_estimate(x: ArrayView2<f64>, y: &[f64]) -> Result<f64> {
    let (n, d) = x.dim();
    if d != 1 {
        return Err(SobolError::UnsupportedDimension(d));
    }
    if y.len() != n {
        return Err(SobolError::DimensionMismatch { expected: n, got: y.len() });
    }
    if n < 2 {
        return Err(SobolError::InsufficientSample { needed: 2, got: n });
    }
    let col = x.column(0);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| col[a].total_cmp(&col[b]).then(a.cmp(&b)));
    let nf = n as f64;
    let m = y.iter().copied().collect::<NeumaierSum>().value() / nf;
    let var = y.iter().map(|v| (v - m) * (v - m)).collect::<NeumaierSum>().value() / nf;
    if !(var > 0.0) {
        return Err(SobolError::DegenerateOutput(var));
    }
    let lag = order
        .windows(2)
        .map(|w| y[w[0]] * y[w[1]])
        .collect::<NeumaierSum>()
        .value()
        / nf;
    Ok((lag - m * m) / var)
}

/// Expectation with its Monte Carlo standard error (zero for quadrature).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moment {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleSettings {
    /// Gauss points per axis.
    pub nodes: usize,
    /// Largest dimension integrated by tensor quadrature.
    pub max_tensor_dim: usize,
    pub mc_draws: usize,
    pub seed: u64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            nodes: 64,
            max_tensor_dim: 4,
            mc_draws: 1_000_000,
            seed: 0x5eed,
        }
    }
}

pub type PointFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Model, regression functions and input law for evaluating limiting variances.
///
/// `g` acts on the full input vector; `g1(x) = E[Y|X=x]` and `g2(x) = E[Y²|X=x]`
/// act on the masked coordinates in mask order.
#[derive(Clone)]
pub struct VarianceOracles {
    pub g: PointFn,
    pub g1: PointFn,
    pub g2: PointFn,
    pub inputs: InputModel,
    pub mask: Vec<usize>,
    pub settings: OracleSettings,
}

const MC_BLOCK: usize = 1 << 15;

enum Integrator {
    Tensor(Vec<Rule>),
    MonteCarlo { model: InputModel, draws: usize, seed: u64 },
}

impl Integrator {
    fn over(inputs: &InputModel, axes: &[usize], s: &OracleSettings) -> Result<Self> {
        let marginals: Vec<_> = axes.iter().map(|&i| inputs.marginals()[i].clone()).collect();
        if axes.len() <= s.max_tensor_dim {
            Ok(Integrator::Tensor(marginals.iter().map(|m| m.expectation_rule(s.nodes)).collect()))
        } else {
            Ok(Integrator::MonteCarlo {
                model: InputModel::new(marginals)?,
                draws: s.mc_draws,
                seed: s.seed,
            })
        }
    }

    fn is_exact(&self) -> bool {
        matches!(self, Integrator::Tensor(_))
    }

    fn expect<const K: usize>(&self, f: &(dyn Fn(&[f64]) -> [f64; K] + Sync)) -> [Moment; K] {
        match self {
            Integrator::Tensor(rules) => tensor_expect(rules, f).map(|value| Moment { value, se: 0.0 }),
            Integrator::MonteCarlo { model, draws, seed } => mc_expect(model, *draws, *seed, f),
        }
    }

    /// Two-pass variance of `f`.
    fn variance(&self, f: &(dyn Fn(&[f64]) -> f64 + Sync)) -> Moment {
        let [m] = self.expect(&|v| [f(v)]);
        let [c2, c4] = self.expect(&|v| {
            let c = f(v) - m.value;
            let c2 = c * c;
            [c2, c2 * c2]
        });
        let se = match self {
            Integrator::Tensor(_) => 0.0,
            Integrator::MonteCarlo { draws, .. } => {
                ((c4.value - c2.value * c2.value).max(0.0) / *draws as f64).sqrt()
            }
        };
        Moment { value: c2.value, se }
    }
}

fn tensor_expect<const K: usize>(rules: &[Rule], f: &(dyn Fn(&[f64]) -> [f64; K] + Sync)) -> [f64; K] {
    if rules.is_empty() {
        return f(&[]);
    }
    let dim = rules.len();
    let inner: usize = rules[1..].iter().map(|r| r.len()).product();
    let partials: Vec<[NeumaierSum; K]> = (0..rules[0].len())
        .into_par_iter()
        .map(|i0| {
            let mut acc: [NeumaierSum; K] = std::array::from_fn(|_| NeumaierSum::new());
            let mut point = vec![0.0; dim];
            let mut idx = vec![0usize; dim];
            point[0] = rules[0].nodes[i0];
            for flat in 0..inner {
                let mut rem = flat;
                let mut w = rules[0].weights[i0];
                for a in (1..dim).rev() {
                    let len = rules[a].len();
                    idx[a] = rem % len;
                    rem /= len;
                    point[a] = rules[a].nodes[idx[a]];
                    w *= rules[a].weights[idx[a]];
                }
                let vals = f(&point);
                for k in 0..K {
                    acc[k].add(w * vals[k]);
                }
            }
            acc
        })
        .collect();
    let mut total: [NeumaierSum; K] = std::array::from_fn(|_| NeumaierSum::new());
    for part in &partials {
        for k in 0..K {
            total[k].merge(&part[k]);
        }
    }
    total.map(|s| s.value())
}

fn mc_expect<const K: usize>(
    model: &InputModel,
    draws: usize,
    seed: u64,
    f: &(dyn Fn(&[f64]) -> [f64; K] + Sync),
) -> [Moment; K] {
    let blocks = draws.div_ceil(MC_BLOCK);
    let partials: Vec<([NeumaierSum; K], [NeumaierSum; K])> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let len = MC_BLOCK.min(draws - b * MC_BLOCK);
            let v = model.sample_stream(len, seed, b as u64);
            let mut s1: [NeumaierSum; K] = std::array::from_fn(|_| NeumaierSum::new());
            let mut s2: [NeumaierSum; K] = std::array::from_fn(|_| NeumaierSum::new());
            for row in v.rows() {
                let vals = f(row.as_slice().expect("standard layout"));
                for k in 0..K {
                    s1[k].add(vals[k]);
                    s2[k].add(vals[k] * vals[k]);
                }
            }
            (s1, s2)
        })
        .collect();
    let mut t1: [NeumaierSum; K] = std::array::from_fn(|_| NeumaierSum::new());
    let mut t2: [NeumaierSum; K] = std::array::from_fn(|_| NeumaierSum::new());
    for (a, b) in &partials {
        for k in 0..K {
            t1[k].merge(&a[k]);
            t2[k].merge(&b[k]);
        }
    }
    let n = draws as f64;
    std::array::from_fn(|k| {
        let m = t1[k].value() / n;
        let var = (t2[k].value() / n - m * m).max(0.0);
        Moment {
            value: m,
            se: (var / n).sqrt(),
        }
    })
}

impl VarianceOracles {
    pub fn new(
        g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        g1: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        g2: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        inputs: InputModel,
        mask: Vec<usize>,
    ) -> Result<Self> {
        let p = inputs.p();
        if mask.is_empty() {
            return Err(invalid("mask", "must select at least one input"));
        }
        if let Some(&i) = mask.iter().find(|&&i| i >= p) {
            return Err(invalid("mask", format!("axis {i} out of range for p = {p}")));
        }
        Ok(Self {
            g: Arc::new(g),
            g1: Arc::new(g1),
            g2: Arc::new(g2),
            inputs,
            mask,
            settings: OracleSettings::default(),
        })
    }

    pub fn with_settings(mut self, settings: OracleSettings) -> Self {
        self.settings = settings;
        self
    }

    fn x_integrator(&self) -> Result<Integrator> {
        Integrator::over(&self.inputs, &self.mask, &self.settings)
    }

    fn joint_integrator(&self) -> Result<Integrator> {
        let all: Vec<usize> = (0..self.inputs.p()).collect();
        Integrator::over(&self.inputs, &all, &self.settings)
    }

    fn project(&self, v: &[f64], buf: &mut [f64]) {
        for (b, &i) in buf.iter_mut().zip(&self.mask) {
            *b = v[i];
        }
    }

    /// `(Y, g1(X))` at a full input point.
    fn joint_values(&self, v: &[f64]) -> (f64, f64) {
        let mut x = [0.0; 16];
        let d = self.mask.len();
        if d <= x.len() {
            self.project(v, &mut x[..d]);
            ((self.g)(v), (self.g1)(&x[..d]))
        } else {
            let mut xs = vec![0.0; d];
            self.project(v, &mut xs);
            ((self.g)(v), (self.g1)(&xs))
        }
    }

    /// Largest violation of `g2 ≥ g1²` over the X integration nodes (or draws).
    pub fn max_conditional_variance_violation(&self) -> Result<f64> {
        let integ = self.x_integrator()?;
        let mut worst = 0.0f64;
        let check = |x: &[f64]| (self.g1)(x).powi(2) - (self.g2)(x);
        match &integ {
            Integrator::Tensor(rules) => {
                let dim = rules.len();
                let total: usize = rules.iter().map(|r| r.len()).product();
                let mut point = vec![0.0; dim];
                for flat in 0..total {
                    let mut rem = flat;
                    for a in (0..dim).rev() {
                        let len = rules[a].len();
                        point[a] = rules[a].nodes[rem % len];
                        rem /= len;
                    }
                    worst = worst.max(check(&point));
                }
            }
            Integrator::MonteCarlo { model, seed, .. } => {
                let v = model.sample_stream(MC_BLOCK, *seed, 0);
                for r in v.rows() {
                    worst = worst.max(check(r.as_slice().expect("standard layout")));
                }
            }
        }
        Ok(worst)
    }

    /// `E[g1²], E[g1⁴], E[g2], E[g2²], E[g2 g1²]` over the law of X.
    pub fn x_moments(&self) -> Result<[Moment; 5]> {
        let integ = self.x_integrator()?;
        Ok(integ.expect(&|x| {
            let a = (self.g1)(x);
            let b = (self.g2)(x);
            let a2 = a * a;
            [a2, a2 * a2, b, b * b, b * a2]
        }))
    }

    fn finish(&self, m: Moment) -> Result<f64> {
        if !m.value.is_finite() {
            return Err(SobolError::Quadrature(format!("non-finite oracle value {}", m.value)));
        }
        Ok(m.value)
    }
}

/// Both closed forms of the efficient variance of the `E[E[Y|X]²]` functional.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficientForms {
    /// `Var(g1 (2Y - g1))`, integrated jointly over all inputs.
    pub joint: Moment,
    /// `4τ² - 3 Var(g1²)` with `τ² = E[g2 g1²] - E[g1²]²`, integrated over X only.
    pub conditional: Moment,
    pub tau2: f64,
}

pub fn efficient_forms(o: &VarianceOracles) -> Result<EfficientForms> {
    let joint = o.joint_integrator()?.variance(&|v| {
        let (y, a) = o.joint_values(v);
        a * (2.0 * y - a)
    });
    let [g1sq, g1q, _, _, g2g1sq] = o.x_moments()?;
    let tau2 = g2g1sq.value - g1sq.value * g1sq.value;
    let var_g1sq = g1q.value - g1sq.value * g1sq.value;
    let conditional = Moment {
        value: 4.0 * tau2 - 3.0 * var_g1sq,
        se: 4.0 * g2g1sq.se + 3.0 * g1q.se + 14.0 * g1sq.value.abs() * g1sq.se,
    };
    Ok(EfficientForms {
        joint,
        conditional,
        tau2,
    })
}

/// `σ_T² = Var(g1(X)(2Y - g1(X)))`, cross-checked against `4τ² - 3Var(g1²(X))`.
pub fn limiting_variance_efficient(o: &VarianceOracles) -> Result<f64> {
    let forms = efficient_forms(o)?;
    let exact = o.joint_integrator()?.is_exact() && o.x_integrator()?.is_exact();
    let (a, b) = (forms.joint.value, forms.conditional.value);
    let scale = a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
    let tol = if exact {
        1e-6 * scale + 1e-12
    } else {
        5.0 * (forms.joint.se + forms.conditional.se) + 1e-9 * scale
    };
    if (a - b).abs() > tol {
        return Err(SobolError::Quadrature(format!(
            "efficient-variance forms disagree: joint {a}, conditional {b}"
        )));
    }
    o.finish(forms.joint)
}

/// `σ_D² = 2(E[g2²] - E[g1²]² + ½(E[g2 g1²] - E[g1⁴]))`.
pub fn limiting_variance_nn(o: &VarianceOracles) -> Result<f64> {
    let [g1sq, g1q, _, g2sq, g2g1sq] = o.x_moments()?;
    let value = 2.0 * (g2sq.value - g1sq.value * g1sq.value + 0.5 * (g2g1sq.value - g1q.value));
    let se = 2.0 * (g2sq.se + 2.0 * g1sq.value.abs() * g1sq.se + 0.5 * (g2g1sq.se + g1q.se));
    o.finish(Moment { value, se })
}

/// `σ_min² = Var(2E[Y](1-S)Y + S Y² + g1(g1 - 2Y)) / Var(Y)²`.
pub fn limiting_variance_sobol_efficient(
    o: &VarianceOracles,
    mean_y: f64,
    var_y: f64,
    s_x: f64,
) -> Result<f64> {
    if !(var_y > 0.0) {
        return Err(SobolError::DegenerateOutput(var_y));
    }
    let m = o.joint_integrator()?.variance(&|v| {
        let (y, a) = o.joint_values(v);
        2.0 * mean_y * (1.0 - s_x) * y + s_x * y * y + a * (a - 2.0 * y)
    });
    o.finish(Moment {
        value: m.value / (var_y * var_y),
        se: m.se / (var_y * var_y),
    })
}

/// Population moments of `(Y, Y g1(X))` entering the kernel index variance.
pub fn population_moments(o: &VarianceOracles) -> Result<SobolMoments> {
    let integ = o.joint_integrator()?;
    let [ey, ey2, eg1, eg1sq] = integ.expect(&|v| {
        let (y, a) = o.joint_values(v);
        [y, y * y, a, a * a]
    });
    let (my, mg) = (ey.value, eg1sq.value);
    let var_y = ey2.value - my * my;
    if !(var_y > 0.0) {
        return Err(SobolError::DegenerateOutput(var_y));
    }
    let my2 = ey2.value;
    // Central products, second pass.
    let [vy, vyg, vy2, c_yg_y, c_yg_y2, c_y_y2] = integ.expect(&|v| {
        let (y, a) = o.joint_values(v);
        let cy = y - my;
        let cyg = y * a - mg;
        let cy2 = y * y - my2;
        [cy * cy, cyg * cyg, cy2 * cy2, cyg * cy, cyg * cy2, cy * cy2]
    });
    let var_g1 = mg - eg1.value * eg1.value;
    Ok(SobolMoments {
        var_yg: vyg.value,
        cov_yg_y: c_yg_y.value,
        cov_yg_y2: c_yg_y2.value,
        mean_y: my,
        var_y: vy.value,
        var_y2: vy2.value,
        cov_y_y2: c_y_y2.value,
        sobol: var_g1 / vy.value,
    })
}

/// Limiting variance of the kernel index estimate at population moments.
pub fn limiting_variance_kernel_sobol(o: &VarianceOracles) -> Result<f64> {
    let s = population_moments(o)?.sigma2();
    if !s.is_finite() {
        return Err(SobolError::Quadrature(format!("non-finite variance {s}")));
    }
    Ok(s)
}
