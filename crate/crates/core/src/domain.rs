//! Hyperrectangular input domains and the per-axis mirror map.
//!
//! For a point `x` the mirror signs are `σ_i = +1` when `x_i` sits in the
//! lower half of axis `i` (midpoint included) and `-1` otherwise. Reflecting
//! the one-sided kernel support `[0, 1/2]^d` through these signs keeps
//! `x + h·A_x(u)` inside the domain as long as `h` is at most the smallest
//! axis width.

use crate::error::{invalid, Result, SobolError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRepr", into = "DomainRepr")]
pub struct Domain {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct DomainRepr {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl TryFrom<DomainRepr> for Domain {
    type Error = SobolError;
    fn try_from(r: DomainRepr) -> Result<Self> {
        Domain::new(r.lower, r.upper)
    }
}

impl From<Domain> for DomainRepr {
    fn from(d: Domain) -> Self {
        DomainRepr {
            lower: d.lower,
            upper: d.upper,
        }
    }
}

impl Domain {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(invalid("domain", "needs at least one axis"));
        }
        if lower.len() != upper.len() {
            return Err(SobolError::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (i, (b, c)) in lower.iter().zip(&upper).enumerate() {
            if !(b.is_finite() && c.is_finite() && b < c) {
                return Err(invalid("domain", format!("axis {i}: need lower < upper, got [{b}, {c}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn unit(dim: usize) -> Self {
        Self::new(vec![0.0; dim], vec![1.0; dim]).expect("unit cube is valid")
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn min_width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(b, c)| c - b)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (b, c))| *b <= *v && *v <= *c)
    }

    /// Sub-domain on the given axes, in mask order.
    pub fn restrict(&self, mask: &[usize]) -> Result<Domain> {
        let mut lower = Vec::with_capacity(mask.len());
        let mut upper = Vec::with_capacity(mask.len());
        for &i in mask {
            if i >= self.dim() {
                return Err(invalid("mask", format!("axis {i} out of range for dimension {}", self.dim())));
            }
            lower.push(self.lower[i]);
            upper.push(self.upper[i]);
        }
        Domain::new(lower, upper)
    }

    #[inline]
    pub(crate) fn midpoints(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(b, c)| 0.5 * (b + c))
            .collect()
    }
}

/// Per-axis signs of the mirror map; the map is its own inverse.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MirrorSigns(Vec<i8>);

impl MirrorSigns {
    pub fn new(signs: Vec<i8>) -> Result<Self> {
        if signs.iter().any(|s| *s != 1 && *s != -1) {
            return Err(invalid("signs", "entries must be +1 or -1"));
        }
        Ok(Self(signs))
    }

    pub fn as_slice(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn sigma_at(domain: &Domain, x: &[f64]) -> Result<MirrorSigns> {
    if x.len() != domain.dim() {
        return Err(SobolError::DimensionMismatch {
            expected: domain.dim(),
            got: x.len(),
        });
    }
    if !domain.contains(x) {
        return Err(SobolError::DomainViolation { point: x.to_vec() });
    }
    Ok(MirrorSigns(
        x.iter()
            .zip(domain.midpoints())
            .map(|(v, m)| if *v <= m { 1 } else { -1 })
            .collect(),
    ))
}

pub fn apply_mirror(signs: &MirrorSigns, u: &[f64]) -> Result<Vec<f64>> {
    if u.len() != signs.len() {
        return Err(SobolError::DimensionMismatch {
            expected: signs.len(),
            got: u.len(),
        });
    }
    Ok(u.iter().zip(&signs.0).map(|(v, s)| f64::from(*s) * v).collect())
}

/// True iff `h/2 <= min_i (C_i - B_i)/2`.
pub fn check_mirror_condition(domain: &Domain, h: f64) -> bool {
    h > 0.0 && 0.5 * h <= 0.5 * domain.min_width()
}
