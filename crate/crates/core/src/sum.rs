//! Neumaier compensated summation.
//!
//! Every reduction that feeds a published number goes through
//! [`NeumaierSum`]; partial sums from parallel blocks are merged in a fixed
//! order so results do not depend on the thread count.

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NeumaierSum {
    sum: f64,
    comp: f64,
}

impl NeumaierSum {
    pub const fn new() -> Self {
        Self { sum: 0.0, comp: 0.0 }
    }

    /// The branch-free two-sum error equals Neumaier's branch result exactly.
    #[inline]
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        let bp = t - self.sum;
        self.comp += (self.sum - (t - bp)) + (v - bp);
        self.sum = t;
    }

    /// Fold another accumulator in, keeping both compensation terms.
    #[inline]
    pub fn merge(&mut self, other: &NeumaierSum) {
        self.add(other.sum);
        self.add(other.comp);
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for NeumaierSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = NeumaierSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

pub fn sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().collect::<NeumaierSum>().value()
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    sum(values.iter().copied()) / values.len() as f64
}

/// Population (1/n) covariance.
pub fn covariance(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let ma = mean(a);
    let mb = mean(b);
    sum(a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb))) / a.len() as f64
}

/// Population (1/n) variance.
pub fn variance(a: &[f64]) -> f64 {
    covariance(a, a)
}
