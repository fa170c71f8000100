//! Small numerical helpers: compensated summation and moment summaries.

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    /// Empty accumulator.
    pub fn new() -> Self {
        Self::default()
    }

    /// Add one term.
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
    }

    /// Current compensated total.
    #[inline]
    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Compensated sum of a slice, accumulated in index order.
pub fn sum(xs: &[f64]) -> f64 {
    let mut acc = CompensatedSum::new();
    for &x in xs {
        acc.add(x);
    }
    acc.total()
}

/// Arithmetic mean (compensated); `NaN` for an empty slice.
pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sum(xs) / xs.len() as f64
}

/// Population variance (divisor `n`), computed around the compensated mean.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let m = mean(xs);
    let mut acc = CompensatedSum::new();
    for &x in xs {
        acc.add((x - m) * (x - m));
    }
    acc.total() / xs.len() as f64
}

/// Population standard deviation (divisor `n`).
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

/// Unbiased sample variance (divisor `n − 1`); zero for fewer than two points.
pub fn sample_variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    variance(xs) * xs.len() as f64 / (xs.len() - 1) as f64
}

/// Standard error of the mean using the unbiased sample variance.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    (sample_variance(xs) / xs.len() as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut xs = vec![1e16, 1.0, -1e16];
        xs.extend(std::iter::repeat(0.1).take(10));
        assert!((sum(&xs) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn moments_of_small_vectors() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert!((variance(&xs) - 1.25).abs() < 1e-15);
        assert!((sample_variance(&xs) - 5.0 / 3.0).abs() < 1e-15);
        assert!(mean(&[]).is_nan());
    }
}
