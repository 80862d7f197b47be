//! Small numeric helpers shared by the analytic and reconstruction code.

use statrs::function::gamma::ln_gamma;

/// Largest `n` for which [`binomial`] is evaluated in exact integer arithmetic.
pub const EXACT_BINOMIAL_LIMIT: u64 = 30;

/// Binomial coefficient `C(n, k)` as a float, with `C(n, k) = 0` whenever
/// `k < 0` or `k > n`.
///
/// Exact for `n <= 30`; above that it is evaluated through `ln Γ`.
pub fn binomial(n: i64, k: i64) -> f64 {
    if n < 0 || k < 0 || k > n {
        return 0.0;
    }
    let (n, k) = (n as u64, k as u64);
    let k = k.min(n - k);
    if n <= EXACT_BINOMIAL_LIMIT {
        let mut acc: u64 = 1;
        for i in 0..k {
            // acc * (n - i) is divisible by (i + 1) at every step.
            acc = acc * (n - i) / (i + 1);
        }
        acc as f64
    } else {
        let (nf, kf) = (n as f64, k as f64);
        let v = (ln_gamma(nf + 1.0) - ln_gamma(kf + 1.0) - ln_gamma(nf - kf + 1.0)).exp();
        // Coefficients below 2^53 are integers; snap off the ln Γ round-off.
        if v < 9.0e15 {
            v.round()
        } else {
            v
        }
    }
}

/// `base^exp` for a non-negative integer exponent, with `0^0 = 1`.
#[inline]
pub fn powu(base: f64, exp: i64) -> f64 {
    debug_assert!(exp >= 0);
    base.powi(exp as i32)
}

/// Neumaier-compensated running sum. Error is `O(ε)` in the magnitude of the
/// terms, independent of how many terms are added.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut acc = CompensatedSum::new();
        for v in iter {
            acc.add(v);
        }
        acc
    }
}

/// Compensated sum of an iterator of floats.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(iter: I) -> f64 {
    iter.into_iter().collect::<CompensatedSum>().value()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binomial_small_table() {
        assert_eq!(binomial(0, 0), 1.0);
        assert_eq!(binomial(5, 2), 10.0);
        assert_eq!(binomial(30, 15), 155_117_520.0);
        assert_eq!(binomial(3, 4), 0.0);
        assert_eq!(binomial(3, -1), 0.0);
        assert_eq!(binomial(-1, 0), 0.0);
    }

    #[test]
    fn binomial_log_space_matches_pascal() {
        // Build row 60 of Pascal's triangle in f64; entries stay below 2^60
        // so integer rounding in the log-space path must reproduce them.
        let mut row = vec![1.0f64];
        for _ in 0..60 {
            let mut next = vec![1.0; row.len() + 1];
            for k in 1..row.len() {
                next[k] = row[k - 1] + row[k];
            }
            row = next;
        }
        for (k, &expected) in row.iter().enumerate() {
            let got = binomial(60, k as i64);
            assert!((got - expected).abs() <= 1e-12 * expected, "k={k}");
        }
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let mut terms = vec![1.0e16, 1.0, -1.0e16];
        terms.extend(std::iter::repeat_n(1.0e-3, 1000));
        let naive: f64 = terms.iter().sum();
        let comp = compensated_sum(terms.iter().copied());
        assert!((comp - 2.0).abs() < 1e-12, "{comp}");
        assert!((naive - 2.0).abs() > 1e-6);
    }

    #[test]
    fn zero_to_the_zero_is_one() {
        assert_eq!(powu(0.0, 0), 1.0);
        assert_eq!(powu(0.0, 3), 0.0);
    }
}
