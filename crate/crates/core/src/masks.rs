//! The lower-triangular ones matrix, the upper-triangle register scores and
//! the decay schedule that parameterizes them.

use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Result};
use crate::numerics::Matrix;

/// Default reference length used to derive the decay rate.
pub const DEFAULT_REF_LEN: usize = 256;
/// Default logarithm base (typical maximum token budget).
pub const DEFAULT_ALPHA_BASE: f64 = 1024.0;

/// Whether every head shares one decay rate or each head gets its own slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    Uniform,
    PerHead { head_count: usize },
}

/// Parameters of the register scores `P[i][j] = -(j - i) * sigma` for `j > i`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegisterSchedule {
    pub sigma: f64,
    pub ref_len: usize,
    pub alpha_base: f64,
    pub mode: ScheduleMode,
    /// Multiply the surviving scores by `sigma` before adding registers, as
    /// the PyTorch-style listing does. Off by default.
    pub pseudocode_scaling: bool,
}

impl Default for RegisterSchedule {
    fn default() -> Self {
        Self::from_reference(DEFAULT_REF_LEN, DEFAULT_ALPHA_BASE)
            .expect("default reference length and base are valid")
    }
}

impl RegisterSchedule {
    /// `sigma = log_alpha(ref_len)`.
    pub fn from_reference(ref_len: usize, alpha_base: f64) -> Result<Self> {
        Ok(Self {
            sigma: decay_rate(ref_len, alpha_base)?,
            ref_len,
            alpha_base,
            mode: ScheduleMode::Uniform,
            pseudocode_scaling: false,
        })
    }

    /// Uses an explicit decay rate. `ref_len`/`alpha_base` keep their defaults
    /// and are informational only.
    pub fn with_sigma(sigma: f64) -> Result<Self> {
        let s = Self {
            sigma,
            ref_len: DEFAULT_REF_LEN,
            alpha_base: DEFAULT_ALPHA_BASE,
            mode: ScheduleMode::Uniform,
            pseudocode_scaling: false,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn per_head(mut self, head_count: usize) -> Result<Self> {
        self.mode = ScheduleMode::PerHead { head_count };
        self.validate()?;
        Ok(self)
    }

    pub fn with_pseudocode_scaling(mut self, on: bool) -> Self {
        self.pseudocode_scaling = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(domain(format!("decay rate must be positive, got {}", self.sigma)));
        }
        if self.ref_len < 1 {
            return Err(domain("reference length must be at least 1"));
        }
        if !(self.alpha_base > 1.0) {
            return Err(domain(format!("log base must exceed 1, got {}", self.alpha_base)));
        }
        if let ScheduleMode::PerHead { head_count: 0 } = self.mode {
            return Err(domain("per-head schedule needs at least one head"));
        }
        Ok(())
    }

    /// Register slope used by head `head` (0-based).
    ///
    /// Uniform mode returns `sigma` for every head. Per-head mode returns the
    /// geometric ALiBi-style slope of that head.
    pub fn slope_for_head(&self, head: usize) -> Result<f64> {
        match self.mode {
            ScheduleMode::Uniform => Ok(self.sigma),
            ScheduleMode::PerHead { head_count } => {
                if head >= head_count {
                    return Err(crate::Error::Index { index: head, len: head_count });
                }
                Ok(head_slope(head + 1, head_count))
            }
        }
    }
}

/// `log_alpha(seq)`, computed in base 2 so exact powers of two stay exact.
pub fn decay_rate(seq: usize, alpha: f64) -> Result<f64> {
    if seq < 2 {
        return Err(domain(format!("reference length must be at least 2, got {seq}")));
    }
    if !(alpha > 1.0 && alpha.is_finite()) {
        return Err(domain(format!("log base must exceed 1, got {alpha}")));
    }
    Ok((seq as f64).log2() / alpha.log2())
}

/// `C = tril(ones(n, n))`.
pub fn causal_ones(n: usize) -> Result<Matrix> {
    if n == 0 {
        return Err(dim("causal mask needs n >= 1"));
    }
    Ok(Matrix::from_fn(n, n, |i, j| if j <= i { 1.0 } else { 0.0 }))
}

/// Register scores for a single slope: `-(j - i) * slope` above the diagonal.
pub fn register_matrix(n: usize, slope: f64) -> Result<Matrix> {
    if n == 0 {
        return Err(dim("register matrix needs n >= 1"));
    }
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(domain(format!("register slope must be positive, got {slope}")));
    }
    Ok(Matrix::from_fn(n, n, |i, j| if j > i { -((j - i) as f64) * slope } else { 0.0 }))
}

/// Register score matrices for a schedule: one matrix in uniform mode, one per
/// head in per-head mode.
pub fn register_scores(n: usize, schedule: &RegisterSchedule) -> Result<Vec<Matrix>> {
    schedule.validate()?;
    match schedule.mode {
        ScheduleMode::Uniform => Ok(vec![register_matrix(n, schedule.sigma)?]),
        ScheduleMode::PerHead { head_count } => head_slopes(head_count)?
            .into_iter()
            .map(|s| register_matrix(n, s))
            .collect(),
    }
}

/// Both masks for length `n` under a single slope.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub causal: Matrix,
    pub registers: Matrix,
}

impl MaskPair {
    pub fn new(n: usize, slope: f64) -> Result<Self> {
        Ok(Self { causal: causal_ones(n)?, registers: register_matrix(n, slope)? })
    }
}

fn head_slope(head: usize, head_count: usize) -> f64 {
    (2.0f64).powf(-8.0 * head as f64 / head_count as f64)
}

/// Geometric slopes `2^(-8h/H)` for `h = 1..=H`.
pub fn head_slopes(head_count: usize) -> Result<Vec<f64>> {
    if head_count == 0 {
        return Err(domain("head count must be at least 1"));
    }
    Ok((1..=head_count).map(|h| head_slope(h, head_count)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::matmul;

    #[test]
    fn decay_rate_examples() {
        assert_eq!(decay_rate(256, 1024.0).unwrap(), 0.8);
        assert_eq!(decay_rate(1024, 1024.0).unwrap(), 1.0);
        assert_eq!(decay_rate(32, 1024.0).unwrap(), 0.5);
        assert!(decay_rate(1, 1024.0).is_err());
        assert!(decay_rate(256, 1.0).is_err());
        assert!(decay_rate(256, 0.5).is_err());
    }

    #[test]
    fn decay_rate_monotone() {
        let mut prev = 0.0;
        for seq in 2..2000 {
            let s = decay_rate(seq, 1024.0).unwrap();
            assert!(s > prev);
            prev = s;
        }
        assert!(decay_rate(256, 512.0).unwrap() > decay_rate(256, 4096.0).unwrap());
    }

    #[test]
    fn causal_ones_examples() {
        assert_eq!(causal_ones(1).unwrap(), Matrix::identity(1));
        assert_eq!(causal_ones(2).unwrap(), Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap());
        let c = causal_ones(3).unwrap();
        let sums: Vec<f64> = (0..3).map(|i| c.row(i).iter().sum()).collect();
        assert_eq!(sums, vec![1.0, 2.0, 3.0]);
        assert!(causal_ones(0).is_err());
    }

    #[test]
    fn causal_gram_diagonal_counts() {
        let c = causal_ones(9).unwrap();
        let g = matmul(&c, &c.transpose()).unwrap();
        for i in 0..9 {
            assert_eq!(g[(i, i)], (i + 1) as f64);
        }
    }

    #[test]
    fn register_examples() {
        let s = RegisterSchedule::with_sigma(0.8).unwrap();
        let p = &register_scores(3, &s).unwrap()[0];
        let expected =
            Matrix::from_rows(&[[0.0, -0.8, -1.6], [0.0, 0.0, -0.8], [0.0, 0.0, 0.0]]).unwrap();
        assert!(p.max_abs_diff(&expected).unwrap() < 1e-15);
        let p1 = &register_scores(1, &s).unwrap()[0];
        assert_eq!(p1, &Matrix::zeros(1, 1));
        let p4 = &register_scores(4, &RegisterSchedule::with_sigma(0.5).unwrap()).unwrap()[0];
        assert_eq!(p4[(0, 3)], -1.5);
    }

    #[test]
    fn register_row_structure() {
        let n = 12;
        let p = register_matrix(n, 0.3).unwrap();
        for i in 0..n {
            let row = p.row(i);
            let nonzero: Vec<f64> = row.iter().copied().filter(|&v| v != 0.0).collect();
            assert_eq!(nonzero.len(), n - i - 1);
            assert!(nonzero.iter().all(|&v| v < 0.0));
            for w in nonzero.windows(2) {
                assert!(w[1] < w[0]);
                assert!(((w[0] - w[1]) - 0.3).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn head_slope_examples() {
        assert_eq!(
            head_slopes(8).unwrap(),
            vec![0.5, 0.25, 0.125, 0.0625, 0.03125, 0.015625, 0.0078125, 0.00390625]
        );
        assert_eq!(head_slopes(1).unwrap(), vec![0.00390625]);
        for h in 1..40 {
            let s = head_slopes(h).unwrap();
            assert!(s.windows(2).all(|w| w[1] < w[0]));
            assert!(s.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert!(head_slopes(0).is_err());
    }

    #[test]
    fn per_head_schedule() {
        let s = RegisterSchedule::default().per_head(4).unwrap();
        let ps = register_scores(5, &s).unwrap();
        assert_eq!(ps.len(), 4);
        assert_eq!(ps[0][(0, 1)], -head_slopes(4).unwrap()[0]);
        assert!(s.slope_for_head(4).is_err());
        assert!(RegisterSchedule::default().per_head(0).is_err());
    }

    #[test]
    fn schedule_validation() {
        assert!(RegisterSchedule::with_sigma(0.0).is_err());
        assert!(RegisterSchedule::with_sigma(-1.0).is_err());
        assert!(RegisterSchedule::with_sigma(f64::NAN).is_err());
        assert_eq!(RegisterSchedule::default().sigma, 0.8);
    }
}
