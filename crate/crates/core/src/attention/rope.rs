use serde::{Deserialize, Serialize};

use crate::error::{dim, domain, Result};
use crate::numerics::{dot, Matrix};

/// Rotary embedding parameters for one head.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeParams {
    pub theta_base: f64,
    pub head_dim: usize,
}

impl RopeParams {
    pub fn new(head_dim: usize) -> Result<Self> {
        let p = Self { theta_base: 10_000.0, head_dim };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(dim(format!("rotary head dimension must be even, got {}", self.head_dim)));
        }
        if !(self.theta_base > 0.0) {
            return Err(domain(format!("rotary base must be positive, got {}", self.theta_base)));
        }
        Ok(())
    }

    /// Angular frequency of coordinate pair `m` (0-based).
    pub fn frequency(&self, m: usize) -> f64 {
        self.theta_base.powf(-2.0 * m as f64 / self.head_dim as f64)
    }
}

/// Rotates adjacent coordinate pairs `(2m, 2m+1)` by `position * freq(m)`.
pub fn rope_rotate(x: &[f64], position: usize, params: &RopeParams) -> Result<Vec<f64>> {
    params.validate()?;
    if x.len() != params.head_dim {
        return Err(dim(format!("vector of length {} for head dim {}", x.len(), params.head_dim)));
    }
    let mut out = vec![0.0; x.len()];
    for m in 0..params.head_dim / 2 {
        let angle = position as f64 * params.frequency(m);
        let (sin, cos) = angle.sin_cos();
        let (a, b) = (x[2 * m], x[2 * m + 1]);
        out[2 * m] = a * cos - b * sin;
        out[2 * m + 1] = a * sin + b * cos;
    }
    Ok(out)
}

/// Rotates row `i` of `m` as position `offset + i`.
pub fn apply_rope(m: &Matrix, offset: usize, params: &RopeParams) -> Result<Matrix> {
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        out.row_mut(i).copy_from_slice(&rope_rotate(m.row(i), offset + i, params)?);
    }
    Ok(out)
}

/// Unscaled score `<R_i q, R_j k>`.
pub fn rope_score(q: &[f64], i: usize, k: &[f64], j: usize, params: &RopeParams) -> Result<f64> {
    Ok(dot(&rope_rotate(q, i, params)?, &rope_rotate(k, j, params)?))
}

/// Upper bound on the rotary score magnitude at relative distance `distance`,
/// normalized so distance 0 gives 1. Shows the long-range decay of RoPE.
pub fn rope_decay_bound(distance: usize, params: &RopeParams) -> Result<f64> {
    params.validate()?;
    let half = params.head_dim / 2;
    let (mut re, mut im) = (0.0, 0.0);
    let mut total = 0.0;
    for m in 0..half {
        let angle = distance as f64 * params.frequency(m);
        re += angle.cos();
        im += angle.sin();
        total += (re * re + im * im).sqrt();
    }
    let at_zero: f64 = (1..=half).map(|k| k as f64).sum();
    Ok(total / at_zero)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;

    fn norm(v: &[f64]) -> f64 {
        dot(v, v).sqrt()
    }

    #[test]
    fn position_zero_is_identity() {
        let p = RopeParams::new(6).unwrap();
        let x = [0.1, -2.0, 3.5, 0.0, 1.0, 7.0];
        assert_eq!(rope_rotate(&x, 0, &p).unwrap(), x.to_vec());
    }

    #[test]
    fn rotation_preserves_norm() {
        let p = RopeParams::new(8).unwrap();
        let mut rng = SeededRng::new(1);
        for pos in [1, 7, 100, 4096] {
            let x: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            let r = rope_rotate(&x, pos, &p).unwrap();
            assert!((norm(&r) - norm(&x)).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_depend_on_offset_only() {
        let p = RopeParams::new(16).unwrap();
        let mut rng = SeededRng::new(5);
        let q: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        let k: Vec<f64> = (0..16).map(|_| rng.normal()).collect();
        for (i, j) in [(3, 1), (10, 10), (0, 5)] {
            let base = rope_score(&q, i, &k, j, &p).unwrap();
            for s in 1..=32 {
                let shifted = rope_score(&q, i + s, &k, j + s, &p).unwrap();
                assert!((base - shifted).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn odd_dimension_rejected() {
        assert!(RopeParams::new(5).is_err());
        let p = RopeParams { theta_base: 10_000.0, head_dim: 3 };
        assert!(rope_rotate(&[1.0, 2.0, 3.0], 1, &p).is_err());
    }

    #[test]
    fn decay_bound_starts_at_one_and_falls() {
        let p = RopeParams::new(64).unwrap();
        assert!((rope_decay_bound(0, &p).unwrap() - 1.0).abs() < 1e-12);
        assert!(rope_decay_bound(200, &p).unwrap() < rope_decay_bound(2, &p).unwrap());
    }
}
