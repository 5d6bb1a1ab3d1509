use serde::{Deserialize, Serialize};

use super::{Scalar, Tensor2D};
use crate::error::{Error, Result};

/// Rotary position embedding over interleaved pairs `(x[2i], x[2i+1])`, pair
/// `i` rotated by `pos * theta_base^(-2i / head_dim)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RopeConfig {
    pub head_dim: usize,
    pub theta_base: f64,
}

impl RopeConfig {
    pub const DEFAULT_THETA: f64 = 10_000.0;

    pub fn new(head_dim: usize) -> Result<Self> {
        Self::with_theta(head_dim, Self::DEFAULT_THETA)
    }

    pub fn with_theta(head_dim: usize, theta_base: f64) -> Result<Self> {
        let cfg = Self {
            head_dim,
            theta_base,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(Error::config(format!(
                "rope head_dim must be even and nonzero, got {}",
                self.head_dim
            )));
        }
        Ok(())
    }
}

pub(crate) fn rotate_row(row: &mut [Scalar], pos: usize, cfg: &RopeConfig) {
    let d = cfg.head_dim as f64;
    for (i, pair) in row.chunks_exact_mut(2).enumerate() {
        let angle = pos as f64 * cfg.theta_base.powf(-2.0 * i as f64 / d);
        let (sin, cos) = angle.sin_cos();
        let (sin, cos) = (sin as Scalar, cos as Scalar);
        let (x0, x1) = (pair[0], pair[1]);
        pair[0] = x0 * cos - x1 * sin;
        pair[1] = x0 * sin + x1 * cos;
    }
}

/// Rotates row `r` of `x` to position `positions[r]`.
pub fn rope_apply(x: &Tensor2D, positions: &[usize], cfg: &RopeConfig) -> Result<Tensor2D> {
    cfg.validate()?;
    if x.cols() != cfg.head_dim {
        return Err(Error::shape(format!(
            "rope input has {} columns, head_dim is {}",
            x.cols(),
            cfg.head_dim
        )));
    }
    if positions.len() != x.rows() {
        return Err(Error::shape(format!(
            "{} positions for {} rows",
            positions.len(),
            x.rows()
        )));
    }
    let mut out = x.clone();
    for (r, &pos) in positions.iter().enumerate() {
        rotate_row(out.row_mut(r), pos, cfg);
    }
    Ok(out)
}
