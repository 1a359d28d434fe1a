//! Scalable positional embeddings.
//!
//! Each axis owns a start and an end embedding. A position `t ∈ [0, 1]` is
//! mapped to a point on the great circle between the two, independently for
//! every attention head: each head's slice is normalized, scaled to `√d_h`,
//! and spherically interpolated. Rows and columns are interpolated separately
//! and summed, so any grid size can be embedded from the same four vectors.

use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// Below this angle the endpoints are treated as collinear.
pub const COLLINEAR_EPS: f64 = 1e-7;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    libm::sqrt(dot(a, a))
}

/// Per-head slerp between two endpoint slices of equal length `d_h`.
///
/// The result always has norm `√d_h`.
pub fn spe_interpolate(e0: &[f64], e1: &[f64], t: f64) -> Result<Vec<f64>> {
    if e0.len() != e1.len() || e0.is_empty() {
        bail!(
            Dimension,
            "endpoint lengths {} and {} differ or are empty",
            e0.len(),
            e1.len()
        );
    }
    if !(0.0..=1.0).contains(&t) {
        bail!(Input, "interpolation position {t} outside [0, 1]");
    }
    let (n0, n1) = (norm(e0), norm(e1));
    if n0 == 0.0 || n1 == 0.0 || !n0.is_finite() || !n1.is_finite() {
        bail!(Input, "endpoint has zero or non-finite norm");
    }
    let s = libm::sqrt(e0.len() as f64);
    let u0: Vec<f64> = e0.iter().map(|v| v / n0).collect();
    let u1: Vec<f64> = e1.iter().map(|v| v / n1).collect();

    // arccos of the cosine, evaluated as 2·atan2(|u0 − u1|, |u0 + u1|) to
    // stay accurate near 0 and π.
    let diff: f64 = libm::sqrt(u0.iter().zip(&u1).map(|(a, b)| (a - b) * (a - b)).sum());
    let sum: f64 = libm::sqrt(u0.iter().zip(&u1).map(|(a, b)| (a + b) * (a + b)).sum());
    let theta = 2.0 * libm::atan2(diff, sum);

    if theta < COLLINEAR_EPS {
        let mixed: Vec<f64> = u0.iter().zip(&u1).map(|(a, b)| (1.0 - t) * a + t * b).collect();
        let m = norm(&mixed);
        return Ok(mixed.iter().map(|v| s * (v / m)).collect());
    }
    if core::f64::consts::PI - theta < COLLINEAR_EPS {
        bail!(Input, "antipodal endpoints have no unique interpolation arc");
    }
    let sin_theta = libm::sin(theta);
    let w0 = libm::sin((1.0 - t) * theta) / sin_theta;
    let w1 = libm::sin(t * theta) / sin_theta;
    Ok(u0.iter().zip(&u1).map(|(a, b)| s * (w0 * a + w1 * b)).collect())
}

/// Fractional position of index `i` on an axis of `n` cells.
pub fn axis_position(i: usize, n: usize) -> f64 {
    if n <= 1 {
        0.5
    } else {
        i as f64 / (n - 1) as f64
    }
}

/// Learned endpoints for the row and column axes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeTable {
    e0_row: Vec<f64>,
    e1_row: Vec<f64>,
    e0_col: Vec<f64>,
    e1_col: Vec<f64>,
    heads: usize,
}

impl SpeTable {
    pub fn new(e0_row: Tensor, e1_row: Tensor, e0_col: Tensor, e1_col: Tensor, heads: usize) -> Result<Self> {
        let d = e0_row.len();
        if heads == 0 || d == 0 || d % heads != 0 {
            bail!(Config, "embedding width {d} not divisible into {heads} heads");
        }
        for e in [&e1_row, &e0_col, &e1_col] {
            if e.len() != d {
                bail!(Dimension, "all endpoints must have length {d}, got {}", e.len());
            }
        }
        let table = Self {
            e0_row: e0_row.into_data(),
            e1_row: e1_row.into_data(),
            e0_col: e0_col.into_data(),
            e1_col: e1_col.into_data(),
            heads,
        };
        let dh = table.head_dim();
        for e in [&table.e0_row, &table.e1_row, &table.e0_col, &table.e1_col] {
            if e.chunks(dh).any(|h| norm(h) == 0.0) {
                bail!(Input, "endpoint has a zero-norm head slice");
            }
        }
        Ok(table)
    }

    /// Endpoints drawn uniformly from `[-1, 1)`.
    pub fn random(d: usize, heads: usize, rng: &mut SplitMix64) -> Result<Self> {
        let mut draw = || Tensor::new([d], (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect());
        let (a, b, c, e) = (draw()?, draw()?, draw()?, draw()?);
        Self::new(a, b, c, e, heads)
    }

    pub fn dim(&self) -> usize {
        self.e0_row.len()
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    fn interpolate_axis(&self, e0: &[f64], e1: &[f64], t: f64) -> Result<Vec<f64>> {
        let dh = self.head_dim();
        let mut out = Vec::with_capacity(self.dim());
        for (a, b) in e0.chunks(dh).zip(e1.chunks(dh)) {
            out.extend(spe_interpolate(a, b, t)?);
        }
        Ok(out)
    }

    /// Row-axis component at fractional position `t`.
    pub fn row_embedding(&self, t: f64) -> Result<Vec<f64>> {
        self.interpolate_axis(&self.e0_row, &self.e1_row, t)
    }

    /// Column-axis component at fractional position `t`.
    pub fn col_embedding(&self, t: f64) -> Result<Vec<f64>> {
        self.interpolate_axis(&self.e0_col, &self.e1_col, t)
    }

    /// Embedding of the cell at fractional position `(t_row, t_col)`.
    pub fn embed(&self, t_row: f64, t_col: f64) -> Result<Vec<f64>> {
        let r = self.row_embedding(t_row)?;
        let c = self.col_embedding(t_col)?;
        Ok(r.iter().zip(&c).map(|(a, b)| a + b).collect())
    }
}

/// Embeddings for every cell of a `rows × cols` grid, row-major: `[rows·cols, d]`.
pub fn spe_grid(table: &SpeTable, rows: usize, cols: usize) -> Result<Tensor> {
    if rows == 0 || cols == 0 {
        bail!(Input, "grid must be at least 1x1, got {rows}x{cols}");
    }
    let row_parts = (0..rows)
        .map(|i| table.row_embedding(axis_position(i, rows)))
        .collect::<Result<Vec<_>>>()?;
    let col_parts = (0..cols)
        .map(|j| table.col_embedding(axis_position(j, cols)))
        .collect::<Result<Vec<_>>>()?;
    let d = table.dim();
    let mut data = Vec::with_capacity(rows * cols * d);
    for r in &row_parts {
        for c in &col_parts {
            data.extend(r.iter().zip(c).map(|(a, b)| a + b));
        }
    }
    Tensor::new([rows * cols, d], data)
}
