//! Minimal dense matrix and square feature-map types.
//!
//! Everything is `f64`, row-major, and CPU-only; the matmul parallelizes over
//! output rows.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            if row.len() != c {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(row);
        }
        Mat::from_vec(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self (m x k) * rhs (k x n)`, parallel over output rows.
    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul dims: {}x{} * {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let n = rhs.cols;
        let k = self.cols;
        let mut data = vec![0.0; self.rows * n];
        par::fill_rows(&mut data, n, k * n, |r, out| {
            let lhs_row = self.row(r);
            for (i, &a) in lhs_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[i * n..(i + 1) * n];
                for (o, &b) in out.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        });
        Mat {
            rows: self.rows,
            cols: n,
            data,
        }
    }

    pub fn add_assign(&mut self, other: &Mat) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// A square `side x side` grid of `channels`-dimensional feature vectors,
/// stored row-major as `(y, x, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub side: usize,
    pub channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(side: usize, channels: usize) -> Self {
        Self {
            side,
            channels,
            data: vec![0.0; side * side * channels],
        }
    }

    pub fn from_vec(side: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != side * side * channels {
            return Err(Error::Shape(format!(
                "feature map {side}x{side}x{channels} needs {} entries, got {}",
                side * side * channels,
                data.len()
            )));
        }
        Ok(Self {
            side,
            channels,
            data,
        })
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// The feature vector at cell `(y, x)`.
    pub fn cell(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.side + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn cell_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.side + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.side + x) * self.channels + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.side, other.side);
        assert_eq!(self.channels, other.channels);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sub_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.side, other.side);
        assert_eq!(self.channels, other.channels);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a -= b;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Mean over channels, as a `side * side` plane.
    pub fn channel_mean_plane(&self) -> Vec<f64> {
        let inv = 1.0 / self.channels as f64;
        (0..self.side * self.side)
            .map(|i| {
                self.data[i * self.channels..(i + 1) * self.channels]
                    .iter()
                    .sum::<f64>()
                    * inv
            })
            .collect()
    }
}
