//! Dense row-major point sets.

use std::cmp::Ordering;

use crate::error::{Error, Result};

/// `n` points in `d` dimensions, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Contract("points must have dimension >= 1".into()));
        }
        if data.len() % dim != 0 {
            return Err(Error::Contract(format!(
                "buffer of length {} is not a multiple of dimension {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn zeros(n: usize, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; n * dim],
        }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows.first().ok_or(Error::Empty("point list"))?;
        let dim = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            let row = row.as_ref();
            if row.len() != dim {
                return Err(Error::Dimension {
                    expected: dim,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(dim, data)
    }

    /// One-dimensional points from scalars.
    pub fn from_scalars(values: &[f64]) -> Self {
        Self {
            dim: 1,
            data: values.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.data.chunks_exact(self.dim)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the first row containing a non-finite coordinate.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.rows().position(|r| r.iter().any(|v| !v.is_finite()))
    }

    /// Rows reordered so that row `r` of the result is row `order[r]` of `self`.
    pub fn gather(&self, order: &[usize]) -> Self {
        let mut data = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self {
            dim: self.dim,
            data,
        }
    }

    /// Index permutation sorting rows lexicographically.
    ///
    /// Every pairwise sum in the crate runs in this order, so results depend
    /// only on the set of points and not on how the caller indexed them.
    pub fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| lexicographic(self.row(a), self.row(b)));
        order
    }

    pub fn mean(&self) -> Vec<f64> {
        let n = self.len() as f64;
        let mut m = vec![0.0; self.dim];
        for row in self.rows() {
            for (acc, v) in m.iter_mut().zip(row) {
                *acc += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// Per-coordinate sample variance with the `1/n` normalisation.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.len() as f64;
        let mut var = vec![0.0; self.dim];
        for row in self.rows() {
            for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v /= n);
        var
    }
}

pub(crate) fn lexicographic(a: &[f64], b: &[f64]) -> Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            Ordering::Equal => continue,
            other => return other,
        }
    }
    Ordering::Equal
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Neumaier-compensated sum in slice order.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut comp = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}
