//! Dense vector and matrix arithmetic plus the softmax family.
//!
//! Vectors are plain `[f64]` slices; [`Mat`] is a row-major owned matrix.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
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
            return Err(Error::ShapeMismatch {
                expected: format!("{} entries ({rows}x{cols})", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        ensure_finite(&data, "matrix")?;
        Ok(Self { rows, cols, data })
    }

    /// Outer product `u · vᵀ`.
    pub fn outer(u: &[f64], v: &[f64]) -> Self {
        let mut data = Vec::with_capacity(u.len() * v.len());
        for &a in u {
            data.extend(v.iter().map(|&b| a * b));
        }
        Self {
            rows: u.len(),
            cols: v.len(),
            data,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

pub(crate) fn ensure_finite(xs: &[f64], what: &'static str) -> Result<()> {
    if xs.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_logits(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::Empty("logits"));
    }
    ensure_finite(logits, "logits")
}

/// `ln Σ exp(x)` with max-subtraction. Callers guarantee non-empty finite input.
pub(crate) fn log_sum_exp(logits: &[f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    max + sum.ln()
}

pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for p in &mut out {
        *p /= total;
    }
    Ok(out)
}

pub fn log_softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_logits(logits)?;
    let lse = log_sum_exp(logits);
    Ok(logits.iter().map(|&z| z - lse).collect())
}

/// Shannon entropy in nats, with `0 · ln 0 = 0`.
pub fn entropy(dist: &[f64]) -> Result<f64> {
    if dist.is_empty() {
        return Err(Error::Empty("distribution"));
    }
    ensure_finite(dist, "distribution")?;
    if let Some(p) = dist.iter().find(|&&p| p < 0.0) {
        return Err(Error::InvalidDistribution(format!("negative entry {p}")));
    }
    let total: f64 = dist.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidDistribution(format!("sums to {total}")));
    }
    Ok(-dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>())
}

pub fn dot(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", a.len()),
            got: format!("length {}", b.len()),
        });
    }
    Ok(dot_unchecked(a, b))
}

#[inline]
pub(crate) fn dot_unchecked(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Frobenius inner product `⟨A, B⟩_F = Σ A_ij B_ij`.
pub fn frobenius_dot(a: &Mat, b: &Mat) -> Result<f64> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{}", a.rows, a.cols),
            got: format!("{}x{}", b.rows, b.cols),
        });
    }
    Ok(dot_unchecked(&a.data, &b.data))
}
