//! Small descriptive and inferential statistics used by the probes.

use crate::error::{Error, Result};

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

/// Population standard deviation.
pub fn std_pop(xs: &[f64]) -> Option<f64> {
    let m = mean(xs)?;
    Some((xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64).sqrt())
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} samples", xs.len()),
            got: format!("{}", ys.len()),
        });
    }
    if xs.len() < 2 {
        return Err(Error::Insufficient {
            what: "samples for a correlation".into(),
            needed: 2,
            have: xs.len(),
        });
    }
    let mx = mean(xs).unwrap_or(0.0);
    let my = mean(ys).unwrap_or(0.0);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidDistribution(
            "correlation of a constant series".into(),
        ));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Ranks starting at 1, ties receive their average rank.
pub fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

/// One-sided exact sign test of "differences tend to be positive".
/// Zero differences are dropped. Returns `P(X ≥ k)` for `X ~ Bin(n, 1/2)`.
pub fn sign_test_greater(diffs: &[f64]) -> SignTest {
    let positive = diffs.iter().filter(|&&d| d > 0.0).count();
    let negative = diffs.iter().filter(|&&d| d < 0.0).count();
    let n = positive + negative;
    let p_value = (positive..=n).map(|k| binom_half(n, k)).sum::<f64>().min(1.0);
    SignTest {
        positive,
        negative,
        p_value,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignTest {
    pub positive: usize,
    pub negative: usize,
    pub p_value: f64,
}

fn binom_half(n: usize, k: usize) -> f64 {
    let ln_choose = ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k);
    (ln_choose - n as f64 * std::f64::consts::LN_2).exp()
}

fn ln_factorial(n: usize) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}
