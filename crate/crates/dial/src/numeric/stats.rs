//! Column statistics and row-wise softmax.
//!
//! Accumulation orders are fixed (row-major for moments, sorted order for
//! the median deviations) so repeated runs produce bit-identical results.

use crate::error::{Error, Result};

use super::matrix::Matrix;

/// Per-column mean and maximum-likelihood (1/N) variance.
pub fn column_mean_var(x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("column_mean_var"));
    }
    let n = x.rows() as f64;
    let mut mean = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        let row = x.row(r);
        for (c, v) in row.iter().enumerate() {
            mean[c] += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut var = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        let row = x.row(r);
        for (c, v) in row.iter().enumerate() {
            let d = v - mean[c];
            var[c] += d * d;
        }
    }
    for v in var.iter_mut() {
        *v /= n;
    }
    Ok((mean, var))
}

/// Per-column median and mean absolute deviation from the median.
///
/// Even row counts take the mean of the two middle order statistics.
pub fn column_median_mad(x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("column_median_mad"));
    }
    let n = x.rows();
    let mut median = vec![0.0; x.cols()];
    let mut mad = vec![0.0; x.cols()];
    for c in 0..x.cols() {
        let mut col = x.column(c);
        col.sort_by(f64::total_cmp);
        let med = if n % 2 == 1 {
            col[n / 2]
        } else {
            0.5 * (col[n / 2 - 1] + col[n / 2])
        };
        let dev: f64 = col.iter().map(|v| (v - med).abs()).sum();
        median[c] = med;
        mad[c] = dev / n as f64;
    }
    Ok((median, mad))
}

/// Row-wise softmax with max subtraction, so large logits do not overflow.
pub fn softmax_rows(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let row = z.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for (c, v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..z.cols() {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Row-wise log-softmax: z - max - ln(sum exp(z - max)).
pub fn log_softmax_rows(z: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(z.rows(), z.cols());
    for r in 0..z.rows() {
        let row = z.row(r);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        for (c, v) in row.iter().enumerate() {
            out.set(r, c, v - m - lse);
        }
    }
    out
}
