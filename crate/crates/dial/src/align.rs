//! Channel-wise alignment parameters and the transform that applies them.
//!
//! A batch is aligned per channel by y = (x - b) / sqrt(a). The location b
//! and squared scale a are estimated from data under one of three reference
//! models:
//!
//! - `NormalMl`: b = sample mean, a = maximum-likelihood (1/N) variance.
//! - `NormalMap { epsilon }`: b = sample mean, a = variance + epsilon. The
//!   epsilon comes from an Inverse-Gamma prior on the variance and keeps a
//!   strictly positive even on constant channels.
//! - `LaplaceMl`: b = sample median, a = squared mean absolute deviation
//!   from the median, so the divisor sqrt(a) is the deviation itself.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{column_mean_var, column_median_mad, Matrix};

/// Below this, a squared scale counts as degenerate and cannot be divided by.
pub const MIN_SCALE_SQ: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ReferenceVariant {
    NormalMl,
    NormalMap { epsilon: f64 },
    LaplaceMl,
}

impl ReferenceVariant {
    /// Smallest per-domain batch size the estimator tolerates. NormalMAP
    /// with epsilon > 0 survives single rows; the ML variants need spread.
    pub fn min_rows(&self) -> usize {
        match self {
            ReferenceVariant::NormalMap { epsilon } if *epsilon > 0.0 => 1,
            _ => 2,
        }
    }
}

impl std::fmt::Display for ReferenceVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ReferenceVariant::NormalMl => write!(f, "normal_ml"),
            ReferenceVariant::NormalMap { epsilon } => write!(f, "normal_map(eps={epsilon})"),
            ReferenceVariant::LaplaceMl => write!(f, "laplace_ml"),
        }
    }
}

/// Estimated per-channel location and squared scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignParams {
    a: Vec<f64>,
    b: Vec<f64>,
    variant: ReferenceVariant,
}

impl AlignParams {
    pub fn new(a: Vec<f64>, b: Vec<f64>, variant: ReferenceVariant) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::ShapeMismatch { expected: (1, a.len()), got: (1, b.len()) });
        }
        for (c, &v) in a.iter().enumerate() {
            if !v.is_finite() || v < MIN_SCALE_SQ {
                return Err(Error::DegenerateChannel { channel: c, value: v, layer: None });
            }
        }
        Ok(AlignParams { a, b, variant })
    }

    /// a = 1, b = 0 on every channel: apply is the identity map.
    pub fn identity(channels: usize) -> Self {
        AlignParams {
            a: vec![1.0; channels],
            b: vec![0.0; channels],
            variant: ReferenceVariant::NormalMl,
        }
    }

    pub fn channels(&self) -> usize {
        self.a.len()
    }

    pub fn scale_sq(&self) -> &[f64] {
        &self.a
    }

    pub fn location(&self) -> &[f64] {
        &self.b
    }

    pub fn variant(&self) -> ReferenceVariant {
        self.variant
    }
}

/// Estimates alignment parameters for every channel of `x`.
pub fn estimate(variant: ReferenceVariant, x: &Matrix) -> Result<AlignParams> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("align::estimate"));
    }
    let (a, b) = match variant {
        ReferenceVariant::NormalMl => {
            let (mean, var) = column_mean_var(x)?;
            (var, mean)
        }
        ReferenceVariant::NormalMap { epsilon } => {
            if !epsilon.is_finite() || epsilon < 0.0 {
                return Err(Error::BadSpec(format!("NormalMAP epsilon must be >= 0, got {epsilon}")));
            }
            let (mean, var) = column_mean_var(x)?;
            (var.iter().map(|v| v + epsilon).collect(), mean)
        }
        ReferenceVariant::LaplaceMl => {
            let (median, mad) = column_median_mad(x)?;
            (mad.iter().map(|m| m * m).collect(), median)
        }
    };
    for (c, &v) in a.iter().enumerate() {
        if !v.is_finite() || v < MIN_SCALE_SQ {
            return Err(Error::DegenerateChannel { channel: c, value: v, layer: None });
        }
    }
    Ok(AlignParams { a, b, variant })
}

/// Applies y = (x - b) / sqrt(a) channel-wise.
pub fn apply(params: &AlignParams, x: &Matrix) -> Result<Matrix> {
    if x.cols() != params.channels() {
        return Err(Error::ShapeMismatch {
            expected: (x.rows(), params.channels()),
            got: x.shape(),
        });
    }
    for (c, &v) in params.a.iter().enumerate() {
        if v < MIN_SCALE_SQ {
            return Err(Error::DegenerateChannel { channel: c, value: v, layer: None });
        }
    }
    let inv_s: Vec<f64> = params.a.iter().map(|v| 1.0 / v.sqrt()).collect();
    let mut y = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            y.set(r, c, (x.get(r, c) - params.b[c]) * inv_s[c]);
        }
    }
    Ok(y)
}

/// Exact inverse of `apply`: x = v * sqrt(a) + b.
pub fn invert(params: &AlignParams, v: &Matrix) -> Result<Matrix> {
    if v.cols() != params.channels() {
        return Err(Error::ShapeMismatch {
            expected: (v.rows(), params.channels()),
            got: v.shape(),
        });
    }
    let s: Vec<f64> = params.a.iter().map(|a| a.sqrt()).collect();
    let mut x = Matrix::zeros(v.rows(), v.cols());
    for r in 0..v.rows() {
        for c in 0..v.cols() {
            x.set(r, c, v.get(r, c) * s[c] + params.b[c]);
        }
    }
    Ok(x)
}
