//! The training objective.
//!
//! total = source cross-entropy
//!       + lambda * target prediction entropy
//!       + lambda_sparse * summed sparse penalties
//!       + (weight_decay / 2) * squared dense-weight norm
//!
//! Cross-entropy averages over the batch's source rows only; entropy
//! averages over its target rows only. Both run through log-sum-exp, so
//! large logits neither overflow nor produce spurious zeros. The entropy
//! value is reported even when lambda is 0, but then contributes nothing
//! to the total or the gradient.

use crate::dalayer::{Domain, DomainMask};
use crate::error::{Error, Result};
use crate::net::ParamStore;
use crate::numeric::{log_softmax_rows, Matrix};

/// Loss components of one batch, plus the gradient of the total with
/// respect to the logits.
///
/// `sparse` and `target_entropy` are reported unweighted;
/// total = source_ce + lambda * target_entropy + lambda_sparse * sparse
///       + weight_decay, where `weight_decay` holds (wd / 2) * ||W||^2.
#[derive(Clone, Debug)]
pub struct LossBreakdown {
    pub source_ce: f64,
    pub target_entropy: f64,
    pub sparse: f64,
    pub weight_decay: f64,
    pub total: f64,
    pub d_logits: Matrix,
    /// True when the batch carried no source rows; `source_ce` is then 0.
    pub no_source_rows: bool,
}

fn check_rows(logits: &Matrix, mask: &DomainMask) -> Result<()> {
    if mask.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            expected: (logits.rows(), 1),
            got: (mask.len(), 1),
        });
    }
    Ok(())
}

/// Mean negative log-likelihood of the labels over source rows, with its
/// logit gradient. Returns (value, gradient, no_source_rows).
pub fn source_ce(
    logits: &Matrix,
    labels: &[Option<usize>],
    mask: &DomainMask,
) -> Result<(f64, Matrix, bool)> {
    check_rows(logits, mask)?;
    if labels.len() != logits.rows() {
        return Err(Error::ShapeMismatch {
            expected: (logits.rows(), 1),
            got: (labels.len(), 1),
        });
    }
    let classes = logits.cols();
    let source_rows = mask.indices(Domain::Source);
    let mut grad = Matrix::zeros(logits.rows(), classes);
    if source_rows.is_empty() {
        return Ok((0.0, grad, true));
    }
    let n = source_rows.len() as f64;
    let log_p = log_softmax_rows(logits);
    let mut ce = 0.0;
    for &r in &source_rows {
        let label = labels[r].ok_or(Error::MissingLabel { row: r })?;
        if label >= classes {
            return Err(Error::LabelOutOfRange { row: r, label, classes });
        }
        ce -= log_p.get(r, label);
        for c in 0..classes {
            let p = log_p.get(r, c).exp();
            let indicator = if c == label { 1.0 } else { 0.0 };
            grad.set(r, c, (p - indicator) / n);
        }
    }
    Ok((ce / n, grad, false))
}

/// Mean Shannon entropy of the predicted distributions over target rows,
/// with its logit gradient. An all-source batch yields (0, zeros).
pub fn target_entropy(logits: &Matrix, mask: &DomainMask) -> Result<(f64, Matrix)> {
    check_rows(logits, mask)?;
    let classes = logits.cols();
    let target_rows = mask.indices(Domain::Target);
    let mut grad = Matrix::zeros(logits.rows(), classes);
    if target_rows.is_empty() {
        return Ok((0.0, grad));
    }
    let m = target_rows.len() as f64;
    let log_p = log_softmax_rows(logits);
    let mut total_h = 0.0;
    for &r in &target_rows {
        let mut h = 0.0;
        for c in 0..classes {
            let l = log_p.get(r, c);
            let p = l.exp();
            // p ln p -> 0 as p -> 0; exp underflow handles the limit.
            h -= p * l;
        }
        total_h += h;
        for c in 0..classes {
            let l = log_p.get(r, c);
            let p = l.exp();
            grad.set(r, c, -p * (l + h) / m);
        }
    }
    Ok((total_h / m, grad))
}

/// Combines all loss components for one batch.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    logits: &Matrix,
    labels: &[Option<usize>],
    mask: &DomainMask,
    sparse_total: f64,
    params: &ParamStore,
    lambda: f64,
    lambda_sparse: f64,
    weight_decay: f64,
) -> Result<LossBreakdown> {
    for (name, v) in [("lambda", lambda), ("lambda_sparse", lambda_sparse), ("weight_decay", weight_decay)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::BadSpec(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    let (ce, d_ce, no_source_rows) = source_ce(logits, labels, mask)?;
    let (h, d_h) = target_entropy(logits, mask)?;
    let wd = 0.5 * weight_decay * params.param_sq_norm();
    let total = ce + lambda * h + lambda_sparse * sparse_total + wd;
    // lambda = 0 keeps the gradient bitwise equal to the CE gradient.
    let d_logits = if lambda == 0.0 {
        d_ce
    } else {
        Matrix::from_fn(logits.rows(), logits.cols(), |r, c| {
            d_ce.get(r, c) + lambda * d_h.get(r, c)
        })
    };
    Ok(LossBreakdown {
        source_ce: ce,
        target_entropy: h,
        sparse: sparse_total,
        weight_decay: wd,
        total,
        d_logits,
        no_source_rows,
    })
}
