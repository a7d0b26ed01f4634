//! Finite-difference verification of the analytic gradient.
//!
//! Every parameter of a small network is probed with a two-sided difference
//! of the full training objective. Each coordinate is probed at two step
//! sizes first; if the two estimates disagree, the objective is locally
//! non-smooth there (a ReLU edge, a median witness swap, a sparse-penalty
//! kink) and the coordinate is skipped rather than compared. The probe sees
//! only objective values, never the analytic gradient, so it cannot hide a
//! systematically wrong backward pass.

use crate::align::ReferenceVariant;
use crate::dalayer::DomainMask;
use crate::data::{compose_batches, materialize_batch, BatchMode, DomainDataset};
use crate::error::{Error, Result};
use crate::net::{backward, build, forward, ForwardMode, Network, ParamKind, ParamStore};
use crate::numeric::{derive_seed, Matrix};
use crate::objective::total_loss;

use super::config::ExperimentConfig;

const GRADCHECK_STREAM: u64 = 2_000_000;
const STEP: f64 = 1e-5;
const REL_FLOOR: f64 = 1e-4;
/// Two-step agreement bound; a coordinate whose difference quotients move
/// more than this between step sizes is treated as sitting on a kink.
const AGREEMENT: f64 = 1e-3;
/// The check is exhaustive over parameters, so it only accepts small nets.
const PARAM_BUDGET: usize = 500;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub label: String,
    pub max_rel_error: f64,
    pub checked: usize,
    pub skipped: usize,
    /// Whether `max_rel_error` stayed inside the caller's tolerance. The
    /// check itself never errors on a miss; it reports.
    pub passed: bool,
}

/// Checks every parameter of `net` on one mixed batch against the exact
/// gradient of the full objective (entropy, sparse, and decay terms
/// included). Relative errors are floored at 1e-4 in the denominator.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_core(
    label: &str,
    net: &Network,
    params: &ParamStore,
    x: &Matrix,
    mask: &DomainMask,
    labels: &[Option<usize>],
    lambda: f64,
    lambda_sparse: f64,
    wd: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    if params.param_count() > PARAM_BUDGET {
        return Err(Error::BadSpec(format!(
            "gradient check wants at most {PARAM_BUDGET} parameters, got {}",
            params.param_count()
        )));
    }
    let mut work = params.clone();
    let (logits, trace) = forward(net, &work, x, ForwardMode::Train(mask))?;
    let base_loss = total_loss(
        &logits,
        labels,
        mask,
        trace.sparse_total(),
        &work,
        lambda,
        lambda_sparse,
        wd,
    )?;
    backward(net, &mut work, &trace, &base_loss.d_logits, lambda_sparse)?;

    // The backward pass leaves out the decay term; fold wd * w in here,
    // flat index by flat index, so the comparison covers the whole
    // objective.
    let mut is_weight = Vec::with_capacity(work.param_count());
    for t in 0..work.tensor_count() {
        let w = matches!(work.kind(t), ParamKind::Weight { .. });
        is_weight.extend(std::iter::repeat_n(w, work.values(t).len()));
    }

    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    let mut skipped = 0;
    for j in 0..params.param_count() {
        let analytic =
            work.grad_flat(j) + if is_weight[j] { wd * work.get_flat(j) } else { 0.0 };
        let base = work.get_flat(j);
        let loss_at = |delta: f64, work: &mut ParamStore| -> Result<f64> {
            work.set_flat(j, base + delta);
            let out = forward(net, work, x, ForwardMode::Train(mask)).and_then(|(l, t)| {
                total_loss(&l, labels, mask, t.sparse_total(), work, lambda, lambda_sparse, wd)
            });
            work.set_flat(j, base);
            Ok(out?.total)
        };
        let fd_full = (loss_at(STEP, &mut work)? - loss_at(-STEP, &mut work)?) / (2.0 * STEP);
        let fd_half =
            (loss_at(STEP / 2.0, &mut work)? - loss_at(-STEP / 2.0, &mut work)?) / STEP;
        if (fd_full - fd_half).abs() > AGREEMENT * fd_full.abs().max(fd_half.abs()).max(1.0) {
            skipped += 1;
            continue;
        }
        // Both quotients agree, so the h^2 truncation term is worth
        // cancelling.
        let fd = (4.0 * fd_half - fd_full) / 3.0;
        let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(REL_FLOOR);
        max_rel_error = max_rel_error.max(rel);
        checked += 1;
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        max_rel_error,
        checked,
        skipped,
        passed: max_rel_error <= tolerance,
    })
}

/// Runs the exhaustive check for the plain network and all three alignment
/// variants on one mixed batch of `ds`, with the entropy, sparse, and decay
/// terms switched on. Width is pinned small to stay inside the parameter
/// budget.
pub fn grad_check(
    cfg: &ExperimentConfig,
    ds: &DomainDataset,
    tolerance: f64,
) -> Result<Vec<GradCheckReport>> {
    let arms: [(&str, Option<ReferenceVariant>); 4] = [
        ("none", None),
        ("normal_ml", Some(ReferenceVariant::NormalMl)),
        ("normal_map", Some(ReferenceVariant::NormalMap { epsilon: 1.0 })),
        ("laplace_ml", Some(ReferenceVariant::LaplaceMl)),
    ];
    let mut reports = Vec::with_capacity(arms.len());
    for (label, variant) in arms {
        let mut check_cfg = cfg.clone();
        check_cfg.hidden = vec![6];
        check_cfg.variant = variant;
        check_cfg.sparse_on = variant.is_some();
        check_cfg.affine = true;
        let arch = check_cfg.architecture(ds.source_x().cols(), ds.class_count());
        let (net, params) = build(&arch, derive_seed(cfg.seed, GRADCHECK_STREAM))?;
        let plan = compose_batches(
            ds.source_x().rows(),
            ds.target_x().rows(),
            BatchMode::Fixed { n_src: 6, n_tgt: 6 },
            check_cfg.min_rows(),
            derive_seed(cfg.seed, GRADCHECK_STREAM + 1),
        )?;
        let (x, mask, labels) = materialize_batch(ds, &plan.batches()[0]);
        reports.push(grad_check_core(
            label, &net, &params, &x, &mask, &labels, 0.3, 0.05, 0.1, tolerance,
        )?);
    }
    Ok(reports)
}
