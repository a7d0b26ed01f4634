//! The lambda sweep and the ablation grid.
//!
//! The sweep selects lambda on held-out source accuracy only; target
//! accuracy is reported for transparency but never drives selection. When
//! several lambdas tie on source validation, the latest grid entry wins,
//! so a saturated validation set prefers the more regularized model.
//!
//! The ablation grid covers {entropy on, off} x {no alignment, NormalML,
//! NormalMAP(1), NormalML sparse, NormalMAP sparse, LaplaceML} and reports
//! mean and sample deviation of the final target accuracy across seeds.

use crate::align::ReferenceVariant;
use crate::dalayer::Domain;
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::numeric::derive_seed;

use super::config::ExperimentConfig;
use super::train::{evaluate, train};

const SWEEP_SPLIT_STREAM: u64 = 1_000_000;

/// One sweep row. `selected` marks the chosen lambda (exactly one row).
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub lambda: f64,
    pub source_val_accuracy: f64,
    pub target_accuracy: Option<f64>,
    pub selected: bool,
}

/// Trains once per lambda on an 80% source split (entropy term active) and
/// selects by accuracy on the held-out 20%.
pub fn sweep_lambda(
    cfg: &ExperimentConfig,
    ds: &DomainDataset,
    grid: &[f64],
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::BadSpec("lambda grid is empty".into()));
    }
    let (train_ds, held_x, held_y) =
        ds.split_source(0.2, derive_seed(cfg.seed, SWEEP_SPLIT_STREAM))?;
    let mut rows = Vec::with_capacity(grid.len());
    for &lambda in grid {
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::BadSpec(format!("lambda {lambda} must be finite and >= 0")));
        }
        let mut run_cfg = cfg.clone();
        run_cfg.entropy_on = true;
        run_cfg.lambda = lambda;
        let out = train(&run_cfg, &train_ds)?;
        if let Some(epoch) = out.diverged_at {
            return Err(Error::Diverged { epoch });
        }
        let source_val_accuracy = evaluate(&out.net, &out.params, &held_x, &held_y, Domain::Source)?;
        let target_accuracy = match ds.target_y() {
            Some(y) => Some(evaluate(&out.net, &out.params, ds.target_x(), y, Domain::Target)?),
            None => None,
        };
        rows.push(SweepRow { lambda, source_val_accuracy, target_accuracy, selected: false });
    }
    let best = rows
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.source_val_accuracy
                .total_cmp(&b.source_val_accuracy)
                .then(ia.cmp(ib))
        })
        .map(|(i, _)| i)
        .expect("grid is nonempty");
    rows[best].selected = true;
    Ok(rows)
}

/// Sweep rows as CSV under a fixed header.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("lambda,source_val_accuracy,target_accuracy,selected\n");
    for r in rows {
        let target = r.target_accuracy.map(|a| a.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.lambda, r.source_val_accuracy, target, r.selected
        ));
    }
    out
}

/// One ablation cell: a (entropy, variant) configuration across all seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub entropy_on: bool,
    pub variant: &'static str,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    /// First failure in this cell, if any; the other cells still run.
    pub failed: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub cells: Vec<AblationCell>,
}

/// The five alignment arms of the grid, in table order.
fn variant_arms() -> [(&'static str, ReferenceVariant, bool); 5] {
    [
        ("normal_ml", ReferenceVariant::NormalMl, false),
        ("normal_map", ReferenceVariant::NormalMap { epsilon: 1.0 }, false),
        ("normal_ml_sparse", ReferenceVariant::NormalMl, true),
        ("normal_map_sparse", ReferenceVariant::NormalMap { epsilon: 1.0 }, true),
        ("laplace_ml", ReferenceVariant::LaplaceMl, false),
    ]
}

fn mean_sd(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn run_cell(
    base: &ExperimentConfig,
    ds: &DomainDataset,
    seeds: &[u64],
    entropy_on: bool,
    variant: &'static str,
    reference: Option<(ReferenceVariant, bool)>,
) -> AblationCell {
    let target_y = ds.target_y().expect("ablation needs held-out target labels");
    let mut accuracies = Vec::with_capacity(seeds.len());
    let mut failed = None;
    for &seed in seeds {
        let mut cfg = base.clone();
        cfg.entropy_on = entropy_on;
        cfg.seed = seed;
        match reference {
            Some((v, sparse)) => {
                cfg.variant = Some(v);
                cfg.sparse_on = sparse;
            }
            None => {
                cfg.variant = None;
                cfg.sparse_on = false;
            }
        }
        let result = train(&cfg, ds).and_then(|out| match out.diverged_at {
            Some(epoch) => Err(Error::Diverged { epoch }),
            None => evaluate(&out.net, &out.params, ds.target_x(), target_y, Domain::Target),
        });
        match result {
            Ok(acc) => accuracies.push(acc),
            Err(e) => {
                failed = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    let (mean, sd) = mean_sd(&accuracies);
    AblationCell { entropy_on, variant, accuracies, mean, sd, failed }
}

/// Runs the 12-cell grid over the given seeds. Cell order follows the
/// ablation table: the two baselines, the five variants with entropy, the
/// five without.
pub fn ablate(cfg: &ExperimentConfig, ds: &DomainDataset, seeds: &[u64]) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::BadSpec("ablation needs at least one seed".into()));
    }
    if ds.target_y().is_none() {
        return Err(Error::BadSpec("ablation needs held-out target labels".into()));
    }
    let mut cells = Vec::with_capacity(12);
    cells.push(run_cell(cfg, ds, seeds, false, "no_da", None));
    cells.push(run_cell(cfg, ds, seeds, true, "no_da", None));
    for entropy_on in [true, false] {
        for (label, reference, sparse) in variant_arms() {
            cells.push(run_cell(cfg, ds, seeds, entropy_on, label, Some((reference, sparse))));
        }
    }
    Ok(AblationTable { seeds: seeds.to_vec(), cells })
}

/// Ablation cells as CSV under a fixed header. Per-seed accuracies are
/// semicolon-joined inside one field.
pub fn ablate_csv(table: &AblationTable) -> String {
    let mut out = String::from("entropy,variant,mean,sd,per_seed,status\n");
    for c in &table.cells {
        let per_seed =
            c.accuracies.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";");
        let status = match &c.failed {
            Some(_) => "failed",
            None => "ok",
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.entropy_on, c.variant, c.mean, c.sd, per_seed, status
        ));
    }
    out
}
