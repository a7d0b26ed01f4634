//! The training loop: seeded batch plans, forward/backward, SGD steps,
//! per-epoch frozen evaluation, and final statistics freezing.
//!
//! Every source of randomness is a sub-stream of the config seed, so a
//! (config, dataset) pair fully determines the metrics and the trained
//! parameters. Per-epoch evaluation freezes a scratch copy of the network,
//! keeping the real layers in training mode; the returned network has both
//! domains frozen from full-set passes.

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::dalayer::Domain;
use crate::data::{compose_batches, materialize_batch, DomainDataset};
use crate::error::{Error, Result};
use crate::net::{self, ForwardMode, Network, ParamStore};
use crate::numeric::{derive_seed, Matrix};
use crate::objective;

use super::config::ExperimentConfig;
use super::optim::{lr_at, sgd_step, OptimizerState};

/// Seed sub-stream labels. Epoch e shuffles with stream 1 + e.
const INIT_STREAM: u64 = 0;
const EPOCH_STREAM_BASE: u64 = 1;

/// One epoch's summary. Loss components are means over the epoch's
/// batches, unweighted (the entropy and sparse weights are config data).
/// Wall-clock seconds are diagnostics: they stay out of the serialized
/// form and out of equality, so identical runs compare and serialize
/// identically.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    pub source_ce: f64,
    pub target_entropy: f64,
    pub sparse: f64,
    pub target_accuracy: Option<f64>,
    #[serde(skip)]
    pub seconds: f64,
}

impl PartialEq for MetricsRecord {
    fn eq(&self, other: &Self) -> bool {
        self.epoch == other.epoch
            && self.lr == other.lr
            && self.source_ce == other.source_ce
            && self.target_entropy == other.target_entropy
            && self.sparse == other.sparse
            && self.target_accuracy == other.target_accuracy
    }
}

/// Result of a training run. `diverged_at` marks a run cut short by a
/// non-finite loss; `metrics` then holds the completed epochs only and the
/// network is left unfrozen.
pub struct TrainOutput {
    pub net: Network,
    pub params: ParamStore,
    pub metrics: Vec<MetricsRecord>,
    pub diverged_at: Option<usize>,
}

/// Estimates and stores `domain`'s frozen alignment parameters from one
/// pass over that domain's full sample set.
pub fn freeze_stats(
    net: &mut Network,
    params: &ParamStore,
    ds: &DomainDataset,
    domain: Domain,
) -> Result<()> {
    let x = match domain {
        Domain::Source => ds.source_x(),
        Domain::Target => ds.target_x(),
    };
    net.freeze_domain(params, x, domain)
}

/// Fraction of rows whose argmax prediction matches the label, using
/// `domain`'s frozen statistics.
pub fn evaluate(
    net: &Network,
    params: &ParamStore,
    x: &Matrix,
    y: &[usize],
    domain: Domain,
) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("evaluation rows"));
    }
    if y.len() != x.rows() {
        return Err(Error::ShapeMismatch { expected: (x.rows(), 1), got: (y.len(), 1) });
    }
    let mode = match domain {
        Domain::Source => ForwardMode::FrozenSource,
        Domain::Target => ForwardMode::FrozenTarget,
    };
    let pred = net::predict(net, params, x, mode)?;
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / y.len() as f64)
}

/// Target accuracy of the current parameters, measured on a frozen scratch
/// copy so the live network keeps training statistics per batch.
fn frozen_target_accuracy(
    net: &Network,
    params: &ParamStore,
    ds: &DomainDataset,
) -> Result<Option<f64>> {
    let Some(y) = ds.target_y() else {
        return Ok(None);
    };
    let mut scratch = net.clone();
    freeze_stats(&mut scratch, params, ds, Domain::Target)?;
    Ok(Some(evaluate(&scratch, params, ds.target_x(), y, Domain::Target)?))
}

/// Trains per the config on the given dataset. Returns the network with
/// both domains' statistics frozen, per-epoch metrics, and a divergence
/// marker instead of an error when the loss leaves the finite range.
pub fn train(cfg: &ExperimentConfig, ds: &DomainDataset) -> Result<TrainOutput> {
    cfg.validate()?;
    let arch = cfg.architecture(ds.feature_dim(), ds.class_count());
    let (mut net, mut params) = net::build(&arch, derive_seed(cfg.seed, INIT_STREAM))?;
    let mut opt = OptimizerState::new(&params);
    let lambda = cfg.effective_lambda();
    let n = ds.source_x().rows();
    let m = ds.target_x().rows();

    let mut metrics = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = lr_at(epoch, cfg);
        let plan = compose_batches(
            n,
            m,
            cfg.batch,
            cfg.min_rows(),
            derive_seed(cfg.seed, EPOCH_STREAM_BASE + epoch as u64),
        )?;
        let mut ce_sum = 0.0;
        let mut h_sum = 0.0;
        let mut sparse_sum = 0.0;
        let mut diverged = false;
        for batch in plan.batches() {
            let (x, mask, labels) = materialize_batch(ds, batch);
            let (logits, trace) = net::forward(&net, &params, &x, ForwardMode::Train(&mask))?;
            let loss = objective::total_loss(
                &logits,
                &labels,
                &mask,
                trace.sparse_total(),
                &params,
                lambda,
                cfg.lambda_sparse,
                cfg.wd,
            )?;
            if !loss.total.is_finite() {
                diverged = true;
                break;
            }
            net::backward(&net, &mut params, &trace, &loss.d_logits, cfg.lambda_sparse)?;
            sgd_step(&mut params, &mut opt, lr, cfg.momentum, cfg.wd)?;
            ce_sum += loss.source_ce;
            h_sum += loss.target_entropy;
            sparse_sum += loss.sparse;
        }
        if diverged {
            return Ok(TrainOutput { net, params, metrics, diverged_at: Some(epoch) });
        }
        let batches = plan.batches().len() as f64;
        metrics.push(MetricsRecord {
            epoch,
            lr,
            source_ce: ce_sum / batches,
            target_entropy: h_sum / batches,
            sparse: sparse_sum / batches,
            target_accuracy: frozen_target_accuracy(&net, &params, ds)?,
            seconds: started.elapsed().as_secs_f64(),
        });
    }

    freeze_stats(&mut net, &params, ds, Domain::Source)?;
    freeze_stats(&mut net, &params, ds, Domain::Target)?;
    Ok(TrainOutput { net, params, metrics, diverged_at: None })
}

/// Writes metrics as one JSON object per line.
pub fn write_metrics(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::align::ReferenceVariant;
    use crate::data::{gen_blobs, ShiftSpec};
    use crate::net::{build, LayerSpec};
    use crate::numeric::{column_mean_var, RngStream};

    fn small_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.n_source = 120;
        cfg.n_target = 120;
        cfg.hidden = vec![16];
        cfg.epochs = 3;
        cfg.batch = crate::data::BatchMode::Proportional { batch_size: 8 };
        cfg
    }

    #[test]
    fn frozen_location_is_the_full_set_mean() {
        // Identity dense layer, so the alignment layer sees x itself. The
        // domains are translated apart, so using the wrong domain's frozen
        // statistics would miss by whole units.
        let arch = vec![
            LayerSpec::Dense { input: 2, output: 2 },
            LayerSpec::DaLayer {
                variant: ReferenceVariant::NormalMl,
                sparse_weight: 0.0,
                affine: false,
            },
        ];
        let (mut net, mut params) = build(&arch, 1).unwrap();
        params.values_mut(0).copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        params.values_mut(1).copy_from_slice(&[0.0, 0.0]);
        let shift = ShiftSpec {
            rotation_deg: 0.0,
            scale: 1.0,
            translation: vec![4.0, -3.0],
            label_noise: 0.0,
        };
        let ds = gen_blobs(2, 2, 40, 40, &shift, 3).unwrap();
        freeze_stats(&mut net, &params, &ds, Domain::Source).unwrap();
        freeze_stats(&mut net, &params, &ds, Domain::Target).unwrap();

        for (x, mode) in [
            (ds.source_x(), ForwardMode::FrozenSource),
            (ds.target_x(), ForwardMode::FrozenTarget),
        ] {
            let (mean, var) = column_mean_var(x).unwrap();
            let (out, _) = net::forward(&net, &params, x, mode).unwrap();
            for r in 0..out.rows() {
                for c in 0..2 {
                    let expect = (x.get(r, c) - mean[c]) / var[c].sqrt();
                    assert!((out.get(r, c) - expect).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn freezing_twice_changes_nothing() {
        let cfg = small_cfg();
        let ds = cfg.build_dataset().unwrap();
        let arch = cfg.architecture(2, 3);
        let (mut net, params) = build(&arch, 5).unwrap();
        freeze_stats(&mut net, &params, &ds, Domain::Source).unwrap();
        freeze_stats(&mut net, &params, &ds, Domain::Target).unwrap();
        let (a, _) = net::forward(&net, &params, ds.target_x(), ForwardMode::FrozenTarget).unwrap();
        freeze_stats(&mut net, &params, &ds, Domain::Target).unwrap();
        let (b, _) = net::forward(&net, &params, ds.target_x(), ForwardMode::FrozenTarget).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn batch_size_one_evaluation_matches_full_batch() {
        let cfg = small_cfg();
        let ds = cfg.build_dataset().unwrap();
        let arch = cfg.architecture(2, 3);
        let (mut net, params) = build(&arch, 9).unwrap();
        freeze_stats(&mut net, &params, &ds, Domain::Target).unwrap();
        let full = net::predict(&net, &params, ds.target_x(), ForwardMode::FrozenTarget).unwrap();
        for r in 0..ds.target_x().rows() {
            let one = ds.target_x().select_rows(&[r]);
            let p = net::predict(&net, &params, &one, ForwardMode::FrozenTarget).unwrap();
            assert_eq!(p[0], full[r]);
        }
    }

    #[test]
    fn evaluate_oracles() {
        // Zero weights, bias favoring class 1: every prediction is 1.
        let arch = vec![LayerSpec::Dense { input: 2, output: 2 }];
        let (net, mut params) = build(&arch, 1).unwrap();
        params.values_mut(0).iter_mut().for_each(|v| *v = 0.0);
        params.values_mut(1).copy_from_slice(&[0.0, 1.0]);
        let x = RngStream::new(2).normal_matrix(50, 2);
        let all_ones = vec![1usize; 50];
        let acc = evaluate(&net, &params, &x, &all_ones, Domain::Target).unwrap();
        assert_eq!(acc, 1.0);

        assert!(matches!(
            evaluate(&net, &params, &Matrix::zeros(0, 2), &[], Domain::Target),
            Err(Error::EmptyInput(_))
        ));
        assert!(matches!(
            evaluate(&net, &params, &x, &all_ones[..10], Domain::Target),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn untrained_net_scores_like_a_coin_flip() {
        // Labels alternate independently of the inputs, so any fixed
        // predictor is a fair coin per row: 0.5 within 4 binomial sd.
        let arch = vec![
            LayerSpec::Dense { input: 2, output: 8 },
            LayerSpec::Relu,
            LayerSpec::Dense { input: 8, output: 2 },
        ];
        let (net, params) = build(&arch, 33).unwrap();
        let m = 10_000;
        let x = RngStream::new(34).normal_matrix(m, 2);
        let y: Vec<usize> = (0..m).map(|r| r % 2).collect();
        let acc = evaluate(&net, &params, &x, &y, Domain::Target).unwrap();
        assert!((acc - 0.5).abs() <= 0.02, "accuracy {acc}");
    }

    #[test]
    fn training_is_bit_deterministic() {
        let cfg = small_cfg();
        let ds = cfg.build_dataset().unwrap();
        let a = train(&cfg, &ds).unwrap();
        let b = train(&cfg, &ds).unwrap();
        assert_eq!(a.metrics, b.metrics);
        assert!(a.diverged_at.is_none());
        for i in 0..a.params.tensor_count() {
            assert_eq!(a.params.values(i), b.params.values(i));
        }
        // Frozen nets agree on every target prediction.
        let pa = net::predict(&a.net, &a.params, ds.target_x(), ForwardMode::FrozenTarget).unwrap();
        let pb = net::predict(&b.net, &b.params, ds.target_x(), ForwardMode::FrozenTarget).unwrap();
        assert_eq!(pa, pb);

        // A different seed changes the run.
        let mut cfg2 = cfg.clone();
        cfg2.seed = 2;
        let c = train(&cfg2, &ds).unwrap();
        assert_ne!(a.metrics, c.metrics);
    }

    #[test]
    fn metrics_files_are_byte_identical() {
        let cfg = small_cfg();
        let ds = cfg.build_dataset().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("m1.jsonl");
        let p2 = dir.path().join("m2.jsonl");
        write_metrics(&p1, &train(&cfg, &ds).unwrap().metrics).unwrap();
        write_metrics(&p2, &train(&cfg, &ds).unwrap().metrics).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert!(!b1.is_empty());
        assert_eq!(b1, b2);
        // Wall-clock time is not serialized.
        let text = String::from_utf8(b1).unwrap();
        assert!(!text.contains("seconds"));
        assert_eq!(text.lines().count(), cfg.epochs);
    }

    #[test]
    fn source_ce_decreases_early() {
        let mut cfg = ExperimentConfig::default();
        cfg.epochs = 5;
        cfg.entropy_on = false;
        let ds = cfg.build_dataset().unwrap();
        let out = train(&cfg, &ds).unwrap();
        for w in out.metrics.windows(2) {
            assert!(
                w[1].source_ce < w[0].source_ce,
                "epoch {}: {} !< {}",
                w[1].epoch,
                w[1].source_ce,
                w[0].source_ce
            );
        }
    }

    #[test]
    fn divergence_reports_partial_metrics() {
        let mut cfg = small_cfg();
        cfg.variant = None;
        cfg.lr0 = 1e12;
        cfg.lr_drop_at = vec![];
        let ds = cfg.build_dataset().unwrap();
        let out = train(&cfg, &ds).unwrap();
        let at = out.diverged_at.expect("run must diverge");
        assert!(at < cfg.epochs);
        assert_eq!(out.metrics.len(), at);
    }

    #[test]
    fn raising_lambda_keeps_source_ce_at_a_fixed_point() {
        let cfg = small_cfg();
        let ds = cfg.build_dataset().unwrap();
        let arch = cfg.architecture(2, 3);
        let (net, params) = build(&arch, 11).unwrap();
        let plan = compose_batches(120, 120, cfg.batch, 2, 1).unwrap();
        let (x, mask, labels) = materialize_batch(&ds, &plan.batches()[0]);
        let (logits, trace) = net::forward(&net, &params, &x, ForwardMode::Train(&mask)).unwrap();
        let lo = objective::total_loss(&logits, &labels, &mask, trace.sparse_total(), &params, 0.1, 0.0, 0.0)
            .unwrap();
        let hi = objective::total_loss(&logits, &labels, &mask, trace.sparse_total(), &params, 0.9, 0.0, 0.0)
            .unwrap();
        assert_eq!(lo.source_ce, hi.source_ce);
        assert_eq!(lo.sparse, hi.sparse);
        assert_eq!(lo.weight_decay, hi.weight_decay);
    }
}
