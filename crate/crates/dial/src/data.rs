//! Synthetic domain-shift datasets, CSV persistence, and mixed-domain
//! batch composition.
//!
//! Target labels are carried for evaluation only: batch materialization
//! hands every target row a `None` label, so training code never sees
//! them. Proportional batches round the source count half-up and give the
//! target the remainder; every epoch covers each domain with chained fresh
//! permutations, so per-sample use counts differ by at most one.

use std::fmt::Write as _;
use std::path::Path;

use crate::dalayer::{Domain, DomainMask};
use crate::error::{Error, Result};
use crate::numeric::{derive_seed, Matrix, RngStream};

/// A labeled source sample set plus an unlabeled target sample set.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    source_x: Matrix,
    source_y: Vec<usize>,
    target_x: Matrix,
    target_y: Option<Vec<usize>>,
    class_count: usize,
}

impl DomainDataset {
    pub fn new(
        source_x: Matrix,
        source_y: Vec<usize>,
        target_x: Matrix,
        target_y: Option<Vec<usize>>,
        class_count: usize,
    ) -> Result<Self> {
        if source_x.rows() == 0 {
            return Err(Error::EmptyInput("source rows"));
        }
        if target_x.rows() == 0 {
            return Err(Error::EmptyInput("target rows"));
        }
        if source_x.cols() != target_x.cols() {
            return Err(Error::ShapeMismatch {
                expected: (target_x.rows(), source_x.cols()),
                got: (target_x.rows(), target_x.cols()),
            });
        }
        if source_y.len() != source_x.rows() {
            return Err(Error::DataLength { rows: source_x.rows(), cols: 1, got: source_y.len() });
        }
        for (row, &label) in source_y.iter().enumerate() {
            if label >= class_count {
                return Err(Error::LabelOutOfRange { row, label, classes: class_count });
            }
        }
        if let Some(labels) = &target_y {
            if labels.len() != target_x.rows() {
                return Err(Error::DataLength {
                    rows: target_x.rows(),
                    cols: 1,
                    got: labels.len(),
                });
            }
            for (row, &label) in labels.iter().enumerate() {
                if label >= class_count {
                    return Err(Error::LabelOutOfRange { row, label, classes: class_count });
                }
            }
        }
        Ok(DomainDataset { source_x, source_y, target_x, target_y, class_count })
    }

    pub fn source_x(&self) -> &Matrix {
        &self.source_x
    }

    pub fn source_y(&self) -> &[usize] {
        &self.source_y
    }

    pub fn target_x(&self) -> &Matrix {
        &self.target_x
    }

    /// Held-out target labels, present on generated data, for evaluation only.
    pub fn target_y(&self) -> Option<&[usize]> {
        self.target_y.as_deref()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn feature_dim(&self) -> usize {
        self.source_x.cols()
    }

    /// Splits off a seeded source holdout of `max(1, round(frac * n))` rows.
    /// The remaining source rows and the whole target form the train set.
    pub fn split_source(&self, frac: f64, seed: u64) -> Result<(DomainDataset, Matrix, Vec<usize>)> {
        if !(0.0..1.0).contains(&frac) {
            return Err(Error::BadSpec(format!("holdout fraction {frac} outside [0, 1)")));
        }
        let n = self.source_x.rows();
        let held = ((frac * n as f64).round() as usize).max(1);
        if held >= n {
            return Err(Error::BadSpec(format!("holdout of {held} rows leaves no train rows")));
        }
        let perm = RngStream::new(seed).permutation(n);
        let (held_idx, train_idx) = perm.split_at(held);
        let train = DomainDataset::new(
            self.source_x.select_rows(train_idx),
            train_idx.iter().map(|&i| self.source_y[i]).collect(),
            self.target_x.clone(),
            self.target_y.clone(),
            self.class_count,
        )?;
        let held_y = held_idx.iter().map(|&i| self.source_y[i]).collect();
        Ok((train, self.source_x.select_rows(held_idx), held_y))
    }
}

/// Affine domain shift applied to target draws: rotation in the first two
/// dims, isotropic scaling, per-dim translation, plus label flips.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftSpec {
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation: Vec<f64>,
    pub label_noise: f64,
}

impl ShiftSpec {
    pub fn identity(d: usize) -> Self {
        ShiftSpec { rotation_deg: 0.0, scale: 1.0, translation: vec![0.0; d], label_noise: 0.0 }
    }

    fn validate(&self, d: usize) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::BadSpec(format!("scale {} must be positive", self.scale)));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::BadSpec(format!(
                "label_noise {} outside [0, 1)",
                self.label_noise
            )));
        }
        if self.translation.len() != d {
            return Err(Error::BadSpec(format!(
                "translation has {} entries for {d} dims",
                self.translation.len()
            )));
        }
        if !self.rotation_deg.is_finite() || self.translation.iter().any(|t| !t.is_finite()) {
            return Err(Error::BadSpec("non-finite shift parameter".into()));
        }
        Ok(())
    }
}

/// Class centers used by `gen_blobs`: evenly spaced on a radius-5 circle in
/// the first two dims (seeded phase), zero elsewhere.
pub fn blob_centers(class_count: usize, feature_dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let phase = RngStream::new(derive_seed(seed, 0)).uniform() * std::f64::consts::TAU;
    (0..class_count)
        .map(|k| {
            let angle = phase + std::f64::consts::TAU * k as f64 / class_count as f64;
            let mut c = vec![0.0; feature_dim];
            c[0] = 5.0 * angle.cos();
            c[1] = 5.0 * angle.sin();
            c
        })
        .collect()
}

/// Class sizes that divide `total` as evenly as possible, larger ones first.
fn balanced_counts(total: usize, class_count: usize) -> Vec<usize> {
    (0..class_count).map(|k| total / class_count + usize::from(k < total % class_count)).collect()
}

/// Draws labeled rows from the blob law: unit-variance isotropic Gaussians
/// at the given centers, balanced labels, row order shuffled.
fn draw_blob_rows(
    centers: &[Vec<f64>],
    total: usize,
    rng: &mut RngStream,
) -> (Matrix, Vec<usize>) {
    let d = centers[0].len();
    let mut x = Vec::with_capacity(total * d);
    let mut y = Vec::with_capacity(total);
    for (k, &count) in balanced_counts(total, centers.len()).iter().enumerate() {
        for _ in 0..count {
            for &c in &centers[k] {
                x.push(c + rng.normal());
            }
            y.push(k);
        }
    }
    let x = Matrix::from_vec(total, d, x).expect("finite by construction");
    let perm = rng.permutation(total);
    let shuffled_y = perm.iter().map(|&i| y[i]).collect();
    (x.select_rows(&perm), shuffled_y)
}

/// Rotates the first two dims of every row by `deg` about `center`.
pub fn rotate_about(x: &Matrix, center: (f64, f64), deg: f64) -> Matrix {
    let (sin, cos) = deg.to_radians().sin_cos();
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let (dx, dy) = (row[0] - center.0, row[1] - center.1);
        row[0] = center.0 + cos * dx - sin * dy;
        row[1] = center.1 + sin * dx + cos * dy;
    }
    out
}

/// K isotropic Gaussian clusters; the target is drawn from the source law
/// and pushed through `shift`. Target labels are kept for evaluation.
pub fn gen_blobs(
    class_count: usize,
    feature_dim: usize,
    n_source: usize,
    n_target: usize,
    shift: &ShiftSpec,
    seed: u64,
) -> Result<DomainDataset> {
    if class_count < 2 {
        return Err(Error::BadSpec(format!("need at least 2 classes, got {class_count}")));
    }
    if feature_dim < 2 {
        return Err(Error::BadSpec(format!("need at least 2 dims, got {feature_dim}")));
    }
    if n_source < 4 * class_count || n_target < 4 * class_count {
        return Err(Error::BadSpec(format!(
            "need at least {} rows per domain, got {n_source} source and {n_target} target",
            4 * class_count
        )));
    }
    shift.validate(feature_dim)?;

    let centers = blob_centers(class_count, feature_dim, seed);
    let (source_x, source_y) =
        draw_blob_rows(&centers, n_source, &mut RngStream::new(derive_seed(seed, 1)));
    let mut tgt_rng = RngStream::new(derive_seed(seed, 2));
    let (raw_target, mut target_y) = draw_blob_rows(&centers, n_target, &mut tgt_rng);

    let rotated = rotate_about(&raw_target, (0.0, 0.0), shift.rotation_deg);
    let target_x = Matrix::from_fn(n_target, feature_dim, |r, c| {
        shift.scale * rotated.get(r, c) + shift.translation[c]
    });

    let mut flip_rng = RngStream::new(derive_seed(seed, 3));
    for label in target_y.iter_mut() {
        if flip_rng.uniform() < shift.label_noise {
            // Flip to a uniform draw over the other classes.
            let other = flip_rng.below(class_count - 1);
            *label = other + usize::from(other >= *label);
        }
    }

    DomainDataset::new(source_x, source_y, target_x, Some(target_y), class_count)
}

/// Draws labeled rows from the two-moons law: class 0 on the upper
/// half-circle, class 1 on the lower one offset to interleave, with
/// Gaussian noise. Row order shuffled.
fn draw_moon_rows(total: usize, noise_sd: f64, rng: &mut RngStream) -> (Matrix, Vec<usize>) {
    let mut x = Vec::with_capacity(total * 2);
    let mut y = Vec::with_capacity(total);
    for (k, &count) in balanced_counts(total, 2).iter().enumerate() {
        for _ in 0..count {
            let t = rng.uniform() * std::f64::consts::PI;
            let (px, py) = if k == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 1.0 - t.sin() - 0.5)
            };
            x.push(px + noise_sd * rng.normal());
            x.push(py + noise_sd * rng.normal());
            y.push(k);
        }
    }
    let x = Matrix::from_vec(total, 2, x).expect("finite by construction");
    let perm = rng.permutation(total);
    let shuffled_y = perm.iter().map(|&i| y[i]).collect();
    (x.select_rows(&perm), shuffled_y)
}

fn centroid(x: &Matrix) -> (f64, f64) {
    let mut cx = 0.0;
    let mut cy = 0.0;
    for r in 0..x.rows() {
        cx += x.get(r, 0);
        cy += x.get(r, 1);
    }
    (cx / x.rows() as f64, cy / x.rows() as f64)
}

/// Two interleaved half-circles (K = 2, d = 2); the target is a fresh draw
/// rotated by `rotation_deg` about its own centroid.
pub fn gen_moons(
    n_source: usize,
    n_target: usize,
    rotation_deg: f64,
    noise_sd: f64,
    seed: u64,
) -> Result<DomainDataset> {
    if n_source < 8 || n_target < 8 {
        return Err(Error::BadSpec(format!(
            "need at least 8 rows per domain, got {n_source} source and {n_target} target"
        )));
    }
    if !noise_sd.is_finite() || noise_sd < 0.0 || !rotation_deg.is_finite() {
        return Err(Error::BadSpec("noise_sd must be finite and nonnegative".into()));
    }
    let (source_x, source_y) =
        draw_moon_rows(n_source, noise_sd, &mut RngStream::new(derive_seed(seed, 1)));
    let (raw_target, target_y) =
        draw_moon_rows(n_target, noise_sd, &mut RngStream::new(derive_seed(seed, 2)));
    let target_x = rotate_about(&raw_target, centroid(&raw_target), rotation_deg);
    DomainDataset::new(source_x, source_y, target_x, Some(target_y), 2)
}

fn fmt_feature(v: f64) -> String {
    // Display emits the shortest decimal that parses back to the same f64.
    let mut s = String::new();
    write!(s, "{v}").expect("in-memory write");
    s
}

/// Writes `domain,label,f0,...`: source rows first (their labels), then
/// target rows (held-out labels, or -1 when absent).
pub fn save_csv(ds: &DomainDataset, path: &Path) -> Result<()> {
    let d = ds.feature_dim();
    let mut out = String::from("domain,label");
    for c in 0..d {
        write!(out, ",f{c}").expect("in-memory write");
    }
    out.push('\n');
    for r in 0..ds.source_x.rows() {
        write!(out, "source,{}", ds.source_y[r]).expect("in-memory write");
        for c in 0..d {
            out.push(',');
            out.push_str(&fmt_feature(ds.source_x.get(r, c)));
        }
        out.push('\n');
    }
    for r in 0..ds.target_x.rows() {
        match &ds.target_y {
            Some(labels) => write!(out, "target,{}", labels[r]).expect("in-memory write"),
            None => out.push_str("target,-1"),
        }
        for c in 0..d {
            out.push(',');
            out.push_str(&fmt_feature(ds.target_x.get(r, c)));
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

/// Reads the format written by `save_csv`. Rows may interleave domains;
/// order is preserved within each domain. K is inferred from the labels.
pub fn load_csv(path: &Path) -> Result<DomainDataset> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));

    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file"))?;
    let head: Vec<&str> = header.split(',').collect();
    if head.len() < 3 || head[0] != "domain" || head[1] != "label" {
        return Err(parse_err(1, "header must start with domain,label,f0"));
    }
    for (c, field) in head[2..].iter().enumerate() {
        if *field != format!("f{c}") {
            return Err(parse_err(1, format!("feature column {c} is named {field}")));
        }
    }
    let d = head.len() - 2;

    let mut source_x = Vec::new();
    let mut source_y = Vec::new();
    let mut target_x = Vec::new();
    let mut target_labels: Vec<Option<usize>> = Vec::new();
    for (line, raw) in lines {
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != d + 2 {
            return Err(Error::InconsistentWidth { line, expected: d, got: fields.len() - 2 });
        }
        let label: i64 = fields[1]
            .parse()
            .map_err(|_| parse_err(line, format!("bad label {}", fields[1])))?;
        if label < -1 {
            return Err(parse_err(line, format!("bad label {label}")));
        }
        let mut row = Vec::with_capacity(d);
        for field in &fields[2..] {
            let v: f64 =
                field.parse().map_err(|_| parse_err(line, format!("bad feature {field}")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("non-finite feature {field}")));
            }
            row.push(v);
        }
        match fields[0] {
            "source" => {
                if label < 0 {
                    return Err(parse_err(line, "source row without a label"));
                }
                source_x.extend(row);
                source_y.push(label as usize);
            }
            "target" => {
                target_x.extend(row);
                target_labels.push((label >= 0).then_some(label as usize));
            }
            tag => {
                return Err(Error::UnknownDomainTag { line, tag: tag.to_string() });
            }
        }
    }

    let n = source_y.len();
    let m = target_labels.len();
    if n == 0 {
        return Err(Error::EmptyInput("source rows"));
    }
    if m == 0 {
        return Err(Error::EmptyInput("target rows"));
    }
    let labeled = target_labels.iter().filter(|l| l.is_some()).count();
    let target_y = if labeled == 0 {
        None
    } else if labeled == m {
        Some(target_labels.into_iter().map(|l| l.expect("all labeled")).collect())
    } else {
        return Err(parse_err(0, "target rows mix labeled and unlabeled"));
    };
    let max_label = source_y
        .iter()
        .copied()
        .chain(target_y.iter().flatten().copied())
        .max()
        .expect("n >= 1");
    DomainDataset::new(
        Matrix::from_vec(n, d, source_x)?,
        source_y,
        Matrix::from_vec(m, d, target_x)?,
        target_y,
        max_label + 1,
    )
}

/// How each batch mixes the two domains.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BatchMode {
    /// Counts proportional to the dataset sizes, source rounded half-up.
    Proportional { batch_size: usize },
    /// Fixed per-domain counts.
    Fixed { n_src: usize, n_tgt: usize },
}

/// One batch: dataset row indices per domain.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchIndices {
    source_rows: Vec<usize>,
    target_rows: Vec<usize>,
}

impl BatchIndices {
    pub fn source_rows(&self) -> &[usize] {
        &self.source_rows
    }

    pub fn target_rows(&self) -> &[usize] {
        &self.target_rows
    }
}

/// One epoch of mixed batches.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BatchPlan {
    batches: Vec<BatchIndices>,
    n_src: usize,
    n_tgt: usize,
}

impl BatchPlan {
    pub fn batches(&self) -> &[BatchIndices] {
        &self.batches
    }

    /// Per-batch (source, target) row counts.
    pub fn counts(&self) -> (usize, usize) {
        (self.n_src, self.n_tgt)
    }
}

/// Hands out indices from seeded permutations, chaining a fresh one when
/// exhausted, so use counts within an epoch differ by at most one.
struct PermChain {
    len: usize,
    perm: Vec<usize>,
    cursor: usize,
    rng: RngStream,
}

impl PermChain {
    fn new(len: usize, seed: u64) -> Self {
        let mut rng = RngStream::new(seed);
        let perm = rng.permutation(len);
        PermChain { len, perm, cursor: 0, rng }
    }

    fn take(&mut self, count: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            if self.cursor == self.perm.len() {
                self.perm = self.rng.permutation(self.len);
                self.cursor = 0;
            }
            out.push(self.perm[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Plans one epoch over `n` source and `m` target rows. `min_rows` is the
/// per-domain floor set by the run's alignment variant. The epoch length is
/// the number of batches needed to cover the source set.
pub fn compose_batches(
    n: usize,
    m: usize,
    mode: BatchMode,
    min_rows: usize,
    seed: u64,
) -> Result<BatchPlan> {
    if n == 0 {
        return Err(Error::EmptyInput("source rows"));
    }
    if m == 0 {
        return Err(Error::EmptyInput("target rows"));
    }
    let (n_src, n_tgt) = match mode {
        BatchMode::Proportional { batch_size } => {
            if batch_size < 4 {
                return Err(Error::BadSpec(format!("batch size {batch_size} below 4")));
            }
            // Round half-up in exact integer arithmetic.
            let n_src = (2 * batch_size * n + (n + m)) / (2 * (n + m));
            (n_src, batch_size - n_src)
        }
        BatchMode::Fixed { n_src, n_tgt } => (n_src, n_tgt),
    };
    for (domain, got) in [(Domain::Source, n_src), (Domain::Target, n_tgt)] {
        if got < min_rows {
            return Err(Error::InsufficientDomainSamples { domain, got, need: min_rows });
        }
    }

    let mut src_chain = PermChain::new(n, derive_seed(seed, 0));
    let mut tgt_chain = PermChain::new(m, derive_seed(seed, 1));
    let batch_count = n.div_ceil(n_src);
    let batches = (0..batch_count)
        .map(|_| BatchIndices {
            source_rows: src_chain.take(n_src),
            target_rows: tgt_chain.take(n_tgt),
        })
        .collect();
    Ok(BatchPlan { batches, n_src, n_tgt })
}

/// Stacks a batch as source rows then target rows. Target labels are
/// withheld: every target row gets `None`.
pub fn materialize_batch(
    ds: &DomainDataset,
    batch: &BatchIndices,
) -> (Matrix, DomainMask, Vec<Option<usize>>) {
    let mut rows = Vec::with_capacity(batch.source_rows.len() + batch.target_rows.len());
    let mut tags = Vec::with_capacity(rows.capacity());
    let mut labels = Vec::with_capacity(rows.capacity());
    let source = ds.source_x.select_rows(&batch.source_rows);
    for (k, &i) in batch.source_rows.iter().enumerate() {
        rows.extend_from_slice(source.row(k));
        tags.push(Domain::Source);
        labels.push(Some(ds.source_y[i]));
    }
    let target = ds.target_x.select_rows(&batch.target_rows);
    for k in 0..batch.target_rows.len() {
        rows.extend_from_slice(target.row(k));
        tags.push(Domain::Target);
        labels.push(None);
    }
    let x = Matrix::from_vec(tags.len(), ds.feature_dim(), rows).expect("rows are finite");
    (x, DomainMask::new(tags), labels)
}
