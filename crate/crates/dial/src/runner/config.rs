//! Flat `key = value` experiment configuration.
//!
//! Every key is an `ExperimentConfig` field name; unknown and duplicate
//! keys are errors with the offending line number. Unset keys take the
//! benchmark defaults listed in `ExperimentConfig::default`.

use std::path::{Path, PathBuf};

use crate::align::ReferenceVariant;
use crate::data::{self, BatchMode, DomainDataset, ShiftSpec};
use crate::error::{Error, Result};
use crate::net::LayerSpec;

/// Which dataset the run trains on.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Blobs,
    Moons,
    Csv(PathBuf),
}

/// All knobs of one experiment. Defaults are the desk-scale blobs-shift
/// benchmark: 3 classes in 2 dims, 600 rows per domain, a 50-degree
/// rotation plus a (1, -1) translation, and a 64-64 network trained for 60
/// epochs of proportional 32-row batches.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub data_seed: u64,
    pub classes: usize,
    pub dims: usize,
    pub n_source: usize,
    pub n_target: usize,
    pub rotation_deg: f64,
    pub scale: f64,
    pub translation: Vec<f64>,
    pub label_noise: f64,
    pub noise_sd: f64,
    pub hidden: Vec<usize>,
    /// `None` turns the alignment layers off (plain MLP baseline).
    pub variant: Option<ReferenceVariant>,
    pub sparse_on: bool,
    pub affine: bool,
    pub entropy_on: bool,
    pub lambda: f64,
    pub lambda_sparse: f64,
    pub lr0: f64,
    pub momentum: f64,
    pub wd: f64,
    pub epochs: usize,
    pub lr_drop_factor: f64,
    pub lr_drop_at: Vec<f64>,
    pub batch: BatchMode,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSpec::Blobs,
            data_seed: 7,
            classes: 3,
            dims: 2,
            n_source: 600,
            n_target: 600,
            rotation_deg: 50.0,
            scale: 1.0,
            translation: vec![1.0, -1.0],
            label_noise: 0.05,
            noise_sd: 0.1,
            hidden: vec![64, 64],
            variant: Some(ReferenceVariant::NormalMl),
            sparse_on: false,
            affine: true,
            entropy_on: true,
            lambda: 0.1,
            lambda_sparse: 1e-4,
            lr0: 1e-3,
            momentum: 0.9,
            wd: 5e-4,
            epochs: 60,
            lr_drop_factor: 10.0,
            lr_drop_at: vec![0.9],
            batch: BatchMode::Proportional { batch_size: 32 },
            seed: 1,
        }
    }
}

fn cfg_err(line: usize, message: impl Into<String>) -> Error {
    Error::Config { line: Some(line), message: message.into() }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| cfg_err(line, format!("bad value {value} for {key}")))
}

fn parse_bool(line: usize, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(cfg_err(line, format!("{key} wants true or false, got {value}"))),
    }
}

fn parse_list<T: std::str::FromStr>(line: usize, key: &str, value: &str) -> Result<Vec<T>> {
    value.split(',').map(|f| parse_num(line, key, f.trim())).collect()
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    /// Parses the flat `key = value` format. `#` starts a comment; blank
    /// lines are skipped; keys must be distinct and known.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        // Batch-mode and variant sub-fields arrive as separate keys.
        let mut batch_size = 32usize;
        let mut n_src = 32usize;
        let mut n_tgt = 16usize;
        let mut batch_kind = "proportional".to_string();
        let mut variant_name = "normal_ml".to_string();
        let mut epsilon = 1.0f64;
        let mut data_path: Option<PathBuf> = None;
        let mut seen = std::collections::HashSet::new();

        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let (key, value) = stripped
                .split_once('=')
                .ok_or_else(|| cfg_err(line, format!("expected key = value, got {stripped}")))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(cfg_err(line, format!("duplicate key {key}")));
            }
            match key {
                "dataset" => match value {
                    "blobs" => cfg.dataset = DatasetSpec::Blobs,
                    "moons" => cfg.dataset = DatasetSpec::Moons,
                    "csv" => cfg.dataset = DatasetSpec::Csv(PathBuf::new()),
                    _ => return Err(cfg_err(line, format!("unknown dataset {value}"))),
                },
                "data_path" => data_path = Some(PathBuf::from(value)),
                "data_seed" => cfg.data_seed = parse_num(line, key, value)?,
                "classes" => cfg.classes = parse_num(line, key, value)?,
                "dims" => cfg.dims = parse_num(line, key, value)?,
                "n_source" => cfg.n_source = parse_num(line, key, value)?,
                "n_target" => cfg.n_target = parse_num(line, key, value)?,
                "rotation_deg" => cfg.rotation_deg = parse_num(line, key, value)?,
                "scale" => cfg.scale = parse_num(line, key, value)?,
                "translation" => cfg.translation = parse_list(line, key, value)?,
                "label_noise" => cfg.label_noise = parse_num(line, key, value)?,
                "noise_sd" => cfg.noise_sd = parse_num(line, key, value)?,
                "hidden" => cfg.hidden = parse_list(line, key, value)?,
                "variant" => variant_name = value.to_string(),
                "epsilon" => epsilon = parse_num(line, key, value)?,
                "sparse_on" => cfg.sparse_on = parse_bool(line, key, value)?,
                "affine" => cfg.affine = parse_bool(line, key, value)?,
                "entropy_on" => cfg.entropy_on = parse_bool(line, key, value)?,
                "lambda" => cfg.lambda = parse_num(line, key, value)?,
                "lambda_sparse" => cfg.lambda_sparse = parse_num(line, key, value)?,
                "lr0" => cfg.lr0 = parse_num(line, key, value)?,
                "momentum" => cfg.momentum = parse_num(line, key, value)?,
                "wd" => cfg.wd = parse_num(line, key, value)?,
                "epochs" => cfg.epochs = parse_num(line, key, value)?,
                "lr_drop_factor" => cfg.lr_drop_factor = parse_num(line, key, value)?,
                "lr_drop_at" => cfg.lr_drop_at = parse_list(line, key, value)?,
                "batch" => batch_kind = value.to_string(),
                "batch_size" => batch_size = parse_num(line, key, value)?,
                "n_src" => n_src = parse_num(line, key, value)?,
                "n_tgt" => n_tgt = parse_num(line, key, value)?,
                "seed" => cfg.seed = parse_num(line, key, value)?,
                _ => return Err(cfg_err(line, format!("unknown key {key}"))),
            }
        }

        cfg.batch = match batch_kind.as_str() {
            "proportional" => BatchMode::Proportional { batch_size },
            "fixed" => BatchMode::Fixed { n_src, n_tgt },
            _ => {
                return Err(Error::Config {
                    line: None,
                    message: format!("unknown batch mode {batch_kind}"),
                })
            }
        };
        cfg.variant = match variant_name.as_str() {
            "none" => None,
            "normal_ml" => Some(ReferenceVariant::NormalMl),
            "normal_map" => Some(ReferenceVariant::NormalMap { epsilon }),
            "laplace_ml" => Some(ReferenceVariant::LaplaceMl),
            _ => {
                return Err(Error::Config {
                    line: None,
                    message: format!("unknown variant {variant_name}"),
                })
            }
        };
        if let DatasetSpec::Csv(_) = cfg.dataset {
            let path = data_path.ok_or_else(|| Error::Config {
                line: None,
                message: "dataset = csv needs data_path".into(),
            })?;
            cfg.dataset = DatasetSpec::Csv(path);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: String| Error::Config { line: None, message };
        if !self.lr0.is_finite() || self.lr0 <= 0.0 {
            return Err(bad(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(bad(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        for (name, v) in [
            ("wd", self.wd),
            ("lambda", self.lambda),
            ("lambda_sparse", self.lambda_sparse),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(bad(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.epochs == 0 {
            return Err(bad("epochs must be at least 1".into()));
        }
        if !self.lr_drop_factor.is_finite() || self.lr_drop_factor <= 1.0 {
            return Err(bad(format!("lr_drop_factor {} must exceed 1", self.lr_drop_factor)));
        }
        if self.lr_drop_at.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(bad("lr_drop_at fractions must lie in [0, 1]".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(bad("hidden widths must be nonempty and positive".into()));
        }
        if let Some(ReferenceVariant::NormalMap { epsilon }) = self.variant {
            if !epsilon.is_finite() || epsilon < 0.0 {
                return Err(bad(format!("epsilon must be finite and >= 0, got {epsilon}")));
            }
        }
        Ok(())
    }

    /// Entropy weight the training loop actually applies.
    pub fn effective_lambda(&self) -> f64 {
        if self.entropy_on {
            self.lambda
        } else {
            0.0
        }
    }

    /// Per-domain row floor for batch composition, set by the variant.
    pub fn min_rows(&self) -> usize {
        self.variant.map_or(2, |v| v.min_rows())
    }

    /// Dense chain over the hidden widths, an alignment layer after every
    /// dense layer when a variant is configured, ReLU between blocks.
    pub fn architecture(&self, input_dim: usize, classes: usize) -> Vec<LayerSpec> {
        let sparse_weight = if self.sparse_on { 1.0 } else { 0.0 };
        let mut arch = Vec::new();
        let mut width = input_dim;
        for &h in &self.hidden {
            arch.push(LayerSpec::Dense { input: width, output: h });
            if let Some(variant) = self.variant {
                arch.push(LayerSpec::DaLayer { variant, sparse_weight, affine: self.affine });
            }
            arch.push(LayerSpec::Relu);
            width = h;
        }
        arch.push(LayerSpec::Dense { input: width, output: classes });
        if let Some(variant) = self.variant {
            arch.push(LayerSpec::DaLayer { variant, sparse_weight, affine: self.affine });
        }
        arch
    }

    /// Materializes the configured dataset (generation is seeded by
    /// `data_seed`, independent of the training seed).
    pub fn build_dataset(&self) -> Result<DomainDataset> {
        match &self.dataset {
            DatasetSpec::Blobs => {
                let shift = ShiftSpec {
                    rotation_deg: self.rotation_deg,
                    scale: self.scale,
                    translation: self.translation.clone(),
                    label_noise: self.label_noise,
                };
                data::gen_blobs(
                    self.classes,
                    self.dims,
                    self.n_source,
                    self.n_target,
                    &shift,
                    self.data_seed,
                )
            }
            DatasetSpec::Moons => data::gen_moons(
                self.n_source,
                self.n_target,
                self.rotation_deg,
                self.noise_sd,
                self.data_seed,
            ),
            DatasetSpec::Csv(path) => data::load_csv(path),
        }
    }
}
