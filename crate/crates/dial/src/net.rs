//! The trainable network: dense layers, ReLU, and DA-layers in sequence.
//!
//! Parameters live in a flat `ParamStore` (values plus gradient buffers) so
//! the optimizer and the gradient checker can walk every scalar uniformly.
//! DA-layers are stateful but parameter-free unless their optional affine
//! stage is enabled, in which case the per-channel scale and shift are
//! ordinary trainable tensors (excluded from weight decay, like biases).

use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::align::{self, ReferenceVariant};
use crate::dalayer::{self, DaCache, DaLayerState, Domain, DomainMask, LayerMode};
use crate::error::{Error, Result};
use crate::numeric::{Matrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum LayerSpec {
    Dense { input: usize, output: usize },
    Relu,
    DaLayer { variant: ReferenceVariant, sparse_weight: f64, affine: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    /// Dense weight matrix, row-major output x input. Subject to decay.
    Weight { rows: usize, cols: usize },
    Bias,
    /// Per-channel affine scale of a DA-layer.
    Scale,
    /// Per-channel affine shift of a DA-layer.
    Shift,
}

#[derive(Clone, Debug)]
struct ParamTensor {
    values: Vec<f64>,
    grads: Vec<f64>,
    kind: ParamKind,
}

/// Flat store of every trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct ParamStore {
    tensors: Vec<ParamTensor>,
}

impl ParamStore {
    fn push(&mut self, values: Vec<f64>, kind: ParamKind) -> usize {
        let grads = vec![0.0; values.len()];
        self.tensors.push(ParamTensor { values, grads, kind });
        self.tensors.len() - 1
    }

    pub fn tensor_count(&self) -> usize {
        self.tensors.len()
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.values.len()).sum()
    }

    pub fn kind(&self, i: usize) -> ParamKind {
        self.tensors[i].kind
    }

    pub fn values(&self, i: usize) -> &[f64] {
        &self.tensors[i].values
    }

    pub fn values_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].values
    }

    pub fn grads(&self, i: usize) -> &[f64] {
        &self.tensors[i].grads
    }

    pub fn grads_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.tensors[i].grads
    }

    /// Mutable values alongside their gradients, for optimizer updates.
    pub fn values_and_grads(&mut self, i: usize) -> (&mut [f64], &[f64]) {
        let t = &mut self.tensors[i];
        (&mut t.values, &t.grads)
    }

    pub fn zero_grads(&mut self) {
        for t in self.tensors.iter_mut() {
            t.grads.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Sum of squared dense weights. Biases and affine parameters are
    /// excluded from weight decay.
    pub fn param_sq_norm(&self) -> f64 {
        let mut s = 0.0;
        for t in &self.tensors {
            if matches!(t.kind, ParamKind::Weight { .. }) {
                for v in &t.values {
                    s += v * v;
                }
            }
        }
        s
    }

    /// Reads scalar `j` of the flattened parameter vector.
    pub fn get_flat(&self, mut j: usize) -> f64 {
        for t in &self.tensors {
            if j < t.values.len() {
                return t.values[j];
            }
            j -= t.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn set_flat(&mut self, mut j: usize, v: f64) {
        for t in self.tensors.iter_mut() {
            if j < t.values.len() {
                t.values[j] = v;
                return;
            }
            j -= t.values.len();
        }
        panic!("flat index out of range");
    }

    pub fn grad_flat(&self, mut j: usize) -> f64 {
        for t in &self.tensors {
            if j < t.grads.len() {
                return t.grads[j];
            }
            j -= t.grads.len();
        }
        panic!("flat index out of range");
    }
}

#[derive(Clone, Debug)]
enum Layer {
    Dense { w: usize, b: usize, input: usize, output: usize },
    Relu,
    Da { state: DaLayerState, scale: Option<usize>, shift: Option<usize> },
}

#[derive(Clone, Debug)]
pub struct Network {
    arch: Vec<LayerSpec>,
    layers: Vec<Layer>,
    input_dim: usize,
    output_dim: usize,
}

#[derive(Clone, Copy)]
pub enum ForwardMode<'a> {
    Train(&'a DomainMask),
    FrozenSource,
    FrozenTarget,
}

impl ForwardMode<'_> {
    fn frozen_domain(&self) -> Option<Domain> {
        match self {
            ForwardMode::Train(_) => None,
            ForwardMode::FrozenSource => Some(Domain::Source),
            ForwardMode::FrozenTarget => Some(Domain::Target),
        }
    }
}

enum StepCache {
    Dense { input: Matrix },
    Relu { active: Vec<bool> },
    Da { cache: DaCache, pre_affine: Option<Matrix> },
}

/// Per-batch record of a training forward, consumed by `backward`.
pub struct ForwardTrace {
    steps: Vec<StepCache>,
    sparse_penalties: Vec<f64>,
    train: bool,
    logits_shape: (usize, usize),
}

impl ForwardTrace {
    /// Sparse penalty of each DA-layer, in layer order.
    pub fn sparse_penalties(&self) -> &[f64] {
        &self.sparse_penalties
    }

    /// Summed per-layer sparse penalties for the batch.
    pub fn sparse_total(&self) -> f64 {
        self.sparse_penalties.iter().sum()
    }
}

/// Builds the network and He-initialized parameters from an architecture.
pub fn build(arch: &[LayerSpec], seed: u64) -> Result<(Network, ParamStore)> {
    if arch.is_empty() {
        return Err(Error::BadArchitecture("architecture is empty".into()));
    }
    let input_dim = match arch[0] {
        LayerSpec::Dense { input, .. } => input,
        _ => {
            return Err(Error::BadArchitecture(
                "first layer must be dense to fix the input width".into(),
            ))
        }
    };
    let mut rng = RngStream::new(seed);
    let mut params = ParamStore { tensors: Vec::new() };
    let mut layers = Vec::with_capacity(arch.len());
    let mut width = input_dim;
    for (li, spec) in arch.iter().enumerate() {
        match *spec {
            LayerSpec::Dense { input, output } => {
                if input == 0 || output == 0 {
                    return Err(Error::BadArchitecture(format!("layer {li}: zero width")));
                }
                if input != width {
                    return Err(Error::BadArchitecture(format!(
                        "layer {li}: dense input {input} does not match incoming width {width}"
                    )));
                }
                let sd = (2.0 / input as f64).sqrt();
                let mut w = Vec::with_capacity(output * input);
                for _ in 0..output * input {
                    w.push(rng.normal() * sd);
                }
                let wi = params.push(w, ParamKind::Weight { rows: output, cols: input });
                let bi = params.push(vec![0.0; output], ParamKind::Bias);
                layers.push(Layer::Dense { w: wi, b: bi, input, output });
                width = output;
            }
            LayerSpec::Relu => layers.push(Layer::Relu),
            LayerSpec::DaLayer { variant, sparse_weight, affine } => {
                let state = DaLayerState::new(variant, width, sparse_weight)?;
                let (scale, shift) = if affine {
                    let s = params.push(vec![1.0; width], ParamKind::Scale);
                    let t = params.push(vec![0.0; width], ParamKind::Shift);
                    (Some(s), Some(t))
                } else {
                    (None, None)
                };
                layers.push(Layer::Da { state, scale, shift });
            }
        }
    }
    let net = Network { arch: arch.to_vec(), layers, input_dim, output_dim: width };
    Ok((net, params))
}

impl Network {
    pub fn arch(&self) -> &[LayerSpec] {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn da_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Da { .. })).count()
    }

    /// Variants of the DA-layers in order, for reports.
    pub fn da_variants(&self) -> Vec<ReferenceVariant> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Da { state, .. } => Some(state.variant()),
                _ => None,
            })
            .collect()
    }

    /// Estimates and stores frozen alignment parameters for `domain` from a
    /// single pass over `x` (normally the whole domain set). Layer k sees
    /// inputs produced with layers before k already frozen, because each
    /// layer's just-estimated parameters are applied before moving on.
    /// Afterwards every DA-layer is in frozen mode. Idempotent.
    pub fn freeze_domain(&mut self, params: &ParamStore, x: &Matrix, domain: Domain) -> Result<()> {
        if x.rows() == 0 {
            return Err(Error::EmptyInput("freeze_domain"));
        }
        if x.cols() != self.input_dim {
            return Err(Error::ShapeMismatch {
                expected: (x.rows(), self.input_dim),
                got: x.shape(),
            });
        }
        let mut h = x.clone();
        let mut da_index = 0;
        for layer in self.layers.iter_mut() {
            match layer {
                Layer::Dense { w, b, input, output } => {
                    h = dense_forward(&h, params.values(*w), params.values(*b), *input, *output);
                }
                Layer::Relu => relu_inplace(&mut h),
                Layer::Da { state, scale, shift } => {
                    let est = align::estimate(state.variant(), &h).map_err(|e| at_layer(e, da_index))?;
                    h = align::apply(&est, &h)?;
                    state.freeze(domain, est)?;
                    affine_inplace(&mut h, params, *scale, *shift);
                    da_index += 1;
                }
            }
        }
        // Frozen mode becomes active once the target side is stored; a
        // source-only freeze leaves the layers trainable.
        if self.is_frozen_for(Domain::Target) {
            for layer in self.layers.iter_mut() {
                if let Layer::Da { state, .. } = layer {
                    state.set_mode(LayerMode::Frozen)?;
                }
            }
        }
        Ok(())
    }

    /// True once every DA-layer holds frozen parameters for `domain`.
    pub fn is_frozen_for(&self, domain: Domain) -> bool {
        self.layers.iter().all(|l| match l {
            Layer::Da { state, .. } => state.frozen(domain).is_some(),
            _ => true,
        })
    }
}

/// Tags a degenerate-channel failure with the alignment layer it came from.
fn at_layer(e: Error, da_index: usize) -> Error {
    match e {
        Error::DegenerateChannel { channel, value, .. } => {
            Error::DegenerateChannel { channel, value, layer: Some(da_index) }
        }
        other => other,
    }
}

fn dense_forward(x: &Matrix, w: &[f64], b: &[f64], input: usize, output: usize) -> Matrix {
    Matrix::from_fn(x.rows(), output, |i, o| {
        let row = x.row(i);
        let wrow = &w[o * input..(o + 1) * input];
        let mut acc = b[o];
        for j in 0..input {
            acc += row[j] * wrow[j];
        }
        acc
    })
}

fn relu_inplace(h: &mut Matrix) {
    for v in h.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

fn affine_inplace(h: &mut Matrix, params: &ParamStore, scale: Option<usize>, shift: Option<usize>) {
    if let (Some(si), Some(ti)) = (scale, shift) {
        let gamma = params.values(si);
        let beta = params.values(ti);
        let cols = h.cols();
        for r in 0..h.rows() {
            let row = h.row_mut(r);
            for c in 0..cols {
                row[c] = row[c] * gamma[c] + beta[c];
            }
        }
    }
}

/// Runs the network. Train mode estimates per-domain statistics batch-wise
/// and returns a trace for `backward`; frozen modes apply stored statistics
/// row by row and return a trace that cannot be backpropagated.
pub fn forward(
    net: &Network,
    params: &ParamStore,
    x: &Matrix,
    mode: ForwardMode,
) -> Result<(Matrix, ForwardTrace)> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("net::forward"));
    }
    if x.cols() != net.input_dim {
        return Err(Error::ShapeMismatch {
            expected: (x.rows(), net.input_dim),
            got: x.shape(),
        });
    }
    if let ForwardMode::Train(mask) = mode {
        if mask.len() != x.rows() {
            return Err(Error::ShapeMismatch {
                expected: (x.rows(), 1),
                got: (mask.len(), 1),
            });
        }
    }

    let mut h = x.clone();
    let mut steps = Vec::with_capacity(net.layers.len());
    let mut sparse_penalties = Vec::new();
    let train = matches!(mode, ForwardMode::Train(_));
    for layer in &net.layers {
        match layer {
            Layer::Dense { w, b, input, output } => {
                if train {
                    steps.push(StepCache::Dense { input: h.clone() });
                }
                h = dense_forward(&h, params.values(*w), params.values(*b), *input, *output);
            }
            Layer::Relu => {
                if train {
                    steps.push(StepCache::Relu {
                        active: h.data().iter().map(|&v| v > 0.0).collect(),
                    });
                }
                relu_inplace(&mut h);
            }
            Layer::Da { state, scale, shift } => match mode {
                ForwardMode::Train(mask) => {
                    let (y, cache, penalty) = dalayer::forward_train(state, &h, mask)
                        .map_err(|e| at_layer(e, sparse_penalties.len()))?;
                    h = y;
                    sparse_penalties.push(penalty);
                    let pre_affine = scale.is_some().then(|| h.clone());
                    affine_inplace(&mut h, params, *scale, *shift);
                    steps.push(StepCache::Da { cache, pre_affine });
                }
                _ => {
                    let domain = mode.frozen_domain().unwrap();
                    h = dalayer::forward_frozen(state, &h, domain)?;
                    affine_inplace(&mut h, params, *scale, *shift);
                }
            },
        }
    }
    let trace = ForwardTrace { steps, sparse_penalties, train, logits_shape: h.shape() };
    Ok((h, trace))
}

/// Fills the gradient buffers with the exact gradient of
/// <dLogits, logits> + dSparse * sparse_total with respect to every
/// parameter. Buffers are zeroed first, so they hold exactly this batch's
/// gradient afterwards.
pub fn backward(
    net: &Network,
    params: &mut ParamStore,
    trace: &ForwardTrace,
    d_logits: &Matrix,
    d_sparse: f64,
) -> Result<()> {
    if !trace.train {
        return Err(Error::StaleCache("trace was produced by a frozen forward"));
    }
    if d_logits.shape() != trace.logits_shape {
        return Err(Error::StaleCache("dLogits shape does not match the traced forward"));
    }
    if trace.steps.len() != net.layers.len() {
        return Err(Error::StaleCache("trace does not match the network"));
    }
    params.zero_grads();

    let mut g = d_logits.clone();
    for (layer, step) in net.layers.iter().zip(&trace.steps).rev() {
        match (layer, step) {
            (Layer::Dense { w, b, input, output }, StepCache::Dense { input: x }) => {
                let rows = x.rows();
                let mut dw = vec![0.0; output * input];
                let mut db = vec![0.0; *output];
                for i in 0..rows {
                    let xrow = x.row(i);
                    let grow = g.row(i);
                    for o in 0..*output {
                        let gv = grow[o];
                        db[o] += gv;
                        let wrow = &mut dw[o * input..(o + 1) * input];
                        for j in 0..*input {
                            wrow[j] += gv * xrow[j];
                        }
                    }
                }
                let mut gprev = Matrix::zeros(rows, *input);
                {
                    let wv = params.values(*w);
                    for i in 0..rows {
                        let grow = g.row(i);
                        let prow = gprev.row_mut(i);
                        for o in 0..*output {
                            let gv = grow[o];
                            let wrow = &wv[o * input..(o + 1) * input];
                            for j in 0..*input {
                                prow[j] += gv * wrow[j];
                            }
                        }
                    }
                }
                for (dst, src) in params.grads_mut(*w).iter_mut().zip(&dw) {
                    *dst += src;
                }
                for (dst, src) in params.grads_mut(*b).iter_mut().zip(&db) {
                    *dst += src;
                }
                g = gprev;
            }
            (Layer::Relu, StepCache::Relu { active }) => {
                for (v, on) in g.data_mut().iter_mut().zip(active) {
                    if !on {
                        *v = 0.0;
                    }
                }
            }
            (Layer::Da { state, scale, shift }, StepCache::Da { cache, pre_affine }) => {
                if let (Some(si), Some(ti)) = (scale, shift) {
                    let pre = pre_affine.as_ref().expect("affine step cached pre-affine output");
                    let cols = g.cols();
                    let mut dgamma = vec![0.0; cols];
                    let mut dbeta = vec![0.0; cols];
                    for r in 0..g.rows() {
                        let grow = g.row(r);
                        let prow = pre.row(r);
                        for c in 0..cols {
                            dgamma[c] += grow[c] * prow[c];
                            dbeta[c] += grow[c];
                        }
                    }
                    {
                        let gamma = params.values(*si);
                        for r in 0..g.rows() {
                            let grow = g.row_mut(r);
                            for c in 0..cols {
                                grow[c] *= gamma[c];
                            }
                        }
                    }
                    for (dst, src) in params.grads_mut(*si).iter_mut().zip(&dgamma) {
                        *dst += src;
                    }
                    for (dst, src) in params.grads_mut(*ti).iter_mut().zip(&dbeta) {
                        *dst += src;
                    }
                }
                g = dalayer::backward(state, cache, &g, d_sparse)?;
            }
            _ => return Err(Error::StaleCache("trace step does not match layer")),
        }
    }
    Ok(())
}

/// Class predictions by logit argmax; ties go to the lowest class index.
pub fn predict(
    net: &Network,
    params: &ParamStore,
    x: &Matrix,
    mode: ForwardMode,
) -> Result<Vec<usize>> {
    let (logits, _) = forward(net, params, x, mode)?;
    let mut out = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    arch: Vec<LayerSpec>,
    tensors: Vec<Vec<f64>>,
    da_states: Vec<DaLayerState>,
}

/// Writes the architecture, parameters, and DA-layer states (frozen
/// statistics included) as JSON. f64 values round-trip bit-exactly.
pub fn save_checkpoint(path: &Path, net: &Network, params: &ParamStore) -> Result<()> {
    let tensors = (0..params.tensor_count()).map(|i| params.values(i).to_vec()).collect();
    let da_states = net
        .layers
        .iter()
        .filter_map(|l| match l {
            Layer::Da { state, .. } => Some(state.clone()),
            _ => None,
        })
        .collect();
    let file = CheckpointFile { version: 1, arch: net.arch.clone(), tensors, da_states };
    let out = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(BufWriter::new(out), &file)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Network, ParamStore)> {
    let file: CheckpointFile = serde_json::from_reader(BufReader::new(std::fs::File::open(path)?))?;
    if file.version != 1 {
        return Err(Error::Checkpoint(format!("unsupported version {}", file.version)));
    }
    let (mut net, mut params) = build(&file.arch, 0)?;
    if file.tensors.len() != params.tensor_count() {
        return Err(Error::Checkpoint(format!(
            "expected {} tensors, found {}",
            params.tensor_count(),
            file.tensors.len()
        )));
    }
    for (i, values) in file.tensors.iter().enumerate() {
        if values.len() != params.values(i).len() {
            return Err(Error::Checkpoint(format!("tensor {i} has wrong length")));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("tensor {i} has non-finite entries")));
        }
        params.values_mut(i).copy_from_slice(values);
    }
    let mut restored = file.da_states.into_iter();
    for layer in net.layers.iter_mut() {
        if let Layer::Da { state, .. } = layer {
            let s = restored
                .next()
                .ok_or_else(|| Error::Checkpoint("missing DA-layer state".into()))?;
            if s.channels() != state.channels() {
                return Err(Error::Checkpoint("DA-layer width mismatch".into()));
            }
            *state = s;
        }
    }
    if restored.next().is_some() {
        return Err(Error::Checkpoint("extra DA-layer state".into()));
    }
    Ok((net, params))
}
