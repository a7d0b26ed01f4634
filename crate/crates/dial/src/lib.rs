//! DomaIn Alignment Layers (DIAL) for unsupervised domain adaptation.
//!
//! A small feed-forward network is trained on labeled source rows and
//! unlabeled target rows at once. DA-layers inside the network standardize
//! each channel with statistics estimated separately per domain, so both
//! domains are mapped to a shared reference distribution; an entropy term on
//! the target predictions supplies the unsupervised training signal.
//!
//! Module map:
//! - [`numeric`]: dense row-major matrices, seeded RNG streams, column
//!   statistics, softmax.
//! - [`align`]: per-channel alignment parameter estimation (NormalML,
//!   NormalMAP, LaplaceML) and the affine-free transform that applies them.
//! - [`dalayer`]: the DA-layer itself: per-domain forward, exact backward
//!   through the batch statistics, freezing for inference, and the optional
//!   sparse penalty on centered features.
//! - [`net`]: architecture description, parameter store, forward/backward,
//!   prediction, checkpointing.
//! - [`objective`]: source cross-entropy, target entropy, and the combined
//!   training objective.
//! - [`data`]: synthetic domain-shift generators, the CSV interchange
//!   format, and mixed-batch composition.
//! - [`runner`]: configuration, SGD with momentum, the training loop,
//!   evaluation, the lambda sweep, the ablation grid, and gradient checking.

pub mod align;
pub mod dalayer;
pub mod data;
pub mod error;
pub mod net;
pub mod numeric;
pub mod objective;
pub mod runner;

pub use error::{Error, Result};
