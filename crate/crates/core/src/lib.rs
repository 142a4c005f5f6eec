//! Desk-scale simulator of federated training with frequency-domain spectral
//! tokens, a server-side spectral knowledge bank, cross-attention fusion of
//! retrieved prototypes and prefix/suffix prompting.
//!
//! Module map:
//! - [`tensor`]: dense arrays, reverse-mode autodiff, SGD
//! - [`spectral`]: FFT, magnitude spectra, low-pass projection, tokenizer
//! - [`bank`]: prototype bank with ball projection, top-k retrieval, pruning
//! - [`fusion`]: embedding-wise cross-attention and prompt assembly
//! - [`models`]: toy backbone and task heads
//! - [`federation`]: client sampling, local updates, aggregation, rounds
//! - [`synthdata`]: synthetic multi-modality scenes and partitioners
//! - [`metrics`]: accuracy/F1, PSNR/SSIM, Dice/IoU
//! - [`checkpoint`]: versioned snapshot container

pub mod bank;
pub mod checkpoint;
pub mod federation;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod models;
pub mod rng;
pub mod spectral;
pub mod synthdata;
pub mod tensor;

pub use tensor::{sgd_step, Tape, Tensor, TensorError, Var};
