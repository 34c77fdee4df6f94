//! HDR video reconstruction from alternating-exposure LDR sequences.
//!
//! A capture rig that alternates exposure times frame by frame records the
//! scene's full dynamic range across time but never within a single frame.
//! This crate merges a window of `2N+1` such frames into one HDR frame for
//! the window centre: neighbouring frames are aligned to the reference by
//! luminance-based patch attention, saturated or lost regions are
//! hallucinated by a gated convolutional encoder–decoder, the two feature
//! streams are blended adaptively, and a merging network with spectral
//! residual blocks fuses all frames into the final radiance estimate.
//!
//! The stack is CPU-only and self-contained: tensors, reverse-mode
//! autodiff, convolution/FFT kernels, the training loop, data synthesis and
//! quality metrics all live here. Numeric work runs in `f64` and follows a
//! fixed-chunk parallelism discipline ([`exec`]) that makes every result
//! bitwise reproducible — run to run, thread count to thread count, and
//! between the rayon-parallel and sequential execution paths.

pub mod alignment;
pub mod checkpoint;
pub mod config;
pub mod conv;
pub mod datapipe;
pub mod error;
pub mod exec;
pub mod fft;
pub mod fusion;
pub mod graph;
pub mod hallucination;
pub mod imageio;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod patches;
pub mod perceptual;
pub mod radiometry;
pub mod resample;
pub mod runner;
pub mod tensor;
pub mod testutil;

pub use error::{Error, Result};
pub use tensor::Tensor;
