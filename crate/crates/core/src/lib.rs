//! Speaker-identification CNNs, interference-mixing data augmentation and
//! LayerCAM saliency analysis at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`dsp`] and [`wav`]: STFT/ISTFT, log-Mel filterbanks, masked
//!   resynthesis with a donor phase, SNR, and PCM-16 WAV I/O.
//! - [`autodiff`]: a small tape-based reverse-mode engine over dense `f64`
//!   tensors, able to return gradients for intermediate activations.
//! - [`net`] and [`checkpoint`]: the SE-ResNet-lite speaker classifier with
//!   per-stage activation taps, and its binary checkpoint format.
//! - [`augment`]: waveform mixing, the vanilla and activation-based DA
//!   objectives, and the training loop.
//! - [`layercam`]: per-stage LayerCAM maps, normalisation, upsampling and
//!   four-stage fusion, plus grid/PGM export.
//! - [`corpus`]: the synthetic speaker/interference corpus, scenario
//!   builders, WAV ingestion and manifests.
//! - [`analysis`]: top-k accuracy, SPR/IPR, saliency-mask denoising and the
//!   deletion test.
//! - [`experiment`] and [`cli`]: end-to-end runs wiring everything together.

pub mod analysis;
pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod dsp;
pub mod error;
pub mod experiment;
pub mod layercam;
pub mod net;
pub mod wav;

pub use error::{Error, Result};
