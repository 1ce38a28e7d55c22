//! Self-supervised speech denoising trained on noisy recordings alone.
//!
//! A single noisy clip is split by an adjacent-sample sub-sampler into an
//! input/target pair; a complex-valued U-Net with a two-stage transformer
//! bottleneck estimates a complex ratio mask on the STFT of the input. The
//! crate carries everything needed to train and evaluate that model on a
//! desktop: WAV I/O and synthetic corpora, STFT/WOLA, a small reverse-mode
//! autodiff engine, the losses, an Adam trainer with the baseline strategies,
//! and SNR / segmental SNR / STOI metrics.

pub mod engine;
pub mod error;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod rng;
pub mod signal_io;
pub mod spectral;
pub mod subsampler;
pub mod training;

pub use error::{Error, Result};
pub use losses::LossWeights;
pub use metrics::MetricsReport;
pub use network::{DenoiserModel, MaskMode, ModelConfig, TstmKind};
pub use signal_io::{SynthKind, SynthSpec, Waveform, WavEncoding};
pub use spectral::{ComplexSpectrogram, StftConfig};
pub use subsampler::{SamplerMode, SubsampleConfig, SubsampleIndexMap};
pub use training::{Strategy, TrainConfig};
