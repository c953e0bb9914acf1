//! Neural analyzer-synthesizer vocoder with an interpretable latent code.
//!
//! The analyzer maps a log-mel spectrogram to a latent code whose last row
//! is normalized F0; the synthesizer renders a waveform from that code and
//! an explicit F0 control.

pub mod analyzer;
pub mod audio;
pub mod checkpoint;
pub mod container;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod f0;
mod fused;
pub mod nn;
pub mod pipeline;
pub mod sources;
pub mod spectral;
pub mod synthesizer;
pub mod training;

pub use analyzer::{AnalyzerArch, AnalyzerParams, LatentCode, LatentDistribution, Sampling};
pub use audio::{load_wav, resample, save_wav, AudioClip};
pub use error::{Error, Result};
pub use eval::EvalReport;
pub use f0::{estimate_f0, F0Contour, F0Range};
pub use pipeline::Vocoder;
pub use spectral::{mel_spectrogram, MelSpectrogram, StftConfig};
pub use synthesizer::{synthesize, SynthArch, SynthParams};
pub use training::{LossBreakdown, Model, TrainConfig, Trainer};
