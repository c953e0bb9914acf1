//! Harmonic-plus-noise neural source-filter synthesizer.
//!
//! A sine excitation built from the F0 control drives a harmonic filter
//! branch; white noise drives a noise branch. Both are dilated convolution
//! stacks at the sample rate, conditioned on the upsampled latent code, and
//! their outputs are summed.

use std::f64::consts::PI;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analyzer::LatentCode;
use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::f0::F0Contour;
use crate::nn::{self, Init, ParamStore, StackArch};
use crate::sources::upsample_f0;

pub const HARMONIC_AMPLITUDE: f64 = 0.1;
pub const EXCITATION_NOISE_STD: f64 = 0.003;
/// Standard deviation of the noise-branch input.
pub const BRANCH_NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthArch {
    pub num_harmonics: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub hop_length: usize,
    pub sample_rate: u32,
    /// Rows of the conditioning code (`2L`).
    pub cond_dim: usize,
}

impl Default for SynthArch {
    fn default() -> Self {
        Self {
            num_harmonics: 8,
            channels: 64,
            kernel_size: 3,
            dilations: vec![1, 2, 4, 8, 16],
            hop_length: 80,
            sample_rate: 16000,
            cond_dim: 32,
        }
    }
}

impl SynthArch {
    fn stack(&self) -> StackArch {
        StackArch {
            channels: self.channels,
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
        }
    }

    /// Receptive field of one filter branch in samples.
    pub fn receptive_field(&self) -> usize {
        self.stack().receptive_field()
    }
}

const BRANCHES: [&str; 2] = ["harm", "noise"];

#[derive(Debug, Clone)]
pub struct SynthParams {
    pub arch: SynthArch,
    pub(crate) store: ParamStore,
}

impl SynthParams {
    pub fn init(arch: SynthArch, seed: u64, dtype: DType) -> Result<Self> {
        if arch.kernel_size % 2 == 0 || arch.hop_length == 0 || arch.channels == 0 {
            return Err(Error::InvalidInput("synth needs an odd kernel, positive hop and channels".into()));
        }
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(seed);
        let c = arch.channels;
        let layers = arch.dilations.len();
        for b in BRANCHES {
            nn::add_pointwise(&mut store, &mut init, &format!("{b}.lift"), 1, c, 1.0)?;
            nn::add_pointwise(&mut store, &mut init, &format!("{b}.cond"), arch.cond_dim, c * layers, 1.0)?;
            for i in 0..layers {
                nn::add_dilated_conv(&mut store, &mut init, &format!("{b}.layers.{i}.conv"), c, c, arch.kernel_size)?;
            }
            nn::add_pointwise(&mut store, &mut init, &format!("{b}.out"), c, 1, 0.1)?;
        }
        Ok(Self { arch, store })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn branch(&self, name: &str, input: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let arch = &self.arch;
        let c = arch.channels;
        // One projection for all layers at frame rate; each layer's slice is
        // interpolated to the sample rate as it is added.
        let cond_all = nn::pointwise(&self.store, &format!("{name}.cond"), cond)?;
        let mut h = nn::pointwise(&self.store, &format!("{name}.lift"), input)?;
        for (i, &d) in arch.dilations.iter().enumerate() {
            let y = nn::dilated_conv(&self.store, &format!("{name}.layers.{i}.conv"), &h, arch.kernel_size, d)?;
            let y = crate::fused::upsample_add(&y, &cond_all.narrow(1, i * c, c)?, arch.hop_length)?;
            h = (h + crate::fused::silu(&y)?)?;
        }
        nn::pointwise(&self.store, &format!("{name}.out"), &h)
    }

    /// `(batch, 2L, T)` code with `(batch, T*hop)` excitation and noise to a
    /// `(batch, T*hop)` waveform. No clipping is applied here.
    pub fn forward_tensor(&self, z: &Tensor, excitation: &Tensor, noise: &Tensor) -> Result<Tensor> {
        let (b, rows, t) = z.dims3()?;
        if rows != self.arch.cond_dim {
            return Err(Error::Shape(format!(
                "code has {rows} rows, synth expects {}",
                self.arch.cond_dim
            )));
        }
        let n = t * self.arch.hop_length;
        for (name, x) in [("excitation", excitation), ("noise", noise)] {
            if x.dims() != [b, n] {
                return Err(Error::Shape(format!("{name} is {:?}, expected [{b}, {n}]", x.dims())));
            }
        }
        let harm = self.branch("harm", &excitation.unsqueeze(1)?, z)?;
        let noise = self.branch("noise", &noise.unsqueeze(1)?, z)?;
        Ok((harm + noise)?.squeeze(1)?)
    }
}

/// Frame-rate code and F0 brought to the sample rate. Code rows are linearly
/// interpolated; F0 follows [`upsample_f0`] (zero across unvoiced runs).
pub fn upsample_controls(z: &LatentCode, f0: &F0Contour, sample_rate: u32) -> Result<(Array2<f32>, Vec<f64>)> {
    if z.num_frames() != f0.len() {
        return Err(Error::Shape(format!(
            "code has {} frames, F0 has {}",
            z.num_frames(),
            f0.len()
        )));
    }
    let hop = f0.hop_length(sample_rate);
    if hop == 0 || f0.is_empty() {
        return Err(Error::InvalidInput("empty contour or zero hop".into()));
    }
    let up = nn::upsample_linear(&z.to_tensor(DType::F32)?, hop)?;
    let cond = crate::analyzer::tensor_to_array(&up)?;
    Ok((cond, upsample_f0(f0, hop)))
}

/// Per-harmonic phase tracks `phi_h(n) = phi_h(n-1) + 2 pi h f0(n) / sr`
/// with random initial phases, one row per harmonic.
pub fn excitation_phases(f0: &[f64], sample_rate: u32, num_harmonics: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let sr = sample_rate as f64;
    (1..=num_harmonics)
        .map(|h| {
            let mut phi = rng.random_range(0.0..2.0 * PI);
            f0.iter()
                .map(|&f| {
                    phi += 2.0 * PI * h as f64 * f / sr;
                    phi
                })
                .collect()
        })
        .collect()
}

/// Sine excitation with flat harmonic amplitude 0.1 and additive Gaussian
/// noise (sigma 0.003) everywhere; harmonics at or above Nyquist are dropped
/// sample by sample.
pub fn sine_excitation(f0: &[f64], sample_rate: u32, num_harmonics: usize, rng_seed: u64) -> Result<AudioClip> {
    if let Some(v) = f0.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidInput(format!("invalid F0 control value {v}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let phases = excitation_phases(f0, sample_rate, num_harmonics, &mut rng);
    let nyquist = sample_rate as f64 / 2.0;
    let noise = Normal::new(0.0, EXCITATION_NOISE_STD).expect("positive std");
    let samples = f0
        .iter()
        .enumerate()
        .map(|(n, &f)| {
            let mut s = 0.0;
            if f > 0.0 {
                for (h, track) in phases.iter().enumerate() {
                    if (h + 1) as f64 * f < nyquist {
                        s += HARMONIC_AMPLITUDE * track[n].sin();
                    }
                }
            }
            (s + noise.sample(&mut rng)) as f32
        })
        .collect();
    AudioClip::new(samples, sample_rate)
}

/// Renders a waveform of `T * hop` samples from a code and an F0 control,
/// clipped to [-1, 1].
pub fn synthesize(z: &LatentCode, f0: &F0Contour, params: &SynthParams, rng_seed: u64) -> Result<AudioClip> {
    let arch = &params.arch;
    if z.z.nrows() != arch.cond_dim {
        return Err(Error::Shape(format!(
            "code has {} rows, synth expects {}",
            z.z.nrows(),
            arch.cond_dim
        )));
    }
    if f0.hop_length(arch.sample_rate) != arch.hop_length {
        return Err(Error::InvalidInput(format!(
            "F0 frame period {} ms does not match the synth hop of {} samples",
            f0.frame_period_ms(),
            arch.hop_length
        )));
    }
    if z.num_frames() != f0.len() {
        return Err(Error::Shape(format!("code has {} frames, F0 has {}", z.num_frames(), f0.len())));
    }
    let n = z.num_frames() * arch.hop_length;
    let f0_up = upsample_f0(f0, arch.hop_length);
    let exc = sine_excitation(&f0_up, arch.sample_rate, arch.num_harmonics, rng_seed)?;
    let noise = crate::sources::gaussian(n, BRANCH_NOISE_STD, rng_seed ^ 0x9e37_79b9_7f4a_7c15);
    let dtype = params.dtype();
    let dev = Device::Cpu;
    let exc_t = Tensor::from_slice(exc.samples(), (1, n), &dev)?.to_dtype(dtype)?;
    let noise_t = Tensor::from_vec(noise, (1, n), &dev)?.to_dtype(dtype)?;
    let y = params.forward_tensor(&z.to_tensor(dtype)?, &exc_t, &noise_t)?;
    let y = y.squeeze(0)?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
    let y = y.into_iter().map(|v| if v.is_finite() { v.clamp(-1.0, 1.0) } else { 0.0 }).collect();
    AudioClip::new(y, arch.sample_rate)
}
