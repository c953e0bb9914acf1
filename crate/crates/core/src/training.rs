//! Joint optimization of the analyzer and synthesizer.
//!
//! The objective is
//! `alpha1 * f0 + alpha2 * kl + mel + nsf`: F0-row regression, the time-averaged
//! KL divergence of the posterior from a unit Gaussian, the log-mel
//! reconstruction error of the decoder, and a multi-resolution STFT distance
//! on the synthesized waveform.
//!
//! Two routes compute the loss. The array route ([`total_loss`]) works on
//! plain outputs and is what tools report; the tensor route
//! ([`forward_losses`]) builds the autograd graph for training. Tests check
//! that they agree.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::analyzer::{latent_f0, AnalyzerArch, AnalyzerParams, LatentCode, LatentDistribution};
use crate::audio::{load_wav, AudioClip};
use crate::error::{Error, Result};
use crate::f0::{estimate_f0, normalize_f0, F0Contour, F0Range};
use crate::spectral::{default_loss_resolutions, multi_res_stft_loss, MelExtractor, MelSpectrogram, StftConfig, MEL_FLOOR, STFT_LOSS_FLOOR};
use crate::sources::{gaussian, harmonic_source, noise_source, upsample_f0};
use crate::synthesizer::{sine_excitation, SynthArch, SynthParams, BRANCH_NOISE_STD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub rng_seed: u64,
    pub data_dir: PathBuf,
    /// Optional directory of `<stem>.f0` ground-truth contours; when absent the
    /// data directory is searched, then the built-in estimator is used.
    pub f0_dir: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
    #[serde(rename = "L")]
    pub latent_dim: usize,
    pub mel_order: usize,
    pub sample_rate: u32,
    pub frame_period_ms: f64,
    pub fft_size: usize,
    pub window_length: usize,
    pub f0_floor: f64,
    pub f0_ceil: f64,
    pub analyzer_channels: usize,
    pub synth_channels: usize,
    pub num_harmonics: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    /// Frames per training crop seen by the analyzer.
    pub crop_frames: usize,
    /// Frames of each crop rendered by the synthesizer for the waveform
    /// loss. Synthesis runs at the sample rate and dominates the cost of a
    /// step, so it sees a random window of the crop.
    pub synth_crop_frames: usize,
    /// Steps over which the KL weight ramps linearly from 0 to `alpha2`.
    pub kl_warmup_steps: u64,
    pub grad_clip: f64,
    pub loss_resolutions: Vec<StftConfig>,
    /// Latent F0 values at or below this are treated as unvoiced at synthesis.
    pub voicing_threshold: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            alpha1: 100.0,
            alpha2: 0.01,
            learning_rate: 2e-4,
            batch_size: 4,
            max_steps: 5000,
            rng_seed: 0,
            data_dir: PathBuf::from("data"),
            f0_dir: None,
            checkpoint_dir: PathBuf::from("checkpoints"),
            latent_dim: 16,
            mel_order: 80,
            sample_rate: 16000,
            frame_period_ms: 5.0,
            fft_size: 1024,
            window_length: 400,
            f0_floor: 60.0,
            f0_ceil: 600.0,
            analyzer_channels: 128,
            synth_channels: 64,
            num_harmonics: 8,
            kernel_size: 3,
            dilations: vec![1, 2, 4, 8, 16],
            crop_frames: 100,
            synth_crop_frames: 32,
            kl_warmup_steps: 10_000,
            grad_clip: 5.0,
            loss_resolutions: default_loss_resolutions(),
            voicing_threshold: 0.08,
            log_every: 10,
            checkpoint_every: 1000,
        }
    }
}

impl TrainConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if !(self.alpha1 > 0.0 && self.alpha2 > 0.0) {
            return bad("alpha1 and alpha2 must be positive");
        }
        if self.latent_dim < 2 {
            return bad("L must be at least 2");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 || self.crop_frames == 0 || self.synth_crop_frames == 0 {
            return bad("batch size and crop length must be positive");
        }
        if self.hop_length() == 0 {
            return bad("frame period shorter than one sample");
        }
        if self.loss_resolutions.is_empty() {
            return bad("at least one STFT loss resolution is required");
        }
        for r in &self.loss_resolutions {
            r.validate()?;
        }
        self.stft().validate()?;
        F0Range::new(self.f0_floor, self.f0_ceil)?;
        Ok(())
    }

    pub fn hop_length(&self) -> usize {
        (self.frame_period_ms * self.sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn stft(&self) -> StftConfig {
        StftConfig::new(self.fft_size, self.hop_length(), self.window_length)
    }

    pub fn f0_range(&self) -> F0Range {
        F0Range {
            floor: self.f0_floor,
            ceil: self.f0_ceil,
        }
    }

    pub fn analyzer_arch(&self) -> AnalyzerArch {
        AnalyzerArch {
            latent_dim: self.latent_dim,
            mel_order: self.mel_order,
            channels: self.analyzer_channels,
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
        }
    }

    pub fn synth_arch(&self) -> SynthArch {
        SynthArch {
            num_harmonics: self.num_harmonics,
            channels: self.synth_channels,
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
            hop_length: self.hop_length(),
            sample_rate: self.sample_rate,
            cond_dim: 2 * self.latent_dim,
        }
    }

    pub fn mel_extractor(&self) -> Result<MelExtractor> {
        MelExtractor::new(self.sample_rate, self.mel_order, self.stft())
    }

    /// KL weight in effect at `step` (1-based) under the linear warm-up.
    pub fn alpha2_at(&self, step: u64) -> f64 {
        if self.kl_warmup_steps == 0 {
            return self.alpha2;
        }
        self.alpha2 * (step as f64 / self.kl_warmup_steps as f64).min(1.0)
    }
}

/// The four loss terms and the weights they were combined with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub f0_term: f64,
    pub kl_term: f64,
    pub mel_term: f64,
    pub nsf_term: f64,
    pub total: f64,
    pub alpha1: f64,
    pub alpha2: f64,
}

impl LossBreakdown {
    pub fn new(f0_term: f64, kl_term: f64, mel_term: f64, nsf_term: f64, alpha1: f64, alpha2: f64) -> Self {
        Self {
            f0_term,
            kl_term,
            mel_term,
            nsf_term,
            total: alpha1 * f0_term + alpha2 * kl_term + mel_term + nsf_term,
            alpha1,
            alpha2,
        }
    }

    fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("f0_term", self.f0_term),
            ("kl_term", self.kl_term),
            ("mel_term", self.mel_term),
            ("nsf_term", self.nsf_term),
            ("total", self.total),
        ]
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite()).map(|(n, _)| n)
    }
}

/// Time-averaged KL divergence of `N(mu, exp(logvar))` from `N(0, I)`:
/// `(1/T) sum_t sum_d 0.5 (exp(logvar) + mu^2 - 1 - logvar)`.
pub fn kl_loss(dist: &LatentDistribution) -> f64 {
    let t = dist.mu.ncols().max(1) as f64;
    let sum: f64 = dist
        .mu
        .iter()
        .zip(dist.logvar.iter())
        .map(|(&m, &lv)| {
            let (m, lv) = (m as f64, lv as f64);
            0.5 * (lv.exp() + m * m - 1.0 - lv)
        })
        .sum();
    sum / t
}

/// Mean squared error between normalized ground-truth F0 and the clamped
/// latent F0 row.
pub fn f0_loss(f0_norm_true: &[f64], z: &LatentCode) -> Result<f64> {
    let pred = latent_f0(z);
    if pred.len() != f0_norm_true.len() {
        return Err(Error::Shape(format!(
            "{} target F0 frames for a code with {} frames",
            f0_norm_true.len(),
            pred.len()
        )));
    }
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(f0_norm_true).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / pred.len() as f64)
}

/// Mean squared log-mel error.
pub fn mel_loss(x: &MelSpectrogram, x_hat: &MelSpectrogram) -> Result<f64> {
    if x.values.dim() != x_hat.values.dim() {
        return Err(Error::Shape(format!(
            "mel {:?} vs reconstruction {:?}",
            x.values.dim(),
            x_hat.values.dim()
        )));
    }
    let n = x.values.len().max(1) as f64;
    Ok(x.values
        .iter()
        .zip(x_hat.values.iter())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / n)
}

/// Ground truth for one utterance.
#[derive(Debug, Clone)]
pub struct LossTargets<'a> {
    pub y: &'a AudioClip,
    pub x: &'a MelSpectrogram,
    pub f0_norm: &'a [f64],
}

/// What the model produced for that utterance.
#[derive(Debug, Clone)]
pub struct ModelOutputs<'a> {
    pub x_hat: &'a MelSpectrogram,
    pub y_hat: &'a AudioClip,
    pub dist: &'a LatentDistribution,
    pub z: &'a LatentCode,
}

/// Full objective with the configured (post-warm-up) weights.
pub fn total_loss(batch: &LossTargets, outputs: &ModelOutputs, cfg: &TrainConfig) -> Result<LossBreakdown> {
    total_loss_weighted(batch, outputs, cfg.alpha1, cfg.alpha2, &cfg.loss_resolutions)
}

pub fn total_loss_weighted(
    batch: &LossTargets,
    outputs: &ModelOutputs,
    alpha1: f64,
    alpha2: f64,
    resolutions: &[StftConfig],
) -> Result<LossBreakdown> {
    if outputs.dist.mu.dim() != outputs.z.z.dim() {
        return Err(Error::Shape("posterior and code shapes differ".into()));
    }
    let f0 = f0_loss(batch.f0_norm, outputs.z)?;
    let kl = kl_loss(outputs.dist);
    let mel = mel_loss(batch.x, outputs.x_hat)?;
    let nsf = multi_res_stft_loss(batch.y, outputs.y_hat, resolutions)?;
    Ok(LossBreakdown::new(f0, kl, mel, nsf, alpha1, alpha2))
}

/// Analyzer and synthesizer trained together.
#[derive(Debug, Clone)]
pub struct Model {
    pub analyzer: AnalyzerParams,
    pub synth: SynthParams,
}

impl Model {
    pub fn init(cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            analyzer: AnalyzerParams::init(cfg.analyzer_arch(), cfg.rng_seed, dtype)?,
            synth: SynthParams::init(cfg.synth_arch(), cfg.rng_seed.wrapping_add(1), dtype)?,
        })
    }

    pub fn dtype(&self) -> DType {
        self.analyzer.dtype()
    }

    /// Every parameter keyed `analyzer/<name>` or `synth/<name>`.
    pub fn named_vars(&self) -> Vec<(String, &candle_core::Var)> {
        let a = self.analyzer.store().iter().map(|(k, v)| (format!("analyzer/{k}"), v));
        let s = self.synth.store().iter().map(|(k, v)| (format!("synth/{k}"), v));
        a.chain(s).collect()
    }

    pub fn deep_clone(&self) -> Result<Self> {
        Ok(Self {
            analyzer: AnalyzerParams {
                arch: self.analyzer.arch.clone(),
                store: self.analyzer.store().deep_clone()?,
            },
            synth: SynthParams {
                arch: self.synth.arch.clone(),
                store: self.synth.store().deep_clone()?,
            },
        })
    }
}

/// Differentiable log-magnitude STFT matching [`crate::spectral::stft`]
/// framing: centred frames, zero padding of `fft_size / 2` on each side.
#[derive(Debug, Clone)]
pub struct TensorStft {
    pub cfg: StftConfig,
    cos: Tensor,
    sin: Tensor,
}

impl TensorStft {
    pub fn new(cfg: StftConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let window = cfg.padded_window();
        let off = cfg.window_offset();
        let (w, bins, n) = (cfg.window_length, cfg.num_bins(), cfg.fft_size);
        let mut c = Vec::with_capacity(w * bins);
        let mut s = Vec::with_capacity(w * bins);
        for j in 0..w {
            let pos = off + j;
            for k in 0..bins {
                let ang = 2.0 * PI * ((k * pos) % n) as f64 / n as f64;
                c.push(window[pos] * ang.cos());
                s.push(window[pos] * ang.sin());
            }
        }
        let dev = Device::Cpu;
        Ok(Self {
            cfg,
            cos: Tensor::from_vec(c, (w, bins), &dev)?.to_dtype(dtype)?,
            sin: Tensor::from_vec(s, (w, bins), &dev)?.to_dtype(dtype)?,
        })
    }

    /// `(batch, n)` signal to `(batch, frames, bins)` log magnitudes.
    pub fn log_magnitude(&self, y: &Tensor) -> Result<Tensor> {
        let (b, n) = y.dims2()?;
        let cfg = &self.cfg;
        let frames = cfg.num_frames(n);
        let half = cfg.fft_size / 2;
        let off = cfg.window_offset();
        let w = cfg.window_length;
        let framed = crate::fused::frames(y, cfg.hop_length, off as isize - half as isize, w, frames)?.reshape((b * frames, w))?;
        // Plain 2-D products: a broadcast batched matmul would repack the basis per item.
        let re = framed.matmul(&self.cos)?.reshape((b, frames, ()))?;
        let im = framed.matmul(&self.sin)?.reshape((b, frames, ()))?;
        let power = ((re.sqr()? + im.sqr()?)? + STFT_LOSS_FLOOR * STFT_LOSS_FLOOR)?;
        Ok((power.log()? * 0.5)?)
    }

    /// Frame mask `(batch, frames, 1)`: a frame counts when its centre lies
    /// inside the unpadded part of the signal.
    fn frame_mask(&self, valid_samples: &[usize], n: usize, dtype: DType) -> Result<Tensor> {
        let frames = self.cfg.num_frames(n);
        let mut m = Vec::with_capacity(valid_samples.len() * frames);
        for &len in valid_samples {
            for t in 0..frames {
                m.push(if t * self.cfg.hop_length < len { 1.0f64 } else { 0.0 });
            }
        }
        Ok(Tensor::from_vec(m, (valid_samples.len(), frames, 1), &Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// A padded training batch. Frame tensors are `(batch, rows, T)`; sample
/// tensors are `(batch, S * hop)` and cover frames
/// `synth_start[i] .. synth_start[i] + S` of each crop, `S = synth_frames`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub mel: Tensor,
    pub hs_linear: Tensor,
    pub ns_linear: Tensor,
    pub f0_norm: Tensor,
    pub frame_mask: Tensor,
    pub wave: Tensor,
    pub excitation: Tensor,
    pub noise: Tensor,
    pub eps: Tensor,
    pub valid_frames: Vec<usize>,
    /// Unpadded samples of each synthesis window.
    pub valid_samples: Vec<usize>,
    pub synth_start: Vec<usize>,
    pub synth_frames: usize,
}

impl Batch {
    /// The code frames each synthesis window is rendered from.
    fn synth_code(&self, z: &Tensor) -> Result<Tensor> {
        let t = z.dims3()?.2;
        if self.synth_frames == t {
            return Ok(z.clone());
        }
        let parts = self
            .synth_start
            .iter()
            .enumerate()
            .map(|(i, &s)| z.narrow(0, i, 1)?.narrow(2, s, self.synth_frames))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Tensor::cat(&parts, 0)?)
    }
}

/// Loss graph for one batch: `(total, [f0, kl, mel, nsf])`, all scalars.
pub fn forward_losses(model: &Model, batch: &Batch, stfts: &[TensorStft], alpha1: f64, alpha2: f64) -> Result<(Tensor, [Tensor; 4])> {
    let (mu, logvar) = model.analyzer.encode_tensor(&batch.mel)?;
    let z = (&mu + (logvar.affine(0.5, 0.0)?.exp()? * &batch.eps)?)?;
    let x_hat = model.analyzer.decode_tensor(&z, &batch.hs_linear, &batch.ns_linear)?;
    let (_, rows, _) = z.dims3()?;
    let m = batch.mel.dims3()?.1 as f64;

    let mask = &batch.frame_mask; // (B, 1, T)
    let n_frames = mask.sum_all()?;

    let f0_row = z.narrow(1, rows - 1, 1)?;
    let f0_term = f0_row
        .broadcast_sub(&batch.f0_norm)?
        .sqr()?
        .broadcast_mul(mask)?
        .sum_all()?
        .div(&n_frames)?;

    let kl_elem = ((logvar.exp()? + mu.sqr()?)? - logvar.affine(1.0, 1.0)?)?.affine(0.5, 0.0)?;
    let kl_term = kl_elem.broadcast_mul(mask)?.sum_all()?.div(&n_frames)?;

    let mel_term = (&batch.mel - &x_hat)?
        .sqr()?
        .broadcast_mul(mask)?
        .sum_all()?
        .div(&n_frames.affine(m, 0.0)?)?;

    let y_hat = model.synth.forward_tensor(&batch.synth_code(&z)?, &batch.excitation, &batch.noise)?;
    let n = y_hat.dims2()?.1;
    let mut nsf_term = Tensor::zeros((), model.dtype(), &Device::Cpu)?;
    for s in stfts {
        let fmask = s.frame_mask(&batch.valid_samples, n, model.dtype())?;
        let d = (s.log_magnitude(&batch.wave)? - s.log_magnitude(&y_hat)?)?.sqr()?;
        let bins = s.cfg.num_bins() as f64;
        let term = d.broadcast_mul(&fmask)?.sum_all()?.div(&fmask.sum_all()?.affine(bins, 0.0)?)?;
        nsf_term = (nsf_term + term)?;
    }

    let total = ((f0_term.affine(alpha1, 0.0)? + kl_term.affine(alpha2, 0.0)?)? + (&mel_term + &nsf_term)?)?;
    Ok((total, [f0_term, kl_term, mel_term, nsf_term]))
}

/// One prepared training utterance.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub name: String,
    pub wave: Vec<f32>,
    /// `M x T` log-mel.
    pub mel: Array2<f32>,
    pub hs_linear: Array2<f32>,
    pub ns_linear: Array2<f32>,
    pub f0: F0Contour,
    pub f0_norm: Vec<f64>,
}

impl Utterance {
    /// Extracts features; the harmonic source is built from `f0`, which is
    /// padded or truncated to the mel frame count.
    pub fn prepare(name: &str, clip: &AudioClip, f0: &F0Contour, cfg: &TrainConfig, noise_seed: u64) -> Result<Self> {
        if clip.sample_rate() != cfg.sample_rate {
            return Err(Error::InvalidInput(format!(
                "`{name}` is at {} Hz, training expects {} Hz",
                clip.sample_rate(),
                cfg.sample_rate
            )));
        }
        let ex = cfg.mel_extractor()?;
        let mel = ex.compute(clip)?.values;
        let t = mel.ncols();
        let mut hz = f0.values().to_vec();
        hz.resize(t, 0.0);
        let f0 = F0Contour::from_hz(hz, cfg.frame_period_ms)?;
        let sources = SourceMels::new(&ex, &f0, cfg.sample_rate, noise_seed)?;
        let hop = cfg.hop_length();
        let wave = clip.fit_to_len(t * hop).into_samples();
        Ok(Self {
            name: name.to_string(),
            wave,
            mel,
            hs_linear: sources.hs_linear,
            ns_linear: sources.ns_linear,
            f0_norm: normalize_f0(&f0, &cfg.f0_range()),
            f0,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.mel.ncols()
    }
}

/// Linear mel magnitudes of the harmonic and noise reference signals.
#[derive(Debug, Clone)]
pub struct SourceMels {
    pub hs_linear: Array2<f32>,
    pub ns_linear: Array2<f32>,
}

impl SourceMels {
    pub fn new(ex: &MelExtractor, f0: &F0Contour, sample_rate: u32, noise_seed: u64) -> Result<Self> {
        let hs = harmonic_source(f0, sample_rate)?;
        let ns = noise_source(hs.len().max(1), sample_rate, noise_seed)?;
        let t = f0.len();
        let fit = |a: Array2<f64>| -> Array2<f32> {
            let mut out = Array2::<f32>::zeros((a.nrows(), t));
            let c = a.ncols().min(t);
            for r in 0..a.nrows() {
                for j in 0..c {
                    out[[r, j]] = a[[r, j]] as f32;
                }
            }
            out
        };
        Ok(Self {
            hs_linear: fit(ex.linear_mel(&hs)?),
            ns_linear: fit(ex.linear_mel(&ns)?),
        })
    }
}

/// Training utterances.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
}

impl Dataset {
    /// Loads every WAV under `cfg.data_dir` (sorted by name). Ground-truth F0
    /// comes from `<stem>.f0` in `cfg.f0_dir` or next to the WAV; otherwise the
    /// built-in estimator supplies it.
    pub fn from_dir(cfg: &TrainConfig) -> Result<Self> {
        let mut wavs = list_wavs(&cfg.data_dir)?;
        wavs.sort();
        if wavs.is_empty() {
            return Err(Error::InvalidInput(format!("no WAV files in {}", cfg.data_dir.display())));
        }
        let mut utterances = Vec::with_capacity(wavs.len());
        for (i, path) in wavs.iter().enumerate() {
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("utt").to_string();
            let clip = load_wav(path)?;
            let f0 = find_f0(&stem, path, cfg.f0_dir.as_deref(), cfg.frame_period_ms)?
                .map(Ok)
                .unwrap_or_else(|| estimate_f0(&clip, cfg.frame_period_ms, cfg.f0_floor, cfg.f0_ceil))?;
            utterances.push(Utterance::prepare(&stem, &clip, &f0, cfg, mix_seed(cfg.rng_seed, 0x5eed_0000 + i as u64))?);
        }
        log::info!("loaded {} training utterances", utterances.len());
        Ok(Self { utterances })
    }

    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }
}

pub(crate) fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav")) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn find_f0(stem: &str, wav: &Path, f0_dir: Option<&Path>, frame_period_ms: f64) -> Result<Option<F0Contour>> {
    let mut candidates = Vec::new();
    if let Some(d) = f0_dir {
        candidates.push(d.join(format!("{stem}.f0")));
    }
    if let Some(parent) = wav.parent() {
        candidates.push(parent.join(format!("{stem}.f0")));
    }
    for c in candidates {
        if c.exists() {
            let sidecar = crate::container::sidecar_path(&c);
            let f0 = if sidecar.exists() {
                F0Contour::load_text(&c)?
            } else {
                crate::f0::load_f0_external(&c, frame_period_ms)?
            };
            return Ok(Some(f0));
        }
    }
    Ok(None)
}

/// SplitMix-style combination of a base seed and a stream index.
pub(crate) fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Draws a batch of random crops for `step`. Everything random comes from a
/// generator seeded by `(seed, step)`, so a resumed run sees the same batches.
pub fn sample_batch(data: &Dataset, cfg: &TrainConfig, step: u64, dtype: DType) -> Result<Batch> {
    if data.is_empty() {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.rng_seed, step));
    let picks: Vec<(usize, usize)> = (0..cfg.batch_size)
        .map(|_| {
            let u = rng.random_range(0..data.len());
            let t = data.utterances[u].num_frames();
            let start = if t > cfg.crop_frames {
                rng.random_range(0..=t - cfg.crop_frames)
            } else {
                0
            };
            (u, start)
        })
        .collect();
    let crops: Vec<(&Utterance, usize)> = picks.iter().map(|&(u, s)| (&data.utterances[u], s)).collect();
    build_batch(&crops, cfg, cfg.crop_frames, &mut rng, dtype)
}

/// Assembles `(utterance, start frame)` crops of `frames` frames each,
/// padding past the end of an utterance and masking the padding. The
/// synthesis window is drawn inside the unpadded part when it fits.
pub fn build_batch(crops: &[(&Utterance, usize)], cfg: &TrainConfig, frames: usize, rng: &mut ChaCha8Rng, dtype: DType) -> Result<Batch> {
    let b = crops.len();
    let m = cfg.mel_order;
    let rows = 2 * cfg.latent_dim;
    let hop = cfg.hop_length();
    let sw = cfg.synth_crop_frames.min(frames);
    let n = sw * hop;
    let log_floor = MEL_FLOOR.ln() as f32;

    let mut mel = vec![log_floor; b * m * frames];
    let mut hs = vec![0.0f32; b * m * frames];
    let mut ns = vec![0.0f32; b * m * frames];
    let mut f0n = vec![0.0f32; b * frames];
    let mut mask = vec![0.0f32; b * frames];
    let mut wave = vec![0.0f32; b * n];
    let mut exc = Vec::with_capacity(b * n);
    let mut noise = Vec::with_capacity(b * n);
    let mut valid_frames = Vec::with_capacity(b);
    let mut valid_samples = Vec::with_capacity(b);
    let mut synth_start = Vec::with_capacity(b);

    for (i, &(u, start)) in crops.iter().enumerate() {
        if u.mel.nrows() != m {
            return Err(Error::Shape(format!("`{}` has mel order {}, expected {m}", u.name, u.mel.nrows())));
        }
        let len = u.num_frames().saturating_sub(start).min(frames);
        for r in 0..m {
            for j in 0..len {
                let dst = (i * m + r) * frames + j;
                mel[dst] = u.mel[[r, start + j]];
                hs[dst] = u.hs_linear[[r, start + j]];
                ns[dst] = u.ns_linear[[r, start + j]];
            }
        }
        for j in 0..len {
            f0n[i * frames + j] = u.f0_norm[start + j] as f32;
            mask[i * frames + j] = 1.0;
        }
        let ws = if len > sw { rng.random_range(0..=len - sw) } else { 0 };
        let w_len = len.saturating_sub(ws).min(sw);
        let mut hz = vec![0.0; sw];
        hz[..w_len].copy_from_slice(&u.f0.values()[start + ws..start + ws + w_len]);
        let s0 = (start + ws) * hop;
        let s_len = w_len * hop;
        wave[i * n..i * n + s_len].copy_from_slice(&u.wave[s0..s0 + s_len]);
        let contour = F0Contour::from_hz(hz, cfg.frame_period_ms)?;
        let e = sine_excitation(&upsample_f0(&contour, hop), cfg.sample_rate, cfg.num_harmonics, rng.random())?;
        exc.extend_from_slice(e.samples());
        noise.extend(gaussian(n, BRANCH_NOISE_STD, rng.random()));
        valid_frames.push(len);
        valid_samples.push(s_len);
        synth_start.push(ws);
    }
    let eps: Vec<f32> = (0..b * rows * frames)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect();
    let dev = Device::Cpu;
    let t = |v: Vec<f32>, shape: &[usize]| -> Result<Tensor> { Ok(Tensor::from_vec(v, shape, &dev)?.to_dtype(dtype)?) };
    Ok(Batch {
        mel: t(mel, &[b, m, frames])?,
        hs_linear: t(hs, &[b, m, frames])?,
        ns_linear: t(ns, &[b, m, frames])?,
        f0_norm: t(f0n, &[b, 1, frames])?,
        frame_mask: t(mask, &[b, 1, frames])?,
        wave: t(wave, &[b, n])?,
        excitation: t(exc, &[b, n])?,
        noise: t(noise, &[b, n])?,
        eps: t(eps, &[b, rows, frames])?,
        valid_frames,
        valid_samples,
        synth_start,
        synth_frames: sw,
    })
}

/// Adam moments, keyed like [`Model::named_vars`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(model: &Model) -> Result<Self> {
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (k, var) in model.named_vars() {
            m.insert(k.clone(), var.as_tensor().zeros_like()?);
            v.insert(k, var.as_tensor().zeros_like()?);
        }
        Ok(Self {
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m,
            v,
        })
    }
}

/// One optimization step on `batch`. The returned breakdown is the loss
/// before the update. A non-finite term aborts without touching parameters.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamState,
    batch: &Batch,
    stfts: &[TensorStft],
    cfg: &TrainConfig,
    step: u64,
) -> Result<LossBreakdown> {
    let alpha2 = cfg.alpha2_at(step);
    let (total, terms) = forward_losses(model, batch, stfts, cfg.alpha1, alpha2)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        f0_term: scalar(&terms[0])?,
        kl_term: scalar(&terms[1])?,
        mel_term: scalar(&terms[2])?,
        nsf_term: scalar(&terms[3])?,
        total: scalar(&total)?,
        alpha1: cfg.alpha1,
        alpha2,
    };
    if let Some(term) = breakdown.non_finite_term() {
        return Err(Error::NonFinite { term, step });
    }
    let grads = total.backward()?;

    let vars = model.named_vars();
    let mut gs = Vec::with_capacity(vars.len());
    let mut sq = 0.0f64;
    for (_, var) in &vars {
        let g = match grads.get(var.as_tensor()) {
            Some(g) => g.clone(),
            None => var.as_tensor().zeros_like()?,
        };
        sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        gs.push(g);
    }
    let norm = sq.sqrt();
    if !norm.is_finite() {
        return Err(Error::NonFinite { term: "gradient", step });
    }
    let clip = if cfg.grad_clip > 0.0 && norm > cfg.grad_clip {
        cfg.grad_clip / norm
    } else {
        1.0
    };

    opt.step += 1;
    let bc1 = 1.0 - opt.beta1.powi(opt.step as i32);
    let bc2 = 1.0 - opt.beta2.powi(opt.step as i32);
    for ((key, var), g) in vars.iter().zip(gs) {
        let g = g.affine(clip, 0.0)?;
        let m = opt.m.get(key).ok_or_else(|| Error::InvalidInput(format!("optimizer lacks `{key}`")))?;
        let v = opt.v.get(key).ok_or_else(|| Error::InvalidInput(format!("optimizer lacks `{key}`")))?;
        let m_new = (m.affine(opt.beta1, 0.0)? + g.affine(1.0 - opt.beta1, 0.0)?)?;
        let v_new = (v.affine(opt.beta2, 0.0)? + g.sqr()?.affine(1.0 - opt.beta2, 0.0)?)?;
        let denom = v_new.affine(1.0 / bc2, 0.0)?.sqrt()?.affine(1.0, opt.eps)?;
        let update = m_new.affine(cfg.learning_rate / bc1, 0.0)?.div(&denom)?;
        if cfg.learning_rate != 0.0 {
            var.set(&(var.as_tensor() - update)?.detach())?;
        }
        opt.m.insert(key.clone(), m_new.detach());
        opt.v.insert(key.clone(), v_new.detach());
    }
    Ok(breakdown)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub f0_term: f64,
    pub kl_term: f64,
    pub mel_term: f64,
    pub nsf_term: f64,
    pub total: f64,
    pub wall_time: f64,
}

/// Line-delimited JSON training log.
pub struct TrainingLog {
    out: BufWriter<File>,
    start: Instant,
}

impl TrainingLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            start: Instant::now(),
        })
    }

    pub fn append(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            out: BufWriter::new(f),
            start: Instant::now(),
        })
    }

    pub fn write(&mut self, step: u64, l: &LossBreakdown) -> Result<()> {
        let rec = LogRecord {
            step,
            f0_term: l.f0_term,
            kl_term: l.kl_term,
            mel_term: l.mel_term,
            nsf_term: l.nsf_term,
            total: l.total,
            wall_time: self.start.elapsed().as_secs_f64(),
        };
        serde_json::to_writer(&mut self.out, &rec)?;
        self.out.write_all(b"\n").map_err(|e| Error::io("<training log>", e))?;
        self.out.flush().map_err(|e| Error::io("<training log>", e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Vec<LogRecord>> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| Ok(serde_json::from_str(l)?))
            .collect()
    }
}

/// Training state: model, optimizer, data and the loss history.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub opt: AdamState,
    /// Completed steps.
    pub step: u64,
    pub history: Vec<LossBreakdown>,
    data: Dataset,
    stfts: Vec<TensorStft>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, data: Dataset) -> Result<Self> {
        let model = Model::init(&cfg, DType::F32)?;
        let opt = AdamState::new(&model)?;
        Self::resume(cfg, data, model, opt, 0)
    }

    pub fn resume(cfg: TrainConfig, data: Dataset, model: Model, opt: AdamState, step: u64) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::InvalidInput("empty dataset".into()));
        }
        let stfts = cfg
            .loss_resolutions
            .iter()
            .map(|r| TensorStft::new(*r, model.dtype()))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg,
            model,
            opt,
            step,
            history: Vec::new(),
            data,
            stfts,
        })
    }

    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn step(&mut self) -> Result<LossBreakdown> {
        let step = self.step + 1;
        let batch = sample_batch(&self.data, &self.cfg, step, self.model.dtype())?;
        let l = train_step(&mut self.model, &mut self.opt, &batch, &self.stfts, &self.cfg, step)?;
        self.step = step;
        self.history.push(l);
        Ok(l)
    }

    /// Runs until `max_steps`, logging every step to `log` and writing a
    /// checkpoint every `checkpoint_every` steps and at the end.
    pub fn run(&mut self, mut log: Option<&mut TrainingLog>, checkpoint: Option<&Path>) -> Result<()> {
        while self.step < self.cfg.max_steps {
            let l = self.step()?;
            if let Some(log) = log.as_deref_mut() {
                log.write(self.step, &l)?;
            }
            if self.cfg.log_every > 0 && self.step % self.cfg.log_every == 0 {
                log::info!(
                    "step {} total {:.4} f0 {:.5} kl {:.3} mel {:.4} nsf {:.4}",
                    self.step,
                    l.total,
                    l.f0_term,
                    l.kl_term,
                    l.mel_term,
                    l.nsf_term
                );
            }
            if let Some(dir) = checkpoint {
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.step % every == 0) || self.step == self.cfg.max_steps {
                    self.save(dir)?;
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tail: Vec<LossBreakdown> = self.history.iter().rev().take(20).rev().copied().collect();
        crate::checkpoint::save_checkpoint(&self.model, &self.opt, self.step, &self.cfg, &tail, dir)
    }
}
