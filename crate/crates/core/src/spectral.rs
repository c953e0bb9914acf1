//! STFT, log-mel features, mel-cepstra and the multi-resolution STFT distance.

use std::f64::consts::PI;
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::container::{read_sidecar, write_sidecar, TensorData, TensorFile};
use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;
pub const DEFAULT_MEL_ORDER: usize = 80;
/// Amplitude floor applied before taking logs of mel energies.
pub const MEL_FLOOR: f64 = 1e-5;
/// Magnitude floor inside the log-magnitude used by the STFT distance.
pub const STFT_LOSS_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowKind {
    Hann,
    Rectangular,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StftConfig {
    pub fft_size: usize,
    pub hop_length: usize,
    pub window_length: usize,
    pub window: WindowKind,
}

impl Default for StftConfig {
    /// 1024-point FFT, 5 ms hop and a 25 ms Hann window at 16 kHz.
    fn default() -> Self {
        Self {
            fft_size: 1024,
            hop_length: 80,
            window_length: 400,
            window: WindowKind::Hann,
        }
    }
}

impl StftConfig {
    pub fn new(fft_size: usize, hop_length: usize, window_length: usize) -> Self {
        Self {
            fft_size,
            hop_length,
            window_length,
            window: WindowKind::Hann,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop_length == 0 {
            return Err(Error::InvalidInput("hop length must be positive".into()));
        }
        if self.window_length > self.fft_size {
            return Err(Error::InvalidInput(format!(
                "window length {} exceeds fft size {}",
                self.window_length, self.fft_size
            )));
        }
        if self.hop_length > self.window_length {
            return Err(Error::InvalidInput(format!(
                "hop length {} exceeds window length {}",
                self.hop_length, self.window_length
            )));
        }
        Ok(())
    }

    pub fn num_bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    /// Frame count for a signal of `num_samples`; frames are centred at `t * hop`.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.hop_length)
    }

    pub fn frame_period_ms(&self, sample_rate: u32) -> f64 {
        self.hop_length as f64 * 1000.0 / sample_rate as f64
    }

    /// The analysis window, zero-padded symmetrically to `fft_size`.
    pub fn padded_window(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.fft_size];
        let offset = self.window_offset();
        let n = self.window_length;
        for (j, slot) in w[offset..offset + n].iter_mut().enumerate() {
            *slot = match self.window {
                WindowKind::Hann => 0.5 - 0.5 * (2.0 * PI * j as f64 / n as f64).cos(),
                WindowKind::Rectangular => 1.0,
            };
        }
        w
    }

    pub(crate) fn window_offset(&self) -> usize {
        (self.fft_size - self.window_length) / 2
    }
}

/// The three resolutions summed by the waveform STFT distance.
pub fn default_loss_resolutions() -> Vec<StftConfig> {
    vec![
        StftConfig::new(512, 80, 240),
        StftConfig::new(1024, 160, 400),
        StftConfig::new(2048, 320, 1200),
    ]
}

/// Complex STFT, `fft_size/2 + 1` rows by `ceil(len / hop)` columns.
pub fn stft(clip: &AudioClip, cfg: &StftConfig) -> Result<Array2<Complex64>> {
    if clip.is_empty() {
        return Err(Error::InvalidInput("stft of an empty clip".into()));
    }
    stft_samples(clip.samples(), cfg)
}

pub(crate) fn stft_samples(samples: &[f32], cfg: &StftConfig) -> Result<Array2<Complex64>> {
    cfg.validate()?;
    let n_fft = cfg.fft_size;
    let frames = cfg.num_frames(samples.len());
    let bins = cfg.num_bins();
    let window = cfg.padded_window();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let half = (n_fft / 2) as isize;

    let mut out = Array2::<Complex64>::zeros((bins, frames));
    let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
    for t in 0..frames {
        let start = (t * cfg.hop_length) as isize - half;
        for (j, slot) in buf.iter_mut().enumerate() {
            let idx = start + j as isize;
            let x = if idx >= 0 && (idx as usize) < samples.len() {
                samples[idx as usize] as f64
            } else {
                0.0
            };
            *slot = Complex64::new(x * window[j], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..bins {
            out[[k, t]] = buf[k];
        }
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters with unit peak, `mel_order` rows by `fft/2+1` bins.
pub fn mel_filterbank(sample_rate: u32, fft_size: usize, mel_order: usize, fmin: f64, fmax: f64) -> Array2<f64> {
    let bins = fft_size / 2 + 1;
    let (lo, hi) = (hz_to_mel(fmin), hz_to_mel(fmax));
    let edges: Vec<f64> = (0..mel_order + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (mel_order + 1) as f64))
        .collect();
    let mut fb = Array2::<f64>::zeros((mel_order, bins));
    for m in 0..mel_order {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * sample_rate as f64 / fft_size as f64;
            let w = if f > left && f <= center {
                (f - left) / (center - left)
            } else if f > center && f < right {
                (right - f) / (right - center)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Log-mel matrix (`mel_order` x frames) with its framing metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Array2<f32>,
    pub sample_rate: u32,
    pub frame_period_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MelSidecar {
    pub sample_rate: u32,
    pub frame_period_ms: f64,
    pub mel_order: usize,
}

impl MelSpectrogram {
    pub fn mel_order(&self) -> usize {
        self.values.nrows()
    }

    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }

    /// A spectrogram where every entry sits at the log floor.
    pub fn floor(mel_order: usize, frames: usize, sample_rate: u32, frame_period_ms: f64) -> Self {
        Self {
            values: Array2::from_elem((mel_order, frames), MEL_FLOOR.ln() as f32),
            sample_rate,
            frame_period_ms,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (rows, cols) = self.values.dim();
        let data = self.values.iter().copied().collect();
        TensorFile::new(vec![rows, cols], TensorData::F32(data))?.write(path)?;
        write_sidecar(
            path,
            &MelSidecar {
                sample_rate: self.sample_rate,
                frame_period_ms: self.frame_period_ms,
                mel_order: rows,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t = TensorFile::read(path)?;
        let (rows, cols) = t.dims2()?;
        let meta: MelSidecar = read_sidecar(path)?;
        if meta.mel_order != rows {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("sidecar mel_order {} but tensor has {rows} rows", meta.mel_order),
            });
        }
        let values = Array2::from_shape_vec((rows, cols), t.data.to_f32())
            .map_err(|e| Error::Shape(e.to_string()))?;
        Ok(Self {
            values,
            sample_rate: meta.sample_rate,
            frame_period_ms: meta.frame_period_ms,
        })
    }
}

/// Log-mel extraction with a cached filterbank.
#[derive(Debug, Clone)]
pub struct MelExtractor {
    pub stft: StftConfig,
    pub sample_rate: u32,
    pub floor: f64,
    filterbank: Array2<f64>,
}

impl MelExtractor {
    /// Filters span 0 Hz to Nyquist.
    pub fn new(sample_rate: u32, mel_order: usize, stft: StftConfig) -> Result<Self> {
        if mel_order < 1 {
            return Err(Error::InvalidInput("mel order must be at least 1".into()));
        }
        stft.validate()?;
        let filterbank = mel_filterbank(sample_rate, stft.fft_size, mel_order, 0.0, sample_rate as f64 / 2.0);
        Ok(Self {
            stft,
            sample_rate,
            floor: MEL_FLOOR,
            filterbank,
        })
    }

    pub fn mel_order(&self) -> usize {
        self.filterbank.nrows()
    }

    pub fn filterbank(&self) -> &Array2<f64> {
        &self.filterbank
    }

    /// Linear mel energies (filterbank applied to STFT magnitudes), unfloored.
    pub fn linear_mel(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        self.check_rate(clip)?;
        let spec = stft(clip, &self.stft)?;
        let mag = spec.mapv(|c| c.norm());
        Ok(self.filterbank.dot(&mag))
    }

    pub fn log_mel_f64(&self, clip: &AudioClip) -> Result<Array2<f64>> {
        let floor = self.floor;
        Ok(self.linear_mel(clip)?.mapv(|v| v.max(floor).ln()))
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        let values = self.log_mel_f64(clip)?.mapv(|v| v as f32);
        Ok(MelSpectrogram {
            values,
            sample_rate: self.sample_rate,
            frame_period_ms: self.stft.frame_period_ms(self.sample_rate),
        })
    }

    fn check_rate(&self, clip: &AudioClip) -> Result<()> {
        if clip.sample_rate() != self.sample_rate {
            return Err(Error::InvalidInput(format!(
                "clip is at {} Hz, extractor expects {} Hz",
                clip.sample_rate(),
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// `log(max(filterbank . |STFT|, floor))` at the clip's own sample rate.
pub fn mel_spectrogram(clip: &AudioClip, mel_order: usize, cfg: &StftConfig) -> Result<MelSpectrogram> {
    MelExtractor::new(clip.sample_rate(), mel_order, *cfg)?.compute(clip)
}

/// Orthonormal DCT-II of one vector, first `n_out` coefficients.
pub fn dct_ii(x: ArrayView1<f64>, n_out: usize) -> Vec<f64> {
    let n = x.len() as f64;
    (0..n_out)
        .map(|k| {
            let scale = if k == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            let s: f64 = x
                .iter()
                .enumerate()
                .map(|(i, v)| v * (PI * k as f64 * (2.0 * i as f64 + 1.0) / (2.0 * n)).cos())
                .sum();
            scale * s
        })
        .collect()
}

/// Mel-cepstra `c(0..=order)` per frame from a log-mel matrix.
pub fn cepstrum_from_log_mel(log_mel: &Array2<f64>, order: usize) -> Result<Array2<f64>> {
    let (m, frames) = log_mel.dim();
    if order + 1 > m {
        return Err(Error::InvalidInput(format!(
            "cepstral order {order} needs at least {} mel bins, have {m}",
            order + 1
        )));
    }
    let mut out = Array2::<f64>::zeros((order + 1, frames));
    for t in 0..frames {
        let c = dct_ii(log_mel.column(t), order + 1);
        for (k, v) in c.into_iter().enumerate() {
            out[[k, t]] = v;
        }
    }
    Ok(out)
}

/// Mel-cepstra of a clip using the default 80-bin analysis.
pub fn mel_cepstrum(clip: &AudioClip, order: usize) -> Result<Array2<f64>> {
    let extractor = MelExtractor::new(clip.sample_rate(), DEFAULT_MEL_ORDER, StftConfig::default())?;
    mel_cepstrum_with(&extractor, clip, order)
}

pub fn mel_cepstrum_with(extractor: &MelExtractor, clip: &AudioClip, order: usize) -> Result<Array2<f64>> {
    if order + 1 > extractor.mel_order() {
        return Err(Error::InvalidInput(format!(
            "cepstral order {order} exceeds {} mel bins",
            extractor.mel_order()
        )));
    }
    cepstrum_from_log_mel(&extractor.log_mel_f64(clip)?, order)
}

pub(crate) fn log_magnitude(c: Complex64) -> f64 {
    0.5 * (c.norm_sqr() + STFT_LOSS_FLOOR * STFT_LOSS_FLOOR).ln()
}

/// Sum over resolutions of the mean squared log-magnitude difference.
pub fn multi_res_stft_loss(y: &AudioClip, y_hat: &AudioClip, cfgs: &[StftConfig]) -> Result<f64> {
    if y.is_empty() || y_hat.is_empty() {
        return Err(Error::InvalidInput("stft loss of an empty signal".into()));
    }
    let len = y.len().max(y_hat.len());
    let a = y.fit_to_len(len);
    let b = y_hat.fit_to_len(len);
    let mut total = 0.0;
    for cfg in cfgs {
        let sa = stft(&a, cfg)?;
        let sb = stft(&b, cfg)?;
        let sq: f64 = sa
            .iter()
            .zip(sb.iter())
            .map(|(&p, &q)| (log_magnitude(p) - log_magnitude(q)).powi(2))
            .sum();
        total += sq / sa.len() as f64;
    }
    Ok(total)
}
