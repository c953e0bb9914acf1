//! Mono waveform container plus WAV load/save and band-limited resampling.

use std::f64::consts::PI;
use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use crate::error::{Error, Result};

/// A mono waveform.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite sample at index {i}")));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Self {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Zero-pads or truncates to exactly `len` samples.
    pub fn fit_to_len(&self, len: usize) -> Self {
        let mut samples = self.samples.clone();
        samples.resize(len, 0.0);
        Self {
            samples,
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a RIFF/WAVE file; integer PCM is scaled by `2^(bits-1)`, channels are averaged.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = hound::WavReader::new(std::io::BufReader::new(file))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::Unsupported("wav with zero channels".into()));
    }

    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, bits @ 1..=32) => {
            let scale = (1u64 << (bits - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()?
        }
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Unsupported(format!(
                "{fmt:?} samples with {bits} bits"
            )))
        }
    };

    let frames = interleaved.len() / channels;
    if frames == 0 {
        return Err(Error::InvalidInput(format!(
            "{} contains no audio",
            path.display()
        )));
    }
    let mono: Vec<f32> = interleaved
        .chunks_exact(channels)
        .map(|frame| (frame.iter().sum::<f64>() / channels as f64) as f32)
        .collect();
    AudioClip::new(mono, spec.sample_rate)
}

/// Writes a mono PCM16 file, clipping to [-1, 1].
pub fn save_wav(clip: &AudioClip, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if clip.is_empty() {
        return Err(Error::InvalidInput("cannot save an empty clip".into()));
    }
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = WavWriter::new(std::io::BufWriter::new(file), spec)?;
    for &s in &clip.samples {
        writer.write_sample(quantize_pcm16(s))?;
    }
    writer.finalize()?;
    Ok(())
}

pub(crate) fn quantize_pcm16(s: f32) -> i16 {
    let v = (s.clamp(-1.0, 1.0) as f64 * 32768.0).round();
    v.clamp(-32768.0, 32767.0) as i16
}

/// Zero crossings of the sinc kernel kept on each side.
const SINC_HALF_ZEROS: f64 = 16.0;

/// Windowed-sinc resampling. The cutoff sits at the lower of the two Nyquist
/// rates so downsampling is anti-aliased.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::InvalidInput("target rate must be positive".into()));
    }
    if target_rate == clip.sample_rate || clip.is_empty() {
        return AudioClip::new(clip.samples.clone(), target_rate);
    }
    let src_rate = clip.sample_rate as f64;
    let ratio = target_rate as f64 / src_rate;
    let out_len = ((clip.len() as f64) * ratio).round().max(1.0) as usize;
    let cutoff = ratio.min(1.0);
    let half_width = SINC_HALF_ZEROS / cutoff;
    let input = &clip.samples;
    let n_in = input.len() as isize;

    let out = (0..out_len)
        .map(|n| {
            let center = n as f64 / ratio;
            let lo = (center - half_width).ceil().max(0.0) as isize;
            let hi = ((center + half_width).floor() as isize).min(n_in - 1);
            let mut acc = 0.0;
            for k in lo..=hi {
                let d = center - k as f64;
                acc += input[k as usize] as f64 * cutoff * sinc(cutoff * d) * blackman(d / half_width);
            }
            acc as f32
        })
        .collect();
    AudioClip::new(out, target_rate)
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

/// Blackman window on [-1, 1], zero outside.
fn blackman(u: f64) -> f64 {
    if u.abs() >= 1.0 {
        return 0.0;
    }
    let p = PI * (u + 1.0);
    0.42 - 0.5 * p.cos() + 0.08 * (2.0 * p).cos()
}
