//! Reference signals whose mel-spectrograms the decoder masks: a flat
//! harmonic comb that follows an F0 contour, and Gaussian white noise.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::f0::F0Contour;

pub const HARMONIC_PEAK: f64 = 0.9;
pub const NOISE_STD: f64 = 0.1;
pub const FADE_MS: f64 = 5.0;

/// Per-sample F0 from frame values. Frame `t` sits at sample `t * hop`;
/// between two voiced frames the value is interpolated linearly, and the
/// voicing of the nearest frame decides whether the sample is voiced.
pub fn upsample_f0(f0: &F0Contour, hop: usize) -> Vec<f64> {
    let v = f0.values();
    let t_len = v.len();
    let mut out = Vec::with_capacity(t_len * hop);
    for n in 0..t_len * hop {
        let i = n / hop;
        let w = (n % hop) as f64 / hop as f64;
        let j = (i + 1).min(t_len - 1);
        let nearest = if w < 0.5 { i } else { j };
        let value = if v[nearest] <= 0.0 {
            0.0
        } else if v[i] > 0.0 && v[j] > 0.0 {
            v[i] * (1.0 - w) + v[j] * w
        } else {
            v[nearest]
        };
        out.push(value);
    }
    out
}

/// Voicing envelope with linear ramps of `fade` samples inside each voiced run.
fn fade_envelope(voiced: &[bool], fade: usize) -> Vec<f64> {
    let n = voiced.len();
    let mut env = vec![0.0; n];
    let mut i = 0;
    while i < n {
        if !voiced[i] {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && voiced[i] {
            i += 1;
        }
        let end = i; // exclusive
        for (k, e) in env[start..end].iter_mut().enumerate() {
            let pos = start + k;
            let mut g: f64 = 1.0;
            if start > 0 && fade > 0 {
                g = g.min((pos - start + 1) as f64 / fade as f64);
            }
            if end < n && fade > 0 {
                g = g.min((end - pos) as f64 / fade as f64);
            }
            *e = g;
        }
    }
    env
}

/// Phase-continuous sum of every harmonic below Nyquist at equal amplitude
/// `1/sqrt(K)`, silent on unvoiced frames, scaled so the peak is at most 0.9.
pub fn harmonic_source(f0: &F0Contour, sample_rate: u32) -> Result<AudioClip> {
    let hop = f0.hop_length(sample_rate);
    if hop == 0 {
        return Err(Error::InvalidInput("frame period shorter than one sample".into()));
    }
    if f0.is_empty() {
        return Err(Error::InvalidInput("empty F0 contour".into()));
    }
    let sr = sample_rate as f64;
    let nyquist = sr / 2.0;
    let per_sample = upsample_f0(f0, hop);
    let voiced: Vec<bool> = per_sample.iter().map(|&f| f > 0.0).collect();
    let env = fade_envelope(&voiced, (FADE_MS * sr / 1000.0).round() as usize);

    let mut phase = 0.0f64;
    let mut out = Vec::with_capacity(per_sample.len());
    for (&f, &g) in per_sample.iter().zip(&env) {
        if f <= 0.0 {
            out.push(0.0);
            continue;
        }
        phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
        // Harmonics k with k * f strictly below Nyquist.
        let k_max = ((nyquist / f).ceil() as usize).saturating_sub(1);
        if k_max == 0 {
            out.push(0.0);
            continue;
        }
        let amp = 1.0 / (k_max as f64).sqrt();
        let s: f64 = (1..=k_max).map(|k| (k as f64 * phase).sin()).sum();
        out.push(g * amp * s);
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if peak > HARMONIC_PEAK { HARMONIC_PEAK / peak } else { 1.0 };
    AudioClip::new(out.into_iter().map(|v| (v * scale) as f32).collect(), sample_rate)
}

/// Zero-mean Gaussian noise with standard deviation 0.1.
pub fn noise_source(num_samples: usize, sample_rate: u32, rng_seed: u64) -> Result<AudioClip> {
    if num_samples == 0 {
        return Err(Error::InvalidInput("noise source needs at least one sample".into()));
    }
    AudioClip::new(gaussian(num_samples, NOISE_STD, rng_seed), sample_rate)
}

pub(crate) fn gaussian(n: usize, std: f64, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(&mut rng) as f32).collect()
}
