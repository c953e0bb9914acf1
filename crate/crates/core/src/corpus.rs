//! Synthetic singing-voice corpus with known F0.
//!
//! Each utterance is a sequence of sustained "vowels": a band-limited
//! harmonic source with a 1/k spectral tilt, shaped by three cascaded formant
//! resonators, with vibrato and glides. Notes are separated by short gaps that
//! hold either a faint noise floor or a fricative-like noise burst.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audio::{save_wav, AudioClip};
use crate::error::{Error, Result};
use crate::f0::F0Contour;
use crate::training::mix_seed;

/// Formant frequencies (Hz) of five vowels.
pub const VOWELS: [[f64; 3]; 5] = [
    [730.0, 1090.0, 2440.0],
    [270.0, 2290.0, 3010.0],
    [300.0, 870.0, 2240.0],
    [530.0, 1840.0, 2480.0],
    [570.0, 840.0, 2410.0],
];
const BANDWIDTHS: [f64; 3] = [80.0, 100.0, 120.0];
const NOISE_FLOOR: f64 = 1e-3;
const PEAK: f64 = 0.5;
const RAMP_SECS: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub num_utterances: usize,
    pub utterance_secs: f64,
    pub sample_rate: u32,
    pub frame_period_ms: f64,
    pub f0_min: f64,
    pub f0_max: f64,
    pub seed: u64,
    /// File-name prefix, so training and held-out sets can share a directory tree.
    pub prefix: String,
}

impl Default for CorpusConfig {
    /// 120 five-second utterances: ten minutes of audio.
    fn default() -> Self {
        Self {
            num_utterances: 120,
            utterance_secs: 5.0,
            sample_rate: 16000,
            frame_period_ms: 5.0,
            f0_min: 100.0,
            f0_max: 320.0,
            seed: 0,
            prefix: "vowel".into(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticUtterance {
    pub name: String,
    pub audio: AudioClip,
    pub f0: F0Contour,
}

/// Band-limited harmonic source with 1/k amplitudes, zero where `f0` is 0.
fn tilted_source(f0: &[f64], sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let limit = 0.45 * sr;
    let mut phase = 0.0f64;
    f0.iter()
        .map(|&f| {
            if f <= 0.0 {
                return 0.0;
            }
            phase = (phase + 2.0 * PI * f / sr) % (2.0 * PI);
            let k_max = (limit / f).floor() as usize;
            (1..=k_max).map(|k| (k as f64 * phase).sin() / k as f64).sum()
        })
        .collect()
}

/// Cascade of two-pole resonators with unit gain at DC.
fn formant_filter(x: &[f64], formants: &[f64; 3], sample_rate: u32) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut y = x.to_vec();
    for (&f, &bw) in formants.iter().zip(&BANDWIDTHS) {
        let r = (-PI * bw / sr).exp();
        let a1 = 2.0 * r * (2.0 * PI * f / sr).cos();
        let a2 = -r * r;
        let g = 1.0 - a1 - a2;
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in y.iter_mut() {
            let out = g * *v + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = out;
            *v = out;
        }
    }
    y
}

/// A sustained vowel at constant `f0_hz` with the given formants, with short
/// onset and offset ramps and a faint noise floor.
pub fn constant_vowel(f0_hz: f64, secs: f64, formants: &[f64; 3], sample_rate: u32, frame_period_ms: f64, seed: u64) -> Result<SyntheticUtterance> {
    let sr = sample_rate as f64;
    let hop = (frame_period_ms * sr / 1000.0).round() as usize;
    let frames = ((secs * sr) as usize).div_ceil(hop).max(1);
    let n = frames * hop;
    let f0 = vec![f0_hz; n];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gate = vec![true; n];
    render(&f0, &gate, &[(0, n, *formants)], &[], sample_rate, hop, &mut rng, format!("vowel_{f0_hz:.0}hz"), frame_period_ms)
}

/// One utterance of the corpus. Deterministic in `(cfg.seed, index)`.
pub fn generate_utterance(cfg: &CorpusConfig, index: usize) -> Result<SyntheticUtterance> {
    if !(cfg.f0_min > 0.0 && cfg.f0_min < cfg.f0_max) {
        return Err(Error::InvalidInput("corpus F0 range must be positive and increasing".into()));
    }
    let sr = cfg.sample_rate as f64;
    let hop = (cfg.frame_period_ms * sr / 1000.0).round() as usize;
    if hop == 0 {
        return Err(Error::InvalidInput("frame period shorter than one sample".into()));
    }
    let frames = ((cfg.utterance_secs * sr) as usize).div_ceil(hop).max(1);
    let n = frames * hop;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, index as u64));

    let mut f0 = vec![0.0; n];
    let mut gate = vec![false; n];
    let mut notes = Vec::new();
    let mut bursts = Vec::new();
    let (lo, hi) = (cfg.f0_min.ln(), cfg.f0_max.ln());
    let mut pos = (rng.random_range(0.02..0.15) * sr) as usize;
    while pos < n {
        let len = ((rng.random_range(0.3..1.0) * sr) as usize).min(n - pos);
        let start_hz = rng.random_range(lo..hi).exp();
        // Half the notes glide towards a second pitch within the range.
        let end_hz = if rng.random_bool(0.5) {
            (start_hz.ln() + rng.random_range(-0.25..0.25)).clamp(lo, hi).exp()
        } else {
            start_hz
        };
        let vib_rate = rng.random_range(4.5..6.5);
        let vib_depth = rng.random_range(0.0..0.03);
        let vib_phase = rng.random_range(0.0..2.0 * PI);
        for i in 0..len {
            let u = i as f64 / len as f64;
            let base = (start_hz.ln() * (1.0 - u) + end_hz.ln() * u).exp();
            let vib = 1.0 + vib_depth * (2.0 * PI * vib_rate * i as f64 / sr + vib_phase).sin();
            f0[pos + i] = (base * vib).clamp(cfg.f0_min * 0.97, cfg.f0_max * 1.03);
            gate[pos + i] = true;
        }
        notes.push((pos, pos + len, VOWELS[rng.random_range(0..VOWELS.len())]));
        pos += len;
        let gap = (rng.random_range(0.05..0.25) * sr) as usize;
        if rng.random_bool(0.5) {
            bursts.push((pos, (pos + gap).min(n)));
        }
        pos += gap;
    }
    let name = format!("{}_{index:04}", cfg.prefix);
    render(&f0, &gate, &notes, &bursts, cfg.sample_rate, hop, &mut rng, name, cfg.frame_period_ms)
}

#[allow(clippy::too_many_arguments)]
fn render(
    f0: &[f64],
    gate: &[bool],
    notes: &[(usize, usize, [f64; 3])],
    bursts: &[(usize, usize)],
    sample_rate: u32,
    hop: usize,
    rng: &mut ChaCha8Rng,
    name: String,
    frame_period_ms: f64,
) -> Result<SyntheticUtterance> {
    let sr = sample_rate as f64;
    let n = f0.len();
    let ramp = (RAMP_SECS * sr) as usize;
    let mut y = vec![0.0f64; n];
    for &(s, e, formants) in notes {
        let src = tilted_source(&f0[s..e], sample_rate);
        let seg = formant_filter(&src, &formants, sample_rate);
        let len = e - s;
        for (i, v) in seg.into_iter().enumerate() {
            let up = ((i + 1) as f64 / ramp as f64).min(1.0);
            let down = ((len - i) as f64 / ramp as f64).min(1.0);
            y[s + i] = v * up.min(down);
        }
    }
    let peak = y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        y.iter_mut().for_each(|v| *v *= PEAK / peak);
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for &(s, e) in bursts {
        let amp = rng.random_range(0.01..0.04);
        let mut prev = 0.0;
        for v in &mut y[s..e] {
            let w: f64 = normal.sample(rng);
            *v += amp * (w - prev);
            prev = w;
        }
    }
    for v in y.iter_mut() {
        *v += NOISE_FLOOR * normal.sample(rng);
    }
    // Ground truth at each frame's centre sample.
    let hz: Vec<f64> = (0..n / hop).map(|t| if gate[t * hop] { f0[t * hop] } else { 0.0 }).collect();
    Ok(SyntheticUtterance {
        name,
        audio: AudioClip::new(y.into_iter().map(|v| v as f32).collect(), sample_rate)?,
        f0: F0Contour::from_hz(hz, frame_period_ms)?,
    })
}

/// Writes `<name>.wav` and `<name>.f0` (with sidecar) for every utterance.
pub fn write_corpus(dir: &Path, cfg: &CorpusConfig) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = Vec::with_capacity(cfg.num_utterances);
    for i in 0..cfg.num_utterances {
        let u = generate_utterance(cfg, i)?;
        let wav = dir.join(format!("{}.wav", u.name));
        save_wav(&u.audio, &wav)?;
        u.f0.save_text(dir.join(format!("{}.f0", u.name)))?;
        out.push(wav);
    }
    Ok(out)
}
