//! Inference with a trained model: analysis, resynthesis and F0 editing.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analyzer::{decode, encode, latent_f0, reparameterize, set_latent_f0, LatentCode, LatentDistribution, Sampling};
use crate::audio::AudioClip;
use crate::checkpoint::{load_checkpoint, resolve_checkpoint_path};
use crate::container::{read_sidecar, write_sidecar, TensorData, TensorFile};
use crate::error::{Error, Result};
use crate::f0::{denormalize_f0, normalize_f0, F0Contour};
use crate::f0::FrameRange;
use crate::spectral::{MelExtractor, MelSpectrogram};
use crate::synthesizer::synthesize;
use crate::training::{mix_seed, Model, SourceMels, TrainConfig};
use crate::{audio::load_wav, f0::{estimate_f0, load_f0_external}};

pub const MAX_SEMITONES: f64 = 24.0;

/// A trained model with the feature settings it was trained with.
#[derive(Debug, Clone)]
pub struct Vocoder {
    pub model: Model,
    pub cfg: TrainConfig,
    pub checkpoint_id: String,
    extractor: MelExtractor,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub mel: MelSpectrogram,
    pub dist: LatentDistribution,
    /// Posterior mean.
    pub z: LatentCode,
    /// F0 read back from the latent row.
    pub f0: F0Contour,
}

#[derive(Debug, Clone)]
pub struct PitchShift {
    pub audio: AudioClip,
    pub f0: F0Contour,
    pub z: LatentCode,
    /// Decoder output with the harmonic source rebuilt from the shifted contour.
    pub mel: MelSpectrogram,
}

impl Vocoder {
    pub fn new(model: Model, cfg: TrainConfig, checkpoint_id: impl Into<String>) -> Result<Self> {
        Ok(Self {
            extractor: cfg.mel_extractor()?,
            model,
            cfg,
            checkpoint_id: checkpoint_id.into(),
        })
    }

    /// Loads a checkpoint directory (or a training directory with `latest/`).
    pub fn load(path: &Path) -> Result<Self> {
        let ck = load_checkpoint(&resolve_checkpoint_path(path), None)?;
        Self::new(ck.model, ck.config, ck.manifest.checkpoint_id)
    }

    pub fn mel(&self, clip: &AudioClip) -> Result<MelSpectrogram> {
        self.extractor.compute(clip)
    }

    /// Latent row to Hz with the configured voicing threshold.
    pub fn latent_to_f0(&self, z: &LatentCode) -> Result<F0Contour> {
        denormalize_f0(&latent_f0(z), &self.cfg.f0_range(), self.cfg.voicing_threshold, self.cfg.frame_period_ms)
    }

    pub fn analyze(&self, clip: &AudioClip) -> Result<Analysis> {
        let mel = self.mel(clip)?;
        let dist = encode(&mel, &self.model.analyzer)?;
        let z = reparameterize(&dist, Sampling::Mean)?;
        let f0 = self.latent_to_f0(&z)?;
        Ok(Analysis { mel, dist, z, f0 })
    }

    pub fn synthesize(&self, z: &LatentCode, f0: &F0Contour, seed: u64) -> Result<AudioClip> {
        synthesize(z, f0, &self.model.synth, seed)
    }

    /// Decoder reconstruction with source spectrograms built from `f0`.
    pub fn reconstruct_mel(&self, z: &LatentCode, f0: &F0Contour, seed: u64) -> Result<MelSpectrogram> {
        let src = SourceMels::new(&self.extractor, f0, self.cfg.sample_rate, mix_seed(seed, 1))?;
        let wrap = |a: &ndarray::Array2<f32>| MelSpectrogram {
            values: a.mapv(|v| (v as f64).max(1e-30).ln() as f32),
            sample_rate: self.cfg.sample_rate,
            frame_period_ms: self.cfg.frame_period_ms,
        };
        decode(z, &wrap(&src.hs_linear), &wrap(&src.ns_linear), &self.model.analyzer)
    }

    /// Analysis followed by synthesis from the code and its own F0 row.
    pub fn copy_synthesis(&self, clip: &AudioClip, seed: u64) -> Result<AudioClip> {
        let a = self.analyze(clip)?;
        self.synthesize(&a.z, &a.f0, seed)
    }

    /// Scales voiced F0 by `2^(semitones / 12)`, writes it back into the
    /// latent row and resynthesizes.
    pub fn pitch_shift(&self, clip: &AudioClip, semitones: f64, seed: u64) -> Result<PitchShift> {
        if !semitones.is_finite() || semitones.abs() > MAX_SEMITONES {
            return Err(Error::InvalidInput(format!(
                "shift of {semitones} semitones exceeds +/-{MAX_SEMITONES}"
            )));
        }
        let a = self.analyze(clip)?;
        let shifted = a.f0.scaled(2f64.powf(semitones / 12.0));
        let range = self.cfg.f0_range();
        let out_of_range = crate::f0::runs(
            shifted
                .values()
                .iter()
                .zip(shifted.vuv())
                .map(|(&v, &voiced)| voiced && (v < range.floor || v > range.ceil)),
        );
        if !out_of_range.is_empty() {
            return Err(Error::F0Range(format!(
                "shifted F0 leaves [{}, {}] Hz on frames {}",
                range.floor,
                range.ceil,
                describe_ranges(&out_of_range)
            )));
        }
        let z = set_latent_f0(&a.z, &normalize_f0(&shifted, &range))?;
        let mel = self.reconstruct_mel(&z, &shifted, seed)?;
        let audio = self.synthesize(&z, &shifted, seed)?;
        Ok(PitchShift {
            audio,
            f0: shifted,
            z,
            mel,
        })
    }
}

fn describe_ranges(r: &[FrameRange]) -> String {
    let parts: Vec<String> = r.iter().take(8).map(|r| format!("{}-{}", r.start, r.end)).collect();
    let more = if r.len() > 8 { format!(" and {} more", r.len() - 8) } else { String::new() };
    format!("{}{more}", parts.join(", "))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentSidecar {
    #[serde(rename = "L")]
    pub latent_dim: usize,
    #[serde(rename = "T")]
    pub frames: usize,
    pub frame_period_ms: f64,
    pub checkpoint_id: String,
}

/// Writes a code as a tensor container with a `{L, T, frame_period_ms,
/// checkpoint_id}` sidecar.
pub fn save_latent(z: &LatentCode, checkpoint_id: &str, path: &Path) -> Result<()> {
    let (rows, cols) = z.z.dim();
    TensorFile::new(vec![rows, cols], TensorData::F32(z.z.iter().copied().collect()))?.write(path)?;
    write_sidecar(
        path,
        &LatentSidecar {
            latent_dim: z.latent_dim,
            frames: cols,
            frame_period_ms: z.frame_period_ms,
            checkpoint_id: checkpoint_id.to_string(),
        },
    )
}

pub fn load_latent(path: &Path) -> Result<(LatentCode, LatentSidecar)> {
    let meta: LatentSidecar = read_sidecar(path)?;
    let f = TensorFile::read(path)?;
    let (rows, cols) = f.dims2()?;
    if rows != 2 * meta.latent_dim || cols != meta.frames {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            reason: format!("container is {rows}x{cols}, sidecar says L={} T={}", meta.latent_dim, meta.frames),
        });
    }
    let z = ndarray::Array2::from_shape_vec((rows, cols), f.data.to_f32()).map_err(|e| Error::Shape(e.to_string()))?;
    Ok((LatentCode::new(z, meta.latent_dim, meta.frame_period_ms)?, meta))
}

/// What [`extract_features`] wrote and skipped.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub written: Vec<String>,
    pub skipped: Vec<String>,
}

/// Per-utterance log-mel container and F0 file for every WAV in `in_dir`.
/// F0 comes from `<stem>.f0` in `f0_dir` when given, else from the built-in
/// estimator. Files that are not readable audio are skipped with a warning.
pub fn extract_features(in_dir: &Path, out_dir: &Path, cfg: &TrainConfig, f0_dir: Option<&Path>, jobs: usize) -> Result<FeatureSummary> {
    let rd = std::fs::read_dir(in_dir).map_err(|e| Error::io(in_dir, e))?;
    let mut entries: Vec<std::path::PathBuf> = rd
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && !p.to_string_lossy().ends_with(".json"))
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(Error::InvalidInput(format!("no input files in {}", in_dir.display())));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ex = cfg.mel_extractor()?;
    let one = |path: &std::path::PathBuf| -> Result<String> {
        let is_wav = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if !is_wav {
            return Err(Error::Unsupported(format!("{} is not a WAV file", path.display())));
        }
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::InvalidInput(format!("bad file name {}", path.display())))?
            .to_string();
        let clip = load_wav(path)?;
        if clip.sample_rate() != cfg.sample_rate {
            return Err(Error::Unsupported(format!(
                "{} is at {} Hz, expected {} Hz",
                path.display(),
                clip.sample_rate(),
                cfg.sample_rate
            )));
        }
        let mel = ex.compute(&clip)?;
        let f0 = match f0_dir.map(|d| d.join(format!("{stem}.f0"))).filter(|p| p.exists()) {
            Some(p) => load_f0_external(&p, cfg.frame_period_ms)?,
            None => estimate_f0(&clip, cfg.frame_period_ms, cfg.f0_floor, cfg.f0_ceil)?,
        };
        let mut hz = f0.values().to_vec();
        hz.resize(mel.num_frames(), 0.0);
        mel.save(out_dir.join(format!("{stem}.mel")))?;
        F0Contour::from_hz(hz, cfg.frame_period_ms)?.save_text(out_dir.join(format!("{stem}.f0")))?;
        Ok(stem)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    use rayon::prelude::*;
    let results: Vec<Result<String>> = pool.install(|| entries.par_iter().map(one).collect());
    let mut summary = FeatureSummary::default();
    for (path, r) in entries.iter().zip(results) {
        match r {
            Ok(stem) => summary.written.push(stem),
            Err(e) => {
                log::warn!("skipping {}: {e}", path.display());
                summary.skipped.push(path.display().to_string());
            }
        }
    }
    if summary.written.is_empty() {
        return Err(Error::InvalidInput(format!("no readable WAV files in {}", in_dir.display())));
    }
    Ok(summary)
}
