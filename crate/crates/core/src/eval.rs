//! Objective copy-synthesis metrics: mel-cepstral distortion, F0 RMSE, the
//! median absolute F0 difference, and the V/UV disagreement rate.
//!
//! RMSE and MD include every frame that is voiced in at least one of the two
//! contours, with unvoiced frames read as 0 Hz. A voicing disagreement
//! therefore adds a large error to RMSE while MD stays robust to it.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, AudioClip};
use crate::error::{Error, Result};
use crate::f0::{estimate_f0, median_in_place, F0Contour};
use crate::spectral::{mel_cepstrum_with, MelExtractor, StftConfig, DEFAULT_MEL_ORDER};
use crate::training::list_wavs;

/// `10 * sqrt(2) / ln 10`.
pub const MCD_CONSTANT: f64 = 6.141_851_463_713_754;
pub const DEFAULT_MCD_ORDER: usize = 24;

/// Frame-averaged mel-cepstral distortion between two `(order + 1) x T`
/// cepstrum matrices; coefficient 0 is excluded.
pub fn mcd_from_cepstra(c_ref: &Array2<f64>, c_hyp: &Array2<f64>) -> Result<f64> {
    if c_ref.dim() != c_hyp.dim() {
        return Err(Error::Shape(format!("cepstra {:?} vs {:?}", c_ref.dim(), c_hyp.dim())));
    }
    let (rows, frames) = c_ref.dim();
    if frames == 0 || rows < 2 {
        return Err(Error::InvalidInput("mcd needs at least one frame and one coefficient".into()));
    }
    let mut sum = 0.0;
    for t in 0..frames {
        let d: f64 = (1..rows).map(|k| (c_ref[[k, t]] - c_hyp[[k, t]]).powi(2)).sum();
        sum += d.sqrt();
    }
    Ok(MCD_CONSTANT * sum / frames as f64)
}

/// MCD in dB over coefficients `1..=order` of the default 80-bin analysis;
/// the shorter clip is zero-padded.
pub fn mcd(y_ref: &AudioClip, y_hyp: &AudioClip, order: usize) -> Result<f64> {
    let ex = MelExtractor::new(y_ref.sample_rate(), DEFAULT_MEL_ORDER, StftConfig::default())?;
    mcd_with(&ex, y_ref, y_hyp, order)
}

pub fn mcd_with(ex: &MelExtractor, y_ref: &AudioClip, y_hyp: &AudioClip, order: usize) -> Result<f64> {
    if y_ref.is_empty() || y_hyp.is_empty() {
        return Err(Error::InvalidInput("mcd of an empty clip".into()));
    }
    if y_ref.sample_rate() != y_hyp.sample_rate() {
        return Err(Error::InvalidInput(format!(
            "sample rates differ: {} vs {}",
            y_ref.sample_rate(),
            y_hyp.sample_rate()
        )));
    }
    if order == 0 {
        return Err(Error::InvalidInput("mcd order must be at least 1".into()));
    }
    let len = y_ref.len().max(y_hyp.len());
    let a = mel_cepstrum_with(ex, &y_ref.fit_to_len(len), order)?;
    let b = mel_cepstrum_with(ex, &y_hyp.fit_to_len(len), order)?;
    mcd_from_cepstra(&a, &b)
}

fn check_pair(a: &F0Contour, b: &F0Contour) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("contours have {} and {} frames", a.len(), b.len())));
    }
    Ok(())
}

/// Absolute differences on frames voiced in at least one contour.
fn included_diffs(a: &F0Contour, b: &F0Contour) -> Vec<f64> {
    a.values()
        .iter()
        .zip(b.values())
        .zip(a.vuv().iter().zip(b.vuv()))
        .filter(|(_, (va, vb))| **va || **vb)
        .map(|((x, y), (va, vb))| {
            let x = if *va { *x } else { 0.0 };
            let y = if *vb { *y } else { 0.0 };
            (x - y).abs()
        })
        .collect()
}

/// F0 RMSE in Hz; 0 when neither contour has a voiced frame.
pub fn f0_rmse(reference: &F0Contour, hyp: &F0Contour) -> Result<f64> {
    check_pair(reference, hyp)?;
    let d = included_diffs(reference, hyp);
    if d.is_empty() {
        return Ok(0.0);
    }
    Ok((d.iter().map(|v| v * v).sum::<f64>() / d.len() as f64).sqrt())
}

/// Median absolute F0 difference in Hz; the mean of the two middle values
/// for an even count.
pub fn f0_md(reference: &F0Contour, hyp: &F0Contour) -> Result<f64> {
    check_pair(reference, hyp)?;
    let mut d = included_diffs(reference, hyp);
    if d.is_empty() {
        return Err(Error::InvalidInput("no voiced frames in either contour".into()));
    }
    Ok(median_in_place(&mut d))
}

/// Fraction of frames whose voicing flags differ.
pub fn vuv_error_rate(reference: &F0Contour, hyp: &F0Contour) -> Result<f64> {
    check_pair(reference, hyp)?;
    if reference.is_empty() {
        return Ok(0.0);
    }
    let n = reference.vuv().iter().zip(hyp.vuv()).filter(|(a, b)| a != b).count();
    Ok(n as f64 / reference.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub mcd_order: usize,
    pub frame_period_ms: f64,
    pub f0_floor: f64,
    pub f0_ceil: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            mcd_order: DEFAULT_MCD_ORDER,
            frame_period_ms: 5.0,
            f0_floor: 60.0,
            f0_ceil: 600.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceMetrics {
    pub name: String,
    pub mcd_db: f64,
    pub f0_rmse_hz: f64,
    /// Absent when neither contour has a voiced frame.
    pub f0_md_hz: Option<f64>,
    pub vuv_error_rate: f64,
}

/// Mean and population standard deviation over `count` values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self {
                mean: 0.0,
                std: 0.0,
                count: 0,
            };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
        Self {
            mean,
            std: var.sqrt(),
            count: n,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub name: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    /// Always `"population"`: std divides by N.
    pub std_convention: String,
    pub count: usize,
    pub mcd_db: Aggregate,
    pub f0_rmse_hz: Aggregate,
    pub f0_md_hz: Aggregate,
    pub vuv_error_rate: Aggregate,
    pub utterances: Vec<UtteranceMetrics>,
    pub failures: Vec<Failure>,
    /// Stems present in only one of the two directories.
    pub unpaired: Vec<String>,
}

impl EvalReport {
    pub fn from_metrics(config: EvalConfig, utterances: Vec<UtteranceMetrics>, failures: Vec<Failure>, unpaired: Vec<String>) -> Self {
        let col = |f: &dyn Fn(&UtteranceMetrics) -> Option<f64>| -> Aggregate {
            Aggregate::of(&utterances.iter().filter_map(f).collect::<Vec<_>>())
        };
        Self {
            std_convention: "population".into(),
            count: utterances.len(),
            mcd_db: col(&|u| Some(u.mcd_db)),
            f0_rmse_hz: col(&|u| Some(u.f0_rmse_hz)),
            f0_md_hz: col(&|u| u.f0_md_hz),
            vuv_error_rate: col(&|u| Some(u.vuv_error_rate)),
            config,
            utterances,
            failures,
            unpaired,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("name,mcd_db,f0_rmse_hz,f0_md_hz,vuv_error_rate\n");
        for u in &self.utterances {
            let md = u.f0_md_hz.map(|v| v.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{},{}", u.name, u.mcd_db, u.f0_rmse_hz, md, u.vuv_error_rate);
        }
        s
    }
}

/// Metrics for one reference/hypothesis pair.
pub fn evaluate_pair(name: &str, y_ref: &AudioClip, y_hyp: &AudioClip, cfg: &EvalConfig) -> Result<UtteranceMetrics> {
    let mcd_db = mcd(y_ref, y_hyp, cfg.mcd_order)?;
    let len = y_ref.len().max(y_hyp.len());
    let est = |c: &AudioClip| estimate_f0(&c.fit_to_len(len), cfg.frame_period_ms, cfg.f0_floor, cfg.f0_ceil);
    let (fr, fh) = (est(y_ref)?, est(y_hyp)?);
    Ok(UtteranceMetrics {
        name: name.to_string(),
        mcd_db,
        f0_rmse_hz: f0_rmse(&fr, &fh)?,
        f0_md_hz: f0_md(&fr, &fh).ok(),
        vuv_error_rate: vuv_error_rate(&fr, &fh)?,
    })
}

fn stems(paths: &[PathBuf]) -> Vec<(String, PathBuf)> {
    paths
        .iter()
        .filter_map(|p| Some((p.file_stem()?.to_str()?.to_string(), p.clone())))
        .collect()
}

/// Pairs WAVs by stem and evaluates each pair on up to `jobs` threads.
pub fn evaluate_corpus(ref_dir: &Path, hyp_dir: &Path, cfg: &EvalConfig, jobs: usize) -> Result<EvalReport> {
    let refs = stems(&list_wavs(ref_dir)?);
    let hyps = stems(&list_wavs(hyp_dir)?);
    let mut pairs = Vec::new();
    let mut unpaired = Vec::new();
    for (stem, rp) in &refs {
        match hyps.iter().find(|(s, _)| s == stem) {
            Some((_, hp)) => pairs.push((stem.clone(), rp.clone(), hp.clone())),
            None => unpaired.push(stem.clone()),
        }
    }
    for (stem, _) in &hyps {
        if !refs.iter().any(|(s, _)| s == stem) {
            unpaired.push(stem.clone());
        }
    }
    unpaired.sort();
    if pairs.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no paired files between {} and {}",
            ref_dir.display(),
            hyp_dir.display()
        )));
    }
    let run = |(name, rp, hp): &(String, PathBuf, PathBuf)| -> (String, Result<UtteranceMetrics>) {
        let r = load_wav(rp).and_then(|a| load_wav(hp).and_then(|b| evaluate_pair(name, &a, &b, cfg)));
        (name.clone(), r)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?;
    let results: Vec<_> = pool.install(|| pairs.par_iter().map(run).collect());
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for (name, r) in results {
        match r {
            Ok(m) => metrics.push(m),
            Err(e) => {
                log::warn!("evaluation of `{name}` failed: {e}");
                failures.push(Failure {
                    name,
                    error: e.to_string(),
                })
            }
        }
    }
    Ok(EvalReport::from_metrics(cfg.clone(), metrics, failures, unpaired))
}
