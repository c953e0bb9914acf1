//! F0 contours: ingestion, a normalized-autocorrelation estimator, log-domain
//! normalization for the latent F0 row, and V/UV consistency diagnostics.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::container::{read_sidecar, write_sidecar, TensorData, TensorFile};
use crate::error::{Error, Result};
use crate::spectral::MelSpectrogram;

/// Normalized value assigned to a voiced frame at the floor frequency. Zero
/// is reserved for unvoiced frames.
pub const VOICED_FLOOR_VALUE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct F0Contour {
    values: Vec<f64>,
    vuv: Vec<bool>,
    frame_period_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct F0Sidecar {
    frame_period_ms: f64,
}

impl F0Contour {
    /// Builds a contour from Hz values; zero means unvoiced.
    pub fn from_hz(values: Vec<f64>, frame_period_ms: f64) -> Result<Self> {
        if let Some((i, v)) = values.iter().enumerate().find(|(_, v)| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!("invalid F0 value {v} at frame {i}")));
        }
        if frame_period_ms <= 0.0 {
            return Err(Error::InvalidInput("frame period must be positive".into()));
        }
        let vuv = values.iter().map(|&v| v > 0.0).collect();
        Ok(Self {
            values,
            vuv,
            frame_period_ms,
        })
    }

    pub fn unvoiced(frames: usize, frame_period_ms: f64) -> Self {
        Self {
            values: vec![0.0; frames],
            vuv: vec![false; frames],
            frame_period_ms,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vuv(&self) -> &[bool] {
        &self.vuv
    }

    pub fn frame_period_ms(&self) -> f64 {
        self.frame_period_ms
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn voiced_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().copied().filter(|&v| v > 0.0)
    }

    pub fn median_voiced(&self) -> Option<f64> {
        let mut v: Vec<f64> = self.voiced_values().collect();
        if v.is_empty() {
            return None;
        }
        Some(median_in_place(&mut v))
    }

    /// Multiplies voiced frames by `factor`.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            vuv: self.vuv.clone(),
            frame_period_ms: self.frame_period_ms,
        }
    }

    /// Hop in samples at `sample_rate`.
    pub fn hop_length(&self, sample_rate: u32) -> usize {
        (self.frame_period_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    /// Writes one Hz value per line with a `{frame_period_ms}` sidecar.
    pub fn save_text(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::with_capacity(self.values.len() * 8);
        for v in &self.values {
            text.push_str(&format!("{v}\n"));
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        write_sidecar(
            path,
            &F0Sidecar {
                frame_period_ms: self.frame_period_ms,
            },
        )
    }

    /// Loads a text contour, taking the frame period from its sidecar.
    pub fn load_text(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let meta: F0Sidecar = read_sidecar(path)?;
        load_f0_external(path, meta.frame_period_ms)
    }
}

/// Reads per-frame Hz values from a one-column text file, or from raw
/// little-endian float32 when the file is not text.
pub fn load_f0_external(path: impl AsRef<Path>, frame_period_ms: f64) -> Result<F0Contour> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let values = match parse_text_column(&bytes) {
        Some(v) => v,
        None if bytes.len() % 4 == 0 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        None => {
            return Err(Error::Unsupported(format!(
                "{} is neither a text column nor float32 data",
                path.display()
            )))
        }
    };
    if values.is_empty() {
        return Err(Error::InvalidInput(format!("{} holds no frames", path.display())));
    }
    F0Contour::from_hz(values, frame_period_ms)
}

fn parse_text_column(bytes: &[u8]) -> Option<Vec<f64>> {
    let text = std::str::from_utf8(bytes).ok()?;
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| l.parse::<f64>().ok())
        .collect()
}

/// Log-frequency bounds used for estimation and normalization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F0Range {
    pub floor: f64,
    pub ceil: f64,
}

impl Default for F0Range {
    fn default() -> Self {
        Self {
            floor: 60.0,
            ceil: 600.0,
        }
    }
}

impl F0Range {
    pub fn new(floor: f64, ceil: f64) -> Result<Self> {
        if !(floor > 0.0 && floor < ceil) {
            return Err(Error::InvalidInput(format!(
                "f0 floor {floor} must be positive and below ceil {ceil}"
            )));
        }
        Ok(Self { floor, ceil })
    }

    fn log_span(&self) -> f64 {
        (self.ceil / self.floor).ln()
    }

    pub fn normalize_hz(&self, hz: f64) -> f64 {
        if hz <= 0.0 {
            return 0.0;
        }
        ((hz / self.floor).ln() / self.log_span()).clamp(VOICED_FLOOR_VALUE, 1.0)
    }

    pub fn denormalize_value(&self, v: f64) -> f64 {
        if v <= 0.0 {
            return 0.0;
        }
        self.floor * (v * self.log_span()).exp()
    }
}

/// Maps voiced Hz to `(0, 1]` on a log scale; unvoiced frames map to 0.
pub fn normalize_f0(f0: &F0Contour, range: &F0Range) -> Vec<f64> {
    f0.values
        .iter()
        .zip(&f0.vuv)
        .map(|(&v, &voiced)| if voiced { range.normalize_hz(v) } else { 0.0 })
        .collect()
}

/// Inverse of [`normalize_f0`]; any value at or below `voicing_threshold`
/// becomes unvoiced. Values above 1 are clamped to the ceiling.
pub fn denormalize_f0(values: &[f64], range: &F0Range, voicing_threshold: f64, frame_period_ms: f64) -> Result<F0Contour> {
    let hz = values
        .iter()
        .map(|&v| {
            if v > voicing_threshold {
                range.denormalize_value(v.min(1.0))
            } else {
                0.0
            }
        })
        .collect();
    F0Contour::from_hz(hz, frame_period_ms)
}

/// Per-frame normalized-autocorrelation pitch tracker.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PitchEstimator {
    pub range: F0Range,
    pub frame_period_ms: f64,
    /// Peak correlation below this marks a frame unvoiced.
    pub voicing_threshold: f64,
    /// The shortest-lag peak within this fraction of the best peak wins.
    pub octave_tolerance: f64,
    /// Frames with RMS below this are unvoiced without analysis.
    pub silence_rms: f64,
}

impl Default for PitchEstimator {
    fn default() -> Self {
        Self {
            range: F0Range::default(),
            frame_period_ms: 5.0,
            voicing_threshold: 0.5,
            octave_tolerance: 0.9,
            silence_rms: 1e-4,
        }
    }
}

impl PitchEstimator {
    pub fn estimate(&self, clip: &AudioClip) -> Result<F0Contour> {
        if !(self.range.floor > 0.0 && self.range.floor < self.range.ceil) {
            return Err(Error::InvalidInput(format!(
                "f0 floor {} must be below ceil {}",
                self.range.floor, self.range.ceil
            )));
        }
        let sr = clip.sample_rate() as f64;
        let hop = (self.frame_period_ms * sr / 1000.0).round() as usize;
        if hop == 0 {
            return Err(Error::InvalidInput("frame period shorter than one sample".into()));
        }
        let min_lag = ((sr / self.range.ceil).floor() as usize).max(2);
        let max_lag = (sr / self.range.floor).ceil() as usize;
        let window = max_lag;
        let span = window + max_lag + 1;
        let x = clip.samples();
        let frames = x.len().div_ceil(hop);

        let mut seg = vec![0.0f64; span];
        let mut values = Vec::with_capacity(frames);
        let mut corr = vec![0.0f64; max_lag + 2];
        for t in 0..frames {
            let start = (t * hop) as isize - (span / 2) as isize;
            for (j, s) in seg.iter_mut().enumerate() {
                let idx = start + j as isize;
                *s = if idx >= 0 && (idx as usize) < x.len() {
                    x[idx as usize] as f64
                } else {
                    0.0
                };
            }
            let mean = seg.iter().sum::<f64>() / span as f64;
            seg.iter_mut().for_each(|s| *s -= mean);
            let rms = (seg.iter().map(|s| s * s).sum::<f64>() / span as f64).sqrt();
            if rms < self.silence_rms {
                values.push(0.0);
                continue;
            }
            let e0: f64 = seg[..window].iter().map(|s| s * s).sum();
            for lag in (min_lag - 1)..=(max_lag + 1).min(span - window) {
                let (mut xy, mut ee) = (0.0, 0.0);
                for j in 0..window {
                    let b = seg[j + lag];
                    xy += seg[j] * b;
                    ee += b * b;
                }
                let denom = (e0 * ee).sqrt();
                corr[lag] = if denom > 1e-12 { xy / denom } else { 0.0 };
            }
            values.push(self.pick_peak(&corr, min_lag, max_lag, sr));
        }
        F0Contour::from_hz(values, self.frame_period_ms)
    }

    fn pick_peak(&self, corr: &[f64], min_lag: usize, max_lag: usize, sr: f64) -> f64 {
        let is_peak = |l: usize| corr[l] >= corr[l - 1] && corr[l] >= corr[l + 1];
        let best = (min_lag..=max_lag)
            .filter(|&l| is_peak(l))
            .map(|l| corr[l])
            .fold(f64::NEG_INFINITY, f64::max);
        if best < self.voicing_threshold {
            return 0.0;
        }
        let lag = (min_lag..=max_lag)
            .find(|&l| is_peak(l) && corr[l] >= self.octave_tolerance * best)
            .unwrap();
        let (a, b, c) = (corr[lag - 1], corr[lag], corr[lag + 1]);
        let curvature = a - 2.0 * b + c;
        let offset = if curvature.abs() > 1e-12 {
            (0.5 * (a - c) / curvature).clamp(-0.5, 0.5)
        } else {
            0.0
        };
        let hz = sr / (lag as f64 + offset);
        if hz < self.range.floor || hz > self.range.ceil {
            0.0
        } else {
            hz
        }
    }
}

/// Built-in pitch estimate with default voicing settings.
pub fn estimate_f0(clip: &AudioClip, frame_period_ms: f64, f0_floor: f64, f0_ceil: f64) -> Result<F0Contour> {
    PitchEstimator {
        range: F0Range {
            floor: f0_floor,
            ceil: f0_ceil,
        },
        frame_period_ms,
        ..PitchEstimator::default()
    }
    .estimate(clip)
}

/// Per-band aperiodicity in `[0, 1]`, bands x frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AperiodicityMap {
    pub values: Array2<f32>,
    pub frame_period_ms: f64,
}

impl AperiodicityMap {
    pub fn new(values: Array2<f32>, frame_period_ms: f64) -> Result<Self> {
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("aperiodicity {v} outside [0, 1]")));
        }
        Ok(Self {
            values,
            frame_period_ms,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.values.ncols()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (r, c) = self.values.dim();
        TensorFile::new(vec![r, c], TensorData::F32(self.values.iter().copied().collect()))?.write(path)?;
        write_sidecar(
            path,
            &F0Sidecar {
                frame_period_ms: self.frame_period_ms,
            },
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let t = TensorFile::read(path)?;
        let dims = t.dims2()?;
        let meta: F0Sidecar = read_sidecar(path)?;
        let values = Array2::from_shape_vec(dims, t.data.to_f32()).map_err(|e| Error::Shape(e.to_string()))?;
        Self::new(values, meta.frame_period_ms)
    }
}

/// Inclusive frame range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRange {
    pub start: usize,
    pub end: usize,
}

impl From<(usize, usize)> for FrameRange {
    fn from((start, end): (usize, usize)) -> Self {
        Self { start, end }
    }
}

/// Maximal runs of `true` as inclusive ranges.
pub(crate) fn runs(flags: impl IntoIterator<Item = bool>) -> Vec<FrameRange> {
    let mut out = Vec::new();
    let mut open: Option<usize> = None;
    let mut n = 0;
    for (i, f) in flags.into_iter().enumerate() {
        match (f, open) {
            (true, None) => open = Some(i),
            (false, Some(s)) => {
                out.push(FrameRange { start: s, end: i - 1 });
                open = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = open {
        out.push(FrameRange { start: s, end: n - 1 });
    }
    out
}

/// Ranges where the F0 voicing disagrees with voicing derived from the
/// band-mean aperiodicity (`mean < ap_threshold` means voiced).
pub fn vuv_agreement(f0: &F0Contour, ap: &AperiodicityMap, ap_threshold: f64) -> Result<Vec<FrameRange>> {
    if f0.len() != ap.num_frames() {
        return Err(Error::Shape(format!(
            "f0 has {} frames, aperiodicity has {}",
            f0.len(),
            ap.num_frames()
        )));
    }
    let disagree = ap
        .values
        .columns()
        .into_iter()
        .zip(f0.vuv())
        .map(|(col, &voiced)| {
            let mean = col.iter().map(|&v| v as f64).sum::<f64>() / col.len().max(1) as f64;
            (mean < ap_threshold) != voiced
        });
    Ok(runs(disagree))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PeriodicityIssue {
    /// F0 says voiced but the low band is noise-like.
    VoicedWithoutPeriodicity,
    /// F0 says unvoiced over a clear harmonic ridge.
    UnvoicedWithPeriodicity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuspiciousRange {
    pub start: usize,
    pub end: usize,
    pub issue: PeriodicityIssue,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeriodicityConfig {
    /// Inclusive mel-bin band used for the flatness measure.
    pub band: (usize, usize),
    pub flatness_threshold: f64,
    /// Mean linear mel magnitude a frame needs before it can count as a harmonic ridge.
    pub energy_threshold: f64,
}

impl Default for PeriodicityConfig {
    fn default() -> Self {
        Self {
            band: (2, 30),
            flatness_threshold: 0.5,
            energy_threshold: 1e-3,
        }
    }
}

/// Geometric over arithmetic mean of the linear mel values in `band`, per frame.
pub fn band_flatness(mel: &MelSpectrogram, band: (usize, usize)) -> Result<Vec<(f64, f64)>> {
    let (lo, hi) = band;
    if lo > hi || hi >= mel.mel_order() {
        return Err(Error::InvalidInput(format!(
            "band {lo}..={hi} outside {} mel bins",
            mel.mel_order()
        )));
    }
    let n = (hi - lo + 1) as f64;
    Ok(mel
        .values
        .columns()
        .into_iter()
        .map(|col| {
            let logs = col.iter().skip(lo).take(hi - lo + 1).map(|&v| v as f64);
            let mean_log = logs.clone().sum::<f64>() / n;
            let mean_lin = logs.map(f64::exp).sum::<f64>() / n;
            (mean_log.exp() / mean_lin, mean_lin)
        })
        .collect())
}

/// Flags voiced frames with a flat low band and unvoiced frames with a
/// peaky, energetic low band.
pub fn spectral_periodicity_check(f0: &F0Contour, mel: &MelSpectrogram, cfg: &PeriodicityConfig) -> Result<Vec<SuspiciousRange>> {
    if f0.len() != mel.num_frames() {
        return Err(Error::Shape(format!(
            "f0 has {} frames, mel has {}",
            f0.len(),
            mel.num_frames()
        )));
    }
    let stats = band_flatness(mel, cfg.band)?;
    let classify = |(i, &(flatness, energy)): (usize, &(f64, f64))| {
        if f0.vuv[i] && flatness > cfg.flatness_threshold {
            Some(PeriodicityIssue::VoicedWithoutPeriodicity)
        } else if !f0.vuv[i] && flatness < cfg.flatness_threshold && energy > cfg.energy_threshold {
            Some(PeriodicityIssue::UnvoicedWithPeriodicity)
        } else {
            None
        }
    };
    let labels: Vec<Option<PeriodicityIssue>> = stats.iter().enumerate().map(classify).collect();
    let mut out = Vec::new();
    for issue in [
        PeriodicityIssue::VoicedWithoutPeriodicity,
        PeriodicityIssue::UnvoicedWithPeriodicity,
    ] {
        out.extend(runs(labels.iter().map(|l| *l == Some(issue))).into_iter().map(|r| SuspiciousRange {
            start: r.start,
            end: r.end,
            issue,
        }));
    }
    out.sort_by_key(|r| r.start);
    Ok(out)
}

pub(crate) fn median_in_place(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn external_text_maps_zeros_to_unvoiced() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.f0");
        std::fs::write(&p, "0\n110.5\n0\n").unwrap();
        let c = load_f0_external(&p, 5.0).unwrap();
        assert_eq!(c.values(), &[0.0, 110.5, 0.0]);
        assert_eq!(c.vuv(), &[false, true, false]);

        std::fs::write(&p, "").unwrap();
        assert!(load_f0_external(&p, 5.0).is_err());
        std::fs::write(&p, "100\n-1\n").unwrap();
        assert!(load_f0_external(&p, 5.0).is_err());
        std::fs::write(&p, "100\nNaN\n").unwrap();
        assert!(load_f0_external(&p, 5.0).is_err());
    }

    #[test]
    fn external_binary_float32() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.f0");
        let bytes: Vec<u8> = [0.0f32, 220.0, 0.0, 230.5]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        std::fs::write(&p, bytes).unwrap();
        let c = load_f0_external(&p, 5.0).unwrap();
        assert_eq!(c.values(), &[0.0, 220.0, 0.0, 230.5]);
    }

    #[test]
    fn text_round_trip_with_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.f0");
        let c = F0Contour::from_hz(vec![0.0, 123.456789, 0.1 + 0.2], 5.0).unwrap();
        c.save_text(&p).unwrap();
        assert_eq!(F0Contour::load_text(&p).unwrap(), c);
    }

    #[test]
    fn normalization_boundaries() {
        let r = F0Range::default();
        let c = F0Contour::from_hz(vec![60.0, 600.0, 0.0, 1000.0], 5.0).unwrap();
        let n = normalize_f0(&c, &r);
        assert_eq!(n[0], VOICED_FLOOR_VALUE);
        assert_eq!(n[1], 1.0);
        assert_eq!(n[2], 0.0);
        assert_eq!(n[3], 1.0);
    }

    #[test]
    fn normalization_round_trip() {
        let r = F0Range::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let hz: Vec<f64> = (0..1000).map(|_| rng.random_range(61.0..600.0)).collect();
        let c = F0Contour::from_hz(hz.clone(), 5.0).unwrap();
        let back = denormalize_f0(&normalize_f0(&c, &r), &r, 0.0, 5.0).unwrap();
        for (a, b) in hz.iter().zip(back.values()) {
            assert!(((a - b) / a).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_range_rejected() {
        let clip = AudioClip::silence(1600, 16000);
        assert!(estimate_f0(&clip, 5.0, 300.0, 100.0).is_err());
        assert!(estimate_f0(&clip, 5.0, 100.0, 100.0).is_err());
    }

    #[test]
    fn silence_is_unvoiced() {
        let c = estimate_f0(&AudioClip::silence(8000, 16000), 5.0, 60.0, 600.0).unwrap();
        assert_eq!(c.len(), 100);
        assert!(c.vuv().iter().all(|v| !v));
    }

    #[test]
    fn pure_tone_tracked_within_two_percent() {
        let sr = 16000.0;
        let s: Vec<f32> = (0..16000)
            .map(|n| (0.5 * (2.0 * std::f64::consts::PI * 220.0 * n as f64 / sr).sin()) as f32)
            .collect();
        let c = estimate_f0(&AudioClip::new(s, 16000).unwrap(), 5.0, 60.0, 600.0).unwrap();
        for &v in &c.values()[10..190] {
            assert!((215.6..=224.4).contains(&v), "{v}");
        }
    }

    #[test]
    fn white_noise_mostly_unvoiced() {
        for seed in 0..5u64 {
            let noise = crate::sources::noise_source(16000, 16000, seed).unwrap();
            let c = estimate_f0(&noise, 5.0, 60.0, 600.0).unwrap();
            let unvoiced = c.vuv().iter().filter(|v| !**v).count() as f64 / c.len() as f64;
            assert!(unvoiced >= 0.9, "seed {seed}: {unvoiced}");
        }
    }

    #[test]
    fn vuv_agreement_examples() {
        let ap0 = AperiodicityMap::new(Array2::zeros((5, 30)), 5.0).unwrap();
        let voiced = F0Contour::from_hz(vec![100.0; 30], 5.0).unwrap();
        assert!(vuv_agreement(&voiced, &ap0, 0.5).unwrap().is_empty());

        let mut hz = vec![0.0; 30];
        let mut ap = Array2::<f32>::ones((5, 30));
        for t in 10..20 {
            hz[t] = 150.0;
        }
        ap.column_mut(25).fill(0.0);
        hz[25] = 150.0;
        let f0 = F0Contour::from_hz(hz, 5.0).unwrap();
        let ap = AperiodicityMap::new(ap, 5.0).unwrap();
        assert_eq!(vuv_agreement(&f0, &ap, 0.5).unwrap(), vec![FrameRange { start: 10, end: 19 }]);

        let short = F0Contour::from_hz(vec![100.0; 29], 5.0).unwrap();
        assert!(vuv_agreement(&short, &ap, 0.5).is_err());
    }

    #[test]
    fn single_frame_disagreements() {
        let f0 = F0Contour::from_hz(vec![0.0; 8], 5.0).unwrap();
        let mut ap = Array2::<f32>::ones((3, 8));
        ap.column_mut(3).fill(0.0);
        ap.column_mut(5).fill(0.0);
        let ap = AperiodicityMap::new(ap, 5.0).unwrap();
        let got = vuv_agreement(&f0, &ap, 0.5).unwrap();
        assert_eq!(got, vec![(3, 3).into(), (5, 5).into()]);
    }

    proptest! {
        #[test]
        fn vuv_ranges_match_per_frame_oracle(
            flags in proptest::collection::vec((any::<bool>(), 0.0f32..1.0), 1..60),
            threshold in 0.05f64..0.95,
        ) {
            let hz: Vec<f64> = flags.iter().map(|(v, _)| if *v { 150.0 } else { 0.0 }).collect();
            let ap_row: Vec<f32> = flags.iter().map(|(_, a)| *a).collect();
            let n = ap_row.len();
            let ap = AperiodicityMap::new(Array2::from_shape_vec((1, n), ap_row.clone()).unwrap(), 5.0).unwrap();
            let f0 = F0Contour::from_hz(hz, 5.0).unwrap();
            let got = vuv_agreement(&f0, &ap, threshold).unwrap();

            // Expand the ranges back to flags and compare frame by frame.
            let mut covered = vec![false; n];
            let mut last_end: Option<usize> = None;
            for r in &got {
                prop_assert!(r.start <= r.end);
                if let Some(e) = last_end {
                    prop_assert!(r.start > e + 1, "ranges must be disjoint and maximal");
                }
                last_end = Some(r.end);
                for t in r.start..=r.end {
                    covered[t] = true;
                }
            }
            for t in 0..n {
                let disagree = ((ap_row[t] as f64) < threshold) != flags[t].0;
                prop_assert_eq!(covered[t], disagree);
            }
        }

        #[test]
        fn normalized_values_in_unit_interval(hz in proptest::collection::vec(prop_oneof![Just(0.0), 1.0f64..2000.0], 1..50)) {
            let c = F0Contour::from_hz(hz.clone(), 5.0).unwrap();
            let n = normalize_f0(&c, &F0Range::default());
            for (v, h) in n.iter().zip(&hz) {
                prop_assert!((0.0..=1.0).contains(v));
                prop_assert_eq!(*v == 0.0, *h == 0.0);
            }
        }
    }
}
