//! Python bindings. Audio crosses the boundary as lists of floats plus a
//! sample rate; matrices as lists of rows.

use std::path::PathBuf;

use ndarray::Array2;
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyDict;

use deepa::analyzer::{latent_f0, set_latent_f0};
use deepa::training::{kl_loss, Dataset};
use deepa::{AudioClip, F0Contour, LatentCode, LatentDistribution, TrainConfig};

create_exception!(pydeepa, DeepaError, PyException, "Raised for any failure inside the vocoder.");

fn err(e: deepa::Error) -> PyErr {
    DeepaError::new_err(format!("{}: {e}", e.kind()))
}

fn clip(samples: Vec<f32>, sample_rate: u32) -> PyResult<AudioClip> {
    AudioClip::new(samples, sample_rate).map_err(err)
}

fn rows(a: &Array2<f32>) -> Vec<Vec<f32>> {
    a.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn from_rows(r: Vec<Vec<f32>>) -> PyResult<Array2<f32>> {
    let n = r.len();
    let m = r.first().map_or(0, Vec::len);
    if r.iter().any(|row| row.len() != m) {
        return Err(DeepaError::new_err("shape: ragged rows"));
    }
    Array2::from_shape_vec((n, m), r.into_iter().flatten().collect()).map_err(|e| DeepaError::new_err(e.to_string()))
}

fn contour(hz: Vec<f64>, frame_period_ms: f64) -> PyResult<F0Contour> {
    F0Contour::from_hz(hz, frame_period_ms).map_err(err)
}

/// Read a WAV file as `(samples, sample_rate)`, mixed to mono.
#[pyfunction]
fn load_wav(path: PathBuf) -> PyResult<(Vec<f32>, u32)> {
    let c = deepa::load_wav(path).map_err(err)?;
    let sr = c.sample_rate();
    Ok((c.into_samples(), sr))
}

#[pyfunction]
fn save_wav(samples: Vec<f32>, sample_rate: u32, path: PathBuf) -> PyResult<()> {
    deepa::save_wav(&clip(samples, sample_rate)?, path).map_err(err)
}

#[pyfunction]
fn resample(samples: Vec<f32>, sample_rate: u32, target_rate: u32) -> PyResult<Vec<f32>> {
    Ok(deepa::resample(&clip(samples, sample_rate)?, target_rate).map_err(err)?.into_samples())
}

/// Log-mel spectrogram as `mel_order` rows of frames, with the default analysis.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, mel_order = 80))]
fn mel_spectrogram(samples: Vec<f32>, sample_rate: u32, mel_order: usize) -> PyResult<Vec<Vec<f32>>> {
    let mel = deepa::mel_spectrogram(&clip(samples, sample_rate)?, mel_order, &deepa::StftConfig::default()).map_err(err)?;
    Ok(rows(&mel.values))
}

/// Per-frame F0 in Hz, 0 for unvoiced frames.
#[pyfunction]
#[pyo3(signature = (samples, sample_rate, frame_period_ms = 5.0, f0_floor = 60.0, f0_ceil = 600.0))]
fn estimate_f0(samples: Vec<f32>, sample_rate: u32, frame_period_ms: f64, f0_floor: f64, f0_ceil: f64) -> PyResult<Vec<f64>> {
    let f0 = deepa::estimate_f0(&clip(samples, sample_rate)?, frame_period_ms, f0_floor, f0_ceil).map_err(err)?;
    Ok(f0.values().to_vec())
}

#[pyfunction]
#[pyo3(signature = (reference, hypothesis, sample_rate, order = 24))]
fn mcd(reference: Vec<f32>, hypothesis: Vec<f32>, sample_rate: u32, order: usize) -> PyResult<f64> {
    deepa::eval::mcd(&clip(reference, sample_rate)?, &clip(hypothesis, sample_rate)?, order).map_err(err)
}

#[pyfunction]
fn f0_rmse(reference: Vec<f64>, hypothesis: Vec<f64>) -> PyResult<f64> {
    deepa::eval::f0_rmse(&contour(reference, 5.0)?, &contour(hypothesis, 5.0)?).map_err(err)
}

#[pyfunction]
fn f0_md(reference: Vec<f64>, hypothesis: Vec<f64>) -> PyResult<f64> {
    deepa::eval::f0_md(&contour(reference, 5.0)?, &contour(hypothesis, 5.0)?).map_err(err)
}

#[pyfunction]
fn vuv_error_rate(reference: Vec<f64>, hypothesis: Vec<f64>) -> PyResult<f64> {
    deepa::eval::vuv_error_rate(&contour(reference, 5.0)?, &contour(hypothesis, 5.0)?).map_err(err)
}

/// Mean per-element KL divergence of a diagonal Gaussian from the standard normal.
#[pyfunction]
fn kl_divergence(mu: Vec<Vec<f32>>, logvar: Vec<Vec<f32>>) -> PyResult<f64> {
    let dist = LatentDistribution {
        mu: from_rows(mu)?,
        logvar: from_rows(logvar)?,
        frame_period_ms: 5.0,
    };
    if dist.mu.dim() != dist.logvar.dim() {
        return Err(DeepaError::new_err("shape: mu and logvar differ"));
    }
    Ok(kl_loss(&dist))
}

/// Write the synthetic vowel corpus; returns the WAV paths.
#[pyfunction]
#[pyo3(signature = (directory, count = 120, seconds = 5.0, seed = 0))]
fn write_corpus(directory: PathBuf, count: usize, seconds: f64, seed: u64) -> PyResult<Vec<PathBuf>> {
    let cfg = deepa::corpus::CorpusConfig {
        num_utterances: count,
        utterance_secs: seconds,
        seed,
        ..Default::default()
    };
    deepa::corpus::write_corpus(&directory, &cfg).map_err(err)
}

/// A latent code: `2L` rows by `T` frames, last row normalized F0.
#[pyclass(module = "pydeepa", skip_from_py_object)]
#[derive(Clone)]
struct Latent {
    inner: LatentCode,
}

#[pymethods]
impl Latent {
    #[new]
    #[pyo3(signature = (rows, latent_dim, frame_period_ms = 5.0))]
    fn new(rows: Vec<Vec<f32>>, latent_dim: usize, frame_period_ms: f64) -> PyResult<Self> {
        Ok(Self {
            inner: LatentCode::new(from_rows(rows)?, latent_dim, frame_period_ms).map_err(err)?,
        })
    }

    #[getter]
    fn frames(&self) -> usize {
        self.inner.num_frames()
    }

    #[getter]
    fn latent_dim(&self) -> usize {
        self.inner.latent_dim
    }

    fn rows(&self) -> Vec<Vec<f32>> {
        rows(&self.inner.z)
    }

    /// The normalized F0 row, clamped to [0, 1].
    fn f0_row(&self) -> Vec<f64> {
        latent_f0(&self.inner)
    }

    /// A copy with the F0 row replaced.
    fn with_f0_row(&self, values: Vec<f64>) -> PyResult<Self> {
        Ok(Self {
            inner: set_latent_f0(&self.inner, &values).map_err(err)?,
        })
    }

    fn __repr__(&self) -> String {
        format!("Latent(L={}, T={})", self.inner.latent_dim, self.inner.num_frames())
    }
}

/// A trained analyzer/synthesizer pair loaded from a checkpoint.
#[pyclass(module = "pydeepa")]
struct Vocoder {
    inner: deepa::Vocoder,
}

#[pymethods]
impl Vocoder {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: deepa::Vocoder::load(&path).map_err(err)?,
        })
    }

    #[getter]
    fn checkpoint_id(&self) -> String {
        self.inner.checkpoint_id.clone()
    }

    #[getter]
    fn sample_rate(&self) -> u32 {
        self.inner.cfg.sample_rate
    }

    /// Posterior-mean code and the F0 (Hz) read back from its last row.
    fn analyze(&self, samples: Vec<f32>, sample_rate: u32) -> PyResult<(Latent, Vec<f64>)> {
        let a = self.inner.analyze(&clip(samples, sample_rate)?).map_err(err)?;
        Ok((Latent { inner: a.z }, a.f0.values().to_vec()))
    }

    /// Render a code; `f0` in Hz defaults to the code's own F0 row.
    #[pyo3(signature = (latent, f0 = None, seed = 0))]
    fn synthesize(&self, latent: &Latent, f0: Option<Vec<f64>>, seed: u64) -> PyResult<Vec<f32>> {
        let f0 = match f0 {
            Some(hz) => contour(hz, latent.inner.frame_period_ms)?,
            None => self.inner.latent_to_f0(&latent.inner).map_err(err)?,
        };
        Ok(self.inner.synthesize(&latent.inner, &f0, seed).map_err(err)?.into_samples())
    }

    #[pyo3(signature = (samples, sample_rate, seed = 0))]
    fn copy_synthesis(&self, samples: Vec<f32>, sample_rate: u32, seed: u64) -> PyResult<Vec<f32>> {
        Ok(self.inner.copy_synthesis(&clip(samples, sample_rate)?, seed).map_err(err)?.into_samples())
    }

    #[pyo3(signature = (samples, sample_rate, semitones, seed = 0))]
    fn pitch_shift(&self, samples: Vec<f32>, sample_rate: u32, semitones: f64, seed: u64) -> PyResult<Vec<f32>> {
        let out = self.inner.pitch_shift(&clip(samples, sample_rate)?, semitones, seed).map_err(err)?;
        Ok(out.audio.into_samples())
    }
}

/// Training driver. `config` is a JSON object with any subset of the
/// training fields; `data_dir` must hold 16 kHz WAVs.
#[pyclass(module = "pydeepa")]
struct Trainer {
    inner: deepa::Trainer,
}

#[pymethods]
impl Trainer {
    #[new]
    #[pyo3(signature = (data_dir, config = None))]
    fn new(data_dir: PathBuf, config: Option<&str>) -> PyResult<Self> {
        let mut cfg: TrainConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| DeepaError::new_err(format!("json: {e}")))?,
            None => TrainConfig::default(),
        };
        cfg.data_dir = data_dir;
        let data = Dataset::from_dir(&cfg).map_err(err)?;
        Ok(Self {
            inner: deepa::Trainer::new(cfg, data).map_err(err)?,
        })
    }

    #[getter]
    fn step_count(&self) -> u64 {
        self.inner.step
    }

    /// One optimizer step; returns the loss terms as a dict.
    fn step<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let l = self.inner.step().map_err(err)?;
        let d = PyDict::new(py);
        d.set_item("f0", l.f0_term)?;
        d.set_item("kl", l.kl_term)?;
        d.set_item("mel", l.mel_term)?;
        d.set_item("nsf", l.nsf_term)?;
        d.set_item("total", l.total)?;
        Ok(d)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }
}

#[pymodule]
fn pydeepa(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DeepaError", m.py().get_type::<DeepaError>())?;
    m.add_function(wrap_pyfunction!(load_wav, m)?)?;
    m.add_function(wrap_pyfunction!(save_wav, m)?)?;
    m.add_function(wrap_pyfunction!(resample, m)?)?;
    m.add_function(wrap_pyfunction!(mel_spectrogram, m)?)?;
    m.add_function(wrap_pyfunction!(estimate_f0, m)?)?;
    m.add_function(wrap_pyfunction!(mcd, m)?)?;
    m.add_function(wrap_pyfunction!(f0_rmse, m)?)?;
    m.add_function(wrap_pyfunction!(f0_md, m)?)?;
    m.add_function(wrap_pyfunction!(vuv_error_rate, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(write_corpus, m)?)?;
    m.add_class::<Latent>()?;
    m.add_class::<Vocoder>()?;
    m.add_class::<Trainer>()?;
    Ok(())
}
