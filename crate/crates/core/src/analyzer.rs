//! The variational analyzer: two parallel encoder C-blocks produce the
//! noise code `a` and harmonic code `s`; two decoder TC-blocks turn them into
//! sigmoid masks over the noise and harmonic source mel-spectrograms.
//!
//! The last row of `s` (row `2L - 1` of `z`) is trained toward normalized F0,
//! which is what makes the code editable.

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Init, ParamStore, StackArch};
use crate::spectral::{MelSpectrogram, MEL_FLOOR};

pub const LOGVAR_MIN: f64 = -14.0;
pub const LOGVAR_MAX: f64 = 14.0;

// Fixed affine applied to log-mel input before the first layer.
const MEL_CENTER: f64 = -4.0;
const MEL_SCALE: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnalyzerArch {
    /// `L`: rows in each of the noise and harmonic codes.
    pub latent_dim: usize,
    pub mel_order: usize,
    pub channels: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
}

impl Default for AnalyzerArch {
    fn default() -> Self {
        Self {
            latent_dim: 16,
            mel_order: 80,
            channels: 128,
            kernel_size: 3,
            dilations: vec![1, 2, 4, 8, 16],
        }
    }
}

impl AnalyzerArch {
    pub fn stack(&self) -> StackArch {
        StackArch {
            channels: self.channels,
            kernel_size: self.kernel_size,
            dilations: self.dilations.clone(),
        }
    }

    pub fn code_rows(&self) -> usize {
        2 * self.latent_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim < 2 {
            return Err(Error::InvalidInput("latent dimension must be at least 2".into()));
        }
        if self.mel_order == 0 || self.channels == 0 || self.kernel_size % 2 == 0 {
            return Err(Error::InvalidInput(
                "mel order and channels must be positive, kernel size odd".into(),
            ));
        }
        Ok(())
    }
}

const BRANCHES: [&str; 2] = ["noise", "harm"];

#[derive(Debug, Clone)]
pub struct AnalyzerParams {
    pub arch: AnalyzerArch,
    pub(crate) store: ParamStore,
}

impl AnalyzerParams {
    pub fn init(arch: AnalyzerArch, seed: u64, dtype: DType) -> Result<Self> {
        arch.validate()?;
        let mut store = ParamStore::new(dtype);
        let mut init = Init::new(seed);
        let stack = arch.stack();
        let (c, l, m) = (arch.channels, arch.latent_dim, arch.mel_order);
        for b in BRANCHES {
            nn::add_pointwise(&mut store, &mut init, &format!("enc.{b}.lift"), m, c, 1.0)?;
            nn::add_residual_stack(&mut store, &mut init, &format!("enc.{b}.stack"), &stack)?;
            nn::add_pointwise(&mut store, &mut init, &format!("enc.{b}.mu"), c, l, 1.0)?;
            nn::add_pointwise(&mut store, &mut init, &format!("enc.{b}.logvar"), c, l, 0.1)?;
        }
        for b in BRANCHES {
            nn::add_pointwise(&mut store, &mut init, &format!("dec.{b}.lift"), l, c, 1.0)?;
            nn::add_residual_stack(&mut store, &mut init, &format!("dec.{b}.stack"), &stack)?;
            nn::add_pointwise(&mut store, &mut init, &format!("dec.{b}.proj"), c, m, 1.0)?;
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

    /// Frames of input context that influence one encoded frame.
    pub fn receptive_field(&self) -> usize {
        self.arch.stack().receptive_field()
    }

    /// `(batch, M, T)` log-mel to `(batch, 2L, T)` mean and clamped log-variance.
    pub fn encode_tensor(&self, mel: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, m, _) = mel.dims3()?;
        if m != self.arch.mel_order {
            return Err(Error::Shape(format!(
                "mel order {m} does not match the analyzer's {}",
                self.arch.mel_order
            )));
        }
        let x = mel.affine(1.0 / MEL_SCALE, -MEL_CENTER / MEL_SCALE)?;
        let stack = self.arch.stack();
        let mut mus = Vec::with_capacity(2);
        let mut logvars = Vec::with_capacity(2);
        for b in BRANCHES {
            let h = nn::pointwise(&self.store, &format!("enc.{b}.lift"), &x)?;
            let h = nn::residual_stack(&self.store, &format!("enc.{b}.stack"), &stack, h)?;
            mus.push(nn::pointwise(&self.store, &format!("enc.{b}.mu"), &h)?);
            logvars.push(nn::pointwise(&self.store, &format!("enc.{b}.logvar"), &h)?);
        }
        let mu = Tensor::cat(&mus, 1)?;
        let logvar = Tensor::cat(&logvars, 1)?.clamp(LOGVAR_MIN, LOGVAR_MAX)?;
        Ok((mu, logvar))
    }

    /// Masks `(m_s, m_a)` for a `(batch, 2L, T)` code.
    pub fn masks_tensor(&self, z: &Tensor) -> Result<(Tensor, Tensor)> {
        let (_, rows, _) = z.dims3()?;
        let l = self.arch.latent_dim;
        if rows != 2 * l {
            return Err(Error::Shape(format!("code has {rows} rows, expected {}", 2 * l)));
        }
        let stack = self.arch.stack();
        let mask = |b: &str, code: &Tensor| -> Result<Tensor> {
            let h = nn::pointwise(&self.store, &format!("dec.{b}.lift"), code)?;
            let h = nn::residual_stack(&self.store, &format!("dec.{b}.stack"), &stack, h)?;
            nn::sigmoid(&nn::pointwise(&self.store, &format!("dec.{b}.proj"), &h)?)
        };
        let m_a = mask("noise", &z.narrow(1, 0, l)?)?;
        let m_s = mask("harm", &z.narrow(1, l, l)?)?;
        Ok((m_s, m_a))
    }

    /// Reconstructed log-mel: `log(max(m_s * hs + m_a * ns, floor))` with the
    /// sources given as linear mel magnitudes.
    pub fn decode_tensor(&self, z: &Tensor, hs_linear: &Tensor, ns_linear: &Tensor) -> Result<Tensor> {
        let (m_s, m_a) = self.masks_tensor(z)?;
        if m_s.dims() != hs_linear.dims() || m_a.dims() != ns_linear.dims() {
            return Err(Error::Shape(format!(
                "masks {:?} vs sources {:?} / {:?}",
                m_s.dims(),
                hs_linear.dims(),
                ns_linear.dims()
            )));
        }
        let lin = ((m_s * hs_linear)? + (m_a * ns_linear)?)?;
        Ok(lin.maximum(MEL_FLOOR)?.log()?)
    }
}

/// Per-frame Gaussian posterior over the code.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Array2<f32>,
    pub logvar: Array2<f32>,
    pub frame_period_ms: f64,
}

/// `z`: noise code `a` in rows `0..L`, harmonic code `s` in rows `L..2L`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub z: Array2<f32>,
    pub latent_dim: usize,
    pub frame_period_ms: f64,
}

impl LatentCode {
    pub fn new(z: Array2<f32>, latent_dim: usize, frame_period_ms: f64) -> Result<Self> {
        if z.nrows() != 2 * latent_dim {
            return Err(Error::Shape(format!(
                "code has {} rows, expected {}",
                z.nrows(),
                2 * latent_dim
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("latent code contains non-finite values".into()));
        }
        Ok(Self {
            z,
            latent_dim,
            frame_period_ms,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.z.ncols()
    }

    pub fn f0_row(&self) -> usize {
        2 * self.latent_dim - 1
    }

    pub(crate) fn to_tensor(&self, dtype: DType) -> Result<Tensor> {
        let flat: Vec<f32> = self.z.iter().copied().collect();
        nn::batch1(&flat, self.z.nrows(), self.z.ncols(), dtype)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    /// Inference: `z = mu`.
    Mean,
    /// Training: `z = mu + exp(logvar / 2) * eps` with seeded standard normal `eps`.
    Random(u64),
}

fn mel_tensor(mel: &MelSpectrogram, dtype: DType) -> Result<Tensor> {
    let flat: Vec<f32> = mel.values.iter().copied().collect();
    nn::batch1(&flat, mel.mel_order(), mel.num_frames(), dtype)
}

pub(crate) fn tensor_to_array(t: &Tensor) -> Result<Array2<f32>> {
    let t = t.squeeze(0)?.to_dtype(DType::F32)?;
    let (r, c) = t.dims2()?;
    Array2::from_shape_vec((r, c), t.flatten_all()?.to_vec1::<f32>()?).map_err(|e| Error::Shape(e.to_string()))
}

/// Encodes a log-mel spectrogram into the code posterior.
pub fn encode(mel: &MelSpectrogram, params: &AnalyzerParams) -> Result<LatentDistribution> {
    let x = mel_tensor(mel, params.dtype())?;
    let (mu, logvar) = params.encode_tensor(&x)?;
    Ok(LatentDistribution {
        mu: tensor_to_array(&mu)?,
        logvar: tensor_to_array(&logvar)?,
        frame_period_ms: mel.frame_period_ms,
    })
}

pub fn reparameterize(dist: &LatentDistribution, sampling: Sampling) -> Result<LatentCode> {
    let latent_dim = dist.mu.nrows() / 2;
    let z = match sampling {
        Sampling::Mean => dist.mu.clone(),
        Sampling::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut z = dist.mu.clone();
            for (zv, &lv) in z.iter_mut().zip(dist.logvar.iter()) {
                let eps: f64 = StandardNormal.sample(&mut rng);
                *zv += ((lv as f64 / 2.0).exp() * eps) as f32;
            }
            z
        }
    };
    LatentCode::new(z, latent_dim, dist.frame_period_ms)
}

/// Linear magnitudes of a log-mel; bins at the floor are silence and carry
/// no energy.
fn linear_energy(mel: &MelSpectrogram, dtype: DType) -> Result<Tensor> {
    let floor = MEL_FLOOR.ln() as f32;
    let flat: Vec<f32> = mel.values.iter().map(|&v| if v <= floor { 0.0 } else { v.exp() }).collect();
    nn::batch1(&flat, mel.mel_order(), mel.num_frames(), dtype)
}

/// Reconstructs the log-mel from a code and the two source spectrograms.
pub fn decode(z: &LatentCode, hs_mel: &MelSpectrogram, ns_mel: &MelSpectrogram, params: &AnalyzerParams) -> Result<MelSpectrogram> {
    let t = z.num_frames();
    for (name, m) in [("harmonic", hs_mel), ("noise", ns_mel)] {
        if m.num_frames() != t || m.mel_order() != params.arch.mel_order {
            return Err(Error::Shape(format!(
                "{name} source is {}x{}, expected {}x{t}",
                m.mel_order(),
                m.num_frames(),
                params.arch.mel_order
            )));
        }
    }
    let dtype = params.dtype();
    let hs = linear_energy(hs_mel, dtype)?;
    let ns = linear_energy(ns_mel, dtype)?;
    let x_hat = params.decode_tensor(&z.to_tensor(dtype)?, &hs, &ns)?;
    Ok(MelSpectrogram {
        values: tensor_to_array(&x_hat)?,
        sample_rate: hs_mel.sample_rate,
        frame_period_ms: hs_mel.frame_period_ms,
    })
}

/// Row `2L - 1` of the code, clamped to `[0, 1]`.
pub fn latent_f0(z: &LatentCode) -> Vec<f64> {
    z.z.row(z.f0_row()).iter().map(|&v| (v as f64).clamp(0.0, 1.0)).collect()
}

/// Replaces row `2L - 1`; every other row is left untouched.
pub fn set_latent_f0(z: &LatentCode, f0_norm: &[f64]) -> Result<LatentCode> {
    if f0_norm.len() != z.num_frames() {
        return Err(Error::Shape(format!(
            "{} F0 values for a code with {} frames",
            f0_norm.len(),
            z.num_frames()
        )));
    }
    let mut out = z.clone();
    for (dst, &v) in out.z.row_mut(z.f0_row()).iter_mut().zip(f0_norm) {
        *dst = v as f32;
    }
    Ok(out)
}

/// Convenience for tests and tools: a `(1, rows, cols)` tensor on the CPU.
pub fn array_to_tensor(a: &Array2<f32>, dtype: DType) -> Result<Tensor> {
    let flat: Vec<f32> = a.iter().copied().collect();
    Ok(Tensor::from_vec(flat, (1, a.nrows(), a.ncols()), &Device::Cpu)?.to_dtype(dtype)?)
}
