//! Named parameters and the convolutional building blocks shared by the
//! analyzer and the synthesizer. Activations are `(batch, channels, time)`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::{TensorData, TensorFile};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Ordered map of trainable tensors.
#[derive(Debug, Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        self.vars.insert(name.into(), Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.vars
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter `{name}`")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every parameter into a container, keeping the store's precision.
    pub fn export(&self) -> Result<BTreeMap<String, TensorFile>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), tensor_to_file(v.as_tensor())?)))
            .collect()
    }

    /// Overwrites parameters from containers; names and shapes must match exactly.
    pub fn import(&mut self, files: &BTreeMap<String, TensorFile>) -> Result<()> {
        for (name, var) in &self.vars {
            let f = files
                .get(name)
                .ok_or_else(|| Error::InvalidInput(format!("checkpoint lacks parameter `{name}`")))?;
            if f.shape != var.dims() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` has shape {:?} in the checkpoint, expected {:?}",
                    f.shape,
                    var.dims()
                )));
            }
        }
        if let Some(extra) = files.keys().find(|k| !self.vars.contains_key(*k)) {
            return Err(Error::InvalidInput(format!("unexpected parameter `{extra}` in checkpoint")));
        }
        for (name, var) in &self.vars {
            var.set(&file_to_tensor(&files[name], self.dtype)?)?;
        }
        Ok(())
    }

    /// Deep copy with independent storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let vars = self
            .vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars,
            dtype: self.dtype,
        })
    }

    pub fn all_finite(&self) -> Result<bool> {
        for v in self.vars.values() {
            let s = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

pub(crate) fn tensor_to_file(t: &Tensor) -> Result<TensorFile> {
    let shape = t.dims().to_vec();
    let flat = t.flatten_all()?;
    let data = match t.dtype() {
        DType::F64 => TensorData::F64(flat.to_vec1::<f64>()?),
        _ => TensorData::F32(flat.to_dtype(DType::F32)?.to_vec1::<f32>()?),
    };
    TensorFile::new(shape, data)
}

pub(crate) fn file_to_tensor(f: &TensorFile, dtype: DType) -> Result<Tensor> {
    let t = match &f.data {
        TensorData::F32(v) => Tensor::from_slice(v, f.shape.as_slice(), &Device::Cpu)?,
        TensorData::F64(v) => Tensor::from_slice(v, f.shape.as_slice(), &Device::Cpu)?,
    };
    Ok(t.to_dtype(dtype)?)
}

/// Fan-in scaled uniform initializer, `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, n: usize, fan_in: usize, gain: f64) -> Vec<f64> {
        let bound = gain / (fan_in as f64).sqrt();
        (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
    }
}

/// Hyperparameters of a residual stack of dilated convolutions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackArch {
    pub channels: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
}

impl StackArch {
    /// Frames seen by one output frame.
    pub fn receptive_field(&self) -> usize {
        1 + (self.kernel_size - 1) * self.dilations.iter().sum::<usize>()
    }
}

/// `y = W x + b` over channels.
pub(crate) fn pointwise(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    let y = w.broadcast_matmul(x)?;
    Ok(y.broadcast_add(&b.unsqueeze(1)?)?)
}

pub(crate) fn add_pointwise(store: &mut ParamStore, init: &mut Init, prefix: &str, c_in: usize, c_out: usize, gain: f64) -> Result<()> {
    store.insert(format!("{prefix}.weight"), &[c_out, c_in], init.uniform(c_out * c_in, c_in, gain))?;
    store.insert(format!("{prefix}.bias"), &[c_out], vec![0.0; c_out])
}

/// Same-length dilated convolution: the `kernel` taps are stacked along the
/// channel axis and contracted in a single matmul.
pub(crate) fn dilated_conv(store: &ParamStore, prefix: &str, x: &Tensor, kernel: usize, dilation: usize) -> Result<Tensor> {
    let stacked = crate::fused::taps(x, kernel, dilation)?;
    let w = store.get(&format!("{prefix}.weight"))?;
    let b = store.get(&format!("{prefix}.bias"))?;
    Ok(w.broadcast_matmul(&stacked)?.broadcast_add(&b.unsqueeze(1)?)?)
}

pub(crate) fn add_dilated_conv(store: &mut ParamStore, init: &mut Init, prefix: &str, c_in: usize, c_out: usize, kernel: usize) -> Result<()> {
    let fan_in = c_in * kernel;
    store.insert(format!("{prefix}.weight"), &[c_out, fan_in], init.uniform(c_out * fan_in, fan_in, 1.0))?;
    store.insert(format!("{prefix}.bias"), &[c_out], vec![0.0; c_out])
}

/// Layer normalization across channels at every time step.
pub(crate) fn channel_norm(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(1)?;
    let normed = centered.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
    let g = store.get(&format!("{prefix}.gain"))?.unsqueeze(1)?;
    let b = store.get(&format!("{prefix}.bias"))?.unsqueeze(1)?;
    Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?)
}

pub(crate) fn add_channel_norm(store: &mut ParamStore, prefix: &str, channels: usize) -> Result<()> {
    store.insert(format!("{prefix}.gain"), &[channels], vec![1.0; channels])?;
    store.insert(format!("{prefix}.bias"), &[channels], vec![0.0; channels])
}

pub(crate) fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(((x * 0.5)?.tanh()? * 0.5)?.affine(1.0, 0.5)?)
}

/// Residual stack: each layer is `h + silu(norm(conv(h)))`.
pub(crate) fn residual_stack(store: &ParamStore, prefix: &str, arch: &StackArch, mut h: Tensor) -> Result<Tensor> {
    for (i, &d) in arch.dilations.iter().enumerate() {
        let p = format!("{prefix}.layers.{i}");
        let y = dilated_conv(store, &format!("{p}.conv"), &h, arch.kernel_size, d)?;
        let y = crate::fused::silu(&channel_norm(store, &format!("{p}.norm"), &y)?)?;
        h = (h + y)?;
    }
    Ok(h)
}

pub(crate) fn add_residual_stack(store: &mut ParamStore, init: &mut Init, prefix: &str, arch: &StackArch) -> Result<()> {
    for i in 0..arch.dilations.len() {
        let p = format!("{prefix}.layers.{i}");
        add_dilated_conv(store, init, &format!("{p}.conv"), arch.channels, arch.channels, arch.kernel_size)?;
        add_channel_norm(store, &format!("{p}.norm"), arch.channels)?;
    }
    Ok(())
}

/// Linear interpolation along time from frames centred at `t * hop` to
/// `frames * hop` samples; the last frame is held.
pub(crate) fn upsample_linear(x: &Tensor, hop: usize) -> Result<Tensor> {
    let (_, _, frames) = x.dims3()?;
    let n = frames * hop;
    let mut lo = Vec::with_capacity(n);
    let mut hi = Vec::with_capacity(n);
    let mut w = Vec::with_capacity(n);
    for s in 0..n {
        let i = s / hop;
        lo.push(i as u32);
        hi.push((i + 1).min(frames - 1) as u32);
        w.push((s % hop) as f64 / hop as f64);
    }
    let dev = x.device();
    let lo = Tensor::from_vec(lo, n, dev)?;
    let hi = Tensor::from_vec(hi, n, dev)?;
    let w_hi = Tensor::from_vec(w, n, dev)?.to_dtype(x.dtype())?;
    let w_lo = w_hi.affine(-1.0, 1.0)?;
    let a = x.index_select(&lo, 2)?.broadcast_mul(&w_lo)?;
    let b = x.index_select(&hi, 2)?.broadcast_mul(&w_hi)?;
    Ok((a + b)?)
}

/// Converts a row-major `(rows, cols)` slice to a `(1, rows, cols)` tensor.
pub(crate) fn batch1(values: &[f32], rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(values, (1, rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dilated_conv_matches_direct_sum() {
        let mut store = ParamStore::new(DType::F64);
        let mut init = Init::new(3);
        add_dilated_conv(&mut store, &mut init, "c", 2, 3, 3).unwrap();
        let xs: Vec<f64> = (0..2 * 9).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = Tensor::from_vec(xs.clone(), (1, 2, 9), &Device::Cpu).unwrap();
        let y = dilated_conv(&store, "c", &x, 3, 2).unwrap();
        let w = store.get("c.weight").unwrap().to_vec2::<f64>().unwrap();
        let y = y.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for o in 0..3 {
            for t in 0..9 {
                let mut acc = 0.0;
                for k in 0..3 {
                    let src = t as isize + (k as isize - 1) * 2;
                    if !(0..9).contains(&src) {
                        continue;
                    }
                    for c in 0..2 {
                        acc += w[o][k * 2 + c] * xs[c * 9 + src as usize];
                    }
                }
                assert!((y[o][t] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn linear_upsampling() {
        let x = Tensor::from_vec(vec![100.0f64, 200.0], (1, 1, 2), &Device::Cpu).unwrap();
        let u = upsample_linear(&x, 80).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(u.len(), 160);
        assert!((u[40] - 150.0).abs() < 1e-12);
        assert_eq!(u[159], 200.0);
    }

    #[test]
    fn channel_norm_zero_mean_unit_var() {
        let mut store = ParamStore::new(DType::F64);
        add_channel_norm(&mut store, "n", 4).unwrap();
        let x = Tensor::from_vec((0..12).map(|i| (i * i) as f64).collect::<Vec<_>>(), (1, 4, 3), &Device::Cpu).unwrap();
        let y = channel_norm(&store, "n", &x).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for t in 0..3 {
            let col: Vec<f64> = (0..4).map(|c| y[c][t]).collect();
            let m = col.iter().sum::<f64>() / 4.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn export_import_round_trip() {
        let mut a = ParamStore::new(DType::F32);
        let mut init = Init::new(1);
        add_pointwise(&mut a, &mut init, "p", 3, 2, 1.0).unwrap();
        let files = a.export().unwrap();
        let mut b = ParamStore::new(DType::F32);
        add_pointwise(&mut b, &mut Init::new(99), "p", 3, 2, 1.0).unwrap();
        b.import(&files).unwrap();
        assert_eq!(b.export().unwrap(), files);
    }
}
