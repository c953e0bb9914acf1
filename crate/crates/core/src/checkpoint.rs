//! Checkpoint directories: a human-readable `manifest.json` plus one tensor
//! container per weight and per optimizer moment.
//!
//! A checkpoint is written into a sibling temporary directory and renamed
//! into place, so readers never observe a half-written one.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::analyzer::AnalyzerArch;
use crate::container::TensorFile;
use crate::error::{Error, Result};
use crate::nn::{file_to_tensor, tensor_to_file};
use crate::synthesizer::SynthArch;
use crate::training::{AdamState, LossBreakdown, Model, TrainConfig};

pub const MANIFEST: &str = "manifest.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    /// Short identifier derived from the seed and step, copied into latent
    /// sidecars so outputs can be traced to the model that made them.
    pub checkpoint_id: String,
    pub step: u64,
    pub rng_seed: u64,
    pub analyzer: AnalyzerArch,
    pub synth: SynthArch,
    pub config: TrainConfig,
    pub loss_tail: Vec<LossBreakdown>,
    pub optimizer: OptimizerMeta,
    /// Parameter key to file name, relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: AdamState,
    pub step: u64,
    pub config: TrainConfig,
    pub manifest: Manifest,
}

fn file_name(key: &str) -> String {
    format!("tensors/{}.dpat", key.replace('/', "__"))
}

pub fn save_checkpoint(model: &Model, opt: &AdamState, step: u64, cfg: &TrainConfig, loss_tail: &[LossBreakdown], path: &Path) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint");
    let tmp = parent.join(format!(".{name}.tmp-{}", std::process::id()));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::create_dir_all(tmp.join("tensors")).map_err(|e| Error::io(&tmp, e))?;

    let mut tensors = BTreeMap::new();
    let mut write = |key: String, file: TensorFile| -> Result<()> {
        let rel = file_name(&key);
        file.write(tmp.join(&rel))?;
        tensors.insert(key, rel);
        Ok(())
    };
    for (key, var) in model.named_vars() {
        write(key, tensor_to_file(var.as_tensor())?)?;
    }
    for (key, t) in &opt.m {
        write(format!("adam_m/{key}"), tensor_to_file(t)?)?;
    }
    for (key, t) in &opt.v {
        write(format!("adam_v/{key}"), tensor_to_file(t)?)?;
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        checkpoint_id: format!("s{}-{:08x}", step, crate::training::mix_seed(cfg.rng_seed, step) as u32),
        step,
        rng_seed: cfg.rng_seed,
        analyzer: model.analyzer.arch.clone(),
        synth: model.synth.arch.clone(),
        config: cfg.clone(),
        loss_tail: loss_tail.to_vec(),
        optimizer: OptimizerMeta {
            step: opt.step,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
        },
        tensors,
    };
    let mpath = tmp.join(MANIFEST);
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

    if path.exists() {
        let old = parent.join(format!(".{name}.old-{}", std::process::id()));
        std::fs::rename(path, &old).map_err(|e| Error::io(path, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
        std::fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let mpath = path.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: mpath.clone(),
        reason: format!("manifest: {e}"),
    })?;
    if m.format_version != FORMAT_VERSION {
        return Err(Error::Unsupported(format!("checkpoint format version {}", m.format_version)));
    }
    Ok(m)
}

/// Architecture fields of `requested` that disagree with `manifest`.
fn check_architecture(manifest: &Manifest, requested: &TrainConfig) -> Result<()> {
    let a = &manifest.analyzer;
    let s = &manifest.synth;
    let checks: [(&'static str, String, String); 9] = [
        ("L", requested.latent_dim.to_string(), a.latent_dim.to_string()),
        ("mel_order", requested.mel_order.to_string(), a.mel_order.to_string()),
        ("analyzer_channels", requested.analyzer_channels.to_string(), a.channels.to_string()),
        ("synth_channels", requested.synth_channels.to_string(), s.channels.to_string()),
        ("num_harmonics", requested.num_harmonics.to_string(), s.num_harmonics.to_string()),
        ("kernel_size", requested.kernel_size.to_string(), a.kernel_size.to_string()),
        ("dilations", format!("{:?}", requested.dilations), format!("{:?}", a.dilations)),
        ("sample_rate", requested.sample_rate.to_string(), s.sample_rate.to_string()),
        ("hop_length", requested.hop_length().to_string(), s.hop_length.to_string()),
    ];
    for (field, expected, found) in checks {
        if expected != found {
            return Err(Error::ArchitectureMismatch { field: field.to_string(), expected, found });
        }
    }
    Ok(())
}

/// Loads a checkpoint. When `requested` is given its architecture must match
/// the manifest. Nothing is returned unless every tensor reads cleanly.
pub fn load_checkpoint(path: &Path, requested: Option<&TrainConfig>) -> Result<Checkpoint> {
    let manifest = read_manifest(path)?;
    if let Some(req) = requested {
        check_architecture(&manifest, req)?;
    }
    let mut files: BTreeMap<String, TensorFile> = BTreeMap::new();
    for (key, rel) in &manifest.tensors {
        files.insert(key.clone(), TensorFile::read(path.join(rel))?);
    }

    let mut cfg = manifest.config.clone();
    cfg.rng_seed = manifest.rng_seed;
    let mut model = Model::init(&cfg, DType::F32)?;
    if model.analyzer.arch != manifest.analyzer || model.synth.arch != manifest.synth {
        return Err(Error::Corrupt {
            path: path.join(MANIFEST),
            reason: "stored architecture disagrees with stored config".into(),
        });
    }
    let take = |prefix: &str| -> BTreeMap<String, TensorFile> {
        files
            .iter()
            .filter_map(|(k, f)| k.strip_prefix(prefix).map(|n| (n.to_string(), f.clone())))
            .collect()
    };
    model.analyzer.store_mut().import(&take("analyzer/"))?;
    model.synth.store_mut().import(&take("synth/"))?;

    let mut opt = AdamState::new(&model)?;
    opt.step = manifest.optimizer.step;
    opt.beta1 = manifest.optimizer.beta1;
    opt.beta2 = manifest.optimizer.beta2;
    opt.eps = manifest.optimizer.eps;
    for (moments, prefix) in [(&mut opt.m, "adam_m/"), (&mut opt.v, "adam_v/")] {
        let stored = take(prefix);
        for (key, t) in moments.iter_mut() {
            let f = stored.get(key).ok_or_else(|| Error::Corrupt {
                path: path.to_path_buf(),
                reason: format!("missing optimizer moment `{prefix}{key}`"),
            })?;
            if f.shape != t.dims() {
                return Err(Error::Corrupt {
                    path: path.to_path_buf(),
                    reason: format!("optimizer moment `{prefix}{key}` has shape {:?}", f.shape),
                });
            }
            *t = file_to_tensor(f, DType::F32)?;
        }
    }
    Ok(Checkpoint {
        model,
        optimizer: opt,
        step: manifest.step,
        config: cfg,
        manifest,
    })
}

/// Resolves a checkpoint argument: either a checkpoint directory or a
/// training output directory holding `latest/`.
pub fn resolve_checkpoint_path(path: &Path) -> PathBuf {
    if path.join(MANIFEST).exists() {
        path.to_path_buf()
    } else {
        path.join("latest")
    }
}
