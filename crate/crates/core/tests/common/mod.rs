#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use deepa::f0::F0Contour;
use deepa::sources::harmonic_source;
use deepa::spectral::StftConfig;
use deepa::training::{build_batch, forward_losses, Batch, Model, TensorStft, TrainConfig, Utterance};
use deepa::AudioClip;

pub const TERMS: [&str; 4] = ["f0_term", "kl_term", "mel_term", "nsf_term"];

/// L=2, M=8 model small enough for finite differences over every parameter.
pub fn micro_config() -> TrainConfig {
    TrainConfig {
        latent_dim: 2,
        mel_order: 8,
        analyzer_channels: 4,
        synth_channels: 3,
        num_harmonics: 3,
        dilations: vec![1, 2],
        batch_size: 1,
        crop_frames: 4,
        loss_resolutions: vec![StftConfig::new(64, 16, 48), StftConfig::new(128, 32, 96)],
        ..TrainConfig::default()
    }
}

/// A T=4 batch cut from an energetic voiced clip.
pub fn micro_batch(cfg: &TrainConfig) -> Batch {
    let frames = 4;
    let hop = cfg.hop_length();
    let f0 = F0Contour::from_hz(vec![180.0, 190.0, 200.0, 0.0], cfg.frame_period_ms).unwrap();
    let h = harmonic_source(&f0, cfg.sample_rate).unwrap();
    let y: Vec<f32> = h
        .samples()
        .iter()
        .enumerate()
        .map(|(n, &v)| 0.6 * v + 0.05 * ((n as f32) * 2.3).sin())
        .collect();
    assert_eq!(y.len(), frames * hop);
    let clip = AudioClip::new(y, cfg.sample_rate).unwrap();
    let u = Utterance::prepare("micro", &clip, &f0, cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    build_batch(&[(&u, 0)], cfg, frames, &mut rng, DType::F64).unwrap()
}

pub struct GradReport {
    pub term: &'static str,
    pub params: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

fn term_value(model: &Model, batch: &Batch, stfts: &[TensorStft], i: usize) -> f64 {
    let (_, terms) = forward_losses(model, batch, stfts, 100.0, 0.01).unwrap();
    terms[i].to_scalar::<f64>().unwrap()
}

/// Central differences against autograd for each loss term separately.
/// Relative error is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(step: f64, floor: f64) -> Vec<GradReport> {
    let cfg = micro_config();
    let model = Model::init(&cfg, DType::F64).unwrap();
    let batch = micro_batch(&cfg);
    let stfts: Vec<TensorStft> = cfg.loss_resolutions.iter().map(|r| TensorStft::new(*r, DType::F64).unwrap()).collect();
    let mut out = Vec::new();
    for (i, term) in TERMS.iter().enumerate() {
        let (_, terms) = forward_losses(&model, &batch, &stfts, 100.0, 0.01).unwrap();
        let grads = terms[i].backward().unwrap();
        let mut worst = (0.0f64, String::new());
        let mut count = 0;
        for (name, var) in model.named_vars() {
            let base = var.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
            let shape = var.as_tensor().dims().to_vec();
            let analytic = match grads.get(var.as_tensor()) {
                Some(g) => g.flatten_all().unwrap().to_vec1::<f64>().unwrap(),
                None => vec![0.0; base.len()],
            };
            for j in 0..base.len() {
                let mut p = base.clone();
                p[j] = base[j] + step;
                var.set(&Tensor::from_vec(p.clone(), shape.as_slice(), var.device()).unwrap()).unwrap();
                let up = term_value(&model, &batch, &stfts, i);
                p[j] = base[j] - step;
                var.set(&Tensor::from_vec(p, shape.as_slice(), var.device()).unwrap()).unwrap();
                let down = term_value(&model, &batch, &stfts, i);
                let numeric = (up - down) / (2.0 * step);
                let a = analytic[j];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
                if rel > worst.0 {
                    worst = (rel, format!("{name}[{j}] analytic {a:.6e} numeric {numeric:.6e}"));
                }
                count += 1;
            }
            var.set(&Tensor::from_vec(base, shape.as_slice(), var.device()).unwrap()).unwrap();
        }
        out.push(GradReport {
            term,
            params: count,
            worst_rel: worst.0,
            worst_at: worst.1,
        });
    }
    out
}
