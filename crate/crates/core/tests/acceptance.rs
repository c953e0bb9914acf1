//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion names as arguments to run a
//! subset, e.g. `cargo test --test acceptance -- pitch_shift`.

mod common;

use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::sync::OnceLock;
use std::time::Instant;

use candle_core::DType;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rustfft::{num_complex::Complex64, FftPlanner};

use deepa::analyzer::{decode, encode, latent_f0, reparameterize, set_latent_f0, LatentDistribution, Sampling};
use deepa::corpus::{constant_vowel, generate_utterance, CorpusConfig, VOWELS};
use deepa::eval::{evaluate_corpus, f0_md, f0_rmse, mcd, mcd_with, vuv_error_rate, EvalConfig};
use deepa::f0::{spectral_periodicity_check, vuv_agreement, AperiodicityMap, FrameRange, PeriodicityConfig, PeriodicityIssue, SuspiciousRange};
use deepa::pipeline::{extract_features, Vocoder};
use deepa::spectral::{MelExtractor, MelSpectrogram, StftConfig};
use deepa::synthesizer::sine_excitation;
use deepa::training::{kl_loss, Dataset, LossBreakdown, Model, TrainConfig, Trainer, TrainingLog, Utterance};
use deepa::{synthesize, AudioClip, F0Contour};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn contour(hz: Vec<f64>) -> F0Contour {
    F0Contour::from_hz(hz, 5.0).unwrap()
}

// ---------------------------------------------------------------------------
// Independent metric implementations. Everything below is written from the
// textbook definitions: a direct O(N^2) DFT, triangular filters on the HTK mel
// scale, an explicit DCT-II sum and order statistics found by counting.

struct Analysis {
    sr: u32,
    fft: usize,
    hop: usize,
    win: usize,
    mels: usize,
}

fn naive_log_mel(x: &[f64], a: &Analysis) -> Vec<Vec<f64>> {
    let sr = a.sr as f64;
    let mel = |f: f64| 1127.0 * (1.0 + f / 700.0).ln();
    let hz = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    let top = mel(sr / 2.0);
    let edges: Vec<f64> = (0..a.mels + 2).map(|i| hz(top * i as f64 / (a.mels + 1) as f64)).collect();
    let bins = a.fft / 2 + 1;
    let frames = x.len().div_ceil(a.hop);
    // Frame t's window is centred on sample t * hop.
    let first = |t: usize| (t * a.hop) as isize - (a.fft / 2) as isize + ((a.fft - a.win) / 2) as isize;
    (0..frames)
        .map(|t| {
            let seg: Vec<f64> = (0..a.win)
                .map(|j| {
                    let i = first(t) + j as isize;
                    let v = if i >= 0 && (i as usize) < x.len() { x[i as usize] } else { 0.0 };
                    v * (0.5 - 0.5 * (2.0 * PI * j as f64 / a.win as f64).cos())
                })
                .collect();
            let mag: Vec<f64> = (0..bins)
                .map(|k| {
                    let (mut re, mut im) = (0.0, 0.0);
                    for (j, v) in seg.iter().enumerate() {
                        let ang = -2.0 * PI * ((k * j) % a.fft) as f64 / a.fft as f64;
                        re += v * ang.cos();
                        im += v * ang.sin();
                    }
                    (re * re + im * im).sqrt()
                })
                .collect();
            (0..a.mels)
                .map(|m| {
                    let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                    let e: f64 = (0..bins)
                        .map(|k| {
                            let f = k as f64 * sr / a.fft as f64;
                            let w = if f > l && f <= c {
                                (f - l) / (c - l)
                            } else if f > c && f < r {
                                (r - f) / (r - c)
                            } else {
                                0.0
                            };
                            w * mag[k]
                        })
                        .sum();
                    e.max(1e-5).ln()
                })
                .collect()
        })
        .collect()
}

fn naive_dct(v: &[f64], q: usize) -> f64 {
    let n = v.len() as f64;
    let s: f64 = v.iter().enumerate().map(|(i, x)| x * (PI * q as f64 * (i as f64 + 0.5) / n).cos()).sum();
    s * if q == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() }
}

fn naive_mcd(a: &[f64], b: &[f64], an: &Analysis, order: usize) -> f64 {
    let len = a.len().max(b.len());
    let pad = |x: &[f64]| {
        let mut v = x.to_vec();
        v.resize(len, 0.0);
        v
    };
    let (ma, mb) = (naive_log_mel(&pad(a), an), naive_log_mel(&pad(b), an));
    let total: f64 = ma
        .iter()
        .zip(&mb)
        .map(|(fa, fb)| (1..=order).map(|q| (naive_dct(fa, q) - naive_dct(fb, q)).powi(2)).sum::<f64>().sqrt())
        .sum();
    10.0 * 2f64.sqrt() / 10f64.ln() * total / ma.len() as f64
}

/// Absolute differences on frames voiced in either contour, unvoiced as 0 Hz.
fn naive_diffs(r: &[f64], h: &[f64]) -> Vec<f64> {
    let mut d = Vec::new();
    for i in 0..r.len() {
        if r[i] > 0.0 || h[i] > 0.0 {
            d.push((r[i] - h[i]).abs());
        }
    }
    d
}

/// The k-th smallest value (0-based), found by counting rather than sorting.
fn order_statistic(v: &[f64], k: usize) -> f64 {
    for &x in v {
        let below = v.iter().filter(|&&y| y < x).count();
        let at_most = v.iter().filter(|&&y| y <= x).count();
        if below <= k && k < at_most {
            return x;
        }
    }
    unreachable!()
}

fn naive_median(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        order_statistic(v, n / 2)
    } else {
        (order_statistic(v, n / 2 - 1) + order_statistic(v, n / 2)) / 2.0
    }
}

fn random_contour(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let p = rng.random_range(0.0..1.0);
    (0..n)
        .map(|_| if rng.random_bool(p) { rng.random_range(60.0..600.0) } else { 0.0 })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let tol = 1e-9;
    let mut worst = 0.0f64;

    for case in 0..1000 {
        // Small analyses keep the O(N^2) reference fast.
        let fft = [32, 64, 128][rng.random_range(0..3)];
        let win = rng.random_range(fft / 2..=fft);
        let hop = rng.random_range((win / 4).max(1)..=win);
        let mels = rng.random_range(4..=24);
        let order = rng.random_range(1..mels);
        let an = Analysis { sr: 16000, fft, hop, win, mels };
        let gain = 10f64.powf(rng.random_range(-3.0..0.0));
        let clip = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let n = rng.random_range(1..400);
            (0..n).map(|_| ((gain * normal.sample(rng)) as f32) as f64).collect()
        };
        let a = clip(&mut rng);
        let b = clip(&mut rng);
        let to_clip = |x: &[f64]| AudioClip::new(x.iter().map(|&v| v as f32).collect(), 16000).unwrap();
        let ex = MelExtractor::new(16000, mels, StftConfig::new(fft, hop, win)).unwrap();
        let got = mcd_with(&ex, &to_clip(&a), &to_clip(&b), order).unwrap();
        let want = naive_mcd(&a, &b, &an, order);
        ensure!(rel_close(got, want, tol), "mcd case {case}: {got} vs reference {want}");
        worst = worst.max((got - want).abs() / want.abs().max(1e-300));
        let sym = mcd_with(&ex, &to_clip(&b), &to_clip(&a), order).unwrap();
        ensure!(rel_close(got, sym, tol), "mcd not symmetric in case {case}");

        let n = rng.random_range(1..60);
        let r = random_contour(&mut rng, n);
        let h = random_contour(&mut rng, n);
        let (cr, ch) = (contour(r.clone()), contour(h.clone()));
        let d = naive_diffs(&r, &h);
        let rmse_want = if d.is_empty() { 0.0 } else { (d.iter().map(|x| x * x).sum::<f64>() / d.len() as f64).sqrt() };
        let rmse = f0_rmse(&cr, &ch).unwrap();
        ensure!(rel_close(rmse, rmse_want, tol), "rmse case {case}: {rmse} vs {rmse_want}");
        match f0_md(&cr, &ch) {
            Ok(md) => {
                ensure!(!d.is_empty(), "md case {case} returned {md} with no included frames");
                let want = naive_median(&d);
                ensure!(rel_close(md, want, tol), "md case {case}: {md} vs {want}");
                ensure!(md == f0_md(&ch, &cr).unwrap(), "md not symmetric in case {case}");
            }
            Err(_) => ensure!(d.is_empty(), "md case {case} failed with included frames"),
        }
        let flips = r.iter().zip(&h).filter(|(a, b)| (**a > 0.0) != (**b > 0.0)).count();
        let vuv = vuv_error_rate(&cr, &ch).unwrap();
        ensure!(rel_close(vuv, flips as f64 / n as f64, tol), "vuv case {case}: {vuv}");
    }

    // The default 80-bin, 1024-point analysis on a few clips.
    let an = Analysis { sr: 16000, fft: 1024, hop: 80, win: 400, mels: 80 };
    for case in 0..3 {
        let n = 400 + 300 * case;
        let a: Vec<f64> = (0..n).map(|i| ((0.3 * (2.0 * PI * 220.0 * i as f64 / 16000.0).sin()) as f32) as f64).collect();
        let b: Vec<f64> = (0..n - 50).map(|_| ((0.05 * normal.sample(&mut rng)) as f32) as f64).collect();
        let to_clip = |x: &[f64]| AudioClip::new(x.iter().map(|&v| v as f32).collect(), 16000).unwrap();
        let got = mcd(&to_clip(&a), &to_clip(&b), 24).unwrap();
        let want = naive_mcd(&a, &b, &an, 24);
        ensure!(rel_close(got, want, tol), "default-analysis mcd case {case}: {got} vs {want}");
    }

    // The median convention and outlier robustness.
    let md = |r: &[f64], h: &[f64]| f0_md(&contour(r.to_vec()), &contour(h.to_vec())).unwrap();
    ensure!(md(&[100.0, 100.0, 100.0], &[101.0, 102.0, 400.0]) == 2.0, "diffs {{1, 2, 300}} must give 2");
    ensure!(md(&[100.0, 100.0], &[101.0, 103.0]) == 2.0, "diffs {{1, 3}} must give 2");
    let mut robust = 0;
    while robust < 200 {
        let n = rng.random_range(3..40);
        let r: Vec<f64> = (0..n).map(|_| rng.random_range(80.0..400.0)).collect();
        let h: Vec<f64> = r.iter().map(|v| v + rng.random_range(-20.0..20.0)).collect();
        let base = md(&r, &h);
        // Only errors above the upper middle value leave the median alone.
        let d: Vec<f64> = r.iter().zip(&h).map(|(a, b)| (a - b).abs()).collect();
        let upper = order_statistic(&d, n / 2);
        let above: Vec<usize> = (0..n).filter(|&i| d[i] > upper).collect();
        if above.is_empty() {
            continue;
        }
        let i = above[rng.random_range(0..above.len())];
        let mut h2 = h.clone();
        h2[i] = r[i] + d[i] + rng.random_range(1.0..500.0);
        ensure!(md(&r, &h2) == base, "md moved after enlarging an above-median error");
        robust += 1;
    }
    Ok(format!("1000 random cases, worst mcd relative error {worst:.1e}"))
}

// ---------------------------------------------------------------------------

fn loss_correctness() -> Outcome {
    let dist = |mu: f32, lv: f32| LatentDistribution {
        mu: Array2::from_elem((1, 1), mu),
        logvar: Array2::from_elem((1, 1), lv),
        frame_period_ms: 5.0,
    };
    let zero = LatentDistribution {
        mu: Array2::zeros((32, 7)),
        logvar: Array2::zeros((32, 7)),
        frame_period_ms: 5.0,
    };
    ensure!(kl_loss(&zero) == 0.0, "KL of the prior must be 0");
    let k1 = kl_loss(&dist(1.0, 0.0));
    ensure!((k1 - 0.5).abs() <= 1e-6, "KL(mu=1) = {k1}");
    let k2 = kl_loss(&dist(0.0, 4f32.ln()));
    let want = 0.5 * (4.0 - 1.0 - 4f64.ln());
    ensure!((k2 - want).abs() <= 1e-6, "KL(nu=log 4) = {k2}, want {want}");

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..1000 {
        let t: [f64; 4] = std::array::from_fn(|_| 10f64.powf(rng.random_range(-4.0..2.0)));
        let l = LossBreakdown::new(t[0], t[1], t[2], t[3], 100.0, 0.01);
        let want = 100.0 * t[0] + 0.01 * t[1] + t[2] + t[3];
        ensure!(rel_close(l.total, want, 1e-6), "breakdown total {} vs {want}", l.total);
    }

    let started = Instant::now();
    let reports = common::gradient_check(1e-5, 1e-6);
    let mut parts = Vec::new();
    for r in &reports {
        ensure!(r.params > 500, "{} checked only {} parameters", r.term, r.params);
        ensure!(r.worst_rel < 1e-3, "{} gradient relative error {:.2e} at {}", r.term, r.worst_rel, r.worst_at);
        parts.push(format!("{} {:.1e}", r.term, r.worst_rel));
    }
    Ok(format!(
        "KL examples and breakdown identity hold; gradients over {} parameters ({}) in {:.0?}",
        reports[0].params,
        parts.join(", "),
        started.elapsed()
    ))
}

// ---------------------------------------------------------------------------

fn shape_contracts() -> Outcome {
    let cfg = TrainConfig::default();
    ensure!(cfg.latent_dim == 16 && cfg.mel_order == 80, "default L/M changed");
    let model = Model::init(&cfg, DType::F32).map_err(|e| e.to_string())?;
    let ex = cfg.mel_extractor().unwrap();
    let hop = cfg.hop_length();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    for case in 0..50 {
        let n: usize = rng.random_range(1..12000);
        let clip = AudioClip::new((0..n).map(|i| (0.2 * (i as f32 * 0.05).sin()) as f32).collect(), 16000).unwrap();
        let mel = ex.compute(&clip).unwrap();
        let t = mel.num_frames();
        ensure!(t == n.div_ceil(hop), "case {case}: {t} frames for {n} samples");
        let dist = encode(&mel, &model.analyzer).unwrap();
        ensure!(dist.mu.dim() == (32, t) && dist.logvar.dim() == (32, t), "case {case}: code {:?}", dist.mu.dim());
        let z = reparameterize(&dist, Sampling::Random(case)).unwrap();
        let floor = MelSpectrogram::floor(80, t, 16000, 5.0);
        let x_hat = decode(&z, &floor, &mel, &model.analyzer).unwrap();
        ensure!(x_hat.values.dim() == (80, t), "case {case}: decode {:?}", x_hat.values.dim());
        let f0 = contour((0..t).map(|i| if i % 3 == 0 { 0.0 } else { 120.0 + i as f64 }).collect());
        let y = synthesize(&z, &f0, &model.synth, case).unwrap();
        ensure!(y.len() == t * hop, "case {case}: {} samples for T = {t}", y.len());

        // Row get/set with values that are exact in the code's precision.
        let row: Vec<f64> = (0..t).map(|_| rng.random_range(0.0f32..=1.0) as f64).collect();
        let z2 = set_latent_f0(&z, &row).unwrap();
        ensure!(latent_f0(&z2) == row, "case {case}: latent F0 row did not round-trip");
        for r in 0..31 {
            ensure!(z2.z.row(r) == z.z.row(r), "case {case}: set touched row {r}");
        }
    }
    Ok("50 random lengths: 32 x T code, 80 x T decode, T * 80 samples, exact row round trip".into())
}

// ---------------------------------------------------------------------------

/// Lowest spectral peak above half the maximum magnitude, in Hz (1 Hz bins).
fn fundamental(clip: &AudioClip) -> f64 {
    let n = clip.len();
    let mut buf: Vec<Complex64> = clip.samples().iter().map(|&v| Complex64::new(v as f64, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let mag: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
    let max = mag.iter().cloned().fold(0.0, f64::max);
    let mut k = mag.iter().position(|&m| m > 0.5 * max).unwrap();
    while k + 1 < mag.len() && mag[k + 1] > mag[k] {
        k += 1;
    }
    k as f64 * clip.sample_rate() as f64 / n as f64
}

fn excitation_control() -> Outcome {
    let sr = 16000;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for case in 0..20 {
        let f = rng.random_range(80.0..500.0);
        let e = sine_excitation(&vec![f; sr as usize], sr, 8, case).unwrap();
        let p = fundamental(&e);
        ensure!((p - f).abs() <= 1.0, "control {f:.2} Hz measured {p} Hz");
        worst = worst.max((p - f).abs());
        if f <= 250.0 {
            let e2 = sine_excitation(&vec![2.0 * f; sr as usize], sr, 8, case + 100).unwrap();
            let p2 = fundamental(&e2);
            ensure!((p2 - 2.0 * f).abs() <= 1.0, "doubled control {:.2} Hz measured {p2} Hz", 2.0 * f);
            ensure!((p2 - 2.0 * p).abs() <= 2.0, "doubling moved the peak from {p} to {p2} Hz");
        }
    }
    Ok(format!("20 random controls, worst peak offset {worst:.2} bins of 1 Hz"))
}

// ---------------------------------------------------------------------------

fn harmonic(secs: f64, f0: f64, sr: u32) -> Vec<f32> {
    let n = (secs * sr as f64) as usize;
    (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            (1..=10).map(|k| 0.3 / k as f64 * (2.0 * PI * k as f64 * f0 * t).sin()).sum::<f64>() as f32
        })
        .collect()
}

fn noise(secs: f64, sr: u32, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.1).unwrap();
    (0..(secs * sr as f64) as usize).map(|_| normal.sample(&mut rng) as f32).collect()
}

fn diagnostics() -> Outcome {
    // V/UV agreement against aperiodicity-derived voicing.
    let t = 40;
    let voiced_10_19 = contour((0..t).map(|i| if (10..=19).contains(&i) { 150.0 } else { 0.0 }).collect());
    let ap_all = |v: f32| AperiodicityMap::new(Array2::from_elem((5, t), v), 5.0).unwrap();
    let got = vuv_agreement(&voiced_10_19, &ap_all(1.0), 0.5).unwrap();
    ensure!(got == vec![FrameRange { start: 10, end: 19 }], "constructed disagreement gave {got:?}");
    let all_voiced = contour(vec![150.0; t]);
    ensure!(vuv_agreement(&all_voiced, &ap_all(0.0), 0.5).unwrap().is_empty(), "consistent V/UV input flagged");
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..200 {
        let n = rng.random_range(1..60);
        let hz: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.5) { 200.0 } else { 0.0 }).collect();
        let ap = Array2::from_shape_fn((3, n), |_| rng.random_range(0.0f32..1.0));
        let got = vuv_agreement(&contour(hz.clone()), &AperiodicityMap::new(ap.clone(), 5.0).unwrap(), 0.5).unwrap();
        let bad: Vec<bool> = (0..n)
            .map(|i| {
                let mean = ap.column(i).iter().map(|&v| v as f64).sum::<f64>() / 3.0;
                (mean < 0.5) != (hz[i] > 0.0)
            })
            .collect();
        let mut want = Vec::new();
        let mut i = 0;
        while i < n {
            if bad[i] {
                let s = i;
                while i + 1 < n && bad[i + 1] {
                    i += 1;
                }
                want.push(FrameRange { start: s, end: i });
            }
            i += 1;
        }
        ensure!(got == want, "run-length mismatch: {got:?} vs {want:?}");
    }

    // Periodicity, on a harmonic-only and a noise-only clip so every frame
    // has an unambiguous label. The flatness test only separates resolved
    // harmonics, hence the high F0.
    let sr = 16000;
    let ex = MelExtractor::new(sr, 80, StftConfig::default()).unwrap();
    let cfg = PeriodicityConfig::default();
    // Interior frames only: windows over the clip edges see a hard onset.
    let mel_of = |y: Vec<f32>| {
        let m = ex.compute(&AudioClip::new(y, sr).unwrap()).unwrap();
        MelSpectrogram {
            values: m.values.slice(ndarray::s![.., 10..110]).to_owned(),
            ..m
        }
    };
    let voiced = mel_of(harmonic(0.6, 300.0, sr));
    let unvoiced = mel_of(noise(0.6, sr, 3));
    let frames = voiced.num_frames();
    ensure!(frames == 100 && unvoiced.num_frames() == 100, "{frames} frames");
    let check = |hz: Vec<f64>, mel: &MelSpectrogram| spectral_periodicity_check(&contour(hz), mel, &cfg).unwrap();
    let clean = check(vec![300.0; frames], &voiced);
    ensure!(clean.is_empty(), "consistent voiced input flagged: {clean:?}");
    let clean = check(vec![0.0; frames], &unvoiced);
    ensure!(clean.is_empty(), "consistent unvoiced input flagged: {clean:?}");
    let mut wrong = vec![300.0; frames];
    wrong[30..50].iter_mut().for_each(|v| *v = 0.0);
    let got = check(wrong, &voiced);
    let want = vec![SuspiciousRange { start: 30, end: 49, issue: PeriodicityIssue::UnvoicedWithPeriodicity }];
    ensure!(got == want, "unvoiced-over-harmonics report {got:?}");
    let mut wrong = vec![0.0; frames];
    wrong[20..40].iter_mut().for_each(|v| *v = 180.0);
    let got = check(wrong, &unvoiced);
    let want = vec![SuspiciousRange { start: 20, end: 39, issue: PeriodicityIssue::VoicedWithoutPeriodicity }];
    ensure!(got == want, "voiced-over-noise report {got:?}");
    Ok("V/UV disagreement at (10, 19), both periodicity failures at exact bounds, clean inputs empty".into())
}

// ---------------------------------------------------------------------------
// Desk-scale training, shared by the training and pitch-shift criteria.

struct DeskRun {
    vocoder: Vocoder,
    totals: Vec<f64>,
    heldout: Vec<(AudioClip, F0Contour)>,
    minutes: f64,
}

static DESK: OnceLock<Result<DeskRun, String>> = OnceLock::new();

fn desk_run() -> Result<&'static DeskRun, String> {
    DESK.get_or_init(|| {
        let cfg = TrainConfig::default();
        let corpus = CorpusConfig::default();
        let started = Instant::now();
        let utterances: Vec<Utterance> = (0..corpus.num_utterances)
            .map(|i| {
                let u = generate_utterance(&corpus, i).map_err(|e| e.to_string())?;
                Utterance::prepare(&u.name, &u.audio, &u.f0, &cfg, i as u64).map_err(|e| e.to_string())
            })
            .collect::<Result<_, String>>()?;
        let held = CorpusConfig {
            num_utterances: 10,
            seed: 1000,
            prefix: "heldout".into(),
            ..CorpusConfig::default()
        };
        let heldout = (0..held.num_utterances)
            .map(|i| generate_utterance(&held, i).map(|u| (u.audio, u.f0)).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, String>>()?;
        let mut trainer = Trainer::new(cfg.clone(), Dataset { utterances }).map_err(|e| e.to_string())?;
        let mut totals = Vec::with_capacity(cfg.max_steps as usize);
        while trainer.step < cfg.max_steps {
            let l = trainer.step().map_err(|e| e.to_string())?;
            totals.push(l.total);
            if trainer.step % 500 == 0 {
                eprintln!(
                    "  desk step {} total {:.3} f0 {:.5} kl {:.2} mel {:.3} nsf {:.3} ({:.0?})",
                    trainer.step,
                    l.total,
                    l.f0_term,
                    l.kl_term,
                    l.mel_term,
                    l.nsf_term,
                    started.elapsed()
                );
            }
        }
        let vocoder = Vocoder::new(trainer.model, cfg, "desk").map_err(|e| e.to_string())?;
        Ok(DeskRun {
            vocoder,
            totals,
            heldout,
            minutes: started.elapsed().as_secs_f64() / 60.0,
        })
    })
    .as_ref()
    .map_err(|e| e.clone())
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn desk_training() -> Outcome {
    let run = desk_run()?;
    let v = &run.vocoder;
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let start = mean(&run.totals[..10]);
    let end = mean(&run.totals[run.totals.len() - 100..]);
    let drop = 1.0 - end / start;

    let range = v.cfg.f0_range();
    let (mut row, mut truth) = (Vec::new(), Vec::new());
    let mut mds = Vec::new();
    for (i, (clip, f0)) in run.heldout.iter().enumerate() {
        let a = v.analyze(clip).map_err(|e| e.to_string())?;
        let t = a.z.num_frames().min(f0.len());
        let r = a.z.z.row(a.z.f0_row());
        for j in 0..t {
            row.push(r[j] as f64);
            truth.push(range.normalize_hz(f0.values()[j]));
        }
        let y = v.synthesize(&a.z, &a.f0, i as u64).map_err(|e| e.to_string())?;
        let est = deepa::estimate_f0(&y, 5.0, v.cfg.f0_floor, v.cfg.f0_ceil).map_err(|e| e.to_string())?;
        let n = est.len().min(f0.len());
        let cut = |c: &F0Contour| contour(c.values()[..n].to_vec());
        mds.push(f0_md(&cut(f0), &cut(&est)).map_err(|e| e.to_string())?);
    }
    let r = pearson(&row, &truth);
    let md = mean(&mds);
    let detail = format!(
        "{} steps in {:.0} min: loss {start:.2} -> {end:.3} ({:.1} % drop), held-out Pearson {r:.4}, copy-synthesis MD {md:.2} Hz",
        run.totals.len(),
        run.minutes,
        100.0 * drop
    );
    ensure!(drop >= 0.7, "(a) loss drop below 70 %: {detail}");
    ensure!(r >= 0.9, "(b) Pearson below 0.9: {detail}");
    ensure!(md <= 10.0, "(c) copy-synthesis MD above 10 Hz: {detail}");
    Ok(detail)
}

fn pitch_shift() -> Outcome {
    let run = desk_run()?;
    let v = &run.vocoder;
    let vowel = constant_vowel(150.0, 1.0, &VOWELS[0], 16000, 5.0, 4).map_err(|e| e.to_string())?;
    let shifted = v.pitch_shift(&vowel.audio, 12.0, 0).map_err(|e| e.to_string())?;
    let est = deepa::estimate_f0(&shifted.audio, 5.0, 60.0, 600.0).map_err(|e| e.to_string())?;
    let med = est.median_voiced().ok_or("no voiced frames in the shifted output")?;
    let err = (med - 300.0).abs() / 300.0;
    ensure!(err <= 0.03, "median F0 {med:.1} Hz is {:.1} % from 300 Hz", 100.0 * err);
    // Two octaves up from 500 Hz leaves the 600 Hz ceiling.
    let high = constant_vowel(500.0, 0.5, &VOWELS[1], 16000, 5.0, 5).map_err(|e| e.to_string())?;
    match v.pitch_shift(&high.audio, 24.0, 0) {
        Err(deepa::Error::F0Range(msg)) => ensure!(msg.contains("frames"), "range error without frames: {msg}"),
        other => return Err(format!("+24 st on 500 Hz gave {:?}", other.map(|_| ()))),
    }
    Ok(format!("median F0 {med:.1} Hz ({:.2} % from 300 Hz); +24 st on 500 Hz rejected", 100.0 * err))
}

// ---------------------------------------------------------------------------

fn pipeline_once(root: &Path) -> Result<(Vec<f64>, Vec<(String, Vec<u8>)>, String), String> {
    let s = |e: deepa::Error| e.to_string();
    let wav_dir = root.join("corpus");
    let corpus = CorpusConfig {
        num_utterances: 3,
        utterance_secs: 1.0,
        seed: 7,
        ..CorpusConfig::default()
    };
    deepa::corpus::write_corpus(&wav_dir, &corpus).map_err(s)?;
    let cfg = TrainConfig {
        max_steps: 15,
        batch_size: 2,
        rng_seed: 42,
        data_dir: wav_dir.clone(),
        ..TrainConfig::default()
    };
    let feat_dir = root.join("features");
    extract_features(&wav_dir, &feat_dir, &cfg, Some(&wav_dir), 2).map_err(s)?;
    let mut features = Vec::new();
    let mut names: Vec<_> = std::fs::read_dir(&feat_dir).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    for p in names {
        features.push((p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()));
    }

    let data = Dataset::from_dir(&cfg).map_err(s)?;
    let mut trainer = Trainer::new(cfg.clone(), data).map_err(s)?;
    let log_path = root.join("train.jsonl");
    let mut log = TrainingLog::create(&log_path).map_err(s)?;
    trainer.run(Some(&mut log), Some(&root.join("ckpt"))).map_err(s)?;
    drop(log);
    let losses: Vec<f64> = TrainingLog::read(&log_path)
        .map_err(s)?
        .iter()
        .flat_map(|r| [r.f0_term, r.kl_term, r.mel_term, r.nsf_term, r.total])
        .collect();

    let v = Vocoder::load(&root.join("ckpt")).map_err(s)?;
    let out = root.join("copysyn");
    std::fs::create_dir_all(&out).unwrap();
    for i in 0..corpus.num_utterances {
        let u = generate_utterance(&corpus, i).map_err(s)?;
        let y = v.copy_synthesis(&u.audio, 0).map_err(s)?;
        deepa::save_wav(&y, out.join(format!("{}.wav", u.name))).map_err(s)?;
    }
    let report = evaluate_corpus(&wav_dir, &out, &EvalConfig::default(), 2).map_err(s)?;
    Ok((losses, features, report.to_json().map_err(s)?))
}

fn reproducibility() -> Outcome {
    let base = tempfile::tempdir().map_err(|e| e.to_string())?;
    let a = pipeline_once(&base.path().join("a"))?;
    let b = pipeline_once(&base.path().join("b"))?;
    ensure!(!a.0.is_empty(), "no training log records");
    ensure!(a.0 == b.0, "training losses differ between runs");
    ensure!(a.1.len() == b.1.len(), "feature file lists differ");
    for ((na, da), (nb, db)) in a.1.iter().zip(&b.1) {
        ensure!(na == nb && da == db, "feature file {na} differs");
    }
    ensure!(a.2 == b.2, "metrics JSON differs");
    Ok(format!(
        "{} loss values, {} feature files and {} bytes of metrics JSON identical across runs",
        a.0.len(),
        a.1.len(),
        a.2.len()
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("metric_oracles", metric_oracles),
        ("loss_correctness", loss_correctness),
        ("shape_contracts", shape_contracts),
        ("f0_control", excitation_control),
        ("diagnostics", diagnostics),
        ("desk_training", desk_training),
        ("pitch_shift", pitch_shift),
        ("reproducibility", reproducibility),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
