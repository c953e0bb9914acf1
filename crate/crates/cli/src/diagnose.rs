use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use deepa::f0::{spectral_periodicity_check, vuv_agreement, AperiodicityMap, PeriodicityConfig, PeriodicityIssue};
use deepa::MelSpectrogram;

use crate::{read_f0, write_file, CliResult, Failure};

#[derive(Args)]
pub struct DiagnoseArgs {
    /// F0 contour (text with sidecar, or a bare column at --frame-period).
    pub f0: PathBuf,
    pub output: PathBuf,
    /// Aperiodicity container (bands x frames).
    #[arg(long)]
    pub ap: Option<PathBuf>,
    /// Log-mel container.
    #[arg(long)]
    pub mel: Option<PathBuf>,
    /// Band-mean aperiodicity below this counts as voiced.
    #[arg(long, default_value_t = 0.5)]
    pub ap_threshold: f64,
    /// Frame period for F0 files without a sidecar.
    #[arg(long, default_value_t = 5.0)]
    pub frame_period: f64,
}

#[derive(Serialize)]
struct Range {
    start_frame: usize,
    end_frame: usize,
    start_s: f64,
    /// End of the last frame's period.
    end_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    issue: Option<PeriodicityIssue>,
}

#[derive(Serialize)]
struct Report {
    frame_period_ms: f64,
    frames: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    vuv_agreement: Option<Vec<Range>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spectral_periodicity: Option<Vec<Range>>,
}

pub fn run(args: &DiagnoseArgs) -> CliResult<()> {
    if args.ap.is_none() && args.mel.is_none() {
        return Err(Failure::new("usage", "diagnose needs --ap, --mel or both"));
    }
    let f0 = read_f0(&args.f0, args.frame_period)?;
    let fp = f0.frame_period_ms();
    let range = |start: usize, end: usize, issue| Range {
        start_frame: start,
        end_frame: end,
        start_s: start as f64 * fp / 1000.0,
        end_s: (end + 1) as f64 * fp / 1000.0,
        issue,
    };
    let vuv = match &args.ap {
        Some(p) => {
            let ap = AperiodicityMap::load(p)?;
            Some(vuv_agreement(&f0, &ap, args.ap_threshold)?.into_iter().map(|r| range(r.start, r.end, None)).collect())
        }
        None => None,
    };
    let periodicity = match &args.mel {
        Some(p) => {
            let mel = MelSpectrogram::load(p)?;
            let found = spectral_periodicity_check(&f0, &mel, &PeriodicityConfig::default())?;
            Some(found.into_iter().map(|r| range(r.start, r.end, Some(r.issue))).collect())
        }
        None => None,
    };
    let report = Report {
        frame_period_ms: fp,
        frames: f0.len(),
        vuv_agreement: vuv,
        spectral_periodicity: periodicity,
    };
    let n = report.vuv_agreement.iter().chain(&report.spectral_periodicity).map(Vec::len).sum::<usize>();
    write_file(&args.output, serde_json::to_string_pretty(&report)?)?;
    println!("{n} inconsistent ranges");
    Ok(())
}
