use std::path::{Path, PathBuf};

use clap::Args;
use plotters::prelude::*;
use plotters::style::colors::colormaps::ViridisRGB;

use deepa::{F0Contour, MelSpectrogram};

use crate::{read_f0, CliResult, Failure};

#[derive(Args)]
pub struct PlotArgs {
    pub output: PathBuf,
    /// F0 file to overlay; repeat for several sources.
    #[arg(long = "f0", required = true)]
    pub f0: Vec<PathBuf>,
    /// Legend names, in the order of the --f0 files. Defaults to file stems.
    #[arg(long = "label")]
    pub labels: Vec<String>,
    /// Log-mel container for the lower panel.
    #[arg(long)]
    pub mel: Option<PathBuf>,
    /// Frame period for F0 files without a sidecar.
    #[arg(long, default_value_t = 5.0)]
    pub frame_period: f64,
}

const FONT_CANDIDATES: [&str; 4] = [
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/Library/Fonts/Arial.ttf",
];

/// Registers a TrueType font as "sans-serif". `DEEPA_FONT` overrides the
/// search list.
fn register_font() -> CliResult<()> {
    let from_env = std::env::var_os("DEEPA_FONT").map(PathBuf::from);
    let path = from_env
        .into_iter()
        .chain(FONT_CANDIDATES.iter().map(PathBuf::from))
        .find(|p| p.exists())
        .ok_or_else(|| Failure::new("plot", "no TrueType font found; set DEEPA_FONT to a .ttf file"))?;
    let bytes = std::fs::read(&path).map_err(|e| Failure::new("io", format!("{}: {e}", path.display())))?;
    plotters::style::register_font("sans-serif", FontStyle::Normal, Box::leak(bytes.into_boxed_slice()))
        .map_err(|_| Failure::new("plot", format!("{} is not a usable font", path.display())))
}

fn plot_err(e: impl std::fmt::Display) -> Failure {
    Failure::new("plot", e.to_string())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| p.display().to_string())
}

/// Voiced stretches as (seconds, Hz) polylines.
fn voiced_segments(f0: &F0Contour) -> Vec<Vec<(f64, f64)>> {
    let dt = f0.frame_period_ms() / 1000.0;
    let mut out: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut open = false;
    for (i, (&hz, &v)) in f0.values().iter().zip(f0.vuv()).enumerate() {
        if v {
            if !open {
                out.push(Vec::new());
            }
            out.last_mut().unwrap().push((i as f64 * dt, hz));
        }
        open = v;
    }
    out
}

pub fn run(args: &PlotArgs) -> CliResult<()> {
    let contours: Vec<F0Contour> = args.f0.iter().map(|p| read_f0(p, args.frame_period)).collect::<CliResult<_>>()?;
    let mel = args.mel.as_deref().map(MelSpectrogram::load).transpose()?;
    register_font()?;

    // Everything shares one time axis in seconds, so contours of different
    // lengths line up without resampling.
    let secs = |frames: usize, fp: f64| frames as f64 * fp / 1000.0;
    let duration = contours
        .iter()
        .map(|c| secs(c.len(), c.frame_period_ms()))
        .chain(mel.iter().map(|m| secs(m.num_frames(), m.frame_period_ms)))
        .fold(0.0, f64::max)
        .max(1e-3);
    let top_hz = contours.iter().flat_map(|c| c.voiced_values()).fold(100.0, f64::max) * 1.1;

    if let Some(dir) = args.output.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    }
    let height = if mel.is_some() { 760 } else { 400 };
    let root = BitMapBackend::new(&args.output, (1000, height)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let (upper, lower) = if mel.is_some() { root.split_vertically(380) } else { (root.clone(), root.clone()) };

    let mut chart = ChartBuilder::on(&upper)
        .caption("F0", ("sans-serif", 20))
        .margin(10)
        .x_label_area_size(35)
        .y_label_area_size(55)
        .build_cartesian_2d(0.0..duration, 0.0..top_hz)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .x_desc("time (s)")
        .y_desc("Hz")
        .draw()
        .map_err(plot_err)?;
    for (i, (c, path)) in contours.iter().zip(&args.f0).enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let name = args.labels.get(i).cloned().unwrap_or_else(|| stem(path));
        // An empty series carries the legend entry, so fully unvoiced
        // contours are still named.
        chart
            .draw_series(LineSeries::new(std::iter::empty::<(f64, f64)>(), color))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color.stroke_width(2)));
        for seg in voiced_segments(c) {
            chart
                .draw_series(LineSeries::new(seg, color.stroke_width(2)))
                .map_err(plot_err)?;
        }
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .label_font(("sans-serif", 14))
        .draw()
        .map_err(plot_err)?;

    if let Some(mel) = &mel {
        let bins = mel.mel_order();
        let mut chart = ChartBuilder::on(&lower)
            .caption("log-mel", ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(55)
            .build_cartesian_2d(0.0..duration, 0.0..bins as f64)
            .map_err(plot_err)?;
        chart
            .configure_mesh()
            .disable_mesh()
            .x_desc("time (s)")
            .y_desc("mel bin")
            .draw()
            .map_err(plot_err)?;
        let lo = mel.values.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = mel.values.iter().copied().fold(f32::NEG_INFINITY, f32::max).max(lo + 1e-6);
        let dt = mel.frame_period_ms / 1000.0;
        let cells = mel.values.indexed_iter().map(|((m, t), &v)| {
            let color = ViridisRGB.get_color_normalized(v, lo, hi);
            Rectangle::new([(t as f64 * dt, m as f64), ((t + 1) as f64 * dt, (m + 1) as f64)], color.filled())
        });
        chart.draw_series(cells).map_err(plot_err)?;
    }
    root.present().map_err(plot_err)?;
    println!("wrote {}", args.output.display());
    Ok(())
}
