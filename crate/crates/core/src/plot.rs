//! PNG plots: precision-recall and ROC curves per dataset, and loss curves.
//!
//! Text needs a TrueType font. The first existing file among `$DBFNET_FONT`
//! and a few common system paths is used; without one, plots are drawn
//! without captions, labels or legends.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use plotters::prelude::*;
use plotters::style::FontStyle;

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::train::{window_means, RunLog};

const FONT_FAMILY: &str = "sans-serif";
const FONT_CANDIDATES: &[&str] = &[
    "/usr/share/fonts/truetype/dejavu/DejaVuSans.ttf",
    "/usr/share/fonts/TTF/DejaVuSans.ttf",
    "/usr/share/fonts/dejavu/DejaVuSans.ttf",
    "/System/Library/Fonts/Supplemental/Arial.ttf",
    "C:\\Windows\\Fonts\\arial.ttf",
];
const SIZE: (u32, u32) = (800, 640);

fn font_available() -> bool {
    static LOADED: OnceLock<bool> = OnceLock::new();
    *LOADED.get_or_init(|| {
        let env = std::env::var_os("DBFNET_FONT").map(PathBuf::from);
        let candidates = env.into_iter().chain(FONT_CANDIDATES.iter().map(PathBuf::from));
        for path in candidates {
            if let Ok(bytes) = std::fs::read(&path) {
                let bytes: &'static [u8] = Box::leak(bytes.into_boxed_slice());
                for style in [FontStyle::Normal, FontStyle::Bold] {
                    if plotters::style::register_font(FONT_FAMILY, style, bytes).is_err() {
                        return false;
                    }
                }
                return true;
            }
        }
        log::warn!("no TrueType font found; plots will have no text");
        false
    })
}

fn draw_err<E: std::fmt::Display>(path: &Path) -> impl Fn(E) -> Error + '_ {
    move |e| Error::Serde(format!("plotting {}: {e}", path.display()))
}

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

fn line_chart(
    path: &Path,
    title: &str,
    axes: (&str, &str),
    x_range: std::ops::Range<f64>,
    y_range: std::ops::Range<f64>,
    series: &[Series],
    diagonal: bool,
) -> Result<()> {
    let text = font_available();
    let err = draw_err(path);
    let root = BitMapBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(&err)?;
    let mut builder = ChartBuilder::on(&root);
    builder.margin(20);
    if text {
        builder
            .caption(title, (FONT_FAMILY, 26))
            .x_label_area_size(45)
            .y_label_area_size(55);
    }
    let mut chart = builder.build_cartesian_2d(x_range.clone(), y_range.clone()).map_err(&err)?;
    if text {
        chart
            .configure_mesh()
            .x_desc(axes.0)
            .y_desc(axes.1)
            .label_style((FONT_FAMILY, 16))
            .draw()
            .map_err(&err)?;
    } else {
        chart
            .configure_mesh()
            .disable_x_axis()
            .disable_y_axis()
            .draw()
            .map_err(&err)?;
    }
    if diagonal {
        chart
            .draw_series(LineSeries::new(
                [(x_range.start, y_range.start), (x_range.end, y_range.end)],
                BLACK.mix(0.3),
            ))
            .map_err(&err)?;
    }
    for (i, s) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let drawn = chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(&err)?;
        if text {
            drawn
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new([(x, y), (x + 20, y)], color.stroke_width(2)));
        }
    }
    if text && !series.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .label_font((FONT_FAMILY, 16))
            .position(SeriesLabelPosition::LowerRight)
            .draw()
            .map_err(&err)?;
    }
    root.present().map_err(&err)?;
    Ok(())
}

fn report_label(r: &MetricsReport) -> String {
    match r.fold {
        Some(f) => format!("{} fold {}", r.dataset, f + 1),
        None => r.dataset.clone(),
    }
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

/// One PR and one ROC image per dataset; reports of the same dataset are
/// overlaid. Returns the written paths.
pub fn plot_curves(reports: &[MetricsReport], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if reports.is_empty() {
        return Err(Error::Parameter("no reports to plot".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut by_dataset: BTreeMap<&str, Vec<&MetricsReport>> = BTreeMap::new();
    for r in reports {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut written = Vec::new();
    for (name, group) in by_dataset {
        let stem = file_stem(name);
        let pr: Vec<Series> = group
            .iter()
            .map(|r| Series {
                label: format!("{} (MAP = {:.3})", report_label(r), r.map),
                points: r.pr_curve.iter().map(|&(recall, precision)| (recall, precision)).collect(),
            })
            .collect();
        let path = out_dir.join(format!("pr_{stem}.png"));
        line_chart(&path, &format!("P-R curve: {name}"), ("Recall", "Precision"), 0.0..1.0, 0.0..1.02, &pr, false)?;
        written.push(path);

        let roc: Vec<Series> = group
            .iter()
            .map(|r| Series {
                label: format!("{} (AUC = {:.3})", report_label(r), r.auc),
                points: r.roc_curve.clone(),
            })
            .collect();
        let path = out_dir.join(format!("roc_{stem}.png"));
        line_chart(
            &path,
            &format!("ROC curve: {name}"),
            ("False positive rate", "True positive rate"),
            0.0..1.0,
            0.0..1.02,
            &roc,
            true,
        )?;
        written.push(path);
    }
    Ok(written)
}

/// Per-step total loss with a 50-step moving average overlay.
pub fn plot_loss(log: &RunLog, path: &Path) -> Result<()> {
    let losses = log.losses();
    if losses.is_empty() {
        return Err(Error::Parameter("run log has no steps".into()));
    }
    let raw: Vec<(f64, f64)> = log.steps().map(|s| (s.step as f64, s.loss)).collect();
    let window = 50.min(losses.len());
    let smooth: Vec<(f64, f64)> = window_means(&losses, window)
        .into_iter()
        .enumerate()
        .map(|(i, v)| (((i as f64) + 0.5) * window as f64, v))
        .collect();
    let x_max = raw.last().map_or(1.0, |p| p.0.max(1.0));
    let y_max = losses.iter().copied().fold(0.0f64, f64::max).max(1e-6) * 1.05;
    let series = [
        Series {
            label: "loss".into(),
            points: raw,
        },
        Series {
            label: format!("mean over {window} steps"),
            points: smooth,
        },
    ];
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    line_chart(path, "Training loss", ("Step", "Loss"), 0.0..x_max, 0.0..y_max, &series, false)
}

/// Curve images for `reports` plus `loss.png` when a run log is given.
pub fn emit_plots(reports: &[MetricsReport], run_log: Option<&RunLog>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut written = plot_curves(reports, out_dir)?;
    if let Some(log) = run_log {
        let path = out_dir.join("loss.png");
        plot_loss(log, &path)?;
        written.push(path);
    }
    Ok(written)
}
