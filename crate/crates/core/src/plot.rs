//! SVG line plots and heatmaps. Rendering only; inputs are already computed.

use std::fs;
use std::path::Path;

use plotters::prelude::*;

use crate::attacks::SweepRow;
use crate::error::{Error, Result};
use crate::eval::{CurveRow, SurfaceGrid};
use crate::nn::BnSimilarity;
use crate::training::MetricsRecord;

const SIZE: (u32, u32) = (720, 480);
const PALETTE: [RGBColor; 5] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(44, 160, 44),
    RGBColor(148, 103, 189),
    RGBColor(255, 127, 14),
];

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: &str, points: Vec<(f64, f64)>) -> Self {
        Series {
            label: label.into(),
            points,
        }
    }
}

fn perr(e: impl std::fmt::Display) -> Error {
    Error::Plot(e.to_string())
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

fn write_svg(path: &Path, svg: String) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

/// Renders the series to an SVG file. Nothing is written when there is nothing to draw.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
    if all.is_empty() {
        return Err(Error::Plot(format!("no finite points to draw for {title:?}")));
    }
    let (x0, x1) = bounds(all.iter().map(|p| p.0));
    let (y0, y1) = bounds(all.iter().map(|p| p.1));
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(perr)?;
        let mut chart = ChartBuilder::on(&root)
            .caption(title, ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(perr)?;
        chart.configure_mesh().x_desc(x_label).y_desc(y_label).draw().map_err(perr)?;
        for (i, s) in series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> = s.points.iter().copied().filter(|p| p.0.is_finite() && p.1.is_finite()).collect();
            chart
                .draw_series(LineSeries::new(pts.clone(), color.stroke_width(2)))
                .map_err(perr)?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
            chart
                .draw_series(pts.into_iter().map(|p| Circle::new(p, 3, color.filled())))
                .map_err(perr)?;
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.85))
            .border_style(BLACK)
            .draw()
            .map_err(perr)?;
        root.present().map_err(perr)?;
    }
    write_svg(path, svg)
}

/// Clean and robust accuracy per epoch, live and averaged weights.
pub fn plot_metrics(records: &[MetricsRecord], path: &Path) -> Result<()> {
    let col = |f: fn(&MetricsRecord) -> f64| records.iter().map(|r| (r.epoch as f64, f(r))).collect::<Vec<_>>();
    line_plot(
        path,
        "accuracy per epoch",
        "epoch",
        "accuracy (%)",
        &[
            Series::new("clean", col(|r| r.clean_acc)),
            Series::new("robust", col(|r| r.robust_acc)),
            Series::new("clean (avg)", col(|r| r.ema_clean_acc)),
            Series::new("robust (avg)", col(|r| r.ema_robust_acc)),
        ],
    )
}

pub fn plot_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Plot("empty sweep".into()));
    }
    let mut steps: Vec<usize> = rows.iter().map(|r| r.steps).collect();
    steps.sort_unstable();
    steps.dedup();
    let series: Vec<Series> = steps
        .iter()
        .map(|&s| {
            Series::new(
                &format!("{s} steps"),
                rows.iter().filter(|r| r.steps == s).map(|r| (r.epsilon * 255.0, r.accuracy)).collect(),
            )
        })
        .collect();
    line_plot(path, "robust accuracy against radius", "epsilon (x/255)", "accuracy (%)", &series)
}

pub fn plot_curve(rows: &[CurveRow], path: &Path) -> Result<()> {
    line_plot(
        path,
        "single-step loss against radius",
        "epsilon (x/255)",
        "cross-entropy",
        &[Series::new("FGSM loss", rows.iter().map(|r| (r.epsilon * 255.0, r.fgsm_loss)).collect())],
    )
}

pub fn plot_bn_similarity(rows: &[BnSimilarity], path: &Path) -> Result<()> {
    let col = |f: fn(&BnSimilarity) -> f64| rows.iter().enumerate().map(|(i, r)| ((i + 1) as f64, f(r))).collect::<Vec<_>>();
    line_plot(
        path,
        "base vs complex batch-norm sets",
        "BN layer",
        "cosine similarity",
        &[
            Series::new("mean", col(|r| r.mean)),
            Series::new("var", col(|r| r.var)),
            Series::new("scale", col(|r| r.scale)),
            Series::new("shift", col(|r| r.shift)),
        ],
    )
}

/// Heatmap of a loss surface, dark = low loss.
pub fn plot_surface(grid: &SurfaceGrid, path: &Path) -> Result<()> {
    let n = grid.offsets.len();
    let flat: Vec<f64> = grid.values.iter().flatten().copied().filter(|v| v.is_finite()).collect();
    if n == 0 || flat.is_empty() {
        return Err(Error::Plot("empty surface".into()));
    }
    let (lo, hi) = flat.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let r = grid.offsets[n - 1];
    let cell = if n > 1 { grid.offsets[1] - grid.offsets[0] } else { 1.0 };
    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, (560, 520)).into_drawing_area();
        root.fill(&WHITE).map_err(perr)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("loss surface", ("sans-serif", 20))
            .margin(12)
            .x_label_area_size(40)
            .y_label_area_size(56)
            .build_cartesian_2d(-r - cell / 2.0..r + cell / 2.0, -r - cell / 2.0..r + cell / 2.0)
            .map_err(perr)?;
        chart.configure_mesh().x_desc("gradient direction").y_desc("random direction").draw().map_err(perr)?;
        chart
            .draw_series(grid.values.iter().enumerate().flat_map(|(i, row)| {
                row.iter().enumerate().map(move |(j, &v)| {
                    let t = if hi > lo { ((v - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
                    let c = RGBColor((40.0 + 215.0 * t) as u8, (30.0 + 120.0 * t) as u8, (90.0 * (1.0 - t)) as u8);
                    let (a, b) = (grid.offsets[i], grid.offsets[j]);
                    Rectangle::new([(a - cell / 2.0, b - cell / 2.0), (a + cell / 2.0, b + cell / 2.0)], c.filled())
                })
            }))
            .map_err(perr)?;
        root.present().map_err(perr)?;
    }
    write_svg(path, svg)
}
