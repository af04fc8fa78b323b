//! Text summary and SVG plots for a results directory holding `metrics.jsonl`
//! and optionally `ablation.json`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::ablation::AblationTable;
use crate::error::{Error, Result};
use crate::trainer::{read_metrics, LossReport};

#[derive(Clone, Debug, PartialEq)]
pub struct ReportOutcome {
    pub summary: String,
    /// Files written, summary first.
    pub files: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

pub const SUMMARY_FILE: &str = "summary.txt";
pub const PLOT_FILES: [&str; 4] = ["loss_stage1.svg", "loss_stage2.svg", "perplexity.svg", "ablation.svg"];

const SIZE: (u32, u32) = (720, 420);
const COLORS: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(255, 127, 14),
    RGBColor(44, 160, 44),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(140, 86, 75),
];

type Series = (String, Vec<(f64, f64)>);

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn line_plot(path: &Path, title: &str, y_label: &str, series: &[Series]) -> Result<()> {
    let pts = series.iter().flat_map(|(_, s)| s.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-9);
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 18))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(|e| plot_err(path, e))?;
    chart.configure_mesh().x_desc("step").y_desc(y_label).draw().map_err(|e| plot_err(path, e))?;
    for (i, (name, s)) in series.iter().enumerate() {
        let c = COLORS[i % COLORS.len()];
        chart
            .draw_series(LineSeries::new(s.iter().copied(), c.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label(name.as_str())
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], c.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))
}

/// Horizontal bars of mean retrieval top1 and velocity MSE, one pair per row.
fn ablation_plot(path: &Path, table: &AblationTable) -> Result<()> {
    let rows: Vec<_> = table.rows.iter().filter(|r| r.retrieval_top1.n > 0).collect();
    let root = SVGBackend::new(path, (SIZE.0, SIZE.1 + 40 * rows.len() as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let panels = root.split_evenly((1, 2));
    let metrics: [(&str, fn(&super::AblationRow) -> f64); 2] =
        [("retrieval top1", |r| r.retrieval_top1.mean), ("velocity MSE", |r| r.velocity_mse.mean)];
    for (panel, (label, get)) in panels.iter().zip(metrics) {
        let top = rows.iter().map(|r| get(r)).fold(0.0, f64::max).max(1e-9) * 1.1;
        let n = rows.len().max(1);
        let mut chart = ChartBuilder::on(panel)
            .caption(label, ("sans-serif", 16))
            .margin(12)
            .x_label_area_size(30)
            .y_label_area_size(90)
            .build_cartesian_2d(0.0..top, 0.0..n as f64)
            .map_err(|e| plot_err(path, e))?;
        let names: Vec<&str> = rows.iter().map(|r| r.kind.name()).collect();
        chart
            .configure_mesh()
            .disable_y_mesh()
            .y_labels(n)
            .y_label_formatter(&|y| {
                let i = y.floor() as usize;
                names.get(n.saturating_sub(1).saturating_sub(i)).map(|s| s.to_string()).unwrap_or_default()
            })
            .draw()
            .map_err(|e| plot_err(path, e))?;
        chart
            .draw_series(rows.iter().enumerate().map(|(i, r)| {
                let y = (n - 1 - i) as f64;
                Rectangle::new([(0.0, y + 0.15), (get(r), y + 0.85)], COLORS[i % COLORS.len()].filled())
            }))
            .map_err(|e| plot_err(path, e))?;
    }
    root.present().map_err(|e| plot_err(path, e))
}

fn series(reports: &[&LossReport], parts: &[(&str, fn(&LossReport) -> Option<f64>)]) -> Vec<Series> {
    parts
        .iter()
        .filter_map(|(name, f)| {
            let s: Vec<(f64, f64)> = reports.iter().filter_map(|r| f(r).map(|v| (r.step as f64, v))).collect();
            (!s.is_empty()).then(|| (name.to_string(), s))
        })
        .collect()
}

fn tail_mean(reports: &[&LossReport], f: fn(&LossReport) -> Option<f64>) -> Option<f64> {
    let v: Vec<f64> = reports.iter().rev().filter_map(|r| f(r)).take(10).collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

const PARTS: [(&str, fn(&LossReport) -> Option<f64>); 7] = [
    ("total", |r| Some(r.total)),
    ("rec_motion", |r| r.parts.rec_motion),
    ("rec_video", |r| r.parts.rec_video),
    ("dis", |r| r.parts.dis),
    ("act", |r| r.parts.act),
    ("align", |r| r.parts.align),
    ("commit", |r| r.parts.commit),
];

/// Renders the report. Missing inputs produce warnings and a partial report;
/// rerunning over the same inputs reproduces the same files.
pub fn report(dir: impl AsRef<Path>) -> Result<ReportOutcome> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut warnings = Vec::new();
    let mut files = vec![dir.join(SUMMARY_FILE)];
    let mut s = String::new();
    let _ = writeln!(s, "results: {}", dir.file_name().map_or_else(|| dir.display().to_string(), |n| n.to_string_lossy().into()));

    let metrics_path = dir.join("metrics.jsonl");
    let reports = if metrics_path.exists() {
        read_metrics(&metrics_path)?
    } else {
        warnings.push("metrics.jsonl not found; no loss or perplexity curves".to_string());
        Vec::new()
    };
    for stage in [1u8, 2] {
        let rs: Vec<&LossReport> = reports.iter().filter(|r| r.stage == stage).collect();
        if rs.is_empty() {
            if !reports.is_empty() {
                warnings.push(format!("no stage-{stage} steps in metrics.jsonl"));
            }
            continue;
        }
        let _ = writeln!(s, "\nstage {stage}: {} steps", rs.len());
        for (name, f) in PARTS {
            if let (Some(first), Some(last)) = (rs.iter().find_map(|r| f(r)), tail_mean(&rs, f)) {
                let _ = writeln!(s, "  {name:<11} first {first:.6}  last-10 mean {last:.6}");
            }
        }
        let path = dir.join(PLOT_FILES[stage as usize - 1]);
        line_plot(&path, &format!("stage {stage} losses"), "loss", &series(&rs, &PARTS))?;
        files.push(path);
    }
    let all: Vec<&LossReport> = reports.iter().collect();
    let ppl: [(&str, fn(&LossReport) -> Option<f64>); 2] =
        [("motion", |r| r.perplexity_motion), ("video", |r| r.perplexity_video)];
    let ppl_series: Vec<Series> = series(&all, &ppl)
        .into_iter()
        .map(|(n, pts)| (n, pts.into_iter().enumerate().map(|(i, (_, y))| (i as f64, y)).collect()))
        .collect();
    if !ppl_series.is_empty() {
        for (name, f) in ppl {
            if let Some(v) = tail_mean(&all, f) {
                let _ = writeln!(s, "perplexity {name}: last-10 mean {v:.3}");
            }
        }
        let path = dir.join(PLOT_FILES[2]);
        line_plot(&path, "codebook perplexity", "perplexity", &ppl_series)?;
        files.push(path);
    }

    if dir.join("ablation.json").exists() {
        let table = AblationTable::read(dir)?;
        let _ = writeln!(s, "\nablation\n{}", table.to_text());
        let path = dir.join(PLOT_FILES[3]);
        ablation_plot(&path, &table)?;
        files.push(path);
    } else {
        warnings.push("ablation.json not found; no ablation table".to_string());
    }
    for w in &warnings {
        let _ = writeln!(s, "warning: {w}");
    }
    std::fs::write(&files[0], &s).map_err(|e| Error::io(&files[0], e))?;
    Ok(ReportOutcome { summary: s, files, warnings })
}
