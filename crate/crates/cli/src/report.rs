//! Markdown summary and SVG curves over several runs' metric logs.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use omnifuse_core::training::{read_metrics, EpochRecord};

use crate::{CliError, ReportArgs};

struct Run {
    name: String,
    records: Vec<EpochRecord>,
}

fn run_name(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

fn table(runs: &[Run]) -> String {
    let mut md = String::from("| run | phase | epochs | loss | contrastive | reconstruction | val loss | weighted F1 | macro F1 | micro F1 |\n");
    md += "|---|---|---|---|---|---|---|---|---|---|\n";
    for run in runs {
        let mut phases: Vec<&str> = Vec::new();
        for r in &run.records {
            if !phases.contains(&r.phase.as_str()) {
                phases.push(&r.phase);
            }
        }
        for phase in phases {
            let rows: Vec<&EpochRecord> = run.records.iter().filter(|r| r.phase == phase).collect();
            let last = rows[rows.len() - 1];
            let _ = writeln!(
                md,
                "| {} | {phase} | {} | {:.4} | {} | {} | {} | {} | {} | {} |",
                run.name,
                last.epoch,
                last.loss_total,
                cell(last.loss_con),
                cell(last.loss_mae),
                cell(last.val_loss),
                cell(last.f1_weighted),
                cell(last.f1_macro),
                cell(last.f1_micro),
            );
        }
    }
    md
}

type Series = (String, Vec<(f64, f64)>);

fn curves(runs: &[Run], value: impl Fn(&EpochRecord) -> Option<f64>) -> Vec<Series> {
    let mut out = Vec::new();
    for run in runs {
        let mut phases: Vec<&str> = Vec::new();
        for r in run.records.iter().filter(|r| r.phase != "eval") {
            if !phases.contains(&r.phase.as_str()) {
                phases.push(&r.phase);
            }
        }
        for phase in phases {
            let pts: Vec<(f64, f64)> = run
                .records
                .iter()
                .filter(|r| r.phase == phase)
                .filter_map(|r| value(r).filter(|v| v.is_finite()).map(|v| (r.epoch as f64, v)))
                .collect();
            if !pts.is_empty() {
                out.push((format!("{} {phase}", run.name), pts));
            }
        }
    }
    out
}

fn plot(path: &Path, title: &str, series: &[Series]) -> Result<(), Box<dyn std::error::Error>> {
    let (mut x1, mut y0, mut y1) = (1.0f64, f64::INFINITY, f64::NEG_INFINITY);
    for (_, pts) in series {
        for &(x, y) in pts {
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let pad = 0.05 * (y1 - y0);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(32)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..x1, (y0 - pad)..(y1 + pad))?;
    chart.configure_mesh().x_desc("epoch").draw()?;
    for (i, (label, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))?
            .label(label.as_str())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw()?;
    root.present()?;
    Ok(())
}

pub fn run(a: &ReportArgs) -> Result<(), CliError> {
    let mut runs = Vec::new();
    for dir in &a.runs {
        let path = dir.join("metrics.jsonl");
        if !path.exists() {
            eprintln!("warning: {} has no metrics.jsonl; skipped", dir.display());
            continue;
        }
        let records = read_metrics(&path)?;
        if records.is_empty() {
            eprintln!("warning: {} is empty; skipped", path.display());
            continue;
        }
        runs.push(Run { name: run_name(dir), records });
    }
    if runs.is_empty() {
        return Err(CliError::Failed("no run had a readable metrics log".into()));
    }
    fs::create_dir_all(&a.out).map_err(|e| CliError::Io(a.out.clone(), e))?;

    let mut md = String::from("# Run report\n\nFinal epoch of each phase.\n\n");
    md += &table(&runs);
    let plots: [(&str, &str, Vec<Series>); 3] = [
        ("loss.svg", "training loss", curves(&runs, |r| Some(r.loss_total))),
        ("val_loss.svg", "validation loss", curves(&runs, |r| r.val_loss)),
        ("f1.svg", "validation weighted F1", curves(&runs, |r| r.f1_weighted)),
    ];
    let mut drawn: Vec<PathBuf> = Vec::new();
    for (file, title, series) in &plots {
        if series.is_empty() {
            continue;
        }
        let path = a.out.join(file);
        plot(&path, title, series).map_err(|e| CliError::Failed(format!("plotting {}: {e}", path.display())))?;
        let _ = write!(md, "\n![{title}]({file})\n");
        drawn.push(path);
    }
    let report = a.out.join("report.md");
    fs::write(&report, &md).map_err(|e| CliError::Io(report.clone(), e))?;
    print!("{md}");
    eprintln!("wrote {} and {} plots", report.display(), drawn.len());
    Ok(())
}
