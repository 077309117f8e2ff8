// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV and SVG files for curves, tables and heatmaps. Every writer is a
//! pure function of its input, so re-exporting yields identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::report::{Report, SweepCurve};
use crate::error::{Error, Result};
use crate::interpret::{grid_svg, FixedVaried, PatchGrid};
use crate::llmprobe::ProbeReport;
use crate::plot::{line_chart, Series};
use crate::taskgen::{read_json, OrderMode};
use crate::trainer::TrainLog;

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x}")
    } else {
        String::new()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per evaluation point.
pub fn train_log_csv(log: &TrainLog) -> String {
    let ood_keys: Vec<String> = log
        .records
        .iter()
        .flat_map(|r| r.ood_accuracy.keys().cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut s = String::from("step,epoch,lr,train_loss,id_accuracy");
    for k in &ood_keys {
        let _ = write!(s, ",ood_{}", k.trim_start_matches('+'));
    }
    s.push('\n');
    for r in &log.records {
        let _ = write!(s, "{},{},{},{},{}", r.step, r.epoch, num(r.lr), num(r.train_loss), num(r.id_accuracy));
        for k in &ood_keys {
            let _ = write!(s, ",{}", r.ood_accuracy.get(k).map(|&v| num(v)).unwrap_or_default());
        }
        s.push('\n');
    }
    s
}

pub fn train_log_svg(log: &TrainLog) -> String {
    let mut series =
        vec![Series { name: "ID", points: log.records.iter().map(|r| (r.step as f64, r.id_accuracy)).collect() }];
    let keys: std::collections::BTreeSet<&String> = log.records.iter().flat_map(|r| r.ood_accuracy.keys()).collect();
    let names: Vec<String> = keys.iter().map(|k| format!("OOD {k}")).collect();
    for (k, name) in keys.iter().zip(&names) {
        series.push(Series {
            name,
            points: log.records.iter().filter_map(|r| r.ood_accuracy.get(*k).map(|&v| (r.step as f64, v))).collect(),
        });
    }
    line_chart("Accuracy during training", "step", "accuracy", (0.0, 1.0), &series)
}

/// Long format: one row per present cell.
pub fn report_csv(report: &Report) -> String {
    let mut s = format!("order_mode,{},n,correct,accuracy\n", report.breakdown.as_str());
    for row in &report.rows {
        for (&c, cell) in report.columns.iter().zip(&row.cells) {
            if let Some(cell) = cell {
                let _ = writeln!(s, "{},{c},{},{},{}", row.order_mode, cell.n, cell.correct, num(cell.accuracy));
            }
        }
    }
    s
}

pub fn report_svg(report: &Report) -> String {
    let names: Vec<&str> = report.rows.iter().map(|r| r.order_mode.as_str()).collect();
    let series: Vec<Series> = report
        .rows
        .iter()
        .zip(&names)
        .map(|(r, name)| Series {
            name,
            points: report.points(r.order_mode).into_iter().map(|(c, a)| (c as f64, a)).collect(),
        })
        .collect();
    let x_label = match report.breakdown {
        super::report::Breakdown::NSteps => "reasoning steps",
        super::report::Breakdown::NVas => "equations with a variable as subtrahend",
    };
    line_chart(&report.experiment, x_label, "accuracy", (0.0, 1.0), &series)
}

/// Fixed-width text rendering; absent cells print as `-`.
pub fn report_text(report: &Report) -> String {
    let mut s = format!("{:<16}", "order");
    for c in &report.columns {
        let _ = write!(s, "{c:>8}");
    }
    s.push('\n');
    for row in &report.rows {
        let _ = write!(s, "{:<16}", row.order_mode.as_str());
        for cell in &row.cells {
            match cell {
                Some(c) => {
                    let _ = write!(s, "{:>8.2}", c.accuracy);
                }
                None => {
                    let _ = write!(s, "{:>8}", "-");
                }
            }
        }
        s.push('\n');
    }
    s
}

pub fn sweep_csv(curve: &SweepCurve) -> String {
    let mut s = String::from("window,accuracy,n\n");
    for p in &curve.points {
        let _ = writeln!(s, "{},{},{}", p.window, num(p.accuracy), p.n);
    }
    s
}

pub fn sweep_svg(curve: &SweepCurve) -> String {
    let pts = curve.points.iter().map(|p| (p.window as f64, p.accuracy)).collect();
    line_chart(
        "Accuracy by attention window",
        "window size",
        "accuracy",
        (0.0, 1.0),
        &[Series { name: "accuracy", points: pts }],
    )
}

/// One row per (layer, position) cell.
pub fn grid_csv(grid: &PatchGrid) -> String {
    let mut s = String::from("layer,position,token,value,count\n");
    for (l, row) in grid.values.iter().enumerate() {
        for (p, &v) in row.iter().enumerate() {
            let _ = writeln!(s, "{l},{p},{},{},{}", csv_field(&grid.tokens[p]), num(v), grid.counts[l][p]);
        }
    }
    s
}

/// Overlay of several VAS reports' rows for `order`, labelled by name.
pub fn vas_comparison_svg(reports: &[(String, &Report)], order: OrderMode) -> String {
    let series: Vec<Series> = reports
        .iter()
        .map(|(name, r)| Series { name, points: r.points(order).into_iter().map(|(c, a)| (c as f64, a)).collect() })
        .collect();
    line_chart(
        "Accuracy by variable-as-subtrahend count",
        "equations with a variable as subtrahend",
        "accuracy",
        (0.0, 1.0),
        &series,
    )
}

pub fn vas_comparison_csv(reports: &[(String, &Report)], order: OrderMode) -> String {
    let mut s = String::from("model,n_vas,accuracy\n");
    for (name, r) in reports {
        for (c, a) in r.points(order) {
            let _ = writeln!(s, "{},{c},{}", csv_field(name), num(a));
        }
    }
    s
}

fn write(dir: &Path, name: String, body: String, written: &mut Vec<PathBuf>) -> Result<()> {
    let p = dir.join(name);
    fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    written.push(p);
    Ok(())
}

/// Artifact kinds the exporter understands.
#[derive(Debug)]
pub enum Artifact {
    TrainLog(TrainLog),
    Report(Report),
    Sweep(SweepCurve),
    Grid(PatchGrid),
    FixedVaried(Box<FixedVaried>),
    Probe(ProbeReport),
}

/// Load an artifact, recognizing it by extension and shape.
pub fn load_artifact(path: &Path) -> Result<Artifact> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    if path.extension().is_some_and(|e| e == "jsonl") {
        return Ok(Artifact::TrainLog(TrainLog::read_jsonl(path)?));
    }
    let v: serde_json::Value = read_json(path)?;
    let has = |k: &str| v.get(k).is_some();
    let parsed = if has("breakdown") {
        serde_json::from_value(v).map(Artifact::Report)
    } else if has("points") {
        serde_json::from_value(v).map(Artifact::Sweep)
    } else if has("fixed") && has("varied") {
        serde_json::from_value(v).map(|x| Artifact::FixedVaried(Box::new(x)))
    } else if has("component") && has("values") {
        serde_json::from_value(v).map(Artifact::Grid)
    } else if has("probe") {
        serde_json::from_value(v).map(Artifact::Probe)
    } else {
        return Err(Error::format(path, "not a train log, report, sweep, grid or probe report"));
    };
    parsed.map_err(|e| Error::format(path, e.to_string()))
}

/// Write CSV and SVG for each input into `outdir`, named after the input
/// file stem. With two or more VAS reports, also writes an overlay of their
/// forward rows as `vas_comparison.{csv,svg}`.
pub fn export_curves(inputs: &[PathBuf], outdir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(outdir).map_err(|e| Error::io(outdir, e))?;
    let mut written = Vec::new();
    let mut vas = Vec::new();
    for path in inputs {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("artifact").to_string();
        match load_artifact(path)? {
            Artifact::TrainLog(log) => {
                write(outdir, format!("{stem}.csv"), train_log_csv(&log), &mut written)?;
                write(outdir, format!("{stem}.svg"), train_log_svg(&log), &mut written)?;
            }
            Artifact::Report(r) => {
                write(outdir, format!("{stem}.csv"), report_csv(&r), &mut written)?;
                write(outdir, format!("{stem}.svg"), report_svg(&r), &mut written)?;
                if r.breakdown == super::report::Breakdown::NVas {
                    vas.push((stem, r));
                }
            }
            Artifact::Sweep(c) => {
                write(outdir, format!("{stem}.csv"), sweep_csv(&c), &mut written)?;
                write(outdir, format!("{stem}.svg"), sweep_svg(&c), &mut written)?;
            }
            Artifact::Grid(g) => {
                write(outdir, format!("{stem}.csv"), grid_csv(&g), &mut written)?;
                write(outdir, format!("{stem}.svg"), grid_svg(&g), &mut written)?;
            }
            Artifact::FixedVaried(fv) => {
                for (tag, g) in [("fixed", &fv.fixed), ("varied", &fv.varied)] {
                    write(outdir, format!("{stem}_{tag}.csv"), grid_csv(g), &mut written)?;
                    write(outdir, format!("{stem}_{tag}.svg"), grid_svg(g), &mut written)?;
                }
            }
            Artifact::Probe(p) => {
                write(outdir, format!("{stem}.csv"), p.to_csv(), &mut written)?;
                write(outdir, format!("{stem}.svg"), p.to_svg(), &mut written)?;
            }
        }
    }
    if vas.len() >= 2 {
        let refs: Vec<(String, &Report)> = vas.iter().map(|(n, r)| (n.clone(), r)).collect();
        write(outdir, "vas_comparison.csv".into(), vas_comparison_csv(&refs, OrderMode::Forward), &mut written)?;
        write(outdir, "vas_comparison.svg".into(), vas_comparison_svg(&refs, OrderMode::Forward), &mut written)?;
    }
    Ok(written)
}
