//! Plot data from earlier result directories. Everything is read and
//! validated before anything is written, so a failed report leaves no
//! partial files behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;

use crate::commands::{create, ensure_dir, write_json};
use crate::CliError;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r.records().map(|rec| rec.map(|r| r.iter().map(str::to_string).collect())).collect::<Result<_, _>>()?;
    Ok(Table { header, rows })
}

fn write_table(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Learning-curve files below `dir`, as (seed label, path), sorted by name.
fn curve_files(dir: &Path) -> Result<Vec<(String, PathBuf)>, CliError> {
    let mut found = Vec::new();
    let Ok(entries) = fs::read_dir(dir) else { return Ok(found) };
    for entry in entries {
        let entry = entry.map_err(|source| CliError::Io { path: dir.to_path_buf(), source })?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let path = entry.path().join("learning_curve.csv");
        if let Some(seed) = name.strip_prefix("train_seed") {
            if path.is_file() {
                found.push((seed.to_string(), path));
            }
        }
    }
    found.sort();
    Ok(found)
}

fn mean_std(xs: &[f64]) -> (f64, Option<f64>) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = (xs.len() > 1).then(|| (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
    (mean, std)
}

/// Per-iteration columns: for each metric, one column per seed, then the
/// mean and sample standard deviation over seeds. Runs are cut to the
/// shortest one.
fn aggregate_curves(curves: &[(String, Table)]) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let header = &curves[0].1.header;
    if let Some((label, _)) = curves.iter().find(|(_, t)| &t.header != header) {
        return Err(CliError::Report(format!("learning curve of seed {label} has a different header")));
    }
    let metrics: Vec<usize> = (0..header.len()).filter(|&i| header[i] != "iteration").collect();
    let mut out_header = vec!["iteration".to_string()];
    for &m in &metrics {
        for (label, _) in curves {
            out_header.push(format!("{}_seed{label}", header[m]));
        }
        out_header.push(format!("{}_mean", header[m]));
        out_header.push(format!("{}_std", header[m]));
    }
    let len = curves.iter().map(|(_, t)| t.rows.len()).min().unwrap_or(0);
    let mut rows = Vec::with_capacity(len);
    for i in 0..len {
        let mut row = vec![curves[0].1.rows[i][0].clone()];
        for &m in &metrics {
            let mut xs = Vec::new();
            for (_, t) in curves {
                let cell = &t.rows[i][m];
                if !cell.is_empty() {
                    xs.push(cell.parse::<f64>().map_err(|_| CliError::Report(format!("non-numeric cell {cell:?}")))?);
                }
                row.push(cell.clone());
            }
            if xs.is_empty() {
                row.extend([String::new(), String::new()]);
            } else {
                let (mean, std) = mean_std(&xs);
                row.push(mean.to_string());
                row.push(std.map(|s| s.to_string()).unwrap_or_default());
            }
        }
        rows.push(row);
    }
    Ok((out_header, rows))
}

#[derive(Serialize)]
struct ReportDoc {
    sources: Vec<String>,
    training_runs: Vec<String>,
    alpha_star: Option<f64>,
    probe_slices: Option<Value>,
    files: Vec<&'static str>,
}

pub fn emit(dirs: &[PathBuf], out: &Path) -> Result<(), CliError> {
    let mut curves = Vec::new();
    let mut probe = None;
    let mut threshold = None;
    let mut alpha_star = None;
    let mut probe_slices = None;
    for dir in dirs {
        for (label, path) in curve_files(dir)? {
            curves.push((label, read_table(&path)?));
        }
        let p = dir.join("probe.csv");
        if probe.is_none() && p.is_file() {
            probe = Some(read_table(&p)?);
            if let Ok(text) = fs::read_to_string(dir.join("probe.json")) {
                probe_slices = serde_json::from_str::<Value>(&text)?.get("slices").cloned();
            }
        }
        let p = dir.join("threshold_curve.csv");
        if threshold.is_none() && p.is_file() {
            threshold = Some(read_table(&p)?);
            if let Ok(text) = fs::read_to_string(dir.join("solve.json")) {
                alpha_star = serde_json::from_str::<Value>(&text)?.get("alpha_star").and_then(Value::as_f64);
            }
        }
    }
    if curves.is_empty() && probe.is_none() && threshold.is_none() {
        return Err(CliError::Report("no learning curves, probe or threshold data in the result directories".into()));
    }

    let learning = if curves.is_empty() { None } else { Some(aggregate_curves(&curves)?) };
    let column = |t: &Table, name: &str| {
        t.header.iter().position(|h| h == name).ok_or_else(|| CliError::Report(format!("threshold curve lacks {name:?}")))
    };
    let margin_value = match &threshold {
        Some(t) => Some((column(t, "b1")?, column(t, "margin")?, column(t, "value")?)),
        None => None,
    };

    let dir = out.join("report");
    ensure_dir(&dir)?;
    let mut files = Vec::new();
    if let Some((header, rows)) = learning {
        write_table(&dir.join("learning_curves.csv"), &header, &rows)?;
        files.push("learning_curves.csv");
    }
    if let Some(t) = &probe {
        write_table(&dir.join("probe_surface.csv"), &t.header, &t.rows)?;
        files.push("probe_surface.csv");
    }
    if let (Some(t), Some((b, m, v))) = (&threshold, margin_value) {
        let pick = |c: usize| t.rows.iter().map(|r| vec![r[b].clone(), r[c].clone()]).collect::<Vec<_>>();
        write_table(&dir.join("threshold_margin.csv"), &["b1".into(), "margin".into()], &pick(m))?;
        write_table(&dir.join("value_function.csv"), &["b1".into(), "value".into()], &pick(v))?;
        files.extend(["threshold_margin.csv", "value_function.csv"]);
    }
    let doc = ReportDoc {
        sources: dirs.iter().map(|d| d.display().to_string()).collect(),
        training_runs: curves.iter().map(|(l, _)| format!("seed{l}")).collect(),
        alpha_star,
        probe_slices,
        files,
    };
    write_json(&dir.join("report.json"), &doc)
}
