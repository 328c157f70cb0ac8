//! Side-by-side comparison of finished runs.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sst_core::train::ForecastReport;
use sst_core::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub run: String,
    pub model: String,
    pub lookback: usize,
    pub horizon: usize,
    pub windows: usize,
    pub mse: f64,
    pub mae: f64,
}

fn report_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("report.json")
    } else {
        p.to_path_buf()
    }
}

fn malformed(path: &Path, message: String) -> Error {
    Error::Load {
        path: path.to_path_buf(),
        row: 0,
        column: 0,
        message,
    }
}

pub fn load(run: &Path) -> Result<Row> {
    let path = report_path(run);
    let text = fs::read_to_string(&path).map_err(|e| malformed(&path, e.to_string()))?;
    let r = ForecastReport::from_json(&text).map_err(|e| malformed(&path, e.to_string()))?;
    if !(r.mse.is_finite() && r.mae.is_finite()) {
        return Err(malformed(&path, "non-finite metric".into()));
    }
    Ok(Row {
        run: run.display().to_string(),
        model: r.model,
        lookback: r.lookback,
        horizon: r.horizon,
        windows: r.windows,
        mse: r.mse,
        mae: r.mae,
    })
}

/// Ascending MSE; ties broken by model then run so the order is total.
pub fn sort_rows(rows: &mut [Row]) {
    rows.sort_by(|a, b| {
        a.mse
            .total_cmp(&b.mse)
            .then_with(|| a.model.cmp(&b.model))
            .then_with(|| a.run.cmp(&b.run))
    });
}

const HEADER: [&str; 8] = ["rank", "model", "L", "F", "windows", "mse", "mae", "run"];

fn cells(rank: usize, r: &Row) -> [String; 8] {
    [
        rank.to_string(),
        r.model.clone(),
        r.lookback.to_string(),
        r.horizon.to_string(),
        r.windows.to_string(),
        format!("{:.6}", r.mse),
        format!("{:.6}", r.mae),
        r.run.clone(),
    ]
}

/// Aligned text table; numeric columns are right-aligned.
pub fn render(rows: &[Row]) -> String {
    let body: Vec<[String; 8]> = rows.iter().enumerate().map(|(i, r)| cells(i + 1, r)).collect();
    let mut width = HEADER.map(str::len);
    for line in &body {
        for (w, c) in width.iter_mut().zip(line) {
            *w = (*w).max(c.len());
        }
    }
    let left = |i: usize| i == 1 || i == 7;
    let fmt = |line: &[String]| {
        let parts: Vec<String> = line
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if left(i) {
                    format!("{c:<w$}", w = width[i])
                } else {
                    format!("{c:>w$}", w = width[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = fmt(&HEADER.map(String::from));
    for line in &body {
        out += &fmt(line);
    }
    out
}

pub fn to_csv(rows: &[Row]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.into());
    w.write_record(HEADER).map_err(io)?;
    for (i, r) in rows.iter().enumerate() {
        w.write_record(cells(i + 1, r)).map_err(io)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn run(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut rows = runs.iter().map(|r| load(r)).collect::<Result<Vec<_>>>()?;
    sort_rows(&mut rows);
    let table = render(&rows);
    print!("{table}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.txt"), &table)?;
        fs::write(dir.join("report.csv"), to_csv(&rows)?)?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    }
    Ok(())
}
