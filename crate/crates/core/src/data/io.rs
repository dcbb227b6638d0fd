//! CSV round-trip for datasets.
//!
//! Classification layout:
//! ```text
//! # classes=10
//! f0,f1,...,f31,noisy_label,true_label
//! 1.2345678901234567e0,...,3,3
//! ```
//! Regression layout has columns `x,y,truth` and no directive line. Floats
//! are written with 17 significant digits so 64-bit values round-trip
//! bit-exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::data::{NoisyClassificationDataset, RegressionDataset};
use crate::error::{Error, Result};

/// 17 significant digits: enough to reproduce any f64 exactly on parse.
pub fn fmt_f64_17(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

fn parse_f64(field: &str, path: &Path, line: usize) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| parse_err(path, line, format!("expected a real number, got {field:?}")))
}

fn parse_usize(field: &str, path: &Path, line: usize) -> Result<usize> {
    field
        .trim()
        .parse::<usize>()
        .map_err(|_| parse_err(path, line, format!("expected an integer, got {field:?}")))
}

pub fn save_classification_csv(ds: &NoisyClassificationDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# classes={}", ds.class_count())?;
    let header: Vec<String> = (0..ds.dim())
        .map(|j| format!("f{j}"))
        .chain(["noisy_label".to_string(), "true_label".to_string()])
        .collect();
    writeln!(w, "{}", header.join(","))?;
    for i in 0..ds.len() {
        let mut fields: Vec<String> = ds.feature_row(i).iter().map(|&v| fmt_f64_17(v)).collect();
        fields.push(ds.noisy_labels()[i].to_string());
        fields.push(ds.true_labels()[i].to_string());
        writeln!(w, "{}", fields.join(","))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_classification_csv(path: impl AsRef<Path>) -> Result<NoisyClassificationDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();

    let (_, directive) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let directive = directive?;
    let classes = directive
        .strip_prefix("# classes=")
        .ok_or_else(|| parse_err(path, 1, "expected '# classes=N' directive"))
        .and_then(|v| parse_usize(v, path, 1))?;

    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 2, "missing header row"))?;
    let header = header?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "noisy_label" || cols[cols.len() - 1] != "true_label"
    {
        return Err(parse_err(
            path,
            2,
            "header must end with noisy_label,true_label",
        ));
    }
    let dim = cols.len() - 2;

    let mut features = Vec::new();
    let mut noisy = Vec::new();
    let mut truth = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected {} fields, got {}", dim + 2, fields.len()),
            ));
        }
        for f in &fields[..dim] {
            features.push(parse_f64(f, path, line_no)?);
        }
        let nl = parse_usize(fields[dim], path, line_no)?;
        let tl = parse_usize(fields[dim + 1], path, line_no)?;
        if nl >= classes || tl >= classes {
            return Err(parse_err(
                path,
                line_no,
                format!("label {} out of range for {classes} classes", nl.max(tl)),
            ));
        }
        noisy.push(nl);
        truth.push(tl);
    }
    if noisy.is_empty() {
        return Err(parse_err(path, 3, "no data rows"));
    }
    NoisyClassificationDataset::new(features, dim, noisy, truth, classes)
}

pub fn save_regression_csv(ds: &RegressionDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "x,y,truth")?;
    for i in 0..ds.len() {
        writeln!(
            w,
            "{},{},{}",
            fmt_f64_17(ds.x()[i]),
            fmt_f64_17(ds.y()[i]),
            fmt_f64_17(ds.truth()[i])
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_regression_csv(path: impl AsRef<Path>) -> Result<RegressionDataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    if header?.trim() != "x,y,truth" {
        return Err(parse_err(path, 1, "expected header x,y,truth"));
    }
    let (mut x, mut y, mut truth) = (Vec::new(), Vec::new(), Vec::new());
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                path,
                line_no,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        x.push(parse_f64(fields[0], path, line_no)?);
        y.push(parse_f64(fields[1], path, line_no)?);
        truth.push(parse_f64(fields[2], path, line_no)?);
    }
    if x.is_empty() {
        return Err(parse_err(path, 2, "no data rows"));
    }
    RegressionDataset::new(x, y, truth)
}
