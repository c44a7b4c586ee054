//! Chain files on disk.
//!
//! A chain directory holds `chain.json` (shape and settings), `lambda.csv`,
//! `sigma2.csv`, `theta.csv`, `blocks.csv` and, for completed runs,
//! `summary.csv`. An aborted run additionally gets `ABORTED` containing the
//! error message. Floats are written in shortest round-trip form, so equal
//! records give byte-identical files.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{ChainRecord, PosteriorSummary, Variant};

pub const ABORT_MARKER: &str = "ABORTED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChainMeta {
    variant: Variant,
    m: usize,
    p: usize,
    n_mc: usize,
    burn_in: usize,
    thinning: usize,
    completed: usize,
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn join<I: IntoIterator<Item = String>>(items: I) -> String {
    items.into_iter().collect::<Vec<_>>().join(",")
}

pub fn write_record(dir: &Path, record: &ChainRecord) -> Result<()> {
    fs::create_dir_all(dir)?;
    let meta = ChainMeta {
        variant: record.variant,
        m: record.m,
        p: record.p,
        n_mc: record.n_mc,
        burn_in: record.burn_in,
        thinning: record.thinning,
        completed: record.completed(),
    };
    fs::write(dir.join("chain.json"), serde_json::to_string_pretty(&meta)? + "\n")?;

    let width = record.lambda_trace.first().map_or(if record.variant.common_scale() { 1 } else { record.m }, Vec::len);
    let mut w = create(dir, "lambda.csv")?;
    if width == 1 {
        writeln!(w, "iteration,lambda")?;
    } else {
        writeln!(w, "iteration,{}", join((1..=width).map(|k| format!("lambda_{k}"))))?;
    }
    for (t, row) in record.lambda_trace.iter().enumerate() {
        writeln!(w, "{},{}", t + 1, join(row.iter().map(f64::to_string)))?;
    }
    w.flush()?;

    let mut w = create(dir, "sigma2.csv")?;
    writeln!(w, "iteration,sigma2")?;
    for (t, s) in record.sigma2_trace.iter().enumerate() {
        writeln!(w, "{},{}", t + 1, s)?;
    }
    w.flush()?;

    let mut w = create(dir, "theta.csv")?;
    let header = (1..=record.m).flat_map(|k| (1..=record.p).map(move |a| format!("theta_{k}_{a}")));
    writeln!(w, "iteration,{}", join(header))?;
    for (row, t) in record.theta_iterations.iter().enumerate() {
        writeln!(w, "{},{}", t, join(record.stored_theta(row).iter().map(f64::to_string)))?;
    }
    w.flush()?;

    let mut w = create(dir, "blocks.csv")?;
    writeln!(w, "iteration,i,j")?;
    for (t, i, j) in &record.selected_blocks {
        writeln!(w, "{},{},{}", t, i + 1, j + 1)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(dir: &Path, summary: &PosteriorSummary) -> Result<()> {
    fs::create_dir_all(dir)?;
    let p = summary.mean.p();
    let mut w = create(dir, "summary.csv")?;
    writeln!(w, "channel,lag,mean,sd,q025,q975")?;
    for (c, mean) in summary.mean.as_slice().iter().enumerate() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            c / p + 1,
            c % p + 1,
            mean,
            summary.sd[c],
            summary.q025[c],
            summary.q975[c]
        )?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_abort_marker(dir: &Path, error: &Error) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(ABORT_MARKER), format!("{error}\n"))?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Format(format!("{}: `{f}`: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

fn index(v: f64, path: &Path) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 {
        Ok(v as usize)
    } else {
        Err(Error::Format(format!("{}: bad index {v}", path.display())))
    }
}

/// Load a chain directory written by [`write_record`].
pub fn read_record(dir: &Path) -> Result<ChainRecord> {
    let meta: ChainMeta = serde_json::from_str(&fs::read_to_string(dir.join("chain.json"))?)?;
    let lambda_path = dir.join("lambda.csv");
    let lambda_trace = read_rows(&lambda_path)?.into_iter().map(|r| r[1..].to_vec()).collect::<Vec<_>>();
    let sigma2_trace = read_rows(&dir.join("sigma2.csv"))?.into_iter().map(|r| r[1]).collect::<Vec<_>>();

    let theta_path = dir.join("theta.csv");
    let mut theta_iterations = Vec::new();
    let mut theta_samples = Vec::new();
    for row in read_rows(&theta_path)? {
        if row.len() != 1 + meta.m * meta.p {
            return Err(Error::Dimension { expected: 1 + meta.m * meta.p, got: row.len() });
        }
        theta_iterations.push(index(row[0], &theta_path)?);
        theta_samples.extend_from_slice(&row[1..]);
    }

    let blocks_path = dir.join("blocks.csv");
    let mut selected_blocks = Vec::new();
    for row in read_rows(&blocks_path)? {
        let (i, j) = (index(row[1], &blocks_path)?, index(row[2], &blocks_path)?);
        if i == 0 || j == 0 {
            return Err(Error::Format(format!("{}: channels are 1-based", blocks_path.display())));
        }
        selected_blocks.push((index(row[0], &blocks_path)?, i - 1, j - 1));
    }

    if lambda_trace.len() != meta.completed || sigma2_trace.len() != meta.completed {
        return Err(Error::Format(format!(
            "{}: expected {} iterations, found {} lambda and {} sigma2 rows",
            dir.display(),
            meta.completed,
            lambda_trace.len(),
            sigma2_trace.len()
        )));
    }

    Ok(ChainRecord {
        variant: meta.variant,
        m: meta.m,
        p: meta.p,
        n_mc: meta.n_mc,
        burn_in: meta.burn_in,
        thinning: meta.thinning,
        lambda_trace,
        sigma2_trace,
        theta_iterations,
        theta_samples,
        selected_blocks,
    })
}
