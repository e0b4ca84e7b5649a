//! Per-iteration loss log: CSV `iter,loss`, one row per completed
//! iteration. A killed worker can leave a torn final line, and rows past
//! the last mirrored iteration must be recomputed on resume, so reading
//! is tolerant and resumption rewrites a sanitized file.

use anyhow::{Context, Result};
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::Path;

pub const HEADER: &str = "iter,loss";

/// Parse rows, dropping the header, any malformed line, and anything
/// after the first gap in the iteration sequence. A kill can tear the
/// final line; a torn prefix that still parses is kept, which is safe
/// because resumption truncates to the snapshot's iteration anyway.
pub fn read_rows(path: &Path) -> Vec<(u64, String)> {
    let Ok(text) = std::fs::read_to_string(path) else {
        return Vec::new();
    };
    let mut rows: Vec<(u64, String)> = Vec::new();
    for line in text.lines() {
        if line == HEADER || line.is_empty() {
            continue;
        }
        let Some((iter, loss)) = line.split_once(',') else { break };
        let Ok(iter) = iter.parse::<u64>() else { break };
        if loss.parse::<f64>().is_err() {
            break;
        }
        if iter != rows.len() as u64 + 1 {
            break;
        }
        rows.push((iter, loss.to_string()));
    }
    rows
}

/// Write a fresh log holding exactly `rows`, returning an appendable
/// handle positioned after them.
pub fn rewrite(path: &Path, rows: &[(u64, String)]) -> Result<File> {
    let mut f = File::create(path).with_context(|| format!("loss log {}", path.display()))?;
    writeln!(f, "{HEADER}")?;
    for (iter, loss) in rows {
        writeln!(f, "{iter},{loss}")?;
    }
    f.flush()?;
    Ok(f)
}

/// Open for appending without touching existing rows.
pub fn append(path: &Path) -> Result<File> {
    if !path.exists() {
        return rewrite(path, &[]);
    }
    OpenOptions::new()
        .append(true)
        .open(path)
        .with_context(|| format!("loss log {}", path.display()))
}

pub fn append_row(f: &mut File, iter: u64, loss: f32) -> Result<()> {
    writeln!(f, "{iter},{loss}")?;
    f.flush()?;
    Ok(())
}
