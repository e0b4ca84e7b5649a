//! Measurement reports: one CSV row per measurement with columns
//! (experiment, model_size_bytes, phase, value, unit, seed). Every
//! figure of an experiment run is derivable from this shape; only the
//! value column carries wall-clock noise.

use anyhow::Result;
use std::io::Write;
use std::path::Path;

pub const CSV_HEADER: &str = "experiment,model_size_bytes,phase,value,unit,seed";

#[derive(Debug, Clone)]
pub struct Row {
    pub experiment: String,
    pub model_size_bytes: u64,
    pub phase: String,
    pub value: f64,
    pub unit: String,
    pub seed: u64,
}

#[derive(Debug, Default)]
pub struct Report {
    pub rows: Vec<Row>,
}

impl Report {
    pub fn push(
        &mut self,
        experiment: &str,
        model_size_bytes: u64,
        phase: &str,
        value: f64,
        unit: &str,
        seed: u64,
    ) {
        self.rows.push(Row {
            experiment: experiment.to_string(),
            model_size_bytes,
            phase: phase.to_string(),
            value,
            unit: unit.to_string(),
            seed,
        });
    }

    pub fn write_to(&self, out: &mut impl Write) -> Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.experiment, r.model_size_bytes, r.phase, r.value, r.unit, r.seed
            )?;
        }
        Ok(())
    }

    /// Write to a file, or stdout when no path is given.
    pub fn emit(&self, path: Option<&Path>) -> Result<()> {
        match path {
            Some(p) => {
                let mut f = std::fs::File::create(p)?;
                self.write_to(&mut f)
            }
            None => self.write_to(&mut std::io::stdout().lock()),
        }
    }
}
