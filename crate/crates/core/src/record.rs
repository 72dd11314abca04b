//! Per-iteration time series of solver runs and their CSV form.

use std::io::Write;

use crate::error::Result;

/// A row type with a fixed CSV header.
pub trait RecordRow {
    const HEADER: &'static [&'static str];

    /// Formatted cells, one per header column; empty for missing values.
    fn cells(&self) -> Vec<String>;
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// One logged iterate of alternating minimization.
#[derive(Clone, Debug, PartialEq)]
pub struct AltMinRow {
    pub iter: usize,
    pub f: f64,
    pub r_u: f64,
    pub r_z: Option<f64>,
    pub envelope_residual: Option<f64>,
    pub step_u: Option<f64>,
    pub step_z: Option<f64>,
}

impl RecordRow for AltMinRow {
    const HEADER: &'static [&'static str] = &["iter", "F", "r_u", "r_z", "envelope_residual", "step_u", "step_z"];

    fn cells(&self) -> Vec<String> {
        vec![
            self.iter.to_string(),
            self.f.to_string(),
            self.r_u.to_string(),
            opt(self.r_z),
            opt(self.envelope_residual),
            opt(self.step_u),
            opt(self.step_z),
        ]
    }
}

/// One logged round of distributed training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRow {
    pub iter: usize,
    pub f: f64,
    pub train_loss: f64,
    /// Blank for models without a classification error.
    pub train_error: Option<f64>,
    pub consensus_gap: f64,
    pub envelope_grad_norm: Option<f64>,
    /// Blank unless timing was requested, so that records stay reproducible.
    pub wall_ms: Option<f64>,
}

impl RecordRow for TrainRow {
    const HEADER: &'static [&'static str] = &[
        "iter",
        "F",
        "train_loss",
        "train_error",
        "consensus_gap",
        "envelope_grad_norm",
        "wall_ms",
    ];

    fn cells(&self) -> Vec<String> {
        vec![
            self.iter.to_string(),
            self.f.to_string(),
            self.train_loss.to_string(),
            opt(self.train_error),
            self.consensus_gap.to_string(),
            opt(self.envelope_grad_norm),
            opt(self.wall_ms),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord<R> {
    pub rows: Vec<R>,
}

pub type AltMinRecord = RunRecord<AltMinRow>;
pub type TrainRecord = RunRecord<TrainRow>;

impl<R> Default for RunRecord<R> {
    fn default() -> Self {
        Self { rows: Vec::new() }
    }
}

impl<R: RecordRow> RunRecord<R> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: R) {
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&R> {
        self.rows.last()
    }

    /// Header row first, LF line endings.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        w.write_record(R::HEADER)?;
        for r in &self.rows {
            w.write_record(r.cells())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn altmin_csv() {
        let mut r = AltMinRecord::new();
        r.push(AltMinRow {
            iter: 0,
            f: 1.5,
            r_u: 0.25,
            r_z: Some(0.0),
            envelope_residual: None,
            step_u: None,
            step_z: None,
        });
        assert_eq!(
            r.to_csv_string(),
            "iter,F,r_u,r_z,envelope_residual,step_u,step_z\n0,1.5,0.25,0,,,\n"
        );
    }

    #[test]
    fn train_csv_header_only() {
        assert_eq!(
            TrainRecord::new().to_csv_string(),
            "iter,F,train_loss,train_error,consensus_gap,envelope_grad_norm,wall_ms\n"
        );
    }
}
