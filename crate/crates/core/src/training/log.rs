use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::error::{DfnError, Result};

/// Append-only CSV of per-step records, flushed after every row.
#[derive(Debug)]
pub struct RunLog {
    path: PathBuf,
    out: BufWriter<File>,
    last_step: Option<usize>,
}

impl RunLog {
    pub fn create(path: &Path, columns: &[&str]) -> Result<Self> {
        let file = File::create(path).map_err(|e| DfnError::io(path, e))?;
        let mut log = RunLog {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_step: None,
        };
        let mut header = vec!["step", "loss"];
        header.extend_from_slice(columns);
        header.push("wall_time");
        log.write_line(&header.join(","))?;
        Ok(log)
    }

    fn write_line(&mut self, line: &str) -> Result<()> {
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| DfnError::io(&self.path, e))
    }

    pub fn record(&mut self, step: usize, loss: f64, terms: &[f64], wall_time: f64) -> Result<()> {
        if self.last_step.is_some_and(|s| step <= s) {
            return Err(DfnError::InvalidInput(format!("run log step {step} is not increasing")));
        }
        self.last_step = Some(step);
        let mut fields = vec![step.to_string(), format!("{loss:.9e}")];
        fields.extend(terms.iter().map(|t| format!("{t:.9e}")));
        fields.push(format!("{wall_time:.3}"));
        self.write_line(&fields.join(","))
    }
}
