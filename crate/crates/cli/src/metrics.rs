//! `metrics.csv`: RFC-4180 rows `step,wall_ms,metric,value,split`.

use std::fs::{File, OpenOptions};
use std::path::Path;

use flowcritic::train::MetricsRow;

use crate::error::CliError;

pub const HEADER: [&str; 5] = ["step", "wall_ms", "metric", "value", "split"];

/// Shortest form that still carries 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub struct MetricsWriter {
    w: csv::Writer<File>,
}

fn writer(file: File) -> csv::Writer<File> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::CRLF)
        .has_headers(false)
        .from_writer(file)
}

impl MetricsWriter {
    /// Starts a fresh file with the header row.
    pub fn create(path: &Path) -> Result<Self, CliError> {
        let mut w = writer(File::create(path)?);
        w.write_record(HEADER)?;
        w.flush()?;
        Ok(MetricsWriter { w })
    }

    /// Reopens an existing file, dropping rows past `step` so a resumed
    /// run continues the series without duplicates.
    pub fn resume(path: &Path, step: u64) -> Result<Self, CliError> {
        let kept: Vec<MetricsRow> = read_metrics(path)?.into_iter().filter(|r| r.step <= step).collect();
        let mut m = Self::create(path)?;
        m.append(&kept)?;
        drop(m);
        let file = OpenOptions::new().append(true).open(path)?;
        Ok(MetricsWriter { w: writer(file) })
    }

    pub fn append(&mut self, rows: &[MetricsRow]) -> Result<(), CliError> {
        for r in rows {
            self.w.write_record([
                r.step.to_string(),
                r.wall_ms.to_string(),
                r.metric.clone(),
                format_f64(r.value),
                r.split.clone(),
            ])?;
        }
        self.w.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let bad = |detail: String| CliError::Usage(format!("{}: {detail}", path.display()));
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != HEADER.len() {
            return Err(bad(format!("row with {} fields", rec.len())));
        }
        rows.push(MetricsRow {
            step: rec[0].parse().map_err(|_| bad(format!("bad step {:?}", &rec[0])))?,
            wall_ms: rec[1].parse().map_err(|_| bad(format!("bad wall_ms {:?}", &rec[1])))?,
            metric: rec[2].to_string(),
            value: rec[3].parse().map_err(|_| bad(format!("bad value {:?}", &rec[3])))?,
            split: rec[4].to_string(),
        });
    }
    Ok(rows)
}

/// Writes any table as CSV with a header row.
pub fn write_table(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let mut w = writer(File::create(path)?);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seventeen_digits_round_trip() {
        for v in [0.1, 1.0 / 3.0, -2.5e-300, 123_456_789.123_456_79, f64::MIN_POSITIVE] {
            let s = format_f64(v);
            assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
            let mantissa = s.split('e').next().unwrap().replace(['-', '.'], "");
            assert_eq!(mantissa.len(), 17);
        }
    }
}
