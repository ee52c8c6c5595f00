//! Metrics stream: one CSV row per update, fixed schema.
//!
//! The column order is part of the artifact contract — plotting scripts
//! and the determinism check both key on it — so the header is a
//! constant and rows are written and read strictly in that order.
//! Counters print as integers, everything else through the shortest
//! round-trip float form, so identical training trajectories produce
//! byte-identical rows.

use std::error::Error;
use std::fmt;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use crate::trainer::MetricsRow;

/// Header line of every metrics file.
pub const METRICS_HEADER: &str = "update_idx,env_steps,score_mean,score_std,policy_loss,\
d_loss,eg_loss,recon_loss,ig_mean,ig_max,rc_mean,entropy,eta_t,wall_ms";

/// Column names in emission order.
pub const METRICS_COLUMNS: [&str; 14] = [
    "update_idx",
    "env_steps",
    "score_mean",
    "score_std",
    "policy_loss",
    "d_loss",
    "eg_loss",
    "recon_loss",
    "ig_mean",
    "ig_max",
    "rc_mean",
    "entropy",
    "eta_t",
    "wall_ms",
];

/// A metrics file that failed to read back.
#[derive(Debug)]
pub enum MetricsError {
    Io(io::Error),
    /// First line was not the fixed header.
    Header {
        got: String,
    },
    /// A data row did not parse; line is 1-based within the file.
    Row {
        line: usize,
        message: String,
    },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Io(e) => write!(f, "metrics io: {e}"),
            MetricsError::Header { got } => {
                write!(f, "metrics header mismatch: got {got:?}")
            }
            MetricsError::Row { line, message } => {
                write!(f, "metrics line {line}: {message}")
            }
        }
    }
}

impl Error for MetricsError {
    fn source(&self) -> Option<&(dyn Error + 'static)> {
        match self {
            MetricsError::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<io::Error> for MetricsError {
    fn from(e: io::Error) -> Self {
        MetricsError::Io(e)
    }
}

/// One row in column order.
pub fn format_row(row: &MetricsRow) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        row.update_idx,
        row.env_steps,
        row.score_mean,
        row.score_std,
        row.policy_loss,
        row.d_loss,
        row.eg_loss,
        row.recon_loss,
        row.ig_mean,
        row.ig_max,
        row.rc_mean,
        row.entropy,
        row.eta_t,
        row.wall_ms,
    )
}

/// Parse one data row; inverse of [`format_row`] on finite values.
pub fn parse_row(line: &str) -> Result<MetricsRow, String> {
    let fields: Vec<&str> = line.split(',').collect();
    if fields.len() != METRICS_COLUMNS.len() {
        return Err(format!(
            "expected {} fields, got {}",
            METRICS_COLUMNS.len(),
            fields.len()
        ));
    }
    let int = |i: usize| -> Result<u64, String> {
        fields[i]
            .parse()
            .map_err(|e| format!("{}: {e}", METRICS_COLUMNS[i]))
    };
    let float = |i: usize| -> Result<f64, String> {
        fields[i]
            .parse()
            .map_err(|e| format!("{}: {e}", METRICS_COLUMNS[i]))
    };
    Ok(MetricsRow {
        update_idx: int(0)?,
        env_steps: int(1)?,
        score_mean: float(2)?,
        score_std: float(3)?,
        policy_loss: float(4)?,
        d_loss: float(5)?,
        eg_loss: float(6)?,
        recon_loss: float(7)?,
        ig_mean: float(8)?,
        ig_max: float(9)?,
        rc_mean: float(10)?,
        entropy: float(11)?,
        eta_t: float(12)?,
        wall_ms: float(13)?,
    })
}

/// A row's value in the named column, counters widened to floats.
pub fn column_value(row: &MetricsRow, column: &str) -> Option<f64> {
    Some(match column {
        "update_idx" => row.update_idx as f64,
        "env_steps" => row.env_steps as f64,
        "score_mean" => row.score_mean,
        "score_std" => row.score_std,
        "policy_loss" => row.policy_loss,
        "d_loss" => row.d_loss,
        "eg_loss" => row.eg_loss,
        "recon_loss" => row.recon_loss,
        "ig_mean" => row.ig_mean,
        "ig_max" => row.ig_max,
        "rc_mean" => row.rc_mean,
        "entropy" => row.entropy,
        "eta_t" => row.eta_t,
        "wall_ms" => row.wall_ms,
        _ => return None,
    })
}

/// Append-only CSV sink. Each row is flushed as it lands so a killed
/// run still leaves a readable file.
#[derive(Debug)]
pub struct MetricsWriter {
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Create (or truncate) the file and write the header.
    pub fn create(path: &Path) -> io::Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        out.flush()?;
        Ok(MetricsWriter { out })
    }

    pub fn append(&mut self, row: &MetricsRow) -> io::Result<()> {
        writeln!(self.out, "{}", format_row(row))?;
        self.out.flush()
    }
}

/// Read a whole metrics file back, header checked.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, MetricsError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(head) if head == METRICS_HEADER => {}
        other => {
            return Err(MetricsError::Header {
                got: other.unwrap_or("").to_string(),
            })
        }
    }
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        rows.push(parse_row(line).map_err(|message| MetricsError::Row {
            line: idx + 2,
            message,
        })?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_row() -> MetricsRow {
        MetricsRow {
            update_idx: 3,
            env_steps: 2048,
            score_mean: 0.25,
            score_std: 0.1,
            policy_loss: -0.02,
            d_loss: -1.3862943611198906,
            eg_loss: -1.5,
            recon_loss: 0.75,
            ig_mean: 0.001,
            ig_max: 0.01,
            rc_mean: 0.0,
            entropy: 0.69,
            eta_t: 0.5,
            wall_ms: 12.5,
        }
    }

    #[test]
    fn header_and_columns_agree() {
        assert_eq!(METRICS_HEADER, METRICS_COLUMNS.join(","));
    }

    #[test]
    fn rows_survive_a_format_parse_cycle_bitwise() {
        let row = sample_row();
        let back = parse_row(&format_row(&row)).unwrap();
        assert_eq!(back, row);
        assert_eq!(back.d_loss.to_bits(), row.d_loss.to_bits());
    }

    #[test]
    fn counters_print_without_a_decimal_point() {
        let line = format_row(&sample_row());
        assert!(line.starts_with("3,2048,"));
    }

    #[test]
    fn short_rows_are_rejected_with_the_field_count() {
        let err = parse_row("1,2,3").unwrap_err();
        assert!(err.contains("expected 14 fields"), "{err}");
    }

    #[test]
    fn every_column_name_resolves_and_fakes_do_not() {
        let row = sample_row();
        for name in METRICS_COLUMNS {
            assert!(column_value(&row, name).is_some(), "{name}");
        }
        assert!(column_value(&row, "wall_clock").is_none());
        assert_eq!(column_value(&row, "env_steps"), Some(2048.0));
    }
}
