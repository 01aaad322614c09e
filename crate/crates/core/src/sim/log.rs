//! Per-iteration experiment records, the CSV log format and run summaries.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub const FLAG_LIGHTING: u32 = 1;
pub const FLAG_OCCLUSION: u32 = 2;
pub const FLAG_OUTAGE: u32 = 4;
/// The estimator failed to answer this iteration; the camera held still.
pub const FLAG_ESTIMATOR_FAILED: u32 = 8;

pub const CSV_COLUMNS: [&str; 18] = [
    "iter",
    "err_tx",
    "err_ty",
    "err_tz",
    "err_rx",
    "err_ry",
    "err_rz",
    "est_tx",
    "est_ty",
    "est_tz",
    "est_rx",
    "est_ry",
    "est_rz",
    "v_lin_norm",
    "v_ang_norm",
    "ssd",
    "perturb_flags",
    "wall_ms",
];

/// One loop iteration. Poses in m and degrees, speeds in m/s and rad/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iter: usize,
    /// True pose of the camera in the desired camera frame.
    pub error: [f64; 6],
    /// Estimated `Δ*r`; NaN when no estimate was available.
    pub estimate: [f64; 6],
    pub v_lin_norm: f64,
    pub v_ang_norm: f64,
    pub ssd: f64,
    pub perturb_flags: u32,
    pub wall_ms: f64,
}

impl IterationRecord {
    pub fn translation_error(&self) -> f64 {
        norm3(&self.error[..3])
    }

    /// degrees
    pub fn rotation_error(&self) -> f64 {
        norm3(&self.error[3..])
    }

    /// Equal up to the wall-clock column, with NaN estimates matching each other.
    pub fn same_as(&self, other: &IterationRecord) -> bool {
        let eq = |x: &f64, y: &f64| x == y || (x.is_nan() && y.is_nan());
        self.iter == other.iter
            && self.error == other.error
            && self.estimate.iter().zip(&other.estimate).all(|(x, y)| eq(x, y))
            && self.v_lin_norm == other.v_lin_norm
            && self.v_ang_norm == other.v_ang_norm
            && self.ssd == other.ssd
            && self.perturb_flags == other.perturb_flags
    }
}

fn norm3(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum Outcome {
    /// Thresholds held for the required streak; `at` iterations were executed.
    Converged {
        at: usize,
    },
    MaxIterationsReached,
    Diverged {
        at: usize,
    },
    EstimatorUnavailable {
        at: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentLog {
    pub records: Vec<IterationRecord>,
    pub outcome: Outcome,
}

impl ExperimentLog {
    /// Same records and outcome, ignoring wall-clock times.
    pub fn same_as(&self, other: &ExperimentLog) -> bool {
        self.outcome == other.outcome
            && self.records.len() == other.records.len()
            && self.records.iter().zip(&other.records).all(|(a, b)| a.same_as(b))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("{}: {source}", path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("log has no records")]
    EmptyLog,
}

fn fmt(v: f64) -> String {
    // shortest representation that parses back to the same f64
    format!("{v}")
}

pub fn write_csv<W: Write>(records: &[IterationRecord], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CSV_COLUMNS)?;
    for r in records {
        let mut row = Vec::with_capacity(CSV_COLUMNS.len());
        row.push(r.iter.to_string());
        row.extend(r.error.iter().chain(&r.estimate).map(|v| fmt(*v)));
        row.push(fmt(r.v_lin_norm));
        row.push(fmt(r.v_ang_norm));
        row.push(fmt(r.ssd));
        row.push(r.perturb_flags.to_string());
        row.push(fmt(r.wall_ms));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn export_csv(records: &[IterationRecord], path: &Path) -> Result<(), LogError> {
    let io = |source| LogError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    write_csv(records, std::io::BufWriter::new(file)).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(e) => io(e),
        other => LogError::Parse {
            line: 0,
            message: format!("{other:?}"),
        },
    })
}

pub fn parse_csv<R: Read>(r: R) -> Result<Vec<IterationRecord>, LogError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let perr = |line: u64, message: String| LogError::Parse { line, message };
    let headers = reader.headers().map_err(|e| perr(1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != CSV_COLUMNS {
        return Err(perr(1, format!("expected columns {}", CSV_COLUMNS.join(","))));
    }
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| perr(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |i: usize| -> Result<f64, LogError> {
            row[i]
                .parse::<f64>()
                .map_err(|e| perr(line, format!("column {}: {e}", CSV_COLUMNS[i])))
        };
        let int = |i: usize| -> Result<u64, LogError> {
            row[i]
                .parse::<u64>()
                .map_err(|e| perr(line, format!("column {}: {e}", CSV_COLUMNS[i])))
        };
        let mut error = [0.0; 6];
        let mut estimate = [0.0; 6];
        for k in 0..6 {
            error[k] = num(1 + k)?;
            estimate[k] = num(7 + k)?;
        }
        records.push(IterationRecord {
            iter: int(0)? as usize,
            error,
            estimate,
            v_lin_norm: num(13)?,
            v_ang_norm: num(14)?,
            ssd: num(15)?,
            perturb_flags: int(16)? as u32,
            wall_ms: num(17)?,
        });
    }
    Ok(records)
}

pub fn read_csv(path: &Path) -> Result<Vec<IterationRecord>, LogError> {
    let file = std::fs::File::open(path).map_err(|source| LogError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_csv(std::io::BufReader::new(file))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub final_translation_error_m: f64,
    pub final_rotation_error_deg: f64,
    pub iterations: usize,
    /// m/s
    pub peak_linear_speed: f64,
    /// rad/s
    pub peak_angular_speed: f64,
    /// Final over initial SSD; 0 when the final SSD is 0.
    pub ssd_ratio: f64,
}

pub fn summarize(records: &[IterationRecord]) -> Result<RunSummary, LogError> {
    let (first, last) = match (records.first(), records.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(LogError::EmptyLog),
    };
    let peak = |f: fn(&IterationRecord) -> f64| records.iter().map(f).fold(0.0, f64::max);
    Ok(RunSummary {
        final_translation_error_m: last.translation_error(),
        final_rotation_error_deg: last.rotation_error(),
        iterations: records.len(),
        peak_linear_speed: peak(|r| r.v_lin_norm),
        peak_angular_speed: peak(|r| r.v_ang_norm),
        ssd_ratio: if last.ssd == 0.0 { 0.0 } else { last.ssd / first.ssd },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn record(i: usize, scale: f64) -> IterationRecord {
        IterationRecord {
            iter: i,
            error: [0.01 * scale, -0.2 * scale, 0.003, 1.5 * scale, -2.0, 40.0 * scale],
            estimate: [0.011, -0.19, 0.0031, 1.4, -2.1, 39.0],
            v_lin_norm: 0.12 * scale,
            v_ang_norm: 0.3,
            ssd: 1.5e6 * scale,
            perturb_flags: (i % 8) as u32,
            wall_ms: 0.731,
        }
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let records: Vec<_> = (0..20).map(|i| record(i, 1.0 / (i + 1) as f64)).collect();
        let mut buf = Vec::new();
        write_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        for line in text.lines() {
            assert_eq!(line.split(',').count(), CSV_COLUMNS.len());
        }
        let back = parse_csv(buf.as_slice()).unwrap();
        assert_eq!(back, records);
        assert_eq!(summarize(&back).unwrap(), summarize(&records).unwrap());
    }

    #[test]
    fn nan_estimates_survive() {
        let mut r = record(0, 1.0);
        r.estimate = [f64::NAN; 6];
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&r), &mut buf).unwrap();
        let back = parse_csv(buf.as_slice()).unwrap();
        assert!(back[0].same_as(&r));
    }

    #[test]
    fn single_record_summary() {
        let r = record(0, 1.0);
        let s = summarize(std::slice::from_ref(&r)).unwrap();
        assert_eq!(s.iterations, 1);
        assert_eq!(s.final_translation_error_m, r.translation_error());
        assert_eq!(s.final_rotation_error_deg, r.rotation_error());
        assert_eq!(
            (s.peak_linear_speed, s.peak_angular_speed),
            (r.v_lin_norm, r.v_ang_norm)
        );
        assert_eq!(s.ssd_ratio, 1.0);
        assert!(matches!(summarize(&[]), Err(LogError::EmptyLog)));
    }

    #[test]
    fn malformed_csv_is_rejected() {
        assert!(parse_csv("".as_bytes()).is_err());
        assert!(parse_csv("a,b\n1,2\n".as_bytes()).is_err());
        let mut buf = Vec::new();
        write_csv(&[record(0, 1.0)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap().replace("0.731", "fast");
        match parse_csv(text.as_bytes()) {
            Err(LogError::Parse { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("wall_ms"));
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn arbitrary_records_round_trip(vals in prop::collection::vec(prop::array::uniform16(-1e6f64..1e6), 1..10)) {
            let records: Vec<_> = vals.iter().enumerate().map(|(i, v)| IterationRecord {
                iter: i,
                error: [v[0], v[1], v[2], v[3], v[4], v[5]],
                estimate: [v[6], v[7], v[8], v[9], v[10], v[11]],
                v_lin_norm: v[12].abs(),
                v_ang_norm: v[13].abs(),
                ssd: v[14].abs(),
                perturb_flags: 5,
                wall_ms: v[15].abs(),
            }).collect();
            let mut buf = Vec::new();
            write_csv(&records, &mut buf).unwrap();
            prop_assert_eq!(parse_csv(buf.as_slice()).unwrap(), records);
        }
    }
}
