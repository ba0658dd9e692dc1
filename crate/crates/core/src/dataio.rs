//! CSV ingestion, return normalization and reconstruction of level paths.
//!
//! Training works on the log-differences `r_t = log(X_{t+1} / X_t)` of the
//! input, shifted and scaled to zero mean and unit variance. Series with
//! non-positive values fall back to plain first differences.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::path::SamplePath;

/// How raw returns were formed from levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiffMode {
    /// `log(X_{t+1} / X_t)`
    Log,
    /// `X_{t+1} - X_t`
    Plain,
}

/// Everything needed to undo [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationRecord {
    /// Mean of the raw returns.
    pub mean: f64,
    /// Population standard deviation of the raw returns.
    pub std: f64,
    pub mode: DiffMode,
}

impl NormalizationRecord {
    /// Identity scaling in plain-difference mode.
    pub fn identity() -> Self {
        Self {
            mean: 0.0,
            std: 1.0,
            mode: DiffMode::Plain,
        }
    }
}

/// Normalized returns of an observed path.
///
/// `returns[t]` spans `timestamps[t] .. timestamps[t + 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedSeries {
    pub timestamps: Vec<f64>,
    pub returns: Vec<f64>,
    pub record: NormalizationRecord,
    pub initial: f64,
}

impl NormalizedSeries {
    /// Cumulative normalized returns, starting at 0 at the first timestamp.
    pub fn levels(&self) -> Vec<f64> {
        cumulative(&self.returns)
    }
}

pub(crate) fn cumulative(returns: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(returns.len() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for r in returns {
        acc += r;
        out.push(acc);
    }
    out
}

/// Parses a two-column CSV (`t,x`) into a path.
pub fn load_csv(path: impl AsRef<Path>) -> Result<SamplePath> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv(file)
}

/// [`load_csv`] over any reader.
pub fn parse_csv<R: Read>(reader: R) -> Result<SamplePath> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut timestamps = Vec::new();
    let mut values = Vec::new();
    for (idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map(|p| p.line()).unwrap_or(idx as u64 + 1),
            message: e.to_string(),
        })?;
        let line = rec.position().map(|p| p.line()).unwrap_or(idx as u64 + 1);
        if rec.len() != 2 {
            return Err(Error::Parse {
                line,
                message: format!("expected 2 fields, found {}", rec.len()),
            });
        }
        let t = rec[0].parse::<f64>();
        let x = rec[1].parse::<f64>();
        match (t, x) {
            (Ok(t), Ok(x)) if t.is_finite() && x.is_finite() => {
                if let Some(&prev) = timestamps.last() {
                    if t <= prev {
                        return Err(Error::Parse {
                            line,
                            message: format!("timestamp {t} does not increase past {prev}"),
                        });
                    }
                }
                timestamps.push(t);
                values.push(x);
            }
            (Err(_), Err(_)) if idx == 0 => {}
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!(
                        "non-numeric or non-finite field in `{},{}`",
                        &rec[0], &rec[1]
                    ),
                })
            }
        }
    }
    if timestamps.is_empty() {
        return Err(Error::Parse {
            line: 0,
            message: "file contains no data rows".into(),
        });
    }
    SamplePath::new(timestamps, values)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// Writes `t,x` rows.
pub fn write_path_csv(path: impl AsRef<Path>, p: &SamplePath) -> Result<()> {
    write_columns_csv(
        path,
        p.timestamps(),
        &["x".to_string()],
        &[p.values().to_vec()],
    )
}

/// Writes `t,path_1,...,path_M` rows.
pub fn write_paths_csv(
    path: impl AsRef<Path>,
    timestamps: &[f64],
    paths: &[Vec<f64>],
) -> Result<()> {
    let names: Vec<String> = (1..=paths.len()).map(|i| format!("path_{i}")).collect();
    write_columns_csv(path, timestamps, &names, paths)
}

/// Writes a `t` column followed by named value columns.
pub fn write_columns_csv(
    path: impl AsRef<Path>,
    timestamps: &[f64],
    names: &[String],
    columns: &[Vec<f64>],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "t").map_err(io)?;
    for n in names {
        write!(w, ",{n}").map_err(io)?;
    }
    writeln!(w).map_err(io)?;
    for (i, t) in timestamps.iter().enumerate() {
        write!(w, "{}", fmt_f64(*t)).map_err(io)?;
        for c in columns {
            write!(w, ",{}", fmt_f64(c[i])).map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Raw returns of `values` in the given mode.
pub fn raw_returns(values: &[f64], mode: DiffMode) -> Vec<f64> {
    values
        .windows(2)
        .map(|w| match mode {
            DiffMode::Log => (w[1] / w[0]).ln(),
            DiffMode::Plain => w[1] - w[0],
        })
        .collect()
}

/// Differences the path and rescales the returns to zero mean, unit variance.
pub fn normalize(path: &SamplePath) -> Result<NormalizedSeries> {
    let v = path.values();
    if v.len() < 3 {
        return Err(Error::Domain(format!(
            "need at least 3 observations, got {}",
            v.len()
        )));
    }
    let mode = if v.iter().all(|&x| x > 0.0) {
        DiffMode::Log
    } else {
        DiffMode::Plain
    };
    let raw = raw_returns(v, mode);
    let n = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / n;
    let std = (raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    let scale = raw.iter().fold(0.0f64, |m, r| m.max(r.abs()));
    if std.is_nan() || std <= 1e-12 * scale {
        return Err(Error::Degenerate("returns have zero variance".into()));
    }
    Ok(NormalizedSeries {
        timestamps: path.timestamps().to_vec(),
        returns: raw.iter().map(|r| (r - mean) / std).collect(),
        record: NormalizationRecord { mean, std, mode },
        initial: v[0],
    })
}

/// Level values from normalized returns, starting at `x0`.
pub fn reconstruct_values(
    returns: &[f64],
    record: &NormalizationRecord,
    x0: f64,
) -> Result<Vec<f64>> {
    if record.mode == DiffMode::Log && (x0.is_nan() || x0 <= 0.0) {
        return Err(Error::Domain(format!(
            "log-mode reconstruction needs a positive start, got {x0}"
        )));
    }
    let mut out = Vec::with_capacity(returns.len() + 1);
    let mut x = x0;
    out.push(x);
    for r in returns {
        let raw = record.mean + record.std * r;
        x = match record.mode {
            DiffMode::Log => x * raw.exp(),
            DiffMode::Plain => x + raw,
        };
        out.push(x);
    }
    Ok(out)
}

/// Inverse of [`normalize`] on the given timestamps.
pub fn reconstruct(
    timestamps: &[f64],
    returns: &[f64],
    record: &NormalizationRecord,
    x0: f64,
) -> Result<SamplePath> {
    if timestamps.len() != returns.len() + 1 {
        return Err(Error::Dimension {
            expected: returns.len() + 1,
            actual: timestamps.len(),
        });
    }
    SamplePath::new(
        timestamps.to_vec(),
        reconstruct_values(returns, record, x0)?,
    )
}

/// Levels from normalized cumulative returns (as produced by the generator).
pub fn levels_to_values(levels: &[f64], record: &NormalizationRecord, x0: f64) -> Result<Vec<f64>> {
    let returns: Vec<f64> = levels.windows(2).map(|w| w[1] - w[0]).collect();
    reconstruct_values(&returns, record, x0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::solver::{generate_fou, FouParams};
    use proptest::prelude::*;

    fn parse(text: &str) -> Result<SamplePath> {
        parse_csv(text.as_bytes())
    }

    #[test]
    fn parses_header_and_rows() {
        let p = parse("t,x\n0,1\n1,2").unwrap();
        assert_eq!(p.timestamps(), &[0.0, 1.0]);
        assert_eq!(p.values(), &[1.0, 2.0]);
        let p = parse("0,1\n1,2\n2.5,-3e2\n").unwrap();
        assert_eq!(p.len(), 3);
    }

    #[test]
    fn reports_offending_line() {
        match parse("t,x\n0,1\n2,2\n1,3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        match parse("t,x\n0,1\n1,abc\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        match parse("t,x\n0,1\n1,2,3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse("").is_err());
        assert!(parse("t,x\n").is_err());
    }

    #[test]
    fn fou_export_round_trips_bit_exactly() {
        let p = generate_fou(FouParams::benchmark(0.7), 999, 1.0, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("fou.csv");
        write_path_csv(&file, &p).unwrap();
        let back = load_csv(&file).unwrap();
        assert_eq!(back.len(), 1000);
        for (a, b) in p.values().iter().zip(back.values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (a, b) in p.timestamps().iter().zip(back.timestamps()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn exponential_growth_is_degenerate() {
        let t: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let x: Vec<f64> = t.iter().map(|s| (0.03 * s).exp()).collect();
        let p = SamplePath::new(t, x).unwrap();
        assert!(matches!(normalize(&p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn hand_computed_normalization() {
        let e = std::f64::consts::E;
        let p = SamplePath::new(vec![0.0, 1.0, 2.0], vec![1.0, e, 1.0]).unwrap();
        let n = normalize(&p).unwrap();
        assert_eq!(n.record.mode, DiffMode::Log);
        assert!((n.returns[0] - 1.0).abs() < 1e-15);
        assert!((n.returns[1] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn negative_values_use_plain_differences() {
        let p = SamplePath::new(vec![0.0, 1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0, 2.0]).unwrap();
        let n = normalize(&p).unwrap();
        assert_eq!(n.record.mode, DiffMode::Plain);
        let back = reconstruct(p.timestamps(), &n.returns, &n.record, n.initial).unwrap();
        for (a, b) in back.values().iter().zip(p.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reconstruction_edge_cases() {
        let rec = NormalizationRecord {
            mean: 0.0,
            std: 1.0,
            mode: DiffMode::Log,
        };
        assert_eq!(
            reconstruct_values(&[0.0; 4], &rec, 2.0).unwrap(),
            vec![2.0; 5]
        );
        let rec = NormalizationRecord {
            mean: 0.1,
            std: 2.0,
            mode: DiffMode::Log,
        };
        let v = reconstruct_values(&[0.3], &rec, 5.0).unwrap();
        assert_eq!(v[1], 5.0 * (0.1 + 2.0 * 0.3f64).exp());
        assert!(reconstruct_values(&[0.3], &rec, -1.0).is_err());
        assert!(reconstruct(&[0.0, 1.0, 2.0], &[0.3], &rec, 1.0).is_err());
    }

    #[test]
    fn fou_round_trip() {
        // shift positive so the log branch is exercised as well
        let p = generate_fou(FouParams::benchmark(0.7), 1000, 1.0, 2).unwrap();
        let shifted = SamplePath::new(
            p.timestamps().to_vec(),
            p.values().iter().map(|v| v + 5.0).collect(),
        )
        .unwrap();
        for path in [&p, &shifted] {
            let n = normalize(path).unwrap();
            let back = reconstruct(&n.timestamps, &n.returns, &n.record, n.initial).unwrap();
            let worst = back
                .values()
                .iter()
                .zip(path.values())
                .map(|(a, b)| (a - b).abs() / b.abs().max(1e-300))
                .filter(|e| e.is_finite())
                .fold(0.0, f64::max);
            let scale = path.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
            let abs_worst = back
                .values()
                .iter()
                .zip(path.values())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(abs_worst < 1e-12 * scale, "abs {abs_worst}");
            if n.record.mode == DiffMode::Log {
                assert!(worst < 1e-12, "rel {worst}");
            }
        }
    }

    #[test]
    fn log_mode_scale_invariance() {
        let p = generate_fou(FouParams::benchmark(0.8), 200, 1.0, 6).unwrap();
        let base: Vec<f64> = p.values().iter().map(|v| v + 3.0).collect();
        let n0 =
            normalize(&SamplePath::new(p.timestamps().to_vec(), base.clone()).unwrap()).unwrap();
        // power-of-two factors leave every ratio bit-identical
        let scaled: Vec<f64> = base.iter().map(|v| v * 8.0).collect();
        let n1 = normalize(&SamplePath::new(p.timestamps().to_vec(), scaled).unwrap()).unwrap();
        assert_eq!(n0.returns, n1.returns);
        let scaled: Vec<f64> = base.iter().map(|v| v * 3.7).collect();
        let n2 = normalize(&SamplePath::new(p.timestamps().to_vec(), scaled).unwrap()).unwrap();
        for (a, b) in n0.returns.iter().zip(&n2.returns) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn normalized_moments(values in prop::collection::vec(0.1f64..100.0, 3..200)) {
            let t: Vec<f64> = (0..values.len()).map(|i| i as f64).collect();
            let p = SamplePath::new(t, values).unwrap();
            if let Ok(n) = normalize(&p) {
                let m = n.returns.iter().sum::<f64>() / n.returns.len() as f64;
                let v = n.returns.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n.returns.len() as f64;
                prop_assert!(m.abs() < 1e-9);
                prop_assert!((v - 1.0).abs() < 1e-9);
                let back = reconstruct(&n.timestamps, &n.returns, &n.record, n.initial).unwrap();
                for (a, b) in back.values().iter().zip(p.values()) {
                    prop_assert!((a - b).abs() <= 1e-12 * b.abs() * n.returns.len() as f64);
                }
                let again = normalize(&back).unwrap();
                for (a, b) in again.returns.iter().zip(&n.returns) {
                    prop_assert!((a - b).abs() < 1e-9);
                }
            }
        }
    }
}
