//! Metrics CSV files.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use flnn::bcd::TrainReport;
use flnn::LossKind;

use crate::error::{CliError, Result};

pub const HEADER: [&str; 8] = ["method", "epoch", "batch", "lifted_obj", "std_obj", "train_acc", "test_acc", "seconds"];
pub const MERGED_HEADER: [&str; 3] = ["method", "epoch_fraction", "test_acc"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub method: String,
    pub epoch: usize,
    pub batch: usize,
    pub lifted_obj: f64,
    pub std_obj: f64,
    pub train_acc: f64,
    /// NaN when the row had no test evaluation.
    pub test_acc: f64,
    pub seconds: f64,
    pub epoch_fraction: f64,
}

pub fn rows_from_report(method: &str, report: &TrainReport, wall_clock: bool) -> Vec<MetricsRow> {
    report
        .records
        .iter()
        .map(|r| MetricsRow {
            method: method.to_string(),
            epoch: r.epoch,
            batch: r.batch,
            lifted_obj: r.lifted,
            std_obj: r.standard,
            train_acc: r.train_acc,
            test_acc: r.test_acc.unwrap_or(f64::NAN),
            seconds: if wall_clock { r.seconds } else { 0.0 },
            epoch_fraction: r.epoch_fraction,
        })
        .collect()
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.epoch.to_string(),
            r.batch.to_string(),
            r.lifted_obj.to_string(),
            r.std_obj.to_string(),
            r.train_acc.to_string(),
            r.test_acc.to_string(),
            r.seconds.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, line: usize) -> Result<T> {
    let raw = rec.get(i).ok_or_else(|| CliError::Metrics(format!("row {line}: missing column {}", i + 1)))?;
    raw.parse().map_err(|_| CliError::Metrics(format!("row {line}: cannot parse '{raw}' in column {}", i + 1)))
}

/// Reads a metrics file, checking the header and the type of every field.
/// `epoch_fraction` is not stored and comes back as NaN.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut rdr = csv::Reader::from_path(path)?;
    if rdr.headers()?.iter().ne(HEADER) {
        return Err(CliError::Metrics(format!("unexpected header in {}", path.display())));
    }
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let line = n + 2;
        rows.push(MetricsRow {
            method: field(&rec, 0, line)?,
            epoch: field(&rec, 1, line)?,
            batch: field(&rec, 2, line)?,
            lifted_obj: field(&rec, 3, line)?,
            std_obj: field(&rec, 4, line)?,
            train_acc: field(&rec, 5, line)?,
            test_acc: field(&rec, 6, line)?,
            seconds: field(&rec, 7, line)?,
            epoch_fraction: f64::NAN,
        });
    }
    Ok(rows)
}

/// Published final test accuracies, written as comments above merged CSVs.
pub fn reference_numbers(loss: LossKind) -> &'static [(&'static str, f64)] {
    match loss {
        LossKind::CrossEntropy => &[("sgd", 0.943), ("adam", 0.976), ("lifted", 0.976)],
        LossKind::Mse => &[
            ("admm-lifted", 0.834),
            ("proximal-bcd", 0.914),
            ("relu-lifted", 0.863),
            ("mlp-sgd", 0.957),
            ("lifted", 0.961),
        ],
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedRow {
    pub method: String,
    pub epoch_fraction: f64,
    pub test_acc: f64,
}

pub fn write_merged(path: &Path, loss: LossKind, rows: &[MergedRow]) -> Result<()> {
    let mut file = File::create(path)?;
    for (name, acc) in reference_numbers(loss) {
        writeln!(file, "# reference {name} {acc}")?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record(MERGED_HEADER)?;
    for r in rows {
        w.write_record([r.method.clone(), r.epoch_fraction.to_string(), r.test_acc.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub struct Merged {
    pub references: Vec<(String, f64)>,
    pub rows: Vec<MergedRow>,
}

pub fn read_merged(path: &Path) -> Result<Merged> {
    let mut references = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        let Some(rest) = line.strip_prefix("# reference ") else { continue };
        let (name, acc) = rest
            .rsplit_once(' ')
            .ok_or_else(|| CliError::Metrics(format!("malformed reference line '{line}'")))?;
        let acc = acc.parse().map_err(|_| CliError::Metrics(format!("malformed reference line '{line}'")))?;
        references.push((name.to_string(), acc));
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    if rdr.headers()?.iter().ne(MERGED_HEADER) {
        return Err(CliError::Metrics(format!("unexpected header in {}", path.display())));
    }
    let mut rows = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let rec = rec?;
        rows.push(MergedRow {
            method: field(&rec, 0, n + 2)?,
            epoch_fraction: field(&rec, 1, n + 2)?,
            test_acc: field(&rec, 2, n + 2)?,
        });
    }
    Ok(Merged { references, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, test_acc: f64) -> MetricsRow {
        MetricsRow {
            method: method.into(),
            epoch: 2,
            batch: 7,
            lifted_obj: 1.0 / 3.0,
            std_obj: 1e-300,
            train_acc: 0.5,
            test_acc,
            seconds: 0.25,
            epoch_fraction: f64::NAN,
        }
    }

    #[test]
    fn metrics_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![row("lifted", 0.9), row("lifted", f64::NAN)];
        write_metrics(&path, &rows).unwrap();
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].lifted_obj, 1.0 / 3.0);
        assert_eq!(back[0].std_obj, 1e-300);
        assert_eq!(back[0].test_acc, 0.9);
        assert!(back[1].test_acc.is_nan());
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("method,epoch,batch,lifted_obj,std_obj,train_acc,test_acc,seconds\n"));
    }

    #[test]
    fn rejects_wrong_header_and_types() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        std::fs::write(&path, "method,epoch\nx,1\n").unwrap();
        assert!(read_metrics(&path).is_err());
        std::fs::write(&path, format!("{}\nx,one,0,1,1,1,1,1\n", HEADER.join(","))).unwrap();
        assert!(read_metrics(&path).is_err());
    }

    #[test]
    fn merged_keeps_references() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("merged.csv");
        let rows = vec![
            MergedRow { method: "sgd".into(), epoch_fraction: 0.5, test_acc: f64::NAN },
            MergedRow { method: "adam".into(), epoch_fraction: 1.0, test_acc: 0.97 },
        ];
        write_merged(&path, LossKind::CrossEntropy, &rows).unwrap();
        let m = read_merged(&path).unwrap();
        assert_eq!(m.references, vec![("sgd".into(), 0.943), ("adam".into(), 0.976), ("lifted".into(), 0.976)]);
        assert_eq!(m.rows.len(), 2);
        assert_eq!(m.rows[1], rows[1]);
    }
}
