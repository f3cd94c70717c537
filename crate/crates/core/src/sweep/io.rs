use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BoundaryReport, RaceReport, TrackingReport};
use crate::dynamics::Label;
use crate::error::{Error, Result};

/// Column order of boundary CSV files.
pub const BOUNDARY_CSV_HEADER: [&str; 10] = [
    "algorithm",
    "B",
    "sigma",
    "eta",
    "rho_over_alpha",
    "label",
    "final_norm_ratio_median",
    "predicted_sgd_threshold",
    "predicted_sam_threshold",
    "lower_bound_stable",
];

/// Formats a float with 9 significant digits: fixed notation for moderate
/// magnitudes, scientific otherwise. Non-finite values print as `inf`,
/// `-inf` or `nan`.
pub fn format_sig9(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent") + 1..]
        .parse()
        .expect("integer exponent");
    if (-5..=8).contains(&exp) {
        format!("{:.*}", (8 - exp) as usize, x)
    } else {
        sci
    }
}

fn parse_float(s: &str) -> std::result::Result<f64, String> {
    match s {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        "nan" => Ok(f64::NAN),
        _ => s.parse().map_err(|e| format!("bad number {s:?}: {e}")),
    }
}

/// One boundary CSV row as text, in header order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryRow {
    pub algorithm: String,
    #[serde(rename = "B")]
    pub batch_size: usize,
    pub sigma: usize,
    pub eta: String,
    pub rho_over_alpha: String,
    /// `diverged`, `converged`, `undetermined` or `skipped`.
    pub label: String,
    pub final_norm_ratio_median: String,
    pub predicted_sgd_threshold: String,
    pub predicted_sam_threshold: String,
    pub lower_bound_stable: bool,
}

impl BoundaryRow {
    pub fn label(&self) -> Option<Label> {
        match self.label.as_str() {
            "diverged" => Some(Label::Diverged),
            "converged" => Some(Label::Converged),
            "undetermined" => Some(Label::Undetermined),
            _ => None,
        }
    }

    pub fn eta(&self) -> std::result::Result<f64, String> {
        parse_float(&self.eta)
    }
}

pub fn boundary_rows(report: &BoundaryReport) -> Vec<BoundaryRow> {
    report
        .cells
        .iter()
        .map(|c| BoundaryRow {
            algorithm: c.algorithm.clone(),
            batch_size: c.batch_size,
            sigma: c.sigma,
            eta: format_sig9(c.eta),
            rho_over_alpha: format_sig9(c.rho_over_alpha),
            label: c.label.map_or("skipped", |l| l.as_str()).to_string(),
            final_norm_ratio_median: format_sig9(c.final_norm_ratio_median),
            predicted_sgd_threshold: format_sig9(c.predicted_sgd_threshold),
            predicted_sam_threshold: format_sig9(c.predicted_sam_threshold),
            lower_bound_stable: c.lower_bound_stable,
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.to_path_buf(),
            message: format!("{other:?}"),
        },
    }
}

fn write_rows<S: Serialize>(path: &Path, header: &[&str], rows: &[S]) -> Result<()> {
    let mut writer = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(path)?);
    writer
        .write_record(header)
        .map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

/// Writes the boundary CSV; an empty report produces the header alone.
pub fn emit_csv(report: &BoundaryReport, path: &Path) -> Result<()> {
    write_rows(path, &BOUNDARY_CSV_HEADER, &boundary_rows(report))
}

pub fn parse_boundary_csv(path: &Path) -> Result<Vec<BoundaryRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let header = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if header.iter().ne(BOUNDARY_CSV_HEADER) {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            message: format!("unexpected header {header:?}"),
        });
    }
    reader
        .deserialize()
        .map(|r| r.map_err(|e| csv_error(path, e)))
        .collect()
}

#[derive(Serialize)]
struct RaceRow {
    c: usize,
    optimizer: String,
    epoch: usize,
    mean_loss: String,
    std_loss: String,
}

pub fn emit_race_csv(report: &RaceReport, path: &Path) -> Result<()> {
    let rows: Vec<RaceRow> = report
        .curves
        .iter()
        .flat_map(|c| {
            c.mean_loss
                .iter()
                .zip(&c.std_loss)
                .enumerate()
                .map(move |(epoch, (m, s))| RaceRow {
                    c: c.c,
                    optimizer: c.optimizer.name(),
                    epoch,
                    mean_loss: format_sig9(*m),
                    std_loss: format_sig9(*s),
                })
        })
        .collect();
    write_rows(
        path,
        &["C", "optimizer", "epoch", "mean_loss", "std_loss"],
        &rows,
    )
}

#[derive(Serialize)]
struct TrackingTableRow {
    optimizer: String,
    coherence_measure: String,
    lambda_max_s: String,
    effective_rank: String,
    max_lambda_h_i: String,
    lambda_max_h: String,
    trace_h: String,
    final_loss: String,
    diverged_runs: usize,
}

#[derive(Serialize)]
struct TrackingSeriesRow {
    optimizer: String,
    seed: u64,
    epoch: usize,
    loss: String,
    coherence_measure: String,
    lambda_max_s: String,
    max_lambda_h_i: String,
    lambda_max_h: String,
    trace_h: String,
    effective_rank: String,
}

/// Writes the final-metrics table to `table_path` and the per-epoch series
/// to `series_path`. Untracked epochs leave the metric columns empty.
pub fn emit_tracking_csv(
    report: &TrackingReport,
    table_path: &Path,
    series_path: &Path,
) -> Result<()> {
    let table: Vec<TrackingTableRow> = report
        .rows
        .iter()
        .map(|r| TrackingTableRow {
            optimizer: r.optimizer.name(),
            coherence_measure: format_sig9(r.coherence_measure),
            lambda_max_s: format_sig9(r.lambda_max_s),
            effective_rank: format_sig9(r.effective_rank),
            max_lambda_h_i: format_sig9(r.max_lambda_h_i),
            lambda_max_h: format_sig9(r.lambda_max_h),
            trace_h: format_sig9(r.trace_h),
            final_loss: format_sig9(r.final_loss),
            diverged_runs: r.diverged_runs,
        })
        .collect();
    write_rows(
        table_path,
        &[
            "optimizer",
            "coherence_measure",
            "lambda_max_s",
            "effective_rank",
            "max_lambda_h_i",
            "lambda_max_h",
            "trace_h",
            "final_loss",
            "diverged_runs",
        ],
        &table,
    )?;
    let series: Vec<TrackingSeriesRow> = report
        .series
        .iter()
        .flat_map(|s| {
            s.records.iter().map(move |r| {
                let m = r.metrics;
                let opt = |f: fn(&crate::relu2::SnapshotMetrics) -> f64| {
                    m.as_ref().map_or(String::new(), |m| format_sig9(f(m)))
                };
                TrackingSeriesRow {
                    optimizer: s.optimizer.name(),
                    seed: s.seed,
                    epoch: r.epoch,
                    loss: format_sig9(r.loss),
                    coherence_measure: opt(|m| m.sigma),
                    lambda_max_s: opt(|m| m.lambda_max_s),
                    max_lambda_h_i: opt(|m| m.max_elementwise),
                    lambda_max_h: opt(|m| m.lambda_max_h),
                    trace_h: opt(|m| m.trace_h),
                    effective_rank: m.map_or(String::new(), |m| m.effective_rank.to_string()),
                }
            })
        })
        .collect();
    write_rows(
        series_path,
        &[
            "optimizer",
            "seed",
            "epoch",
            "loss",
            "coherence_measure",
            "lambda_max_s",
            "max_lambda_h_i",
            "lambda_max_h",
            "trace_h",
            "effective_rank",
        ],
        &series,
    )
}

#[derive(Serialize)]
struct ConfigEcho<'a, C: Serialize> {
    software: &'static str,
    version: &'static str,
    seed: u64,
    config: &'a C,
}

/// Writes `{software, version, seed, config}` as pretty JSON.
pub fn emit_json<C: Serialize>(config: &C, seed: u64, path: &Path) -> Result<()> {
    let echo = ConfigEcho {
        software: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        seed,
        config,
    };
    write_json(&echo, path)
}

/// Serializes any report as pretty JSON. Non-finite floats become `null`.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sweep::{run_boundary_sweep, SweepGrid};

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(0.5), "0.500000000");
        assert_eq!(format_sig9(2.0), "2.00000000");
        assert_eq!(format_sig9(0.050251890762960605), "0.0502518908");
        assert_eq!(format_sig9(-123456.789), "-123456.789");
        assert_eq!(format_sig9(1.5e20), "1.50000000e20");
        assert_eq!(format_sig9(3e-9), "3.00000000e-9");
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(f64::INFINITY), "inf");
        assert_eq!(format_sig9(f64::NAN), "nan");
        for x in [0.1234567891234, 98765.4321, 7.0e-3, 1e12] {
            let back: f64 = format_sig9(x).parse().unwrap();
            assert!(((back - x) / x).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_report_writes_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.csv");
        emit_csv(&BoundaryReport::default(), &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{}\n", BOUNDARY_CSV_HEADER.join(",")));
        assert!(parse_boundary_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn boundary_csv_round_trips_and_is_reproducible() {
        let grid = SweepGrid {
            batch_sizes: vec![1, 10],
            sigmas: vec![1, 10],
            n: 10,
            d: 5,
            steps: 200,
            trials: 3,
            ..Default::default()
        };
        let report = run_boundary_sweep(&grid).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = (dir.path().join("a.csv"), dir.path().join("nested/b.csv"));
        emit_csv(&report, &a).unwrap();
        emit_csv(&run_boundary_sweep(&grid).unwrap(), &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

        let rows = parse_boundary_csv(&a).unwrap();
        assert_eq!(rows.len(), report.cells.len());
        for (row, cell) in rows.iter().zip(&report.cells) {
            assert_eq!(row.label(), cell.label);
            assert_eq!((row.batch_size, row.sigma), (cell.batch_size, cell.sigma));
            assert_eq!(row.eta().unwrap(), 0.5);
        }
        // d = 5 cannot host σ = 1 at n = 10.
        assert!(rows.iter().any(|r| r.label == "skipped"));
    }

    #[test]
    fn io_errors_name_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        std::fs::write(&blocker, "x").unwrap();
        let err = emit_csv(&BoundaryReport::default(), &blocker.join("out.csv")).unwrap_err();
        assert!(err.to_string().contains("file"), "{err}");
        let missing = parse_boundary_csv(&dir.path().join("missing.csv")).unwrap_err();
        assert!(matches!(missing, Error::Io { .. }));
        std::fs::write(dir.path().join("bad.csv"), "a,b\n1,2\n").unwrap();
        assert!(matches!(
            parse_boundary_csv(&dir.path().join("bad.csv")),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn json_echo_carries_seed_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        emit_json(&SweepGrid::default(), 42, &path).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(v["seed"], 42);
        assert_eq!(v["version"], env!("CARGO_PKG_VERSION"));
        assert_eq!(v["config"]["n"], 100);
    }
}
