//! Plot- and spreadsheet-friendly file formats.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading a
//! file back yields bit-identical `f64` values.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calibration::{CalibratedBatch, RlsTraceRow};
use crate::error::{Error, Result};
use crate::estimation::ErrorEllipse;
use crate::schedule::Schedule;
use crate::sim::MeasurementBatch;

pub const MEASUREMENT_HEADER: [&str; 6] = ["batch", "k", "sender", "next_sender", "y_seconds", "delta_actual_seconds"];
pub const CALIBRATED_HEADER: [&str; 7] = [
    "batch",
    "k",
    "sender",
    "next_sender",
    "y_cal_seconds",
    "delay_seconds",
    "retrieved",
];

pub fn write_measurements<W: Write>(w: W, batches: &[MeasurementBatch], schedule: &Schedule) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(MEASUREMENT_HEADER)?;
    for b in batches {
        check_batch_len(b.y.len(), schedule)?;
        for k in 0..b.y.len() {
            let (sender, next) = schedule.pair(k);
            let delta = b.delta_actual.as_ref().map(|d| d[k].to_string()).unwrap_or_default();
            out.write_record([
                b.index.to_string(),
                k.to_string(),
                sender.to_string(),
                next.to_string(),
                b.y[k].to_string(),
                delta,
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Parses a measurement CSV recorded with `schedule`.
///
/// Rows of one batch must be contiguous with `k = 0..M-1` in order. An empty
/// delay column means the payload was not received; a batch must be either
/// fully with or fully without payload.
pub fn read_measurements<R: Read>(r: R, schedule: &Schedule) -> Result<Vec<MeasurementBatch>> {
    let rows = read_rows(r, &MEASUREMENT_HEADER)?;
    group_rows(&rows, schedule, |line, batch, y, cells| {
        let delta = parse_opt_f64(line, cells[5], "delta_actual_seconds")?;
        if let Some(d) = delta {
            if d <= 0.0 {
                return Err(data(line, "delta_actual_seconds must be > 0"));
            }
        }
        Ok((batch, y, delta))
    })
    .and_then(|groups| {
        groups
            .into_iter()
            .map(|g| {
                let m = g.rows.len();
                let y = DVector::from_iterator(m, g.rows.iter().map(|r| r.1));
                let with: Vec<f64> = g.rows.iter().filter_map(|r| r.2).collect();
                let delta_actual = match with.len() {
                    0 => None,
                    n if n == m => Some(DVector::from_vec(with)),
                    _ => {
                        return Err(data(
                            g.first_line,
                            format!("batch {} mixes rows with and without delay payload", g.batch),
                        ))
                    }
                };
                Ok(MeasurementBatch {
                    index: g.batch,
                    y,
                    delta_actual,
                    truth: None,
                })
            })
            .collect()
    })
}

/// Accepted batches only; rejected ones go to the rejection log.
pub fn write_calibrated<W: Write>(w: W, batches: &[CalibratedBatch], schedule: &Schedule) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(CALIBRATED_HEADER)?;
    for b in batches.iter().filter(|b| !b.rejected) {
        check_batch_len(b.y_cal.len(), schedule)?;
        for k in 0..b.y_cal.len() {
            let (sender, next) = schedule.pair(k);
            out.write_record([
                b.index.to_string(),
                k.to_string(),
                sender.to_string(),
                next.to_string(),
                b.y_cal[k].to_string(),
                b.delays[k].to_string(),
                u8::from(b.retrieved).to_string(),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn read_calibrated<R: Read>(r: R, schedule: &Schedule) -> Result<Vec<CalibratedBatch>> {
    let rows = read_rows(r, &CALIBRATED_HEADER)?;
    let groups = group_rows(&rows, schedule, |line, batch, y, cells| {
        let delay = parse_f64(line, cells[5], "delay_seconds")?;
        if delay <= 0.0 {
            return Err(data(line, "delay_seconds must be > 0"));
        }
        let retrieved = match cells[6] {
            "0" => false,
            "1" => true,
            other => return Err(data(line, format!("retrieved must be 0 or 1, got {other:?}"))),
        };
        Ok((batch, y, (delay, retrieved)))
    })?;
    Ok(groups
        .into_iter()
        .map(|g| {
            let m = g.rows.len();
            CalibratedBatch {
                index: g.batch,
                y_cal: DVector::from_iterator(m, g.rows.iter().map(|r| r.1)),
                delays: DVector::from_iterator(m, g.rows.iter().map(|r| r.2 .0)),
                retrieved: g.rows.iter().all(|r| r.2 .1),
                d_n: None,
                rejected: false,
            }
        })
        .collect())
}

pub fn write_rejections<W: Write>(w: W, batches: &[CalibratedBatch], threshold: Option<f64>) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["batch", "reason"])?;
    let reason = match threshold {
        Some(t) => format!("offset from delay exceeds {} ns", t * 1e9),
        None => "rejected".to_string(),
    };
    for b in batches.iter().filter(|b| b.rejected) {
        out.write_record([b.index.to_string(), reason.clone()])?;
    }
    out.flush()?;
    Ok(())
}

/// Columns `n, theta_hat_1..N, trace_P, window`; `n` restarts in every window.
pub fn write_trace<W: Write>(w: W, windows: &[(usize, &[RlsTraceRow])], n_anchors: usize) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["n".to_string()];
    header.extend((1..=n_anchors).map(|i| format!("theta_hat_{i}")));
    header.push("trace_P".into());
    header.push("window".into());
    out.write_record(&header)?;
    for (window, rows) in windows {
        for row in rows.iter() {
            let mut rec = vec![row.n.to_string()];
            rec.extend(row.theta_hat.iter().map(f64::to_string));
            rec.push(row.trace_p.to_string());
            rec.push(window.to_string());
            out.write_record(&rec)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// Headerless, row-major.
pub fn write_matrix_csv<W: Write>(w: W, m: &DMatrix<f64>) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for i in 0..m.nrows() {
        out.write_record(m.row(i).iter().map(f64::to_string))?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_matrix_csv<R: Read>(r: R) -> Result<DMatrix<f64>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut values = Vec::new();
    let mut ncols = None;
    let mut nrows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(csv_data)?;
        let line = line_of(&rec);
        if *ncols.get_or_insert(rec.len()) != rec.len() {
            return Err(data(line, "ragged matrix row"));
        }
        for cell in rec.iter() {
            values.push(parse_f64(line, cell, "matrix entry")?);
        }
        nrows += 1;
    }
    Ok(DMatrix::from_row_slice(nrows, ncols.unwrap_or(0), &values))
}

/// Origin of an ellipse record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EllipseKind {
    Hcrb,
    Simulated,
    MapExperimental,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EllipseRecord {
    #[serde(flatten)]
    pub ellipse: ErrorEllipse,
    pub kind: EllipseKind,
}

impl EllipseRecord {
    pub fn new(ellipse: ErrorEllipse, kind: EllipseKind) -> Self {
        Self { ellipse, kind }
    }
}

pub fn write_json<W: Write, T: Serialize + ?Sized>(w: W, value: &T) -> Result<()> {
    serde_json::to_writer_pretty(w, value)?;
    Ok(())
}

fn check_batch_len(m: usize, schedule: &Schedule) -> Result<()> {
    if m != schedule.n_measurements() {
        return Err(Error::DimensionMismatch {
            what: "batch length",
            expected: schedule.n_measurements(),
            got: m,
        });
    }
    Ok(())
}

fn data(line: usize, msg: impl Into<String>) -> Error {
    Error::Data { line, msg: msg.into() }
}

fn line_of(rec: &csv::StringRecord) -> usize {
    rec.position().map_or(0, |p| p.line() as usize)
}

fn csv_data(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    data(line, e.to_string())
}

fn parse_f64(line: usize, cell: &str, what: &str) -> Result<f64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| data(line, format!("{what}: cannot parse {cell:?} as a number")))?;
    if !v.is_finite() {
        return Err(data(line, format!("{what} is not finite")));
    }
    Ok(v)
}

fn parse_opt_f64(line: usize, cell: &str, what: &str) -> Result<Option<f64>> {
    if cell.trim().is_empty() {
        Ok(None)
    } else {
        parse_f64(line, cell, what).map(Some)
    }
}

fn parse_usize(line: usize, cell: &str, what: &str) -> Result<usize> {
    cell.trim()
        .parse()
        .map_err(|_| data(line, format!("{what}: cannot parse {cell:?} as a non-negative integer")))
}

struct Row {
    line: usize,
    cells: Vec<String>,
}

fn read_rows<R: Read>(r: R, header: &[&str]) -> Result<Vec<Row>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let found = rdr.headers().map_err(csv_data)?.clone();
    if found.iter().map(str::trim).ne(header.iter().copied()) {
        return Err(data(1, format!("expected header {:?}, found {:?}", header.join(","), found.iter().collect::<Vec<_>>().join(","))));
    }
    rdr.records()
        .map(|rec| {
            let rec = rec.map_err(csv_data)?;
            Ok(Row {
                line: line_of(&rec),
                cells: rec.iter().map(str::to_string).collect(),
            })
        })
        .collect()
}

struct Group<T> {
    batch: usize,
    first_line: usize,
    rows: Vec<(usize, f64, T)>,
}

/// Checks the shared leading columns (batch, k, sender, next_sender, value)
/// against the schedule and groups rows into batches.
fn group_rows<T>(
    rows: &[Row],
    schedule: &Schedule,
    extra: impl Fn(usize, usize, f64, &[&str]) -> Result<(usize, f64, T)>,
) -> Result<Vec<Group<T>>> {
    let m = schedule.n_measurements();
    let mut groups: Vec<Group<T>> = Vec::new();
    for row in rows {
        let line = row.line;
        let cells: Vec<&str> = row.cells.iter().map(String::as_str).collect();
        let batch = parse_usize(line, cells[0], "batch")?;
        let k = parse_usize(line, cells[1], "k")?;
        let sender = parse_usize(line, cells[2], "sender")?;
        let next = parse_usize(line, cells[3], "next_sender")?;
        let y = parse_f64(line, cells[4], "measurement")?;

        let open = groups.last().is_some_and(|g| g.batch == batch && g.rows.len() < m);
        if !open {
            if let Some(g) = groups.last() {
                if g.rows.len() < m {
                    return Err(data(line, format!("batch {} has {} rows, expected {m}", g.batch, g.rows.len())));
                }
                if batch <= g.batch {
                    return Err(data(line, format!("batch {batch} out of order or duplicated")));
                }
            }
            groups.push(Group {
                batch,
                first_line: line,
                rows: Vec::with_capacity(m),
            });
        }
        let g = groups.last_mut().expect("pushed above");
        let expected_k = g.rows.len();
        if k != expected_k {
            return Err(data(line, format!("expected k = {expected_k}, got {k}")));
        }
        if (sender, next) != schedule.pair(k) {
            let (s, n) = schedule.pair(k);
            return Err(data(
                line,
                format!("k = {k}: sender/next_sender {sender}->{next} does not match schedule {s}->{n}"),
            ));
        }
        g.rows.push(extra(line, batch, y, &cells)?);
    }
    if let Some(g) = groups.last() {
        if g.rows.len() < m {
            return Err(data(g.first_line, format!("batch {} has {} rows, expected {m}", g.batch, g.rows.len())));
        }
    }
    Ok(groups)
}
