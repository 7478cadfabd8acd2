//! CSV and SVG writers for metric rows.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::MetricsRow;
use crate::error::{FedError, Result};

/// CSV header, in row field order.
pub const COLUMNS: [&str; 12] = [
    "t",
    "round",
    "loss",
    "measure_g",
    "term_drift",
    "term_esterr",
    "grad_map",
    "consensus_z",
    "consensus_nu",
    "density",
    "eta",
    "alpha",
];

fn float(v: f64) -> String {
    format!("{v:.16e}")
}

fn record(row: &MetricsRow) -> [String; 12] {
    let opt = |v: Option<f64>| v.map(float).unwrap_or_default();
    [
        row.t.to_string(),
        row.round.to_string(),
        float(row.loss),
        float(row.measure_g),
        float(row.term_drift),
        float(row.term_esterr),
        float(row.grad_map),
        opt(row.consensus_z),
        opt(row.consensus_nu),
        float(row.density),
        float(row.eta),
        float(row.alpha),
    ]
}

fn csv_err(path: &Path, e: csv::Error) -> FedError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => FedError::io(path, io),
        other => FedError::Config(format!("{}: {other:?}", path.display())),
    }
}

/// Streams rows to a CSV file, flushing after every row so a failed run
/// leaves everything logged so far on disk.
pub struct CsvSink {
    path: PathBuf,
    writer: csv::Writer<File>,
}

impl CsvSink {
    pub fn create(path: &Path) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        writer.write_record(COLUMNS).map_err(|e| csv_err(path, e))?;
        Ok(CsvSink { path: path.to_path_buf(), writer })
    }

    pub fn write(&mut self, row: &MetricsRow) -> Result<()> {
        self.writer.write_record(record(row)).map_err(|e| csv_err(&self.path, e))?;
        self.writer.flush().map_err(|e| FedError::io(&self.path, e))
    }
}

pub fn emit_csv(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut sink = CsvSink::create(path)?;
    for r in rows {
        sink.write(r)?;
    }
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = reader.headers().map_err(|e| csv_err(path, e))?;
    if header.iter().ne(COLUMNS) {
        return Err(FedError::Config(format!("{}: unexpected metrics header", path.display())));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let bad = |col: &str| FedError::Config(format!("{}: row {}: bad `{col}`", path.display(), line + 1));
        let get = |i: usize| rec.get(i).unwrap_or("");
        let f = |i: usize| get(i).parse::<f64>().map_err(|_| bad(COLUMNS[i]));
        let opt = |i: usize| -> Result<Option<f64>> {
            if get(i).is_empty() {
                Ok(None)
            } else {
                f(i).map(Some)
            }
        };
        rows.push(MetricsRow {
            t: get(0).parse().map_err(|_| bad("t"))?,
            round: get(1).parse().map_err(|_| bad("round"))?,
            loss: f(2)?,
            measure_g: f(3)?,
            term_drift: f(4)?,
            term_esterr: f(5)?,
            grad_map: f(6)?,
            consensus_z: opt(7)?,
            consensus_nu: opt(8)?,
            density: f(9)?,
            eta: f(10)?,
            alpha: f(11)?,
        });
    }
    Ok(rows)
}

const WIDTH: f64 = 1000.0;
const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart of the chosen columns against `t` with a log10 y-axis.
/// Non-positive and absent values are skipped.
pub fn emit_svg(rows: &[MetricsRow], fields: &[String], path: &Path) -> Result<()> {
    for f in fields {
        if !COLUMNS.contains(&f.as_str()) {
            return Err(FedError::Config(format!("unknown metrics column `{f}`")));
        }
    }
    let series: Vec<Vec<(f64, f64)>> = fields
        .iter()
        .map(|f| {
            rows.iter()
                .filter_map(|r| r.field(f).filter(|v| *v > 0.0 && v.is_finite()).map(|v| (r.t as f64, v.log10())))
                .collect()
        })
        .collect();
    let points = series.iter().flatten();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let (y0, y1) = (y0.floor(), y1.ceil().max(y0.floor() + 1.0));
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<g stroke=\"black\"><line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\"/><line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\"/></g>\n",
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN
    ));
    let mut e = y0 as i64;
    while e as f64 <= y1 {
        let y = sy(e as f64);
        s.push_str(&format!(
            "<line x1=\"{MARGIN}\" y1=\"{y:.1}\" x2=\"{:.1}\" y2=\"{y:.1}\" stroke=\"#ddd\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">1e{e}</text>\n",
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        ));
        e += 1;
    }
    s.push_str(&format!(
        "<text x=\"{MARGIN}\" y=\"{:.1}\" font-size=\"12\">t = {x0}</text><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"12\" text-anchor=\"end\">t = {x1}</text>\n",
        HEIGHT - MARGIN + 20.0,
        WIDTH - MARGIN,
        HEIGHT - MARGIN + 20.0
    ));
    for (j, (name, pts)) in fields.iter().zip(&series).enumerate() {
        let color = PALETTE[j % PALETTE.len()];
        if !pts.is_empty() {
            let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            s.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        s.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"14\" fill=\"{color}\">{name}</text>\n",
            WIDTH - MARGIN - 150.0,
            MARGIN + 18.0 * j as f64
        ));
    }
    s.push_str("</svg>\n");

    let file = File::create(path).map_err(|e| FedError::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(s.as_bytes()).and_then(|_| w.flush()).map_err(|e| FedError::io(path, e))
}
