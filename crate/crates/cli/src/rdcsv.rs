//! The RD CSV schema `sequence,frame,lambda,bpp,d1_db,d2_db`. Infinite PSNR
//! is written as `inf`.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::path::Path;

use ddpc_core::metrics::RdPoint;

use crate::failure::{read_input, CliResult, Failure, EXIT_FAILURE};

pub const HEADER: [&str; 6] = ["sequence", "frame", "lambda", "bpp", "d1_db", "d2_db"];

#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub sequence: String,
    pub frame: usize,
    pub lambda: u8,
    pub bpp: f64,
    pub d1_db: f64,
    pub d2_db: f64,
}

impl CsvRow {
    fn record(&self) -> [String; 6] {
        [
            self.sequence.clone(),
            self.frame.to_string(),
            self.lambda.to_string(),
            self.bpp.to_string(),
            self.d1_db.to_string(),
            self.d2_db.to_string(),
        ]
    }
}

/// Appends rows, writing the header first when the file is new or empty.
pub fn append_rows(path: &Path, rows: &[CsvRow]) -> CliResult<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot open {}: {e}", path.display())))?;
    let mut w = csv::Writer::from_writer(file);
    let io = |e: csv::Error| Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display()));
    if fresh {
        w.write_record(HEADER).map_err(io)?;
    }
    for r in rows {
        w.write_record(r.record()).map_err(io)?;
    }
    w.flush()
        .map_err(|e| Failure::new(EXIT_FAILURE, format!("cannot write {}: {e}", path.display())))
}

pub fn read_rows(path: &Path) -> CliResult<Vec<CsvRow>> {
    let data = read_input(path)?;
    let mut r = csv::Reader::from_reader(data.as_slice());
    let bad = |m: String| Failure::input(format!("{}: {m}", path.display()));
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(bad(format!("header is not {}", HEADER.join(","))));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let field = |k: usize| rec.get(k).unwrap_or("");
        let num = |k: usize| -> CliResult<f64> {
            field(k)
                .parse()
                .map_err(|_| bad(format!("row {}: `{}` is not a number", i + 1, field(k))))
        };
        rows.push(CsvRow {
            sequence: field(0).to_string(),
            frame: field(1).parse().map_err(|_| bad(format!("row {}: bad frame index", i + 1)))?,
            lambda: field(2).parse().map_err(|_| bad(format!("row {}: bad lambda", i + 1)))?,
            bpp: num(3)?,
            d1_db: num(4)?,
            d2_db: num(5)?,
        });
    }
    Ok(rows)
}

/// One RD point per lambda tag: mean bpp and mean PSNR over its rows,
/// ordered by lambda.
pub fn rd_points(rows: &[CsvRow]) -> Vec<(u8, RdPoint)> {
    let mut by: BTreeMap<u8, Vec<&CsvRow>> = BTreeMap::new();
    for r in rows {
        by.entry(r.lambda).or_default().push(r);
    }
    by.into_iter()
        .map(|(l, rs)| {
            let n = rs.len() as f64;
            let mean = |f: fn(&CsvRow) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            (
                l,
                RdPoint {
                    bpp: mean(|r| r.bpp),
                    d1_db: mean(|r| r.d1_db),
                    d2_db: Some(mean(|r| r.d2_db)),
                },
            )
        })
        .collect()
}
