//! Panel CSV and JSON persistence.
//!
//! Panel files have the header `id,t,d,y,x0,x1,…` with one row per
//! individual and period, `t` and `d` one-based, rows of an individual
//! contiguous and in period order. Numbers are written in Rust's shortest
//! round-trip form, so reading a file back reproduces every `f64` exactly.
//! No field is ever quoted: every field is numeric.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Observation, PanelData};

pub fn write_panel<W: Write>(writer: W, data: &PanelData) -> Result<()> {
    let k = data.covariate_dim();
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    let mut header = vec!["id".to_string(), "t".into(), "d".into(), "y".into()];
    header.extend((0..k).map(|j| format!("x{j}")));
    w.write_record(&header)?;
    for (i, h) in data.individuals.iter().enumerate() {
        for (t, o) in h.iter().enumerate() {
            let mut rec = vec![i.to_string(), (t + 1).to_string(), (o.d + 1).to_string(), o.y.to_string()];
            rec.extend(o.x.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_panel<R: Read>(reader: R) -> Result<PanelData> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = r.headers()?.clone();
    if headers.len() < 5 || &headers[0] != "id" || &headers[1] != "t" || &headers[2] != "d" || &headers[3] != "y" {
        return Err(Error::InvalidData("expected header id,t,d,y,x0,…".into()));
    }
    let mut individuals: Vec<Vec<Observation>> = Vec::new();
    let mut current: Option<String> = None;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::InvalidData(format!("data row {}: bad {what}", line + 1));
        let id = rec[0].to_string();
        let t: usize = rec[1].parse().map_err(|_| bad("t"))?;
        let d: usize = rec[2].parse().map_err(|_| bad("d"))?;
        let y: f64 = rec[3].parse().map_err(|_| bad("y"))?;
        let x = (4..rec.len()).map(|j| rec[j].parse::<f64>().map_err(|_| bad("covariate"))).collect::<Result<Vec<f64>>>()?;
        if d == 0 {
            return Err(bad("alternative (one-based)"));
        }
        if current.as_deref() != Some(id.as_str()) {
            individuals.push(Vec::new());
            current = Some(id);
        }
        let h = individuals.last_mut().expect("pushed above");
        if t != h.len() + 1 {
            return Err(bad("period order"));
        }
        h.push(Observation { y, d: d - 1, x });
    }
    PanelData::new(individuals)
}

pub fn write_panel_file(path: &Path, data: &PanelData) -> Result<()> {
    write_panel(BufWriter::new(File::create(path)?), data)
}

pub fn read_panel_file(path: &Path) -> Result<PanelData> {
    read_panel(File::open(path)?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_reader(File::open(path)?)?)
}

/// Writes rows of already formatted fields under `header`.
pub fn write_rows<W: Write>(writer: W, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(writer);
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_rows_file(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    write_rows(BufWriter::new(File::create(path)?), header, rows)
}
