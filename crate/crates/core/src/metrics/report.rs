//! CSV and JSON report formats.
//!
//! Undefined values are written as `Nan`.

use std::io::{Read, Write};

use serde::Serialize;

use super::overlap::MetricsReport;
use super::rank::{MetricColumn, Orientation, RankTable};
use crate::error::{Error, Result};

pub const UNDEFINED: &str = "Nan";

fn csv_err(e: csv::Error) -> Error {
    Error::Serde(e.to_string())
}

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.6}")).unwrap_or_else(|| UNDEFINED.to_string())
}

fn parse_opt(s: &str, what: &str) -> Result<Option<f64>> {
    let s = s.trim();
    if s.eq_ignore_ascii_case("nan") || s.is_empty() {
        return Ok(None);
    }
    s.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::Invalid(format!("{what}: cannot parse {s:?} as a number")))
}

/// `subject_id,dsc,hd,vs` rows.
pub fn write_case_csv<W: Write>(w: W, rows: &[(String, MetricsReport)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["subject_id", "dsc", "hd", "vs"]).map_err(csv_err)?;
    for (id, r) in rows {
        wr.write_record([id.clone(), fmt_opt(Some(r.dsc)), fmt_opt(r.hd), fmt_opt(Some(r.vs))])
            .map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::Serde(e.to_string()))
}

pub fn read_case_csv<R: Read>(r: R) -> Result<Vec<(String, MetricsReport)>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != 4 {
            return Err(Error::Invalid(format!("expected 4 columns, found {}", rec.len())));
        }
        let dsc = parse_opt(&rec[1], "dsc")?.ok_or_else(|| Error::Invalid("dsc is undefined".into()))?;
        let vs = parse_opt(&rec[3], "vs")?.ok_or_else(|| Error::Invalid("vs is undefined".into()))?;
        out.push((
            rec[0].to_string(),
            MetricsReport {
                dsc,
                hd: parse_opt(&rec[2], "hd")?,
                vs,
                units: Default::default(),
            },
        ));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    /// Sample standard deviation (0 for a single value). `None` when empty.
    pub fn of(v: &[f64]) -> Option<Self> {
        if v.is_empty() {
            return None;
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let sd = if v.len() > 1 {
            (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        Some(MeanSd { mean, sd, n: v.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CohortSummary {
    pub cases: usize,
    pub dsc: Option<MeanSd>,
    pub hd: Option<MeanSd>,
    pub hd_undefined: usize,
    pub vs: Option<MeanSd>,
}

pub fn summarize(rows: &[(String, MetricsReport)]) -> CohortSummary {
    let dsc: Vec<f64> = rows.iter().map(|r| r.1.dsc).collect();
    let hd: Vec<f64> = rows.iter().filter_map(|r| r.1.hd).collect();
    let vs: Vec<f64> = rows.iter().map(|r| r.1.vs).collect();
    CohortSummary {
        cases: rows.len(),
        dsc: MeanSd::of(&dsc),
        hd: MeanSd::of(&hd),
        hd_undefined: rows.len() - hd.len(),
        vs: MeanSd::of(&vs),
    }
}

/// Model-by-metric table: header `model,<metric>...`, one row per model.
/// A trailing `+` or `-` on a metric name forces higher- or lower-better;
/// otherwise the orientation is looked up from the metric name.
pub fn read_model_table<R: Read>(r: R) -> Result<(Vec<String>, Vec<MetricColumn>)> {
    let mut rd = csv::Reader::from_reader(r);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.len() < 2 {
        return Err(Error::Invalid(
            "model table needs a model column and at least one metric".into(),
        ));
    }
    let mut cols = Vec::new();
    for h in header.iter().skip(1) {
        let h = h.trim();
        let (name, orientation) = if let Some(n) = h.strip_suffix('+') {
            (n, Orientation::HigherBetter)
        } else if let Some(n) = h.strip_suffix('-') {
            (n, Orientation::LowerBetter)
        } else {
            let o = Orientation::for_metric(h)
                .ok_or_else(|| Error::Invalid(format!("unknown metric {h:?}; suffix it with + or -")))?;
            (h, o)
        };
        cols.push(MetricColumn {
            name: name.to_string(),
            orientation,
            values: Vec::new(),
        });
    }
    let mut models = Vec::new();
    for (line, rec) in rd.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != header.len() {
            return Err(Error::Invalid(format!(
                "row {}: expected {} columns, found {}",
                line + 2,
                header.len(),
                rec.len()
            )));
        }
        models.push(rec[0].trim().to_string());
        for (c, v) in cols.iter_mut().zip(rec.iter().skip(1)) {
            c.values.push(parse_opt(v, &c.name)?);
        }
    }
    Ok((models, cols))
}

/// `model,<metric>...,score` with the normalized per-metric scores.
pub fn write_rank_csv<W: Write>(w: W, t: &RankTable) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let mut head = vec!["model".to_string()];
    head.extend(t.metrics.iter().map(|m| m.name.clone()));
    head.push("score".into());
    wr.write_record(&head).map_err(csv_err)?;
    for (k, m) in t.models.iter().enumerate() {
        let mut row = vec![m.clone()];
        // adding 0.0 turns -0.0 into 0.0
        row.extend(t.normalized.iter().map(|r| format!("{:.4}", r[k] + 0.0)));
        row.push(format!("{:.4}", t.scores[k] + 0.0));
        wr.write_record(&row).map_err(csv_err)?;
    }
    wr.flush().map_err(|e| Error::Serde(e.to_string()))
}
