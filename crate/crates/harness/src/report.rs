//! CSV output. Summary tables use fixed 6-decimal formatting; numeric matrices
//! are header-less and use shortest round-trip formatting.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use hyperproto::training::{ClassMetrics, RadiusTrace};
use hyperproto::{Metrics, Variant};

use crate::error::{io_err, HarnessError, Result};

pub const METRICS_HEADER: &str = "metric,value,ci95_halfwidth,n";

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

/// Rows in fixed order: accuracy, precision, recall, f1.
pub fn metrics_csv(m: &Metrics) -> Result<String> {
    if m.n_episodes == 0 {
        return Err(HarnessError::Core(hyperproto::Error::Contract(
            "metrics cover no episodes".into(),
        )));
    }
    let mut out = format!("{METRICS_HEADER}\n");
    for (name, value, hw) in [
        ("accuracy", m.accuracy, m.accuracy_ci95),
        ("precision", m.precision, m.precision_ci95),
        ("recall", m.recall, m.recall_ci95),
        ("f1", m.f1, m.f1_ci95),
    ] {
        writeln!(out, "{name},{value:.6},{hw:.6},{}", m.n_episodes).unwrap();
    }
    Ok(out)
}

pub fn write_metrics_csv(m: &Metrics, path: &Path) -> Result<()> {
    write(path, &metrics_csv(m)?)
}

pub fn per_class_csv(rows: &[ClassMetrics]) -> String {
    let mut out = String::from("class,precision,recall,f1,support\n");
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{}",
            r.class, r.precision, r.recall, r.f1, r.support
        )
        .unwrap();
    }
    out
}

pub fn write_per_class_csv(rows: &[ClassMetrics], path: &Path) -> Result<()> {
    write(path, &per_class_csv(rows))
}

pub fn matrix_csv(rows: &[Vec<f64>]) -> String {
    let mut out = String::new();
    for row in rows {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    out
}

pub fn write_matrix_csv(rows: &[Vec<f64>], path: &Path) -> Result<()> {
    write(path, &matrix_csv(rows))
}

pub fn radius_trace_csv(trace: &RadiusTrace) -> String {
    let mut out = String::from("step,mean_distance,radius,accuracy\n");
    for p in &trace.points {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6}",
            p.step, p.mean_distance, p.radius, p.accuracy
        )
        .unwrap();
    }
    out
}

pub fn write_radius_trace_csv(trace: &RadiusTrace, path: &Path) -> Result<()> {
    write(path, &radius_trace_csv(trace))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ShotRow {
    pub variant: Variant,
    pub shot: usize,
    pub metrics: Metrics,
}

pub fn shot_sweep_csv(rows: &[ShotRow]) -> String {
    let mut out = String::from("variant,shot,accuracy,accuracy_ci95,precision,recall,f1,n\n");
    for r in rows {
        let m = &r.metrics;
        writeln!(
            out,
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            r.variant, r.shot, m.accuracy, m.accuracy_ci95, m.precision, m.recall, m.f1, m.n_episodes
        )
        .unwrap();
    }
    out
}

/// `class,radius[,true_spread]` for every training class.
pub fn radii_csv(scales: &[f64], spreads: Option<&[f64]>) -> String {
    let mut out = String::from(if spreads.is_some() {
        "class,scale,true_spread\n"
    } else {
        "class,scale\n"
    });
    for (c, s) in scales.iter().enumerate() {
        match spreads {
            Some(sp) => writeln!(out, "{c},{s:.6},{:.6}", sp[c]).unwrap(),
            None => writeln!(out, "{c},{s:.6}").unwrap(),
        }
    }
    out
}

pub fn losses_csv(losses: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l:.6}", i + 1).unwrap();
    }
    out
}

/// Parses a header-less numeric CSV.
pub fn parse_matrix_csv(text: &str) -> std::result::Result<Vec<Vec<f64>>, std::num::ParseFloatError> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').map(str::parse).collect())
        .collect()
}
