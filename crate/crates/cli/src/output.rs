//! CSV, SVG and PGM writers.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use specfed_core::federation::RoundReport;
use specfed_core::spectral::Spectrum;

use crate::CliError;

pub const ROUNDS_HEADER: [&str; 5] = ["round", "client_id", "task", "metric", "value"];
pub const SUMMARY_HEADER: [&str; 4] = ["task", "metric", "mean", "std"];
pub const SWEEP_HEADER: [&str; 4] = ["axis_value", "task", "metric", "final_value"];
pub const ABLATION_HEADER: [&str; 4] = ["variant", "task", "metric", "final_value"];
pub const SPECTRUM_HEADER: [&str; 6] = ["pair_id", "modality_a", "modality_b", "full_distance", "lowpass_distance", "ratio"];

/// Shortest representation that parses back to the same `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

pub fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator<Item = String>,
{
    let io = |e: csv::Error| CliError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    };
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(header).map_err(io)?;
    for row in rows {
        w.write_record(row).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// `(task, metric)` groups in order of first appearance.
pub fn groups<'a>(keys: impl Iterator<Item = (&'a str, &'a str)>) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (t, m) in keys {
        if !out.iter().any(|(a, b)| a == t && b == m) {
            out.push((t.to_string(), m.to_string()));
        }
    }
    out
}

/// Per-`(task, metric)` mean and population standard deviation over the
/// clients of one round.
pub fn summarize(report: &RoundReport) -> Vec<(String, String, f64, f64)> {
    groups(report.records.iter().map(|r| (r.task.as_str(), r.metric.as_str())))
        .into_iter()
        .map(|(t, m)| {
            let v: Vec<f64> = report.records.iter().filter(|r| r.task == t && r.metric == m).map(|r| r.value).collect();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / v.len() as f64;
            (t, m, mean, var.sqrt())
        })
        .collect()
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// One panel per `(task, metric)`, each with its own y range and a single
/// polyline of the client-mean value per round.
pub fn curves_svg(reports: &[RoundReport]) -> String {
    let series: Vec<((String, String), Vec<(usize, f64)>)> = groups(
        reports.iter().flat_map(|r| r.records.iter().map(|x| (x.task.as_str(), x.metric.as_str()))),
    )
    .into_iter()
    .map(|(t, m)| {
        let pts = reports
            .iter()
            .filter_map(|r| {
                let v: Vec<f64> = r.records.iter().filter(|x| x.task == t && x.metric == m).map(|x| x.value).collect();
                (!v.is_empty()).then(|| (r.round, v.iter().sum::<f64>() / v.len() as f64))
            })
            .collect();
        ((t, m), pts)
    })
    .collect();

    let (pw, ph, margin) = (480.0, 160.0, 50.0);
    let width = pw + 2.0 * margin;
    let height = (series.len().max(1) as f64) * (ph + margin) + margin;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let last_round = reports.iter().map(|r| r.round).max().unwrap_or(0).max(1) as f64;
    for (i, ((task, metric), pts)) in series.iter().enumerate() {
        let top = margin + i as f64 * (ph + margin);
        let finite: Vec<f64> = pts.iter().map(|p| p.1).filter(|v| v.is_finite()).collect();
        let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let (lo, hi) = if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        };
        let _ = writeln!(
            s,
            r##"<rect x="{margin}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#999"/>"##
        );
        let _ = writeln!(s, r#"<text x="{margin}" y="{}">{task} / {metric}</text>"#, top - 6.0);
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, top + 10.0, short(hi));
        let _ = writeln!(s, r#"<text x="4" y="{}">{}</text>"#, top + ph, short(lo));
        let _ = writeln!(s, r#"<text x="{}" y="{}">round {}</text>"#, margin + pw - 50.0, top + ph + 14.0, last_round);
        let points: Vec<String> = pts
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(r, v)| {
                let x = margin + pw * r as f64 / last_round;
                let y = top + ph * (1.0 - (v - lo) / (hi - lo));
                format!("{x:.2},{y:.2}")
            })
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{}" stroke-width="1.5" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            points.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn short(v: f64) -> String {
    format!("{v:.4}")
}

/// Binary graymap of `ln(1 + |F|)` for the first channel, scaled to 0..255.
pub fn write_spectrum_pgm(path: &Path, spec: &Spectrum) -> Result<(), CliError> {
    let (h, w) = (spec.height(), spec.width());
    let logs: Vec<f64> = spec.plane(0).iter().map(|m| m.ln_1p()).collect();
    let max = logs.iter().cloned().fold(0.0, f64::max);
    let bytes: Vec<u8> = logs
        .iter()
        .map(|&v| if max > 0.0 { (255.0 * v / max).round() as u8 } else { 0 })
        .collect();
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    write!(out, "P5\n{w} {h}\n255\n").map_err(|e| CliError::io(path, e))?;
    out.write_all(&bytes).map_err(|e| CliError::io(path, e))?;
    out.flush().map_err(|e| CliError::io(path, e))
}
