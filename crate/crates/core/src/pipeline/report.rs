//! Static SVG/CSV summaries of a run.

use std::fmt::Write as _;
use std::path::Path;

use super::run::{BASELINE_METRICS, TEST_METRICS, TRAIN_LOG};
use crate::error::{Error, Result};
use crate::trainer::EpochRecord;

pub const REPORT_SVG: &str = "report.svg";
pub const REPORT_CSV: &str = "report.csv";

/// Parses the `epoch,train_loss,val_psnr` log.
pub fn parse_train_log(text: &str) -> Result<Vec<EpochRecord>> {
    let mut lines = text.lines();
    match lines.next() {
        Some("epoch,train_loss,val_psnr") => {}
        _ => return Err(Error::Format("training log header missing".into())),
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Format(format!("training log line {}: `{line}`", i + 2));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok(EpochRecord {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: f[1].parse().map_err(|_| bad())?,
                val_psnr: f[2].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Reads the `mean` row of a metric CSV as `(psnr, ssim, mae, sam)`.
pub fn parse_metric_means(text: &str) -> Result<[f64; 4]> {
    let line = text
        .lines()
        .find(|l| l.starts_with("mean,"))
        .ok_or_else(|| Error::Format("metric file has no mean row".into()))?;
    let vals: Vec<f64> = line
        .split(',')
        .skip(1)
        .map(|v| v.parse::<f64>().map_err(|_| Error::Format(format!("bad metric row `{line}`"))))
        .collect::<Result<_>>()?;
    vals.try_into().map_err(|_| Error::Format(format!("bad metric row `{line}`")))
}

fn polyline(points: &[(f64, f64)], x0: f64, y0: f64, w: f64, h: f64, color: &str) -> String {
    if points.is_empty() {
        return String::new();
    }
    let (xmin, xmax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.0), b.max(p.0)));
    let (ymin, ymax) = points.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(p.1), b.max(p.1)));
    let sx = if xmax > xmin { w / (xmax - xmin) } else { 0.0 };
    let sy = if ymax > ymin { h / (ymax - ymin) } else { 0.0 };
    let mut out = format!("<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"");
    for (x, y) in points {
        let _ = write!(out, "{:.2},{:.2} ", x0 + (x - xmin) * sx, y0 + h - (y - ymin) * sy);
    }
    out.push_str("\"/>\n");
    let _ = writeln!(
        out,
        "<text x=\"{x0}\" y=\"{:.0}\" font-size=\"10\">min {ymin:.4}  max {ymax:.4}</text>",
        y0 + h + 14.0
    );
    out
}

/// Two panels: training loss and validation PSNR per epoch.
pub fn render_svg(records: &[EpochRecord]) -> String {
    let loss: Vec<(f64, f64)> = records.iter().map(|r| (r.epoch as f64, r.train_loss)).collect();
    let psnr: Vec<(f64, f64)> = records.iter().map(|r| (r.epoch as f64, r.val_psnr)).collect();
    let mut svg = String::from(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"260\" font-family=\"sans-serif\">\n",
    );
    svg.push_str("<rect width=\"640\" height=\"260\" fill=\"white\"/>\n");
    svg.push_str("<text x=\"20\" y=\"20\" font-size=\"12\">train loss</text>\n");
    svg.push_str("<text x=\"340\" y=\"20\" font-size=\"12\">validation PSNR (dB)</text>\n");
    svg.push_str("<rect x=\"20\" y=\"30\" width=\"280\" height=\"190\" fill=\"none\" stroke=\"#ccc\"/>\n");
    svg.push_str("<rect x=\"340\" y=\"30\" width=\"280\" height=\"190\" fill=\"none\" stroke=\"#ccc\"/>\n");
    svg.push_str(&polyline(&loss, 20.0, 30.0, 280.0, 190.0, "#c0392b"));
    svg.push_str(&polyline(&psnr, 340.0, 30.0, 280.0, 190.0, "#2471a3"));
    svg.push_str("</svg>\n");
    svg
}

/// Writes `report.svg` and `report.csv` into the run directory from whatever
/// logs are present. Returns the CSV text.
pub fn write_report(run_dir: &Path) -> Result<String> {
    let read = |name: &str| -> Result<Option<String>> {
        let p = run_dir.join(name);
        match std::fs::read_to_string(&p) {
            Ok(t) => Ok(Some(t)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&p, e)),
        }
    };
    let records = match read(TRAIN_LOG)? {
        Some(t) => parse_train_log(&t)?,
        None => Vec::new(),
    };
    let mut csv = String::from("quantity,value\n");
    if let Some(last) = records.last() {
        let best = records.iter().map(|r| r.val_psnr).fold(f64::NEG_INFINITY, f64::max);
        let _ = writeln!(csv, "epochs,{}", last.epoch);
        let _ = writeln!(csv, "final_train_loss,{:.6}", last.train_loss);
        let _ = writeln!(csv, "best_val_psnr,{best:.4}");
    }
    for (prefix, file) in [("restored", TEST_METRICS), ("cloudy", BASELINE_METRICS)] {
        if let Some(t) = read(file)? {
            let [p, s, m, a] = parse_metric_means(&t)?;
            let _ = writeln!(csv, "{prefix}_psnr,{p:.4}\n{prefix}_ssim,{s:.4}\n{prefix}_mae,{m:.4}\n{prefix}_sam,{a:.4}");
        }
    }
    let svg_path = run_dir.join(REPORT_SVG);
    std::fs::write(&svg_path, render_svg(&records)).map_err(|e| Error::io(&svg_path, e))?;
    let csv_path = run_dir.join(REPORT_CSV);
    std::fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok(csv)
}
