//! Run artefacts: `trajectory.csv`, position snapshots, `meta.json`, and an
//! optional SVG chart of the diagnostic curves.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::points::Points;
use crate::svgd::{Axis, TrajectoryRecord};
use crate::verify::CheckResult;

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn num(v: f64) -> String {
    format!("{v:?}")
}

/// Writes the trajectory table. The first column is `iteration` or `time`
/// depending on the record axis; `kl` is empty when not tracked.
pub fn write_trajectory(record: &TrajectoryRecord, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let first = match record.axis {
        Axis::Iteration => "iteration",
        Axis::Time => "time",
    };
    w.write_record([first, "epsilon", "ksd", "kl"]).map_err(csv_err)?;
    for row in &record.rows {
        let axis = match record.axis {
            Axis::Iteration => row.iteration.to_string(),
            Axis::Time => num(row.time),
        };
        let kl = row.kl.map(num).unwrap_or_default();
        w.write_record([axis, num(row.epsilon), num(row.ksd), kl]).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes positions with header `x0,...,x{d-1}`.
pub fn write_points(points: &Points, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record((0..points.dim()).map(|a| format!("x{a}"))).map_err(csv_err)?;
    for row in points.rows() {
        w.write_record(row.iter().map(|v| num(*v))).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a points CSV with a header row.
pub fn read_points(path: &Path) -> Result<Points> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let dim = r.headers().map_err(csv_err)?.len();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                Error::Contract(format!("{}: row {} has a non-numeric field {field:?}", path.display(), i + 1))
            })?;
            data.push(v);
        }
    }
    Points::new(dim, data)
}

#[derive(Serialize)]
struct Meta<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    threads: usize,
    config: &'a str,
}

/// Writes `meta.json` with the echoed configuration text.
pub fn write_meta(dir: &Path, command: &str, seed: u64, config_text: &str) -> Result<()> {
    let meta = Meta {
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        threads: rayon::current_num_threads(),
        config: config_text,
    };
    fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

/// Writes check results as a pretty-printed JSON array.
pub fn write_report_json(results: &[CheckResult], path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(results)? + "\n")?;
    Ok(())
}

/// Static line chart of KSD (and KL when present) against the record axis.
pub fn trajectory_svg(record: &TrajectoryRecord) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 50.0;
    let xs: Vec<f64> = record
        .rows
        .iter()
        .map(|r| match record.axis {
            Axis::Iteration => r.iteration as f64,
            Axis::Time => r.time,
        })
        .collect();
    let ksd: Vec<f64> = record.rows.iter().map(|r| r.ksd).collect();
    let kl: Vec<f64> = record.rows.iter().filter_map(|r| r.kl).collect();
    let series: Vec<(&str, &str, &[f64])> = if kl.len() == xs.len() {
        vec![("KSD", "#1f77b4", &ksd[..]), ("KL", "#d62728", &kl[..])]
    } else {
        vec![("KSD", "#1f77b4", &ksd[..])]
    };
    let finite = |v: &&f64| v.is_finite();
    let (x0, x1) = bounds(xs.iter().filter(finite).copied());
    let (y0, y1) = bounds(series.iter().flat_map(|s| s.2.iter().filter(finite).copied()));
    let px = |x: f64| M + (x - x0) / (x1 - x0) * (W - 2.0 * M);
    let py = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M} {M} V{} H{}" fill="none" stroke="black"/>"#,
        H - M,
        W - M
    );
    let axis_name = match record.axis {
        Axis::Iteration => "iteration",
        Axis::Time => "time",
    };
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{axis_name}</text>"#, W / 2.0, H - 15.0);
    let _ = writeln!(s, r#"<text x="{M}" y="{}" font-size="10" text-anchor="middle">{x0:.3}</text>"#, H - M + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="middle">{x1:.3}</text>"#, W - M, H - M + 14.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y0:.3}</text>"#, M - 4.0, H - M);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="10" text-anchor="end">{y1:.3}</text>"#, M - 4.0, M + 4.0);
    for (i, (name, color, ys)) in series.iter().enumerate() {
        let pts: Vec<String> = xs
            .iter()
            .zip(ys.iter())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        let ly = M + 14.0 * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{ly}" font-size="12" fill="{color}">{name}</text>"#, W - M - 40.0);
    }
    s.push_str("</svg>\n");
    s
}

fn bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svgd::TrajectoryRow;

    fn record(kl: bool) -> TrajectoryRecord {
        TrajectoryRecord {
            axis: Axis::Iteration,
            rows: (0..3)
                .map(|i| TrajectoryRow {
                    iteration: i,
                    time: i as f64,
                    epsilon: if i == 0 { 0.0 } else { 0.1 },
                    ksd: 1.0 / (i + 1) as f64,
                    kl: kl.then_some(0.5 / (i + 1) as f64),
                    snapshot: None,
                })
                .collect(),
        }
    }

    #[test]
    fn trajectory_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        write_trajectory(&record(false), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "iteration,epsilon,ksd,kl");
        assert_eq!(lines[1], "0,0.0,1.0,");
        assert_eq!(lines.len(), 4);
        write_trajectory(&record(true), &path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().lines().nth(2).unwrap().ends_with(",0.25"));
    }

    #[test]
    fn points_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pts = Points::from_rows(&[[0.1, -2.5], [1e-300, 3.0]]).unwrap();
        write_points(&pts, &path).unwrap();
        assert_eq!(read_points(&path).unwrap(), pts);
    }

    #[test]
    fn svg_has_one_polyline_per_series() {
        assert_eq!(trajectory_svg(&record(false)).matches("<polyline").count(), 1);
        assert_eq!(trajectory_svg(&record(true)).matches("<polyline").count(), 2);
    }
}
