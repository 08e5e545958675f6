//! Report assembly and emission: sweep/ablation rows, the documented row
//! order, CSV and JSON writers, and a dependency-free SVG line plotter.
//!
//! Row order is total and documented here once: rows compare by factor,
//! then setting, then task, then metric, then seed. String fields compare
//! bytewise, except settings, which compare numerically whenever both
//! sides parse as finite floats (so time-step sweeps read 0, 10, 50, 100
//! rather than dictionary order). Writers never reorder; builders sort.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ARTIFACT_VERSION: u32 = 1;

// ----------------------------------------------------------------------
// Rows
// ----------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub factor: String,
    pub setting: String,
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub seed: u64,
    pub walltime_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub version: u32,
    /// Hash of the canonical run configuration that produced the rows.
    pub config_hash: String,
    pub rows: Vec<ReportRow>,
}

impl SweepReport {
    /// Builds a report in the documented order.
    pub fn new(mut rows: Vec<ReportRow>, config_hash: impl Into<String>) -> Self {
        sort_rows(&mut rows);
        SweepReport {
            version: ARTIFACT_VERSION,
            config_hash: config_hash.into(),
            rows,
        }
    }
}

fn cmp_setting(a: &str, b: &str) -> Ordering {
    match (a.parse::<f64>(), b.parse::<f64>()) {
        (Ok(x), Ok(y)) if x.is_finite() && y.is_finite() => x.total_cmp(&y),
        _ => a.cmp(b),
    }
}

/// The documented total order (see module docs).
pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        a.factor
            .cmp(&b.factor)
            .then_with(|| cmp_setting(&a.setting, &b.setting))
            .then_with(|| a.task.cmp(&b.task))
            .then_with(|| a.metric.cmp(&b.metric))
            .then_with(|| a.seed.cmp(&b.seed))
    });
}

// ----------------------------------------------------------------------
// Value formatting
// ----------------------------------------------------------------------

/// Six significant digits in plain decimal notation; zero is "0.000000".
pub fn format_value(v: f64) -> String {
    if !v.is_finite() {
        return v.to_string();
    }
    if v == 0.0 {
        return "0.000000".to_string();
    }
    let mag = v.abs().log10().floor() as i32;
    let decimals = (5 - mag).max(0) as usize;
    format!("{v:.decimals$}")
}

/// FNV-1a 64 over raw bytes, rendered as 16 hex digits. Used for the
/// config hash carried alongside report rows.
pub fn fnv1a_hex(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

// ----------------------------------------------------------------------
// CSV / JSON
// ----------------------------------------------------------------------

pub const CSV_HEADER: &str = "factor,setting,task,metric,value,seed,walltime_s";

fn check_field(s: &str) -> Result<()> {
    if s.contains(',') || s.contains('\n') || s.contains('"') {
        return Err(Error::invalid(format!(
            "report field {s:?} contains CSV structure characters"
        )));
    }
    Ok(())
}

/// Renders the report as CSV: pinned header, one line per row, values to
/// six significant digits, trailing newline. An empty report is the
/// header alone.
pub fn csv_string(report: &SweepReport) -> Result<String> {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in &report.rows {
        for field in [&row.factor, &row.setting, &row.task, &row.metric] {
            check_field(field)?;
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.factor,
            row.setting,
            row.task,
            row.metric,
            format_value(row.value),
            row.seed,
            format_value(row.walltime_s),
        ));
    }
    Ok(out)
}

/// JSON mirror of the rows plus config hash and artifact version, with
/// full-precision values, pretty-printed, trailing newline.
pub fn json_string(report: &SweepReport) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

pub fn write_report(report: &SweepReport, path: &Path, format: ReportFormat) -> Result<()> {
    let body = match format {
        ReportFormat::Csv => csv_string(report)?,
        ReportFormat::Json => json_string(report)?,
    };
    fs::write(path, body)?;
    Ok(())
}

pub fn read_json_report(path: &Path) -> Result<SweepReport> {
    let body = fs::read_to_string(path)?;
    Ok(serde_json::from_str(&body)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

// ----------------------------------------------------------------------
// SVG plotting
// ----------------------------------------------------------------------

/// Canvas and plot-rectangle geometry, fixed so the affine data-to-pixel
/// mapping is reproducible by tests.
pub const SVG_WIDTH: f64 = 640.0;
pub const SVG_HEIGHT: f64 = 400.0;
pub const PLOT_X0: f64 = 60.0;
pub const PLOT_Y0: f64 = 20.0;
pub const PLOT_W: f64 = 420.0;
pub const PLOT_H: f64 = 330.0;

const SERIES_COLORS: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// Maps `v` in `[lo, hi]` affinely onto `[out0, out0 + span]`; a collapsed
/// input range lands mid-span.
pub fn affine_map(v: f64, lo: f64, hi: f64, out0: f64, span: f64) -> f64 {
    if hi > lo {
        out0 + (v - lo) / (hi - lo) * span
    } else {
        out0 + span / 2.0
    }
}

fn fmt_coord(v: f64) -> String {
    format!("{v:.2}")
}

struct Series {
    task: String,
    metric: String,
    /// (x, mean value over seeds), sorted by x.
    points: Vec<(f64, f64)>,
}

fn collect_series(report: &SweepReport, x_factor: &str) -> Result<Vec<Series>> {
    let mut series: Vec<Series> = Vec::new();
    for row in report.rows.iter().filter(|r| r.factor == x_factor) {
        let x: f64 = row.setting.parse().map_err(|_| {
            Error::invalid(format!(
                "factor {x_factor:?} has non-numeric setting {:?}",
                row.setting
            ))
        })?;
        let idx = series
            .iter()
            .position(|s| s.task == row.task && s.metric == row.metric)
            .unwrap_or_else(|| {
                series.push(Series {
                    task: row.task.clone(),
                    metric: row.metric.clone(),
                    points: Vec::new(),
                });
                series.len() - 1
            });
        series[idx].points.push((x, row.value));
    }
    if series.is_empty() {
        return Err(Error::data(format!("no rows for factor {x_factor:?}")));
    }
    // Seeds collapse to their mean per x position.
    for s in &mut series {
        let mut merged: Vec<(f64, f64, usize)> = Vec::new();
        for &(x, v) in &s.points {
            match merged.iter_mut().find(|(mx, _, _)| *mx == x) {
                Some((_, sum, n)) => {
                    *sum += v;
                    *n += 1;
                }
                None => merged.push((x, v, 1)),
            }
        }
        merged.sort_by(|a, b| a.0.total_cmp(&b.0));
        s.points = merged.into_iter().map(|(x, sum, n)| (x, sum / n as f64)).collect();
    }
    Ok(series)
}

/// Renders one polyline per (task, metric) pair over the numeric settings
/// of `x_factor`, with linear axes, tick labels, and a legend. The output
/// is a self-contained SVG document.
pub fn svg_string(report: &SweepReport, x_factor: &str) -> Result<String> {
    let series = collect_series(report, x_factor)?;
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (xmin, xmax) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (ymin, ymax) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let px = |x: f64| affine_map(x, xmin, xmax, PLOT_X0, PLOT_W);
    let py = |y: f64| PLOT_Y0 + PLOT_H - (affine_map(y, ymin, ymax, 0.0, PLOT_H));

    let mut svg = String::new();
    svg.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">\n"
    ));
    svg.push_str(&format!(
        "  <rect x=\"{PLOT_X0}\" y=\"{PLOT_Y0}\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\" stroke=\"black\"/>\n"
    ));

    // Axis ticks: five per axis, spanning the data range.
    for i in 0..5 {
        let f = i as f64 / 4.0;
        let xv = if xmax > xmin { xmin + f * (xmax - xmin) } else { xmin };
        let yv = if ymax > ymin { ymin + f * (ymax - ymin) } else { ymin };
        let tx = px(xv);
        let ty = py(yv);
        let base = PLOT_Y0 + PLOT_H;
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{base}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt_coord(tx),
            fmt_coord(tx),
            base + 5.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{}</text>\n",
            fmt_coord(tx),
            base + 18.0,
            format_value(xv)
        ));
        svg.push_str(&format!(
            "  <line x1=\"{}\" y1=\"{}\" x2=\"{PLOT_X0}\" y2=\"{}\" stroke=\"black\"/>\n",
            PLOT_X0 - 5.0,
            fmt_coord(ty),
            fmt_coord(ty)
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            PLOT_X0 - 8.0,
            fmt_coord(ty + 4.0),
            format_value(yv)
        ));
    }
    svg.push_str(&format!(
        "  <text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{x_factor}</text>\n",
        PLOT_X0 + PLOT_W / 2.0,
        PLOT_Y0 + PLOT_H + 38.0
    ));

    for (si, s) in series.iter().enumerate() {
        let color = SERIES_COLORS[si % SERIES_COLORS.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt_coord(px(x)), fmt_coord(py(y))))
            .collect();
        svg.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        // Legend entry: swatch plus "task/metric".
        let ly = PLOT_Y0 + 12.0 + si as f64 * 18.0;
        let lx = PLOT_X0 + PLOT_W + 12.0;
        svg.push_str(&format!(
            "  <line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 18.0
        ));
        svg.push_str(&format!(
            "  <text x=\"{}\" y=\"{}\" font-size=\"11\">{}/{}</text>\n",
            lx + 24.0,
            ly + 4.0,
            s.task,
            s.metric
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn plot_curves(report: &SweepReport, x_factor: &str, path: &Path) -> Result<()> {
    let body = svg_string(report, x_factor)?;
    fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(
        factor: &str,
        setting: &str,
        task: &str,
        metric: &str,
        value: f64,
        seed: u64,
    ) -> ReportRow {
        ReportRow {
            factor: factor.to_string(),
            setting: setting.to_string(),
            task: task.to_string(),
            metric: metric.to_string(),
            value,
            seed,
            walltime_s: 0.0,
        }
    }

    #[test]
    fn six_significant_digit_examples() {
        assert_eq!(format_value(0.83333333), "0.833333");
        assert_eq!(format_value(0.5), "0.500000");
        assert_eq!(format_value(1.0), "1.00000");
        assert_eq!(format_value(12.3456789), "12.3457");
        assert_eq!(format_value(0.0123456789), "0.0123457");
        assert_eq!(format_value(123456.7), "123457");
        assert_eq!(format_value(0.0), "0.000000");
        assert_eq!(format_value(-0.83333333), "-0.833333");
    }

    #[test]
    fn csv_layout_and_empty_report() {
        let empty = SweepReport::new(Vec::new(), "abc");
        assert_eq!(csv_string(&empty).unwrap(), format!("{CSV_HEADER}\n"));

        let rep = SweepReport::new(
            vec![
                row("time-steps", "10", "classify", "top1", 0.83333333, 0),
                row("time-steps", "0", "classify", "top1", 0.5, 0),
            ],
            "abc",
        );
        let want = "factor,setting,task,metric,value,seed,walltime_s\n\
                    time-steps,0,classify,top1,0.500000,0,0.000000\n\
                    time-steps,10,classify,top1,0.833333,0,0.000000\n";
        assert_eq!(csv_string(&rep).unwrap(), want);

        let bad = SweepReport::new(vec![row("a,b", "0", "c", "m", 0.0, 0)], "h");
        assert!(csv_string(&bad).is_err(), "comma in field");
    }

    #[test]
    fn rows_sort_in_the_documented_order() {
        let mut rows = vec![
            row("time-steps", "500", "classify", "top1", 0.0, 1),
            row("time-steps", "50", "classify", "top1", 0.0, 0),
            row("prompt", "null", "classify", "top1", 0.0, 2),
            row("time-steps", "100", "classify", "top1", 0.0, 0),
            row("prompt", "aligned", "classify", "top1", 0.0, 0),
            row("time-steps", "500", "classify", "top1", 0.0, 0),
            row("time-steps", "0", "retrieve", "map", 0.0, 0),
            row("time-steps", "0", "classify", "top1", 0.0, 0),
        ];
        sort_rows(&mut rows);
        let key: Vec<(String, String, String, u64)> = rows
            .iter()
            .map(|r| (r.factor.clone(), r.setting.clone(), r.task.clone(), r.seed))
            .collect();
        // Factors bytewise; numeric settings numerically (0 < 50 < 100 < 500,
        // not dictionary order); then task, then seed.
        let want = vec![
            ("prompt", "aligned", "classify", 0),
            ("prompt", "null", "classify", 2),
            ("time-steps", "0", "classify", 0),
            ("time-steps", "0", "retrieve", 0),
            ("time-steps", "50", "classify", 0),
            ("time-steps", "100", "classify", 0),
            ("time-steps", "500", "classify", 0),
            ("time-steps", "500", "classify", 1),
        ];
        let want: Vec<(String, String, String, u64)> = want
            .into_iter()
            .map(|(a, b, c, d)| (a.to_string(), b.to_string(), c.to_string(), d))
            .collect();
        assert_eq!(key, want);
    }

    #[test]
    fn json_round_trips_rows_and_hash() {
        let rep = SweepReport::new(
            vec![
                row("stages", "up+mid", "classify", "top1", 0.9166666666666666, 0),
                row("stages", "down", "classify", "top1", 1.0 / 3.0, 1),
            ],
            fnv1a_hex(b"config body"),
        );
        let s = json_string(&rep).unwrap();
        assert!(s.ends_with('\n'));
        let back: SweepReport = serde_json::from_str(&s).unwrap();
        assert_eq!(back, rep, "full-precision values survive the mirror");
        assert_eq!(back.version, ARTIFACT_VERSION);
    }

    #[test]
    fn fnv_hash_matches_published_vectors() {
        assert_eq!(fnv1a_hex(b""), "cbf29ce484222325");
        assert_eq!(fnv1a_hex(b"a"), "af63dc4c8601ec8c");
        assert_ne!(fnv1a_hex(b"config a"), fnv1a_hex(b"config b"));
    }

    fn sample_report() -> SweepReport {
        SweepReport::new(
            vec![
                row("time-steps", "0", "classify", "top1", 0.40, 0),
                row("time-steps", "0", "classify", "top1", 0.50, 1),
                row("time-steps", "100", "classify", "top1", 0.90, 0),
                row("time-steps", "100", "classify", "top1", 1.00, 1),
                row("time-steps", "500", "classify", "top1", 0.60, 0),
                row("time-steps", "500", "classify", "top1", 0.70, 1),
                row("time-steps", "0", "retrieve", "map", 0.30, 0),
                row("time-steps", "100", "retrieve", "map", 0.80, 0),
                row("time-steps", "500", "retrieve", "map", 0.55, 0),
            ],
            "deadbeef",
        )
    }

    #[test]
    fn svg_has_declaration_polylines_legend_and_ticks() {
        let svg = svg_string(&sample_report(), "time-steps").unwrap();
        assert!(svg.starts_with("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg"));
        assert!(svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2, "one per (task, metric)");
        assert!(svg.contains("classify/top1") && svg.contains("retrieve/map"));
        // Tick labels cover the x range ends.
        assert!(svg.contains(">0.000000<") && svg.contains(">500.000<"));
        assert!(svg.matches("<text").count() >= 12);
    }

    #[test]
    fn svg_max_point_matches_the_affine_oracle() {
        let svg = svg_string(&sample_report(), "time-steps").unwrap();
        // Data ranges after per-x seed averaging: x in [0, 500]; values
        // {0.45, 0.95, 0.65} and {0.30, 0.80, 0.55} so y in [0.30, 0.95].
        // The classify maximum (x = 100, y = 0.95) maps affinely into the
        // plot rectangle; the oracle restates the mapping from scratch.
        let ex = PLOT_X0 + (100.0 - 0.0) / 500.0 * PLOT_W;
        let ey = PLOT_Y0 + PLOT_H - (0.95 - 0.30) / (0.95 - 0.30) * PLOT_H;
        let coord = format!("{ex:.2},{ey:.2}");
        assert!(
            svg.contains(&coord),
            "expected oracle coordinate {coord} in\n{svg}"
        );

        // Degenerate range: single x lands mid-plot.
        let one = SweepReport::new(
            vec![row("time-steps", "10", "classify", "top1", 0.5, 0)],
            "h",
        );
        let svg = svg_string(&one, "time-steps").unwrap();
        let cx = PLOT_X0 + PLOT_W / 2.0;
        let cy = PLOT_Y0 + PLOT_H / 2.0;
        assert!(svg.contains(&format!("{cx:.2},{cy:.2}")));
    }

    #[test]
    fn svg_rejects_non_numeric_factors() {
        let rep = SweepReport::new(
            vec![row("prompt", "aligned", "classify", "top1", 0.9, 0)],
            "h",
        );
        assert!(matches!(
            svg_string(&rep, "prompt"),
            Err(Error::InvalidArg(_))
        ));
        assert!(svg_string(&rep, "missing").is_err(), "no rows for factor");
    }

    #[test]
    fn report_files_round_trip_on_disk() {
        let dir = std::env::temp_dir().join(format!("vermouth-report-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let rep = sample_report();
        let csv_path = dir.join("r.csv");
        let json_path = dir.join("r.json");
        write_report(&rep, &csv_path, ReportFormat::Csv).unwrap();
        write_report(&rep, &json_path, ReportFormat::Json).unwrap();
        let csv = std::fs::read_to_string(&csv_path).unwrap();
        assert!(csv.starts_with(CSV_HEADER) && csv.ends_with('\n'));
        let back = read_json_report(&json_path).unwrap();
        assert_eq!(back, rep);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
