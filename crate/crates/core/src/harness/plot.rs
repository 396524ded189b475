//! Minimal SVG line charts for summary reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::summary::SummaryReport;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 5] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"];

pub struct Series<'a> {
    pub label: &'a str,
    pub points: Vec<(f64, f64)>,
}

fn bounds(series: &[Series]) -> (f64, f64, f64, f64) {
    let pts = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return (0.0, 1.0, 0.0, 1.0);
    }
    let y0 = y0.min(0.0);
    let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, a + 0.5) };
    let (x0, x1) = pad(x0, x1);
    let (y0, y1) = pad(y0, y1);
    (x0, x1, y0, y1)
}

/// Renders `series` as polylines over shared axes.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let (x0, x1, y0, y1) = bounds(series);
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let sy = |y: f64| HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(title)).unwrap();
    let (left, right, top, bottom) = (MARGIN, WIDTH - MARGIN, MARGIN, HEIGHT - MARGIN);
    writeln!(
        s,
        r#"<path d="M{left},{top} L{left},{bottom} L{right},{bottom}" stroke="black" fill="none"/>"#
    )
    .unwrap();
    for k in 0..=4 {
        let f = k as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, sx(xv), bottom + 16.0, tick(xv)).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, left - 4.0, sy(yv) + 4.0, tick(yv)).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 12.0, escape(x_label)).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    )
    .unwrap();
    for (i, ser) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" ")).unwrap();
        let ly = top + 14.0 * i as f64;
        writeln!(
            s,
            r#"<text x="{:.1}" y="{ly:.1}" fill="{color}" text-anchor="end">{}</text>"#,
            right,
            escape(ser.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.trunc() {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes the standard figure set for a report into `dir`.
pub fn plot_report(report: &SummaryReport, dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let iv = &report.intervals;
    let series = |f: fn(&super::summary::IntervalStats) -> f64| iv.iter().map(|s| (s.start_s, f(s))).collect::<Vec<_>>();
    let charts = [
        (
            "throughput.svg",
            line_chart(
                "Offered load and goodput",
                "time (s)",
                "requests/s",
                &[
                    Series {
                        label: "offered",
                        points: series(|s| s.offered),
                    },
                    Series {
                        label: "goodput",
                        points: series(|s| s.goodput),
                    },
                ],
            ),
        ),
        (
            "latency.svg",
            line_chart(
                "Latency",
                "time (s)",
                "ms",
                &[
                    Series {
                        label: "p50",
                        points: series(|s| s.p50_ms),
                    },
                    Series {
                        label: "p99",
                        points: series(|s| s.p99_ms),
                    },
                    Series {
                        label: "max",
                        points: series(|s| s.max_ms),
                    },
                ],
            ),
        ),
        (
            "cold_starts.svg",
            line_chart(
                "Cold starts",
                "time (s)",
                "requests",
                &[Series {
                    label: "cold",
                    points: series(|s| s.cold_starts as f64),
                }],
            ),
        ),
        (
            "prediction_error.svg",
            line_chart(
                "Prediction error CDF",
                "actual - predicted (ms)",
                "fraction",
                &[
                    Series {
                        label: "infer duration",
                        points: report.infer_prediction.points.clone(),
                    },
                    Series {
                        label: "load duration",
                        points: report.load_prediction.points.clone(),
                    },
                    Series {
                        label: "infer completion",
                        points: report.completion.points.clone(),
                    },
                ],
            ),
        ),
    ];
    let mut out = Vec::new();
    for (name, svg) in charts {
        let path = dir.join(name);
        std::fs::write(&path, svg)?;
        out.push(path);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cdf_polyline_is_monotone() {
        let pts: Vec<(f64, f64)> = (1..=50).map(|i| (i as f64 * 0.1, i as f64 / 50.0)).collect();
        let svg = line_chart("t", "x", "y", &[Series { label: "a", points: pts }]);
        let poly = svg.lines().find(|l| l.starts_with("<polyline")).unwrap();
        let coords: Vec<(f64, f64)> = poly
            .split("points=\"")
            .nth(1)
            .unwrap()
            .trim_end_matches("\"/>")
            .split(' ')
            .map(|p| {
                let (x, y) = p.split_once(',').unwrap();
                (x.parse().unwrap(), y.parse().unwrap())
            })
            .collect();
        assert_eq!(coords.len(), 50);
        // SVG y grows downward, so a rising CDF has falling y.
        assert!(coords.windows(2).all(|w| w[0].0 <= w[1].0 && w[0].1 >= w[1].1));
    }

    #[test]
    fn empty_report_plots() {
        let dir = tempfile::tempdir().unwrap();
        let files = plot_report(&SummaryReport::default(), dir.path()).unwrap();
        assert_eq!(files.len(), 4);
        assert!(std::fs::read_to_string(&files[0]).unwrap().ends_with("</svg>\n"));
    }
}
