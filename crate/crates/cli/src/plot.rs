use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use log::warn;

use crate::experiment::{read_rows, ResultRow, RESULTS_CSV};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#66a61e", "#e6ab02"];

pub const VALUE_METRIC: &str = "normalized_value";
pub const REGRET_METRIC: &str = "bayesian_regret";

struct Series {
    label: String,
    points: Vec<(f64, f64)>,
}

struct Axes {
    x: (f64, f64),
    y: (f64, f64),
}

impl Axes {
    fn fit(series: &[Series]) -> Self {
        let pts = series.iter().flat_map(|s| s.points.iter());
        let (mut x, mut y) = ((f64::INFINITY, f64::NEG_INFINITY), (f64::INFINITY, f64::NEG_INFINITY));
        for &(px, py) in pts {
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
        let pad = |r: (f64, f64)| {
            if r.1 - r.0 < 1e-12 {
                (r.0 - 0.5, r.1 + 0.5)
            } else {
                r
            }
        };
        Self { x: pad(x), y: pad(y) }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x.0) / (self.x.1 - self.x.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y.0) / (self.y.1 - self.y.0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn svg(title: &str, x_label: &str, y_label: &str, series: &[Series], lines: bool) -> String {
    let axes = Axes::fit(series);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(s, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for (v, anchor) in [(axes.x.0, "start"), (axes.x.1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{}" text-anchor="{anchor}" font-size="11">{v:.3}</text>"#,
            axes.px(v),
            y0 + 16.0
        );
    }
    for v in [axes.y.0, axes.y.1] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end" font-size="11">{v:.3}</text>"#,
            x0 - 6.0,
            axes.py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text class="x-label" x="{}" y="{}" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        HEIGHT - 18.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text class="y-label" x="18" y="{}" text-anchor="middle" font-size="13" transform="rotate(-90 18 {})">{}</text>"#,
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label)
    );
    for (i, series) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let label = escape(&series.label);
        if lines {
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", axes.px(x), axes.py(y)))
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline data-series="{label}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
                pts.join(" ")
            );
        }
        for &(x, y) in &series.points {
            let _ = writeln!(
                s,
                r#"<circle data-series="{label}" cx="{:.2}" cy="{:.2}" r="3.5" fill="{color}"/>"#,
                axes.px(x),
                axes.py(y)
            );
        }
        let ly = MARGIN + 16.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{ly}" font-size="12" fill="{color}">{label}</text>"#,
            x1 + 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

fn labels_from(rows: &[ResultRow], f: impl Fn(&ResultRow) -> &str) -> Vec<String> {
    let mut seen = Vec::new();
    for r in rows {
        let v = f(r);
        if !seen.iter().any(|s: &String| s == v) {
            seen.push(v.to_string());
        }
    }
    seen
}

fn column_names(path: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.headers()?.iter().map(String::from).collect())
}

/// Normalized value against coverage per task, one line per method, and
/// normalized value against Bayesian regret per task. Returns the files
/// written; an empty or incomplete bundle gives warnings and fewer files.
pub fn render_plots(bundle: &Path) -> Result<Vec<PathBuf>> {
    let csv_path = bundle.join(RESULTS_CSV);
    if !csv_path.exists() {
        warn!("{} not found; nothing to plot", csv_path.display());
        return Ok(Vec::new());
    }
    let rows = read_rows(&csv_path)?;
    if rows.is_empty() {
        warn!("{} has no rows; nothing to plot", csv_path.display());
        return Ok(Vec::new());
    }
    let header = column_names(&csv_path)?;
    let coverage_col = header.iter().find(|h| *h == "coverage").cloned().unwrap_or_else(|| "coverage".into());
    let methods = labels_from(&rows, |r| &r.method);
    let tasks = labels_from(&rows, |r| &r.task);
    let metrics: BTreeSet<&str> = rows.iter().map(|r| r.metric.as_str()).collect();
    let plot_dir = bundle.join("plots");
    let mut written = Vec::new();

    let pick = |method: &str, task: &str, metric: &str| -> Vec<&ResultRow> {
        rows.iter()
            .filter(|r| r.method == method && r.task == task && r.metric == metric && r.mean.is_finite())
            .collect()
    };
    if !metrics.contains(VALUE_METRIC) {
        warn!("metric {VALUE_METRIC} missing; skipping all plots");
        return Ok(written);
    }
    for task in &tasks {
        let series: Vec<Series> = methods
            .iter()
            .map(|m| {
                let mut points: Vec<(f64, f64)> = pick(m, task, VALUE_METRIC).iter().map(|r| (r.coverage, r.mean)).collect();
                points.sort_by(|a, b| a.0.total_cmp(&b.0));
                Series {
                    label: m.clone(),
                    points,
                }
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        if series.is_empty() {
            warn!("no finite {VALUE_METRIC} for task {task}; plot skipped");
            continue;
        }
        let title = format!("{VALUE_METRIC} vs {coverage_col} ({task})");
        fs::create_dir_all(&plot_dir)?;
        let path = plot_dir.join(format!("{VALUE_METRIC}_vs_{coverage_col}_{task}.svg"));
        fs::write(&path, svg(&title, &coverage_col, VALUE_METRIC, &series, true))?;
        written.push(path);
    }

    if !metrics.contains(REGRET_METRIC) {
        warn!("metric {REGRET_METRIC} missing; scatter skipped");
        return Ok(written);
    }
    for task in &tasks {
        let series: Vec<Series> = methods
            .iter()
            .map(|m| {
                let regret = pick(m, task, REGRET_METRIC);
                let points = pick(m, task, VALUE_METRIC)
                    .iter()
                    .filter_map(|v| {
                        regret
                            .iter()
                            .find(|r| r.coverage == v.coverage)
                            .map(|r| (r.mean, v.mean))
                    })
                    .collect();
                Series {
                    label: m.clone(),
                    points,
                }
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        if series.is_empty() {
            warn!("no method has finite {REGRET_METRIC} for task {task}; scatter skipped");
            continue;
        }
        let title = format!("{VALUE_METRIC} vs {REGRET_METRIC} ({task})");
        fs::create_dir_all(&plot_dir)?;
        let path = plot_dir.join(format!("{VALUE_METRIC}_vs_{REGRET_METRIC}_{task}.svg"));
        fs::write(&path, svg(&title, REGRET_METRIC, VALUE_METRIC, &series, false))?;
        written.push(path);
    }
    Ok(written)
}
