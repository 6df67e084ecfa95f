//! Markdown tables and SVG line plots from results and metrics CSV files.
//! Output depends only on the input files and their order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use byol_vit::metrics::{MetricsHistory, CSV_HEADER};

use crate::error::CliError;
use crate::sweep::{self, ResultRow, RESULTS_HEADER};

pub const REPORT_FILE: &str = "report.md";
pub const NO_RUNS_BANNER: &str = "> **No runs.** No result or metrics files were given, so there is nothing to report.";

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: (f64, f64, f64, f64) = (60.0, 20.0, 40.0, 50.0); // left, right, top, bottom
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

/// A rendered line plot.
#[derive(Debug, Clone, PartialEq)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
    /// Tick labels for categorical x axes, indexed by x value.
    pub x_ticks: Option<Vec<String>>,
    /// (series, point) drawn with an emphasis ring.
    pub highlight: Option<(usize, usize)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn span(lo: f64, hi: f64) -> (f64, f64) {
    if (hi - lo).abs() < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

impl Plot {
    pub fn to_svg(&self) -> String {
        let all: Vec<(f64, f64)> = self.series.iter().flat_map(|s| s.points.iter().copied()).collect();
        let (x0, x1) = span(
            all.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
            all.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
        );
        let (y0, y1) = span(
            all.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
            all.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
        );
        let (ml, mr, mt, mb) = MARGIN;
        let pw = WIDTH - ml - mr;
        let ph = HEIGHT - mt - mb;
        let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
        let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        let _ = writeln!(
            s,
            r##"<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
        );
        for i in 0..=4 {
            let y = y0 + (y1 - y0) * i as f64 / 4.0;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#,
                ml - 6.0,
                sy(y) + 4.0,
                format_tick(y)
            );
        }
        match &self.x_ticks {
            Some(labels) => {
                for (i, l) in labels.iter().enumerate() {
                    let x = i as f64;
                    if x >= x0 && x <= x1 {
                        let _ = writeln!(
                            s,
                            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                            sx(x),
                            mt + ph + 16.0,
                            escape(l)
                        );
                    }
                }
            }
            None => {
                for i in 0..=4 {
                    let x = x0 + (x1 - x0) * i as f64 / 4.0;
                    let _ = writeln!(
                        s,
                        r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
                        sx(x),
                        mt + ph + 16.0,
                        format_tick(x)
                    );
                }
            }
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            ml + pw / 2.0,
            HEIGHT - 10.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">{1}</text>"#,
            mt + ph / 2.0,
            escape(&self.y_label)
        );
        for (k, series) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let path: Vec<String> = series.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                path.join(" ")
            );
            for &(x, y) in &series.points {
                let _ = writeln!(s, r#"<circle class="pt" cx="{:.2}" cy="{:.2}" r="2.5" fill="{color}"/>"#, sx(x), sy(y));
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
                ml + 8.0,
                mt + 14.0 + 14.0 * k as f64,
                escape(&series.name)
            );
        }
        if let Some((k, i)) = self.highlight {
            if let Some(&(x, y)) = self.series.get(k).and_then(|s| s.points.get(i)) {
                let _ = writeln!(
                    s,
                    r#"<circle class="best" cx="{:.2}" cy="{:.2}" r="6" fill="none" stroke="black" stroke-width="2"/>"#,
                    sx(x),
                    sy(y)
                );
            }
        }
        s.push_str("</svg>\n");
        s
    }
}

fn format_tick(v: f64) -> String {
    if v.abs() >= 100.0 || v == v.round() {
        format!("{v:.0}")
    } else {
        format!("{v:.3}")
    }
}

/// Index of the row with the highest mean top-1 (first on ties).
pub fn argmax(rows: &[ResultRow]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in rows.iter().enumerate() {
        if let Some(v) = r.mean_top1 {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Groups `a=1;b=2` axes into series over their last component.
fn results_plot(title: &str, rows: &[ResultRow], best: Option<usize>) -> Plot {
    let parsed: Vec<(String, String, String)> = rows
        .iter()
        .map(|r| {
            let (group, last) = match r.axis.rsplit_once(';') {
                Some((g, l)) => (g.to_string(), l.to_string()),
                None => (String::new(), r.axis.clone()),
            };
            let (name, value) = last.split_once('=').map_or((String::new(), last.clone()), |(n, v)| (n.into(), v.into()));
            (group, name, value)
        })
        .collect();
    let numeric = parsed.iter().all(|(_, _, v)| v.parse::<f64>().is_ok());
    let mut ticks: Vec<String> = Vec::new();
    if !numeric {
        for (_, _, v) in &parsed {
            if !ticks.contains(v) {
                ticks.push(v.clone());
            }
        }
    }
    let mut groups: Vec<Series> = Vec::new();
    let mut highlight = None;
    for (i, ((group, _, value), row)) in parsed.iter().zip(rows).enumerate() {
        let Some(y) = row.mean_top1 else { continue };
        let x = if numeric { value.parse().unwrap() } else { ticks.iter().position(|t| t == value).unwrap() as f64 };
        let k = match groups.iter().position(|s| &s.name == group) {
            Some(k) => k,
            None => {
                groups.push(Series {
                    name: group.clone(),
                    points: Vec::new(),
                });
                groups.len() - 1
            }
        };
        if best == Some(i) {
            highlight = Some((k, groups[k].points.len()));
        }
        groups[k].points.push((x, 100.0 * y));
    }
    Plot {
        title: title.to_string(),
        x_label: parsed.first().map(|p| p.1.clone()).unwrap_or_default(),
        y_label: "mean top-1 (%)".into(),
        series: groups,
        x_ticks: (!numeric).then_some(ticks),
        highlight,
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or("–".into(), |v| format!("{:.2}", 100.0 * v))
}

fn results_section(md: &mut String, title: &str, rows: &[ResultRow]) -> Plot {
    let best = argmax(rows);
    let _ = writeln!(md, "## {title}\n");
    if rows.is_empty() {
        let _ = writeln!(md, "{NO_RUNS_BANNER}\n");
    } else {
        let _ = writeln!(md, "| axis | mean top-1 (%) | mean loss | seeds | per-seed top-1 | runtime (s) | status |");
        let _ = writeln!(md, "|---|---:|---:|---|---|---:|---|");
        for (i, r) in rows.iter().enumerate() {
            let loss = r.mean_loss.map_or("–".into(), |v| format!("{v:.4}"));
            let (axis, top1) = if best == Some(i) {
                (format!("**{}**", r.axis), format!("**{}**", pct(r.mean_top1)))
            } else {
                (r.axis.clone(), pct(r.mean_top1))
            };
            let _ = writeln!(
                md,
                "| {axis} | {top1} | {loss} | {} | {} | {:.1} | {} |",
                r.seeds, r.seed_top1, r.runtime_seconds, r.status
            );
        }
        if let Some(b) = best {
            let _ = writeln!(md, "\nBest cell: **{}** at {}% mean top-1.", rows[b].axis, pct(rows[b].mean_top1));
        }
        let _ = writeln!(md);
    }
    results_plot(title, rows, best)
}

/// Accuracy and loss curves of one metrics file, one series per split.
pub fn metrics_plots(title: &str, history: &MetricsHistory) -> (Plot, Plot) {
    let mut splits: Vec<&str> = Vec::new();
    for r in &history.records {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    let series = |f: &dyn Fn(&byol_vit::metrics::MetricsRecord) -> Option<f64>| -> Vec<Series> {
        splits
            .iter()
            .map(|&sp| Series {
                name: sp.to_string(),
                points: history.split(sp).filter_map(|r| f(r).map(|y| (r.epoch as f64, y))).collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect()
    };
    let plot = |suffix: &str, y_label: &str, series| Plot {
        title: format!("{title} ({suffix})"),
        x_label: "epoch".into(),
        y_label: y_label.into(),
        series,
        x_ticks: None,
        highlight: None,
    };
    (
        plot("top-1", "top-1 (%)", series(&|r| r.top1.map(|t| 100.0 * t))),
        plot("loss", "loss", series(&|r| Some(r.loss))),
    )
}

fn metrics_section(md: &mut String, title: &str, history: &MetricsHistory) {
    let _ = writeln!(md, "## {title}\n");
    let _ = writeln!(md, "| split | rows | last top-1 (%) | best top-1 (%) | last loss |");
    let _ = writeln!(md, "|---|---:|---:|---:|---:|");
    let mut splits: Vec<&str> = Vec::new();
    for r in &history.records {
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    for sp in splits {
        let rows: Vec<_> = history.split(sp).collect();
        let last = rows.last().expect("split has rows");
        let best = rows.iter().filter_map(|r| r.top1).fold(None, |b: Option<f64>, v| Some(b.map_or(v, |b| b.max(v))));
        let _ = writeln!(md, "| {sp} | {} | {} | {} | {:.4} |", rows.len(), pct(last.top1), pct(best), last.loss);
    }
    let _ = writeln!(md);
}

enum Input {
    Results(Vec<ResultRow>),
    Metrics(MetricsHistory),
}

fn read_input(path: &Path) -> Result<Input, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or("").trim();
    if header == CSV_HEADER {
        let h = MetricsHistory::read_csv(text.as_bytes()).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(Input::Metrics(h))
    } else if header == RESULTS_HEADER.join(",") {
        Ok(Input::Results(sweep::read_results(path)?))
    } else {
        Err(CliError::Config(format!(
            "{}: unrecognized header `{header}`; expected a results table or a metrics file",
            path.display()
        )))
    }
}

fn label(path: &Path) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match path.parent().and_then(Path::file_name) {
        Some(parent) => format!("{}/{stem}", parent.to_string_lossy()),
        None => stem,
    }
}

/// Writes `report.md` and one SVG per plot into `out`; returns the written files.
pub fn write_report(inputs: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let parsed: Vec<(String, Input)> = inputs
        .iter()
        .map(|p| Ok((label(p), read_input(p)?)))
        .collect::<Result<_, CliError>>()?;
    std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    let mut md = String::from("# Experiment report\n\n");
    let mut svgs: BTreeMap<String, String> = BTreeMap::new();
    if parsed.is_empty() {
        let _ = writeln!(md, "{NO_RUNS_BANNER}");
    }
    for (i, (title, input)) in parsed.iter().enumerate() {
        match input {
            Input::Results(rows) => {
                let plot = results_section(&mut md, title, rows);
                if !plot.series.is_empty() {
                    let name = format!("fig{:02}-results.svg", i + 1);
                    let _ = writeln!(md, "![{title}]({name})\n");
                    svgs.insert(name, plot.to_svg());
                }
            }
            Input::Metrics(history) => {
                metrics_section(&mut md, title, history);
                let (acc, loss) = metrics_plots(title, history);
                for (suffix, plot) in [("top1", acc), ("loss", loss)] {
                    if plot.series.is_empty() {
                        continue;
                    }
                    let name = format!("fig{:02}-{suffix}.svg", i + 1);
                    let _ = writeln!(md, "![{title} {suffix}]({name})\n");
                    svgs.insert(name, plot.to_svg());
                }
            }
        }
    }
    let mut written = Vec::new();
    let path = out.join(REPORT_FILE);
    std::fs::write(&path, md).map_err(|e| CliError::io(&path, e))?;
    written.push(path);
    for (name, svg) in svgs {
        let path = out.join(name);
        std::fs::write(&path, svg).map_err(|e| CliError::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(axis: &str, top1: Option<f64>) -> ResultRow {
        ResultRow {
            config_id: "x".into(),
            sweep: "s".into(),
            axis: axis.into(),
            status: "ok".into(),
            mean_top1: top1,
            mean_loss: None,
            seeds: String::new(),
            seed_top1: String::new(),
            seed_loss: String::new(),
            runtime_seconds: 0.0,
        }
    }

    #[test]
    fn argmax_skips_failed_rows_and_keeps_the_first_tie() {
        let rows = [row("a=1", None), row("a=2", Some(0.5)), row("a=3", Some(0.7)), row("a=4", Some(0.7))];
        assert_eq!(argmax(&rows), Some(2));
        assert_eq!(argmax(&[row("a=1", None)]), None);
    }

    #[test]
    fn grid_axes_become_one_series_per_tap() {
        let rows = [
            row("tap=layer1;patch=1", Some(0.4)),
            row("tap=layer1;patch=2", Some(0.5)),
            row("tap=layer2;patch=1", Some(0.8)),
        ];
        let p = results_plot("t", &rows, argmax(&rows));
        assert_eq!(p.series.len(), 2);
        assert_eq!(p.series[0].points, [(1.0, 40.0), (2.0, 50.0)]);
        assert_eq!(p.highlight, Some((1, 0)));
        assert!(p.x_ticks.is_none());
    }

    #[test]
    fn categorical_axes_get_tick_labels() {
        let rows = [row("aug=baseline", Some(0.4)), row("aug=data_aug_5", Some(0.5))];
        let p = results_plot("t", &rows, None);
        assert_eq!(p.x_ticks.as_deref(), Some(&["baseline".to_string(), "data_aug_5".to_string()][..]));
        assert_eq!(p.series[0].points, [(0.0, 40.0), (1.0, 50.0)]);
    }
}
