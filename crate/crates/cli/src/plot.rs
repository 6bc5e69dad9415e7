//! Self-contained SVG emission: an accuracy-vs-n curve per mode
//! (log-scale n, seed-averaged with a min/max band) and one loss-trace
//! plot per run with vertical phase-boundary markers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use conceptree::train::TrainReport;
use conceptree::{Error, Result};

use crate::sweep::{write_atomic, ResultRow};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_LEFT: f64 = 64.0;
const MARGIN_RIGHT: f64 = 24.0;
const MARGIN_TOP: f64 = 28.0;
const MARGIN_BOTTOM: f64 = 52.0;

const MODE_COLORS: &[(&str, &str)] = &[("flat", "#d62728"), ("guided", "#1f77b4")];

fn color_for(mode: &str) -> &'static str {
    MODE_COLORS
        .iter()
        .find(|(m, _)| *m == mode)
        .map(|(_, c)| *c)
        .unwrap_or("#2ca02c")
}

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn x(&self, v: f64) -> f64 {
        let span = (self.x_max - self.x_min).max(f64::MIN_POSITIVE);
        MARGIN_LEFT + (v - self.x_min) / span * (WIDTH - MARGIN_LEFT - MARGIN_RIGHT)
    }

    fn y(&self, v: f64) -> f64 {
        let span = (self.y_max - self.y_min).max(f64::MIN_POSITIVE);
        HEIGHT - MARGIN_BOTTOM - (v - self.y_min) / span * (HEIGHT - MARGIN_TOP - MARGIN_BOTTOM)
    }
}

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"18\" text-anchor=\"middle\" font-size=\"14\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes(out: &mut String, x_label: &str, y_label: &str) {
    let x0 = MARGIN_LEFT;
    let x1 = WIDTH - MARGIN_RIGHT;
    let y0 = HEIGHT - MARGIN_BOTTOM;
    let y1 = MARGIN_TOP;
    let _ = writeln!(
        out,
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
    );
}

fn polyline(points: &[(f64, f64)], color: &str, dash: Option<&str>) -> String {
    let coords: Vec<String> = points.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let dash = dash.map_or(String::new(), |d| format!(" stroke-dasharray=\"{d}\""));
    format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"{dash}/>\n",
        coords.join(" ")
    )
}

/// Accuracy-vs-n curves: per mode, seed-mean line over log-scaled n
/// with a min/max band across seeds.
pub fn accuracy_plot(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Domain("empty result table".into()));
    }
    // mode -> n -> accuracies over seeds
    let mut by_mode: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for row in rows {
        by_mode
            .entry(&row.mode)
            .or_default()
            .entry(row.n)
            .or_default()
            .push(row.test_accuracy);
    }
    let ns: Vec<usize> = {
        let mut all: Vec<usize> = rows.iter().map(|r| r.n).collect();
        all.sort_unstable();
        all.dedup();
        all
    };
    let accs: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
    let y_lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
    let y_hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let pad = ((y_hi - y_lo) * 0.1).max(0.01);
    let frame = Frame {
        x_min: (*ns.first().unwrap() as f64).ln(),
        x_max: (*ns.last().unwrap() as f64).ln().max((*ns.first().unwrap() as f64).ln() + 1e-9),
        y_min: (y_lo - pad).max(0.0),
        y_max: (y_hi + pad).min(1.0),
    };

    let mut out = svg_open("Test accuracy vs. training examples");
    axes(&mut out, "training examples n (log scale)", "test accuracy");
    for &n in &ns {
        let x = frame.x((n as f64).ln());
        let y0 = HEIGHT - MARGIN_BOTTOM;
        let _ = writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{n}</text>",
            y0 + 5.0,
            y0 + 20.0,
        );
    }
    for tick in 0..=4 {
        let v = frame.y_min + (frame.y_max - frame.y_min) * tick as f64 / 4.0;
        let y = frame.y(v);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{MARGIN_LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            y + 4.0,
        );
    }

    let mut legend_y = MARGIN_TOP + 14.0;
    for (mode, by_n) in &by_mode {
        let color = color_for(mode);
        let mut mean_points = Vec::new();
        let mut band_upper = Vec::new();
        let mut band_lower = Vec::new();
        for (&n, accs) in by_n {
            let x = frame.x((n as f64).ln());
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            let lo = accs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = accs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            mean_points.push((x, frame.y(mean)));
            band_upper.push((x, frame.y(hi)));
            band_lower.push((x, frame.y(lo)));
        }
        band_lower.reverse();
        let band: Vec<String> = band_upper
            .iter()
            .chain(&band_lower)
            .map(|(x, y)| format!("{x:.2},{y:.2}"))
            .collect();
        if band.len() > 2 {
            let _ = writeln!(
                out,
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>",
                band.join(" ")
            );
        }
        out.push_str(&polyline(&mean_points, color, None));
        for (x, y) in &mean_points {
            let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"2.5\" fill=\"{color}\"/>");
        }
        let _ = writeln!(
            out,
            "<rect x=\"{}\" y=\"{:.2}\" width=\"14\" height=\"4\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{:.2}\">{mode}</text>",
            WIDTH - MARGIN_RIGHT - 110.0,
            legend_y - 3.0,
            WIDTH - MARGIN_RIGHT - 92.0,
            legend_y + 3.0,
        );
        legend_y += 16.0;
    }
    out.push_str("</svg>\n");
    Ok(out)
}

/// Per-run loss trace with a dashed vertical marker at each phase
/// boundary.
pub fn loss_trace_plot(report: &TrainReport) -> Result<String> {
    if report.loss_trace.is_empty() {
        return Err(Error::Domain("empty loss trace".into()));
    }
    let losses: Vec<f64> = report.loss_trace.iter().map(|&(_, l)| l).collect();
    let y_lo = losses.iter().copied().fold(f64::INFINITY, f64::min);
    let y_hi = losses.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let frame = Frame {
        x_min: 0.0,
        x_max: (report.loss_trace.len() - 1).max(1) as f64,
        y_min: y_lo,
        y_max: (y_hi).max(y_lo + 1e-9),
    };
    let title = format!(
        "Loss trace: {} n={} seed={}",
        report.mode, report.n, report.seed
    );
    let mut out = svg_open(&title);
    axes(&mut out, "step", "batch loss");
    for tick in 0..=4 {
        let step = frame.x_max * tick as f64 / 4.0;
        let x = frame.x(step);
        let y0 = HEIGHT - MARGIN_BOTTOM;
        let _ = writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{y0}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>\n\
             <text x=\"{x:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>",
            y0 + 5.0,
            y0 + 20.0,
            step as usize,
        );
        let v = frame.y_min + (frame.y_max - frame.y_min) * tick as f64 / 4.0;
        let y = frame.y(v);
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{MARGIN_LEFT}\" y2=\"{y:.2}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{:.2}\" text-anchor=\"end\">{v:.2}</text>",
            MARGIN_LEFT - 5.0,
            MARGIN_LEFT - 8.0,
            y + 4.0,
        );
    }
    for &boundary in &report.phase_boundaries {
        let x = frame.x(boundary as f64);
        let _ = writeln!(
            out,
            "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"#555\" \
             stroke-dasharray=\"4 3\"/>\n\
             <text x=\"{:.2}\" y=\"{}\" fill=\"#555\">phase</text>",
            HEIGHT - MARGIN_BOTTOM,
            MARGIN_TOP,
            x + 3.0,
            MARGIN_TOP + 12.0,
        );
    }
    let points: Vec<(f64, f64)> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| (frame.x(i as f64), frame.y(l)))
        .collect();
    out.push_str(&polyline(&points, color_for(&report.mode), None));
    out.push_str("</svg>\n");
    Ok(out)
}

/// Renders the accuracy curve plus one loss-trace SVG per resolvable
/// report. An empty table emits nothing and warns.
pub fn emit_plots(rows: &[ResultRow], output_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        eprintln!("warning: empty result table, no plots emitted");
        return Ok(Vec::new());
    }
    fs::create_dir_all(output_dir)?;
    let mut written = Vec::new();
    let accuracy_path = output_dir.join("accuracy_vs_n.svg");
    write_atomic(&accuracy_path, accuracy_plot(rows)?.as_bytes())?;
    written.push(accuracy_path);
    for row in rows {
        let text = fs::read_to_string(&row.report_path).map_err(|e| {
            Error::Config(format!("{}: {e}", row.report_path.display()))
        })?;
        let report: TrainReport = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", row.report_path.display())))?;
        let path = output_dir.join(format!(
            "loss_trace-{}-n{}-s{}.svg",
            report.mode, report.n, report.seed
        ));
        write_atomic(&path, loss_trace_plot(&report)?.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(mode: &str, n: usize, seed: u64, acc: f64) -> ResultRow {
        ResultRow {
            mode: mode.to_string(),
            n,
            seed,
            test_accuracy: acc,
            report_path: PathBuf::from(format!("report-{mode}-n{n}-s{seed}.json")),
        }
    }

    #[test]
    fn single_row_renders_one_point() {
        let svg = accuracy_plot(&[row("flat", 500, 0, 0.9)]).unwrap();
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.contains(">500<"), "n tick label missing");
    }

    #[test]
    fn axes_carry_the_configured_n_values() {
        let rows: Vec<ResultRow> = [500, 2000, 8000]
            .iter()
            .flat_map(|&n| (0..2).map(move |s| row("guided", n, s, 0.8 + 0.01 * s as f64)))
            .collect();
        let svg = accuracy_plot(&rows).unwrap();
        for n in [500, 2000, 8000] {
            assert!(svg.contains(&format!(">{n}<")), "missing tick for n={n}");
        }
        // two seeds per n -> a min/max band polygon
        assert!(svg.contains("<polygon"));
    }

    #[test]
    fn phase_boundaries_become_vertical_markers() {
        let report = TrainReport {
            mode: "guided".into(),
            n: 100,
            seed: 0,
            loss_trace: (0..600).map(|i| (i, 20.0 - 0.01 * i as f64)).collect(),
            phase_boundaries: vec![200, 400],
            active_loss_trace: (0..600).map(|i| 20.0 - 0.01 * i as f64).collect(),
            test_accuracy: Some(0.5),
            config_fingerprint: String::new(),
        };
        let svg = loss_trace_plot(&report).unwrap();
        assert_eq!(svg.matches("stroke-dasharray=\"4 3\"").count(), 2);
    }

    #[test]
    fn empty_table_emits_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_plots(&[], dir.path()).unwrap().is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }
}
