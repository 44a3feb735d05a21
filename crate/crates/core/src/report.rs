//! Figures as standalone SVG, each with a `<figure>.data.csv` sidecar that
//! holds exactly the plotted values (`series,x,y`).
//!
//! Every renderer is a pure function of the plotted data, so re-plotting a
//! sidecar reproduces the SVG byte for byte.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::evaluation::{BenchmarkRow, EpisodeLog, NUMERIC_METRICS};
use crate::experiment::{write_atomic, Workspace};

pub const DEFAULT_SMOOTHING_WINDOW: usize = 50;
pub const MEAN_LABEL: &str = "mean";

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

impl Series {
    pub fn new(label: impl Into<String>, points: Vec<(f64, f64)>) -> Result<Self> {
        let s = Series {
            label: label.into(),
            points,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.iter().any(|(x, y)| !x.is_finite() || !y.is_finite()) {
            return Err(Error::Validation(format!("series `{}` has non-finite values", self.label)));
        }
        if self.points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Validation(format!("series `{}` x values are not strictly increasing", self.label)));
        }
        Ok(())
    }
}

/// Centered rolling mean. Point `k` averages the `m = min(window, n)`
/// points nearest to it: a block starting at `k - (m - 1) / 2`, shifted
/// inwards where it would overrun either edge.
pub fn smooth(series: &Series, window: usize) -> Series {
    let n = series.points.len();
    let m = window.max(1).min(n);
    let points = (0..n)
        .map(|k| {
            let start = k.saturating_sub((m - 1) / 2).min(n - m);
            let sum: f64 = series.points[start..start + m].iter().map(|p| p.1).sum();
            (series.points[k].0, sum / m as f64)
        })
        .collect();
    Series {
        label: series.label.clone(),
        points,
    }
}

/// Pointwise mean of several series, truncated to the shortest; x values
/// come from the first.
pub fn mean_series(label: &str, series: &[Series]) -> Series {
    let n = series.iter().map(|s| s.points.len()).min().unwrap_or(0);
    let points = (0..n)
        .map(|i| {
            let mut sum = series[0].points[i].1;
            for s in &series[1..] {
                sum += s.points[i].1;
            }
            (series[0].points[i].0, sum / series.len() as f64)
        })
        .collect();
    Series {
        label: label.to_string(),
        points,
    }
}

pub fn emit_sidecar(series: &[Series]) -> String {
    let mut out = String::from("series,x,y\n");
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for s in series {
        for (x, y) in &s.points {
            w.write_record([s.label.as_str(), &x.to_string(), &y.to_string()])
                .expect("in-memory write");
        }
    }
    out.push_str(std::str::from_utf8(&w.into_inner().expect("in-memory flush")).expect("csv output is UTF-8"));
    out
}

/// Rows of one series must be contiguous.
pub fn parse_sidecar(text: &str) -> Result<Vec<Series>> {
    let (header, body) = text.split_once('\n').unwrap_or((text, ""));
    if header != "series,x,y" {
        return Err(Error::Validation("plot data header must be `series,x,y`".into()));
    }
    let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(body.as_bytes());
    let mut out: Vec<Series> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let bad = || Error::Validation(format!("malformed plot data row {}", i + 2));
        let rec = rec.map_err(|_| bad())?;
        if rec.len() != 3 {
            return Err(bad());
        }
        let x: f64 = rec[1].parse().map_err(|_| bad())?;
        let y: f64 = rec[2].parse().map_err(|_| bad())?;
        match out.last_mut() {
            Some(s) if s.label == rec[0] => s.points.push((x, y)),
            _ => {
                if out.iter().any(|s| s.label == rec[0]) {
                    return Err(Error::Validation(format!("series `{}` is not contiguous", &rec[0])));
                }
                out.push(Series {
                    label: rec[0].to_string(),
                    points: vec![(x, y)],
                });
            }
        }
    }
    out.iter().try_for_each(Series::validate)?;
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn tick_label(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if v.abs() >= 1e4 || v.abs() < 1e-3 {
        return format!("{v:.2e}");
    }
    let s = format!("{v:.3}");
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

const PANEL_W: f64 = 480.0;
const PANEL_H: f64 = 300.0;
const TITLE_H: f64 = 36.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 45.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Maps data coordinates into one panel's plotting box.
struct Frame {
    left: f64,
    top: f64,
    width: f64,
    height: f64,
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn new(ox: f64, oy: f64, x: (f64, f64), y: (f64, f64)) -> Self {
        Frame {
            left: ox + MARGIN_L,
            top: oy + MARGIN_T,
            width: PANEL_W - MARGIN_L - MARGIN_R,
            height: PANEL_H - MARGIN_T - MARGIN_B,
            x,
            y,
        }
    }

    fn px(&self, x: f64) -> f64 {
        self.left + (x - self.x.0) / (self.x.1 - self.x.0) * self.width
    }

    fn py(&self, y: f64) -> f64 {
        self.top + self.height - (y - self.y.0) / (self.y.1 - self.y.0) * self.height
    }

    fn axes(&self, out: &mut String, title: &str, x_label: &str, y_label: &str) {
        let (l, t, w, h) = (self.left, self.top, self.width, self.height);
        let _ = writeln!(
            out,
            r#"<rect class="frame" x="{l:.3}" y="{t:.3}" width="{w:.3}" height="{h:.3}" fill="none" stroke="dimgray"/>"#
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="14">{}</text>"#,
            l + w / 2.0,
            t - 10.0,
            escape(title)
        );
        for i in 0..5 {
            let f = i as f64 / 4.0;
            let xv = self.x.0 + f * (self.x.1 - self.x.0);
            let yv = self.y.0 + f * (self.y.1 - self.y.0);
            let (px, py) = (self.px(xv), self.py(yv));
            let _ = writeln!(
                out,
                r#"<line x1="{px:.3}" y1="{:.3}" x2="{px:.3}" y2="{:.3}" stroke="dimgray"/><text x="{px:.3}" y="{:.3}" text-anchor="middle" font-size="10">{}</text>"#,
                t + h,
                t + h + 4.0,
                t + h + 16.0,
                tick_label(xv)
            );
            let _ = writeln!(
                out,
                r#"<line x1="{:.3}" y1="{py:.3}" x2="{l:.3}" y2="{py:.3}" stroke="dimgray"/><text x="{:.3}" y="{:.3}" text-anchor="end" font-size="10">{}</text>"#,
                l - 4.0,
                l - 6.0,
                py + 3.0,
                tick_label(yv)
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.3}" y="{:.3}" text-anchor="middle" font-size="12">{}</text>"#,
            l + w / 2.0,
            t + h + 34.0,
            escape(x_label)
        );
        let (yx, yy) = (l - 52.0, t + h / 2.0);
        let _ = writeln!(
            out,
            r#"<text x="{yx:.3}" y="{yy:.3}" text-anchor="middle" font-size="12" transform="rotate(-90 {yx:.3} {yy:.3})">{}</text>"#,
            escape(y_label)
        );
    }
}

/// Expands a degenerate range so flat data still maps to the middle.
fn padded(lo: f64, hi: f64) -> (f64, f64) {
    if lo < hi {
        (lo, hi)
    } else {
        let pad = if lo == 0.0 { 1.0 } else { lo.abs() * 0.1 };
        (lo - pad, hi + pad)
    }
}

fn extent(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        (0.0, 1.0)
    } else {
        padded(lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

fn svg_open(width: f64, height: f64, title: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{:.3}" y="24" text-anchor="middle" font-size="16">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    out
}

/// Panels laid out on a grid `cols` wide. A series labelled
/// [`MEAN_LABEL`] is drawn bold and black.
pub fn render_panels(title: &str, panels: &[Panel], cols: usize) -> String {
    let cols = cols.max(1);
    let rows = panels.len().div_ceil(cols).max(1);
    let width = cols as f64 * PANEL_W;
    let mut out = svg_open(width, rows as f64 * PANEL_H + TITLE_H, title);
    for (i, panel) in panels.iter().enumerate() {
        let ox = (i % cols) as f64 * PANEL_W;
        let oy = TITLE_H + (i / cols) as f64 * PANEL_H;
        let all = || panel.series.iter().flat_map(|s| s.points.iter());
        let frame = Frame::new(ox, oy, extent(all().map(|p| p.0)), extent(all().map(|p| p.1)));
        let _ = writeln!(out, r#"<g class="panel" data-panel="{}">"#, escape(&panel.name));
        frame.axes(&mut out, &panel.name, &panel.x_label, &panel.y_label);
        for (j, s) in panel.series.iter().enumerate() {
            let (colour, stroke, class) = if s.label == MEAN_LABEL {
                ("#000000", 2.5, "series mean")
            } else {
                (PALETTE[j % PALETTE.len()], 1.0, "series")
            };
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.3},{:.3}", frame.px(x), frame.py(y)))
                .collect();
            let _ = writeln!(
                out,
                r#"<polyline class="{class}" data-series="{}" fill="none" stroke="{colour}" stroke-width="{stroke}" points="{}"/>"#,
                escape(&s.label),
                pts.join(" ")
            );
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    pub svg: String,
    pub data_csv: String,
}

#[derive(Debug, Clone)]
pub struct FigurePaths {
    pub svg: PathBuf,
    pub data_csv: PathBuf,
}

impl Figure {
    /// Writes `<stem>.svg` and `<stem>.data.csv` in `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<FigurePaths> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let paths = FigurePaths {
            svg: dir.join(format!("{stem}.svg")),
            data_csv: dir.join(format!("{stem}.data.csv")),
        };
        write_atomic(&paths.svg, self.svg.as_bytes())?;
        write_atomic(&paths.data_csv, self.data_csv.as_bytes())?;
        Ok(paths)
    }
}

pub fn training_curves_title(exp_id: u64) -> String {
    format!("Training curves, experiment {exp_id}")
}

/// One smoothed curve per seed followed by their mean.
pub fn render_training_curves(title: &str, series: &[Series]) -> String {
    let panel = Panel {
        name: "episode return".into(),
        x_label: "timestep".into(),
        y_label: "episode return".into(),
        series: series.to_vec(),
    };
    render_panels(title, &[panel], 1)
}

/// Builds the plotted series for an experiment's completed seed runs.
pub fn training_curve_series(ws: &Workspace, exp_id: u64, window: usize) -> Result<Vec<Series>> {
    let record = ws.load_experiment(exp_id)?;
    let seeds = ws.completed_seeds(&record)?;
    if seeds.is_empty() {
        return Err(Error::Validation(format!("experiment {exp_id} has no completed seed run")));
    }
    let mut series = Vec::with_capacity(seeds.len() + 1);
    for k in seeds {
        let log = ws.load_training_log(exp_id, k)?;
        let raw = Series::new(
            format!("seed_{k}"),
            log.rows.iter().map(|r| (r.timestep as f64, r.episode_return)).collect(),
        )?;
        series.push(smooth(&raw, window));
    }
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(Error::Validation(format!("experiment {exp_id} has no completed episode to plot")));
    }
    series.push(mean_series(MEAN_LABEL, &series));
    Ok(series)
}

pub fn emit_training_curves(ws: &Workspace, exp_id: u64, window: usize) -> Result<FigurePaths> {
    let series = training_curve_series(ws, exp_id, window)?;
    let figure = Figure {
        svg: render_training_curves(&training_curves_title(exp_id), &series),
        data_csv: emit_sidecar(&series),
    };
    figure.write(&ws.exp_dir(exp_id), "training_curves")
}

pub const EPISODE_PANELS: [&str; 6] = [
    "joint angles",
    "ee vs goal",
    "reward",
    "distance",
    "velocity",
    "acceleration",
];

/// Sidecar labels are `<panel>/<series>`.
pub fn episode_panels(log: &EpisodeLog) -> Vec<Panel> {
    let steps: Vec<f64> = log.rows.iter().map(|r| r.step as f64).collect();
    let line = |label: String, ys: Vec<f64>| Series {
        label,
        points: steps.iter().copied().zip(ys).collect(),
    };
    let col = |f: &dyn Fn(&crate::evaluation::EpisodeStep) -> f64| log.rows.iter().map(f).collect::<Vec<_>>();

    let joints = (0..log.n_joints())
        .map(|i| line(format!("q{}", i + 1), col(&|r| r.angles[i])))
        .collect();
    let mut ee_goal = Vec::new();
    for (i, axis) in ["x", "y", "z"].iter().enumerate() {
        ee_goal.push(line(format!("ee_{axis}"), col(&|r| r.ee[i])));
        ee_goal.push(line(format!("goal_{axis}"), col(&|r| r.goal[i])));
    }
    let single = |name: &str, ys| vec![line(name.to_string(), ys)];
    let groups: [(Vec<Series>, &str); 6] = [
        (joints, "rad"),
        (ee_goal, "m"),
        (single("reward", col(&|r| r.reward)), "reward"),
        (single("distance_m", col(&|r| r.distance_m)), "m"),
        (single("velocity", col(&|r| r.velocity)), "m/step"),
        (single("acceleration", col(&|r| r.acceleration)), "m/step^2"),
    ];
    groups
        .into_iter()
        .zip(EPISODE_PANELS)
        .map(|((series, unit), name)| Panel {
            name: name.to_string(),
            x_label: "step".into(),
            y_label: unit.to_string(),
            series,
        })
        .collect()
}

fn flatten_panels(panels: &[Panel]) -> Vec<Series> {
    panels
        .iter()
        .flat_map(|p| {
            p.series.iter().map(move |s| Series {
                label: format!("{}/{}", p.name, s.label),
                points: s.points.clone(),
            })
        })
        .collect()
}

/// Inverse of the `<panel>/<series>` labelling used by episode sidecars.
pub fn panels_from_sidecar(series: &[Series], x_label: &str, y_labels: &[(&str, &str)]) -> Result<Vec<Panel>> {
    let mut panels: Vec<Panel> = Vec::new();
    for s in series {
        let (panel, label) = s
            .label
            .split_once('/')
            .ok_or_else(|| Error::Validation(format!("series `{}` has no panel prefix", s.label)))?;
        let item = Series {
            label: label.to_string(),
            points: s.points.clone(),
        };
        match panels.last_mut() {
            Some(p) if p.name == panel => p.series.push(item),
            _ => panels.push(Panel {
                name: panel.to_string(),
                x_label: x_label.to_string(),
                y_label: y_labels
                    .iter()
                    .find(|(n, _)| *n == panel)
                    .map_or(String::new(), |(_, u)| u.to_string()),
                series: vec![item],
            }),
        }
    }
    Ok(panels)
}

pub fn emit_episode_panels(log: &EpisodeLog, title: &str) -> Figure {
    let panels = episode_panels(log);
    Figure {
        svg: render_panels(title, &panels, 2),
        data_csv: emit_sidecar(&flatten_panels(&panels)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bar {
    pub exp_id: u64,
    pub value: f64,
    pub whisker: Option<f64>,
}

pub fn is_ratio_metric(metric: &str) -> bool {
    metric.starts_with("success_ratio_")
}

pub fn render_bars(metric: &str, bars: &[Bar]) -> String {
    let title = format!("Benchmark: {metric}");
    let (ymin, ymax) = if is_ratio_metric(metric) {
        (0.0, 1.0)
    } else {
        let lo = bars.iter().map(|b| b.value - b.whisker.unwrap_or(0.0));
        let hi = bars.iter().map(|b| b.value + b.whisker.unwrap_or(0.0));
        extent(lo.chain(hi).chain([0.0]))
    };
    let n = bars.len().max(1) as f64;
    let mut out = svg_open(PANEL_W.max(80.0 * n + MARGIN_L + MARGIN_R), PANEL_H + TITLE_H, &title);
    let mut frame = Frame::new(0.0, TITLE_H, (0.0, n), (ymin, ymax));
    frame.width = 80.0 * n;
    let _ = writeln!(
        out,
        r#"<g class="panel" data-panel="{}" data-y-min="{ymin}" data-y-max="{ymax}">"#,
        escape(metric)
    );
    frame.axes(&mut out, metric, "experiment", metric);
    let base = frame.py(0.0f64.clamp(ymin, ymax));
    for (i, bar) in bars.iter().enumerate() {
        let x0 = frame.px(i as f64 + 0.2);
        let x1 = frame.px(i as f64 + 0.8);
        let top = frame.py(bar.value.clamp(ymin, ymax));
        let _ = writeln!(
            out,
            r#"<rect class="bar" data-exp-id="{}" x="{x0:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
            bar.exp_id,
            top.min(base),
            x1 - x0,
            (base - top).abs(),
            PALETTE[i % PALETTE.len()]
        );
        let xm = frame.px(i as f64 + 0.5);
        let _ = writeln!(
            out,
            r#"<text x="{xm:.3}" y="{:.3}" text-anchor="middle" font-size="11">exp {}</text>"#,
            frame.top + frame.height + 28.0,
            bar.exp_id
        );
        if let Some(w) = bar.whisker {
            let (y0, y1) = (
                frame.py((bar.value - w).clamp(ymin, ymax)),
                frame.py((bar.value + w).clamp(ymin, ymax)),
            );
            let _ = writeln!(
                out,
                r#"<line class="whisker" x1="{xm:.3}" y1="{y0:.3}" x2="{xm:.3}" y2="{y1:.3}" stroke="black"/>"#
            );
        }
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Sidecar series: `<metric>` with one point per bar, plus `std_return`
/// for the whiskers when present.
pub fn bars_sidecar(metric: &str, bars: &[Bar]) -> String {
    let mut series = vec![Series {
        label: metric.to_string(),
        points: bars.iter().map(|b| (b.exp_id as f64, b.value)).collect(),
    }];
    let whiskers: Vec<(f64, f64)> = bars
        .iter()
        .filter_map(|b| b.whisker.map(|w| (b.exp_id as f64, w)))
        .collect();
    if !whiskers.is_empty() {
        series.push(Series {
            label: "std_return".into(),
            points: whiskers,
        });
    }
    emit_sidecar(&series)
}

pub fn bars_from_sidecar(text: &str) -> Result<(String, Vec<Bar>)> {
    let series = parse_sidecar(text)?;
    let Some(main) = series.first() else {
        return Err(Error::Validation("empty benchmark plot data".into()));
    };
    let whisker = |x: f64| {
        series
            .get(1)
            .and_then(|s| s.points.iter().find(|p| p.0 == x))
            .map(|p| p.1)
    };
    let bars = main
        .points
        .iter()
        .map(|&(x, y)| Bar {
            exp_id: x as u64,
            value: y,
            whisker: whisker(x),
        })
        .collect();
    Ok((main.label.clone(), bars))
}

pub fn emit_benchmark_comparison(rows: &[BenchmarkRow], metric: &str, exp_ids: &[u64]) -> Result<Figure> {
    if !NUMERIC_METRICS.contains(&metric) {
        return Err(Error::Lookup {
            kind: "metric",
            name: metric.to_string(),
            valid: NUMERIC_METRICS.iter().map(|m| m.to_string()).collect(),
        });
    }
    if exp_ids.is_empty() {
        return Err(Error::Validation("no experiment ids given".into()));
    }
    let mut ids = exp_ids.to_vec();
    ids.sort_unstable();
    ids.dedup();
    let bars = ids
        .iter()
        .map(|&id| {
            let row = rows.iter().find(|r| r.exp_id == id).ok_or_else(|| Error::Lookup {
                kind: "exp_id",
                name: id.to_string(),
                valid: rows.iter().map(|r| r.exp_id.to_string()).collect(),
            })?;
            Ok(Bar {
                exp_id: id,
                value: row.metric(metric).expect("metric name checked above"),
                whisker: (metric == "mean_return").then_some(row.std_return),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Figure {
        svg: render_bars(metric, &bars),
        data_csv: bars_sidecar(metric, &bars),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agents::Hyperparams;
    use crate::evaluation::log_episode;
    use crate::neural::{Mlp, OutputActivation, PolicyNet};
    use crate::reach_env::registry_lookup;
    use proptest::prelude::*;

    fn series(ys: &[f64]) -> Series {
        Series::new("s", ys.iter().enumerate().map(|(i, y)| (i as f64, *y)).collect()).unwrap()
    }

    fn ys(s: &Series) -> Vec<f64> {
        s.points.iter().map(|p| p.1).collect()
    }

    #[test]
    fn smoothing_examples() {
        let s = series(&[3.0, -1.0, 4.0, 1.5]);
        assert_eq!(smooth(&s, 1), s);
        assert_eq!(ys(&smooth(&series(&[2.5; 7]), 3)), vec![2.5; 7]);
        assert_eq!(ys(&smooth(&series(&[0.0, 1.0]), 2)), vec![0.5, 0.5]);
        assert_eq!(ys(&smooth(&series(&[0.0, 3.0, 6.0, 9.0, 12.0]), 3)), vec![3.0, 3.0, 6.0, 9.0, 9.0]);
        assert_eq!(ys(&smooth(&series(&[1.0, 2.0]), 10)), vec![1.5, 1.5]);
        assert!(smooth(&series(&[]), 5).points.is_empty());
    }

    #[test]
    fn series_validation() {
        assert!(Series::new("a", vec![(0.0, 1.0), (0.0, 2.0)]).is_err());
        assert!(Series::new("a", vec![(0.0, f64::NAN)]).is_err());
    }

    proptest! {
        #[test]
        fn smooth_preserves_shape(v in proptest::collection::vec(-1e3f64..1e3, 1..60), w in 1usize..80) {
            let s = series(&v);
            let out = smooth(&s, w);
            prop_assert_eq!(out.points.len(), v.len());
            prop_assert!(out.points.iter().zip(&s.points).all(|(a, b)| a.0 == b.0));
            let full = smooth(&s, v.len());
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            prop_assert!(full.points.iter().all(|p| (p.1 - mean).abs() <= 1e-12 * (1.0 + mean.abs())));
        }

        #[test]
        fn sidecar_round_trip(v in proptest::collection::vec(-1e6f64..1e6, 0..30), k in 1usize..4) {
            let all: Vec<Series> = (0..k)
                .map(|i| Series { label: format!("seed_{i}"), points: v.iter().enumerate().map(|(j, y)| (j as f64 * 100.0, y * i as f64)).collect() })
                .filter(|s| !s.points.is_empty())
                .collect();
            let text = emit_sidecar(&all);
            let back = parse_sidecar(&text).unwrap();
            prop_assert_eq!(&back, &all);
            prop_assert_eq!(emit_sidecar(&back), text);
        }
    }

    fn count(svg: &str, tag: &str, class: &str) -> usize {
        let doc = roxmltree::Document::parse(svg).unwrap();
        assert!(doc.root_element().attribute("viewBox").is_some());
        doc.descendants()
            .filter(|n| n.has_tag_name(tag) && n.attribute("class").is_some_and(|c| c.split(' ').any(|w| w == class)))
            .count()
    }

    fn trained_ws(n_seeds: u64) -> (tempfile::TempDir, Workspace, u64) {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let rec = ws.create_experiment("random", "reach-v1", 1500, n_seeds, 0, Hyperparams::new()).unwrap();
        ws.run_experiment(rec.exp_id, 2, false).unwrap();
        (dir, ws, rec.exp_id)
    }

    #[test]
    fn training_curves_figure() {
        let (_d, ws, id) = trained_ws(3);
        let paths = emit_training_curves(&ws, id, 5).unwrap();
        let svg = std::fs::read_to_string(&paths.svg).unwrap();
        assert_eq!(count(&svg, "polyline", "series"), 4);
        assert_eq!(count(&svg, "polyline", "mean"), 1);
        let data = std::fs::read_to_string(&paths.data_csv).unwrap();
        let series = parse_sidecar(&data).unwrap();
        assert_eq!(render_training_curves(&training_curves_title(id), &series), svg);
        assert_eq!(emit_sidecar(&series), data);
        assert_eq!(paths.data_csv.file_name().unwrap(), "training_curves.data.csv");

        let raw = training_curve_series(&ws, id, 1).unwrap();
        let log = ws.load_training_log(id, 0).unwrap();
        assert_eq!(ys(&raw[0]), log.rows.iter().map(|r| r.episode_return).collect::<Vec<_>>());
    }

    #[test]
    fn single_seed_mean_is_the_seed() {
        let (_d, ws, id) = trained_ws(1);
        let s = training_curve_series(&ws, id, 3).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].points, s[1].points);
    }

    #[test]
    fn curves_need_a_completed_seed() {
        let dir = tempfile::tempdir().unwrap();
        let ws = Workspace::new(dir.path());
        let rec = ws.create_experiment("random", "reach-v1", 100, 1, 0, Hyperparams::new()).unwrap();
        assert!(emit_training_curves(&ws, rec.exp_id, 1).unwrap_err().is_validation());
    }

    #[test]
    fn episode_panel_inventory() {
        let env = registry_lookup("reach-v1").unwrap();
        let still = PolicyNet::new(Mlp::zeros(&[env.obs_dim(), env.action_dim()]), OutputActivation::Identity);
        let log = log_episode(&still, &env, 2).unwrap();
        let fig = emit_episode_panels(&log, "episode");
        let doc = roxmltree::Document::parse(&fig.svg).unwrap();
        let panels: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("panel"))
            .map(|n| n.attribute("data-panel").unwrap().to_string())
            .collect();
        assert_eq!(panels, EPISODE_PANELS.map(String::from).to_vec());

        for name in ["velocity", "acceleration"] {
            let g = doc.descendants().find(|n| n.attribute("data-panel") == Some(name)).unwrap();
            let line = g.descendants().find(|n| n.has_tag_name("polyline")).unwrap();
            let ys: Vec<&str> = line
                .attribute("points")
                .unwrap()
                .split(' ')
                .map(|p| p.split(',').nth(1).unwrap())
                .collect();
            assert!(ys.windows(2).all(|w| w[0] == w[1]));
        }
        let series = parse_sidecar(&fig.data_csv).unwrap();
        let dist = series.iter().find(|s| s.label == "distance/distance_m").unwrap();
        assert_eq!(dist.points.last().unwrap().1, log.rows.last().unwrap().distance_m);
        assert!(series.iter().filter(|s| s.label.starts_with("velocity/")).all(|s| s.points.iter().all(|p| p.1 == 0.0)));

        let panels = episode_panels(&log);
        let y_labels: Vec<(&str, &str)> = panels.iter().map(|p| (p.name.as_str(), p.y_label.as_str())).collect();
        let rebuilt = panels_from_sidecar(&series, "step", &y_labels).unwrap();
        assert_eq!(render_panels("episode", &rebuilt, 2), fig.svg);
    }

    fn row(exp_id: u64, mean: f64, std: f64) -> BenchmarkRow {
        BenchmarkRow {
            exp_id,
            env_id: "reach-v1".into(),
            algo: "ppo".into(),
            n_timesteps: 10,
            n_seeds: 1,
            n_eval_episodes: 1,
            mean_return: mean,
            std_return: std,
            success_ratio_5mm: 0.0,
            success_ratio_10mm: 0.1,
            success_ratio_20mm: 0.4,
            success_ratio_50mm: 0.9,
            mean_final_distance_mm: 12.0,
            train_walltime_s: 1.0,
            env_config_json: "{}".into(),
            hyperparams_json: "{}".into(),
        }
    }

    #[test]
    fn benchmark_bars() {
        let rows = vec![row(1, -3.0, 0.5), row(2, -1.0, 0.0), row(4, -2.0, 0.25)];
        let one = emit_benchmark_comparison(&rows, "mean_return", &[2]).unwrap();
        assert_eq!(count(&one.svg, "rect", "bar"), 1);
        assert_eq!(count(&one.svg, "line", "whisker"), 1);

        let fig = emit_benchmark_comparison(&rows, "mean_return", &[4, 1]).unwrap();
        let doc = roxmltree::Document::parse(&fig.svg).unwrap();
        let order: Vec<_> = doc
            .descendants()
            .filter(|n| n.attribute("class") == Some("bar"))
            .map(|n| n.attribute("data-exp-id").unwrap())
            .collect();
        assert_eq!(order, vec!["1", "4"]);
        let (metric, bars) = bars_from_sidecar(&fig.data_csv).unwrap();
        assert_eq!(render_bars(&metric, &bars), fig.svg);

        let ratio = emit_benchmark_comparison(&rows, "success_ratio_20mm", &[1, 2]).unwrap();
        let doc = roxmltree::Document::parse(&ratio.svg).unwrap();
        let g = doc.descendants().find(|n| n.attribute("class") == Some("panel")).unwrap();
        assert_eq!((g.attribute("data-y-min"), g.attribute("data-y-max")), (Some("0"), Some("1")));
        assert_eq!(count(&ratio.svg, "line", "whisker"), 0);

        match emit_benchmark_comparison(&rows, "mean_return", &[3]) {
            Err(Error::Lookup { valid, .. }) => assert_eq!(valid, vec!["1", "2", "4"]),
            other => panic!("{other:?}"),
        }
        assert!(matches!(emit_benchmark_comparison(&rows, "bogus", &[1]), Err(Error::Lookup { .. })));
    }
}
