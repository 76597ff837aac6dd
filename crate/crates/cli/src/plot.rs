//! SVG charts: training curves, AP against window length, radar attribute
//! histograms and gate-vs-RCS scatter.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::Deserialize;

use physfusion::ablation::VariantResult;
use physfusion::scene_sim::SceneSample;
use physfusion::{Error, Result};

#[derive(Clone, Debug, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub lr: f64,
    pub cls: f64,
    #[serde(rename = "box")]
    pub boxes: f64,
    pub temp: f64,
    pub total: f64,
}

type Series = (String, Vec<(f64, f64)>);

const SIZE: (u32, u32) = (800, 500);

fn draw_err(e: impl std::fmt::Display) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        (x0, x1, y0, y1) = (x0.min(x), x1.max(x), y0.min(y), y1.max(y));
    }
    if x0 > x1 {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |a: f64, b: f64| if b > a { (a, b) } else { (a - 0.5, b + 0.5) };
    (pad(x0, x1), pad(y0, y1))
}

fn color(i: usize) -> RGBColor {
    let (r, g, b) = Palette99::pick(i).to_rgba().rgb();
    RGBColor(r, g, b)
}

fn line_chart(path: &Path, title: &str, x_desc: &str, y_desc: &str, series: &[Series], markers: bool) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let ((x0, x1), (y0, y1)) = bounds(series);
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1 + 0.05 * (y1 - y0))
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc(x_desc).y_desc(y_desc).draw().map_err(draw_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), c.stroke_width(2)))
            .map_err(draw_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], c.stroke_width(2)));
        if markers {
            chart.draw_series(pts.iter().map(|&p| Circle::new(p, 4, c.filled()))).map_err(draw_err)?;
        }
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)
}

/// Total loss per run (log10), loss terms of the first run, learning rate.
pub fn training_curves(runs: &[(String, Vec<LogEntry>)], out: &Path) -> Result<Vec<PathBuf>> {
    let totals: Vec<Series> = runs
        .iter()
        .map(|(name, log)| (name.clone(), log.iter().map(|e| (e.step as f64, e.total.max(1e-12).log10())).collect()))
        .collect();
    let total_path = out.join("loss_total.svg");
    line_chart(&total_path, "Total training loss", "step", "log10 loss", &totals, false)?;

    let (_, first) = &runs[0];
    let term = |name: &str, f: fn(&LogEntry) -> f64| -> Series {
        (name.into(), first.iter().map(|e| (e.step as f64, f(e))).collect())
    };
    let terms = [term("cls", |e| e.cls), term("box", |e| e.boxes), term("temp", |e| e.temp)];
    let terms_path = out.join("loss_terms.svg");
    line_chart(&terms_path, "Loss terms", "step", "loss", &terms, false)?;

    let lr: Vec<Series> =
        runs.iter().map(|(name, log)| (name.clone(), log.iter().map(|e| (e.step as f64, e.lr)).collect())).collect();
    let lr_path = out.join("learning_rate.svg");
    line_chart(&lr_path, "Learning rate", "step", "lr", &lr, false)?;
    Ok(vec![total_path, terms_path, lr_path])
}

/// Variants named `<family>_t<T>` are joined into one curve per family.
pub fn ap_vs_history(results: &[VariantResult], out: &Path) -> Result<PathBuf> {
    let mut acc: BTreeMap<String, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in results {
        let family = match r.name.rsplit_once("_t") {
            Some((head, tail)) if tail.parse::<usize>().is_ok() => head.to_string(),
            _ => r.name.clone(),
        };
        let slot = acc.entry(family).or_default().entry(r.history).or_insert((0.0, 0));
        slot.0 += r.map50;
        slot.1 += 1;
    }
    let series: Vec<Series> = acc
        .into_iter()
        .map(|(family, by_t)| (family, by_t.into_iter().map(|(t, (s, n))| (t as f64, s / n as f64)).collect()))
        .collect();
    let path = out.join("ap_vs_history.svg");
    line_chart(&path, "mAP50 against window length", "history T", "mean mAP50 (%)", &series, true)?;
    Ok(path)
}

/// Frequency polygon of `values` over `bins` equal bins, as fractions.
fn histogram(values: &[f64], lo: f64, hi: f64, bins: usize) -> Vec<(f64, f64)> {
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / width).floor().max(0.0) as usize).min(bins - 1);
        counts[b] += 1;
    }
    let n = values.len().max(1) as f64;
    counts.iter().enumerate().map(|(i, &c)| (lo + (i as f64 + 0.5) * width, c as f64 / n)).collect()
}

fn two_histograms(path: &Path, title: &str, x_desc: &str, target: &[f64], clutter: &[f64]) -> Result<()> {
    let all = target.iter().chain(clutter).copied().filter(|v| v.is_finite());
    let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let hi = if hi > lo { hi } else { lo + 1.0 };
    let series = [
        (format!("target ({})", target.len()), histogram(target, lo, hi, 40)),
        (format!("clutter ({})", clutter.len()), histogram(clutter, lo, hi, 40)),
    ];
    line_chart(path, title, x_desc, "fraction of points", &series, false)
}

/// Histograms of log10 RCS and of range, split into target and clutter points.
pub fn radar_statistics(samples: &[SceneSample], target_rcs: &[f64], clutter_rcs: &[f64], margin: f64, out: &Path) -> Result<Vec<PathBuf>> {
    let log = |v: &[f64]| v.iter().map(|r| r.max(1e-6).log10()).collect::<Vec<_>>();
    let rcs_path = out.join("rcs_histogram.svg");
    two_histograms(&rcs_path, "Radar cross-section", "log10 RCS", &log(target_rcs), &log(clutter_rcs))?;

    let (mut target, mut clutter) = (Vec::new(), Vec::new());
    for s in samples {
        for p in &s.points {
            let r = p.x.hypot(p.y);
            if s.truths.iter().any(|t| t.contains(p.x, p.y, margin)) {
                target.push(r);
            } else {
                clutter.push(r);
            }
        }
    }
    let range_path = out.join("range_histogram.svg");
    two_histograms(&range_path, "Range", "range (m)", &target, &clutter)?;
    Ok(vec![rcs_path, range_path])
}

/// `(rcs, gate, inside_target)` triples.
pub fn gate_scatter(dump: &[(f64, f64, bool)], out: &Path) -> Result<PathBuf> {
    let path = out.join("gate_vs_rcs.svg");
    draw_gate_scatter(dump, &path)?;
    Ok(path)
}

fn draw_gate_scatter(dump: &[(f64, f64, bool)], path: &Path) -> Result<()> {
    let root = SVGBackend::new(path, SIZE).into_drawing_area();
    root.fill(&WHITE).map_err(draw_err)?;
    let xs = dump.iter().map(|d| d.0.max(1e-6).log10());
    let (x0, x1) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let x1 = if x1 > x0 { x1 } else { x0 + 1.0 };
    let mut chart = ChartBuilder::on(&root)
        .caption("Gate against reflectivity", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, 0.0..1.0)
        .map_err(draw_err)?;
    chart.configure_mesh().x_desc("log10 RCS").y_desc("gate").draw().map_err(draw_err)?;
    for (i, (label, inside)) in [("clutter", false), ("target", true)].into_iter().enumerate() {
        let c = color(i);
        chart
            .draw_series(
                dump.iter()
                    .filter(|d| d.2 == inside)
                    .map(|d| Circle::new((d.0.max(1e-6).log10(), d.1), 2, c.mix(0.6).filled())),
            )
            .map_err(draw_err)?
            .label(label)
            .legend(move |(x, y)| Circle::new((x + 8, y), 4, c.filled()));
    }
    chart.configure_series_labels().background_style(WHITE.mix(0.8)).border_style(BLACK).draw().map_err(draw_err)?;
    root.present().map_err(draw_err)
}
