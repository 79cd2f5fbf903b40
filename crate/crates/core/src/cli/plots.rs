//! Static SVG plots: per-class event-duration histograms and loss curves.

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::objective::LossReport;

/// Upper edges of the duration bins; the last bin is open-ended.
pub const DURATION_EDGES: [f64; 4] = [0.5, 0.75, 1.0, 1.25];

pub fn bin_labels() -> Vec<String> {
    let mut out = vec![format!("<={}", DURATION_EDGES[0])];
    for w in DURATION_EDGES.windows(2) {
        out.push(format!("{}-{}", w[0], w[1]));
    }
    out.push(format!(">{}", DURATION_EDGES[DURATION_EDGES.len() - 1]));
    out
}

/// Counts durations per bin; a duration equal to an edge falls in the lower bin.
pub fn duration_histogram(durations: &[f64]) -> [usize; 5] {
    let mut counts = [0; 5];
    for &d in durations {
        let i = DURATION_EDGES.iter().position(|&e| d <= e).unwrap_or(DURATION_EDGES.len());
        counts[i] += 1;
    }
    counts
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// Bar chart of the fraction of events per duration bin.
pub fn write_histogram(path: &Path, class: &str, durations: &[f64]) -> Result<()> {
    let counts = duration_histogram(durations);
    let total = durations.len().max(1) as f64;
    let ratios: Vec<f64> = counts.iter().map(|&c| c as f64 / total).collect();
    let labels = bin_labels();
    let root = SVGBackend::new(path, (640, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("{class} duration distribution (n = {})", durations.len()), ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d((0..labels.len()).into_segmented(), 0.0..1.0)
        .map_err(plot_err)?;
    chart
        .configure_mesh()
        .disable_x_mesh()
        .x_desc("duration (s)")
        .y_desc("ratio")
        .x_label_formatter(&|v| match v {
            SegmentValue::CenterOf(i) => labels.get(*i).cloned().unwrap_or_default(),
            _ => String::new(),
        })
        .draw()
        .map_err(plot_err)?;
    chart
        .draw_series(
            Histogram::vertical(&chart)
                .style(BLUE.mix(0.6).filled())
                .margin(8)
                .data(ratios.iter().enumerate().map(|(i, &r)| (i, r))),
        )
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}

/// Parses a `losses.csv` written during training.
pub fn read_loss_csv(path: &Path) -> Result<Vec<(u64, LossReport)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::path(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(LossReport::CSV_HEADER) {
        return Err(Error::Plot(format!("{}: unexpected header", path.display())));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Plot(format!("{}: malformed row `{l}`", path.display()));
            if f.len() != 9 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
            Ok((
                f[0].parse().map_err(|_| bad())?,
                LossReport {
                    node_conf: num(1)?,
                    node_cls: num(2)?,
                    interval_conf: num(3)?,
                    interval_cls: num(4)?,
                    interval_loc: num(5)?,
                    total: num(6)?,
                    n_fg: int(7)?,
                    m_fg: int(8)?,
                },
            ))
        })
        .collect()
}

/// One line per loss component against the training step.
pub fn write_loss_curves(path: &Path, rows: &[(u64, LossReport)]) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Plot("no loss rows to plot".into()));
    }
    let series: [(&str, fn(&LossReport) -> f64, RGBColor); 6] = [
        ("node conf", |r| r.node_conf, RED),
        ("node cls", |r| r.node_cls, MAGENTA),
        ("interval conf", |r| r.interval_conf, BLUE),
        ("interval cls", |r| r.interval_cls, CYAN),
        ("interval loc", |r| r.interval_loc, GREEN),
        ("total", |r| r.total, BLACK),
    ];
    let x_max = rows.last().map_or(1, |r| r.0).max(1);
    let y_max = rows
        .iter()
        .flat_map(|(_, r)| series.iter().map(move |s| (s.1)(r)))
        .filter(|v| v.is_finite())
        .fold(0.0f64, f64::max)
        .max(1e-3)
        * 1.05;
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(50)
        .build_cartesian_2d(0..x_max, 0.0..y_max)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(plot_err)?;
    for (name, f, color) in series {
        chart
            .draw_series(LineSeries::new(rows.iter().map(|(s, r)| (*s, f(r))), &color))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)
}
