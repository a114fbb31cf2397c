//! Comparison plots and delta tables over evaluation CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use plotters::prelude::*;

use super::eval::{Metric, MetricTable};
use crate::{Error, Result};

/// A labelled evaluation CSV.
#[derive(Debug, Clone)]
pub struct CompareInput {
    pub label: String,
    pub path: PathBuf,
}

impl std::str::FromStr for CompareInput {
    type Err = Error;

    /// `label=path`
    fn from_str(s: &str) -> Result<Self> {
        let (label, path) = s
            .split_once('=')
            .filter(|(l, p)| !l.is_empty() && !p.is_empty())
            .ok_or_else(|| Error::Config(format!("expected LABEL=CSV, got `{s}`")))?;
        Ok(Self {
            label: label.to_string(),
            path: PathBuf::from(path),
        })
    }
}

#[derive(Debug, Clone)]
pub struct CompareOutput {
    pub plots: Vec<PathBuf>,
    pub summary: PathBuf,
    /// `metric,label,snr,value,baseline,delta` rows.
    pub summary_csv: String,
}

fn grid_diff(a: &[f64], b: &[f64]) -> String {
    let only = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().copied().filter(|v| !y.contains(v)).collect() };
    format!(
        "baseline grid {a:?}, other grid {b:?}; only in baseline {:?}, only in other {:?}",
        only(a, b),
        only(b, a)
    )
}

fn plot(metric: Metric, series: &[(&str, &MetricTable)], path: &Path) -> Result<()> {
    let plot_err = |e: &dyn std::fmt::Display| Error::invalid(format!("plotting {}: {e}", path.display()));
    let points = series.iter().flat_map(|(_, t)| t.rows.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(s, m, sd) in points {
        x0 = x0.min(s);
        x1 = x1.max(s);
        y0 = y0.min(m - sd);
        y1 = y1.max(m + sd);
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let (x1, y0, y1) = (if x1 > x0 { x1 } else { x0 + 1.0 }, y0 - pad, y1 + pad);
    let orientation = if metric.higher_is_better() { "higher is better" } else { "lower is better" };

    let root = SVGBackend::new(path, (800, 560)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(&e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(format!("test/{} ({orientation})", metric.name()), ("sans-serif", 22))
        .margin(16)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(&e))?;
    chart
        .configure_mesh()
        .x_desc("SNR_test (dB)")
        .y_desc(format!("test/{}", metric.name()))
        .draw()
        .map_err(|e| plot_err(&e))?;
    for (i, (label, table)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        let line: Vec<(f64, f64)> = table.rows.iter().map(|r| (r.0, r.1)).collect();
        chart
            .draw_series(LineSeries::new(line.clone(), color.stroke_width(2)))
            .map_err(|e| plot_err(&e))?
            .label(*label)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
        chart
            .draw_series(table.rows.iter().map(|&(s, m, sd)| {
                PathElement::new(vec![(s, m - sd), (s, m + sd)], color.stroke_width(1))
            }))
            .map_err(|e| plot_err(&e))?;
        chart
            .draw_series(line.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_err(&e))?;
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(&e))?;
    root.present().map_err(|e| plot_err(&e))?;
    Ok(())
}

/// Reads every CSV, groups them by metric, checks that each group shares the
/// baseline's SNR grid, writes one SVG per metric and a delta table.
pub fn compare(inputs: &[CompareInput], baseline: &str, out_dir: &Path) -> Result<CompareOutput> {
    if !inputs.iter().any(|i| i.label == baseline) {
        return Err(Error::Config(format!("baseline label `{baseline}` is not among the inputs")));
    }
    let mut groups: BTreeMap<Metric, Vec<(String, MetricTable)>> = BTreeMap::new();
    for input in inputs {
        let text = std::fs::read_to_string(&input.path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingData(format!("{} does not exist", input.path.display())),
            _ => Error::io(&input.path, e),
        })?;
        let table = MetricTable::parse(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", input.path.display())))?;
        let group = groups.entry(table.metric).or_default();
        if group.iter().any(|(l, _)| *l == input.label) {
            return Err(Error::Config(format!(
                "label `{}` given twice for metric {}",
                input.label,
                table.metric.name()
            )));
        }
        group.push((input.label.clone(), table));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut plots = Vec::new();
    let mut summary_csv = String::from("metric,label,snr,value,baseline,delta\n");
    for (metric, tables) in &groups {
        let base = &tables
            .iter()
            .find(|(l, _)| l == baseline)
            .ok_or_else(|| {
                Error::Config(format!("no {} CSV for baseline `{baseline}`", metric.name()))
            })?
            .1;
        for (label, table) in tables {
            if table.grid() != base.grid() {
                return Err(Error::invalid(format!(
                    "{} SNR grid of `{label}` differs from `{baseline}`: {}",
                    metric.name(),
                    grid_diff(&base.grid(), &table.grid())
                )));
            }
        }
        for (label, table) in tables.iter().filter(|(l, _)| l != baseline) {
            for (r, b) in table.rows.iter().zip(&base.rows) {
                writeln!(
                    summary_csv,
                    "{},{label},{},{},{},{}",
                    metric.name(),
                    r.0,
                    r.1,
                    b.1,
                    r.1 - b.1
                )
                .expect("writing to a string");
            }
        }
        let path = out_dir.join(format!("{}.svg", metric.name()));
        let series: Vec<(&str, &MetricTable)> = tables.iter().map(|(l, t)| (l.as_str(), t)).collect();
        plot(*metric, &series, &path)?;
        plots.push(path);
    }
    let summary = out_dir.join("summary.csv");
    std::fs::write(&summary, &summary_csv).map_err(|e| Error::io(&summary, e))?;
    Ok(CompareOutput {
        plots,
        summary,
        summary_csv,
    })
}
