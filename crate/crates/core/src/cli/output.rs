use std::path::{Path, PathBuf};

use nalgebra::DVector;
use plotters::prelude::*;

use super::CliError;
use crate::approximator::MpcScheme;

/// Full-precision scientific notation, stable across runs.
pub fn num(v: f64) -> String {
    format!("{v:.15e}")
}

pub struct Table {
    writer: csv::Writer<std::fs::File>,
    path: PathBuf,
}

impl Table {
    pub fn create(path: &Path, header: &[String]) -> Result<Self, CliError> {
        let mut writer = csv::Writer::from_path(path).map_err(|e| CliError::io(path, e))?;
        writer.write_record(header).map_err(|e| CliError::io(path, e))?;
        Ok(Self { writer, path: path.to_path_buf() })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<(), CliError> {
        self.writer.write_record(fields).map_err(|e| CliError::io(&self.path, e))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.writer.flush().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn strings(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// `agent,name,value` rows for every parameter of every agent.
pub fn write_thetas(path: &Path, scheme: &MpcScheme, thetas: &[DVector<f64>]) -> Result<(), CliError> {
    let mut table = Table::create(path, &strings(&["agent", "name", "value"]))?;
    for (i, theta) in thetas.iter().enumerate() {
        for (name, v) in scheme.params[i].names().iter().zip(theta.iter()) {
            table.row(&[i.to_string(), name.clone(), num(*v)])?;
        }
    }
    table.finish()
}

/// Inverse of [`write_thetas`]; names and sizes must match the scheme.
pub fn read_thetas(path: &Path, scheme: &MpcScheme) -> Result<Vec<DVector<f64>>, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| CliError::io(path, e))?;
    let mut thetas: Vec<Vec<f64>> = vec![Vec::new(); scheme.num_agents()];
    for record in reader.records() {
        let record = record.map_err(|e| CliError::io(path, e))?;
        let bad = |what: String| CliError::Run(format!("{}: {what}", path.display()));
        if record.len() != 3 {
            return Err(bad(format!("expected 3 fields, got {}", record.len())));
        }
        let agent: usize = record[0].parse().map_err(|_| bad(format!("bad agent index {:?}", &record[0])))?;
        let value: f64 = record[2].parse().map_err(|_| bad(format!("bad value {:?}", &record[2])))?;
        let names = scheme.params.get(agent).map(|p| p.names()).ok_or_else(|| bad(format!("no agent {agent}")))?;
        let k = thetas[agent].len();
        if names.get(k).map(String::as_str) != Some(&record[1]) {
            return Err(bad(format!("agent {agent}: expected parameter {:?}, found {:?}", names.get(k), &record[1])));
        }
        thetas[agent].push(value);
    }
    for (i, t) in thetas.iter().enumerate() {
        if t.len() != scheme.params[i].len() {
            return Err(CliError::Run(format!("{}: agent {i} has {} of {} parameters", path.display(), t.len(), scheme.params[i].len())));
        }
    }
    Ok(thetas.into_iter().map(DVector::from_vec).collect())
}

/// Median and quartiles by linear interpolation between order statistics.
pub fn quartiles(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    (at(0.25), at(0.5), at(0.75))
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [RGBColor; 6] = [
    RGBColor(31, 119, 180),
    RGBColor(214, 39, 40),
    RGBColor(148, 103, 189),
    RGBColor(44, 160, 44),
    RGBColor(255, 127, 14),
    RGBColor(127, 127, 127),
];

fn bounds(series: &[Series]) -> ((f64, f64), (f64, f64)) {
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        return ((0.0, 1.0), (0.0, 1.0));
    }
    let pad = |lo: f64, hi: f64| if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo)) };
    (pad(x0, x1), pad(y0, y1))
}

/// Stack of line charts sharing the x axis, one panel per entry of `panels`.
pub fn line_panels(path: &Path, x_label: &str, panels: &[(String, Vec<Series>)]) -> Result<(), CliError> {
    let err = |e: String| CliError::Run(format!("plot {}: {e}", path.display()));
    let root = SVGBackend::new(path, (900, 260 * panels.len().max(1) as u32)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let areas = root.split_evenly((panels.len().max(1), 1));
    for ((title, series), area) in panels.iter().zip(areas.iter()) {
        let ((x0, x1), (y0, y1)) = bounds(series);
        let mut chart = ChartBuilder::on(area)
            .caption(title, ("sans-serif", 16))
            .margin(8)
            .x_label_area_size(30)
            .y_label_area_size(60)
            .build_cartesian_2d(x0..x1, y0..y1)
            .map_err(|e| err(e.to_string()))?;
        chart.configure_mesh().x_desc(x_label).draw().map_err(|e| err(e.to_string()))?;
        for (k, s) in series.iter().enumerate() {
            let color = PALETTE[k % PALETTE.len()];
            chart
                .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(1)))
                .map_err(|e| err(e.to_string()))?
                .label(s.label.clone())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color));
        }
        if series.len() > 1 {
            chart
                .configure_series_labels()
                .background_style(WHITE.mix(0.8))
                .border_style(BLACK)
                .draw()
                .map_err(|e| err(e.to_string()))?;
        }
    }
    root.present().map_err(|e| err(e.to_string()))
}

/// Median markers with quartile bars, one column per controller.
pub fn box_summary(path: &Path, title: &str, rows: &[(String, f64, f64, f64)]) -> Result<(), CliError> {
    let err = |e: String| CliError::Run(format!("plot {}: {e}", path.display()));
    let root = SVGBackend::new(path, (900, 420)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| err(e.to_string()))?;
    let hi = rows.iter().map(|r| r.3).fold(0.0, f64::max).max(1e-9) * 1.1;
    let labels: Vec<String> = rows.iter().map(|r| r.0.clone()).collect();
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 16))
        .margin(10)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(-0.5..rows.len() as f64 - 0.5, 0.0..hi)
        .map_err(|e| err(e.to_string()))?;
    chart
        .configure_mesh()
        .x_labels(rows.len())
        .x_label_formatter(&|x| {
            let k = x.round();
            if (x - k).abs() < 1e-6 && k >= 0.0 {
                labels.get(k as usize).cloned().unwrap_or_default()
            } else {
                String::new()
            }
        })
        .y_desc("closed-loop cost")
        .draw()
        .map_err(|e| err(e.to_string()))?;
    for (k, (_, q1, med, q3)) in rows.iter().enumerate() {
        let x = k as f64;
        let color = PALETTE[k % PALETTE.len()];
        chart
            .draw_series(std::iter::once(PathElement::new(vec![(x, *q1), (x, *q3)], color.stroke_width(3))))
            .map_err(|e| err(e.to_string()))?;
        chart
            .draw_series(std::iter::once(Circle::new((x, *med), 5, color.filled())))
            .map_err(|e| err(e.to_string()))?;
    }
    root.present().map_err(|e| err(e.to_string()))
}
