//! Writes a run's trace, summary and plots to a directory.

use std::path::{Path, PathBuf};

use super::metrics::RunMetrics;
use super::svg::{Plot, Series, Style};
use super::HarnessError;

pub const RUN_CSV: &str = "run.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const DISTANCE_SVG: &str = "distance.svg";
pub const OVERRIDE_SVG: &str = "override.svg";
pub const SPEED_SVG: &str = "speed.svg";

fn x_range(m: &RunMetrics) -> (f64, f64) {
    (0.0, m.rows.last().map_or(0.0, |r| r.t))
}

/// Distance over time: true range as a line and every in-range value the
/// channel stored as a circle, placed at its sample time.
pub fn distance_plot(m: &RunMetrics) -> Plot {
    let mut series = vec![Series::new(
        "true range",
        Style::Line,
        m.rows.iter().map(|r| (r.t, r.true_range)).collect(),
    )];
    for id in &m.meta.sensor_ids {
        let pts = m
            .feed
            .iter()
            .filter(|p| p.sensor_id == *id)
            .filter_map(|p| p.distance.map(|d| (p.sample_t.unwrap_or(p.created_t), d)))
            .collect();
        series.push(Series::new(
            format!("sensor {id} (channel)"),
            Style::Markers,
            pts,
        ));
    }
    series.push(Series::reference("d_slow", m.meta.d_slow));
    series.push(Series::reference("d_stop", m.meta.d_stop));
    let y_max = m
        .rows
        .iter()
        .map(|r| r.true_range)
        .chain(m.feed.iter().filter_map(|p| p.distance))
        .fold(m.meta.d_slow, f64::max);
    Plot {
        title: "Object distance".into(),
        x_label: "time (s)".into(),
        y_label: "distance (m)".into(),
        x_range: x_range(m),
        y_range: (0.0, y_max * 1.05),
        series,
    }
}

pub fn override_plot(m: &RunMetrics) -> Plot {
    Plot {
        title: "Speed override".into(),
        x_label: "time (s)".into(),
        y_label: "override".into(),
        x_range: x_range(m),
        y_range: (0.0, 1.05),
        series: vec![Series::new(
            "override",
            Style::Step,
            m.rows.iter().map(|r| (r.t, r.speed_override)).collect(),
        )],
    }
}

pub fn speed_plot(m: &RunMetrics) -> Plot {
    Plot {
        title: "Robot speed".into(),
        x_label: "time (s)".into(),
        y_label: "speed (m/s)".into(),
        x_range: x_range(m),
        y_range: (0.0, m.meta.nominal_speed * 1.05),
        series: vec![Series::new(
            "actual speed",
            Style::Step,
            m.rows.iter().map(|r| (r.t, r.robot_speed)).collect(),
        )],
    }
}

fn write(path: PathBuf, contents: &str) -> Result<PathBuf, HarnessError> {
    std::fs::write(&path, contents).map_err(|source| HarnessError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Writes run.csv, summary.json and the three plots. Output depends only on
/// `metrics`, so re-emitting is byte-identical.
pub fn emit_report(metrics: &RunMetrics, out_dir: &Path) -> Result<Vec<PathBuf>, HarnessError> {
    std::fs::create_dir_all(out_dir).map_err(|source| HarnessError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    Ok(vec![
        write(out_dir.join(RUN_CSV), &metrics.to_csv())?,
        write(out_dir.join(SUMMARY_JSON), &metrics.summary.to_json())?,
        write(out_dir.join(DISTANCE_SVG), &distance_plot(metrics).render())?,
        write(out_dir.join(OVERRIDE_SVG), &override_plot(metrics).render())?,
        write(out_dir.join(SPEED_SVG), &speed_plot(metrics).render())?,
    ])
}
