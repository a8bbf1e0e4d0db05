//! Elapsed-time and speedup tables, plot data and the memory check.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::CliError;
use crate::archmodel::{estimate_activation_memory, ArchDescriptor, ArchError, TensorShape};
use crate::clustersim::ClusterTopology;
use crate::costcal::{format_hms, Method, PredictedRow, PredictedTable, ReferenceRow, ReferenceTable};

/// One GPU count with whatever measured and predicted values are known.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub n: usize,
    pub reference: Option<ReferenceRow>,
    pub predicted: Option<PredictedRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn from_reference(table: &ReferenceTable) -> Self {
        Self {
            rows: table
                .rows()
                .iter()
                .map(|r| ReportRow {
                    n: r.n,
                    reference: Some(r.clone()),
                    predicted: None,
                })
                .collect(),
        }
    }

    pub fn from_prediction(table: &PredictedTable) -> Self {
        Self {
            rows: table
                .rows
                .iter()
                .map(|p| ReportRow {
                    n: p.n,
                    reference: None,
                    predicted: Some(*p),
                })
                .collect(),
        }
    }

    /// Attaches predictions to the rows with matching `n`.
    pub fn with_prediction(mut self, table: &PredictedTable) -> Result<Self, CliError> {
        for row in &mut self.rows {
            let p = table
                .rows
                .iter()
                .find(|p| p.n == row.n)
                .ok_or_else(|| CliError::Check(format!("no prediction for n={}", row.n)))?;
            row.predicted = Some(*p);
        }
        Ok(self)
    }

    pub fn has_reference(&self) -> bool {
        self.rows.iter().all(|r| r.reference.is_some())
    }

    pub fn has_prediction(&self) -> bool {
        self.rows.iter().all(|r| r.predicted.is_some())
    }

    /// Long-form table: one line per method and GPU count.
    pub fn to_csv(&self) -> String {
        let (refd, pred) = (self.has_reference(), self.has_prediction());
        let mut out = String::from("method,n");
        if refd {
            out.push_str(",elapsed_s,elapsed_hms,speedup");
        }
        if pred {
            out.push_str(",predicted_elapsed_s,predicted_speedup");
            if refd {
                out.push_str(",relative_error");
            }
            out.push_str(",predicted_utilization");
        }
        out.push('\n');
        for m in Method::ALL {
            for row in &self.rows {
                let _ = write!(out, "{},{}", m.as_str(), row.n);
                if let Some(r) = row.reference.as_ref().filter(|_| refd) {
                    let e = r.get(m);
                    let _ = write!(out, ",{},{},{}", e.elapsed_s, format_hms(e.elapsed_s), e.speedup);
                }
                if let Some(p) = row.predicted.as_ref().filter(|_| pred) {
                    let _ = write!(out, ",{:.1},{:.6}", p.elapsed(m), p.speedup(m));
                    if let Some(r) = row.reference.as_ref().filter(|_| refd) {
                        let s = r.get(m).speedup;
                        let _ = write!(out, ",{:.6}", (p.speedup(m) - s) / s);
                    }
                    let util = match m {
                        Method::DataParallel => 1.0,
                        Method::ExperimentParallel => p.ep_utilization,
                    };
                    let _ = write!(out, ",{util:.4}");
                }
                out.push('\n');
            }
        }
        out
    }
}

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn series(report: &Report, speedup: bool) -> Vec<Series> {
    let mut out = Vec::new();
    for m in Method::ALL {
        let pick = |elapsed: f64, s: f64| if speedup { s } else { elapsed };
        if report.has_reference() {
            out.push(Series {
                name: m.as_str().to_string(),
                points: report
                    .rows
                    .iter()
                    .filter_map(|r| r.reference.as_ref())
                    .map(|r| (r.n as f64, pick(r.get(m).elapsed_s as f64, r.get(m).speedup)))
                    .collect(),
            });
        }
        if report.has_prediction() {
            let name = if report.has_reference() {
                format!("predicted_{}", m.as_str())
            } else {
                m.as_str().to_string()
            };
            out.push(Series {
                name,
                points: report
                    .rows
                    .iter()
                    .filter_map(|r| r.predicted.as_ref())
                    .map(|p| (p.n as f64, pick(p.elapsed(m), p.speedup(m))))
                    .collect(),
            });
        }
    }
    out
}

fn series_csv(report: &Report, list: &[Series], unit: &str) -> String {
    let mut out = String::from("n");
    for s in list {
        let _ = write!(out, ",{}{unit}", s.name);
    }
    out.push('\n');
    for (i, row) in report.rows.iter().enumerate() {
        let _ = write!(out, "{}", row.n);
        for s in list {
            let _ = write!(out, ",{}", s.points[i].1);
        }
        out.push('\n');
    }
    out
}

const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

/// Minimal line chart: axes, one polyline per series with at least two
/// points, a marker at every point and a legend.
fn svg_chart(title: &str, y_label: &str, list: &[Series]) -> String {
    let (w, h, pad) = (640.0, 400.0, 60.0);
    let all = list.iter().flat_map(|s| s.points.iter());
    let x_max = all.clone().map(|p| p.0).fold(1.0, f64::max);
    let y_max = all.map(|p| p.1).fold(0.0, f64::max).max(f64::MIN_POSITIVE) * 1.05;
    let sx = |x: f64| pad + x / x_max * (w - 2.0 * pad);
    let sy = |y: f64| h - pad - y / y_max * (h - 2.0 * pad);

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(out, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>",
        w / 2.0
    );
    let _ = writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad,
        w - pad,
        h - pad
    );
    let _ = writeln!(
        out,
        "<line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{}\" stroke=\"black\"/>",
        h - pad
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"12\">GPUs</text>",
        w / 2.0,
        h - 20.0
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" font-size=\"12\" transform=\"rotate(-90 16 {})\">{y_label}</text>",
        h / 2.0,
        h / 2.0
    );
    for (i, s) in list.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        if s.points.len() >= 2 {
            let pts: Vec<String> = s
                .points
                .iter()
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            let _ = writeln!(
                out,
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                pts.join(" ")
            );
        }
        for &(x, y) in &s.points {
            let _ = writeln!(
                out,
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>",
                sx(x),
                sy(y)
            );
        }
        let ly = pad + 16.0 * i as f64;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{ly}\" font-size=\"12\" fill=\"{color}\">{}</text>",
            w - pad - 160.0,
            s.name
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Writes `elapsed.csv`, `speedup.csv` and an SVG chart of each into `dir`.
pub fn emit_plot_data(report: &Report, dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    if report.rows.is_empty() {
        return Err(CliError::Check("report has no rows".into()));
    }
    let elapsed = series(report, false);
    let speedup = series(report, true);
    let files = [
        ("elapsed.csv", series_csv(report, &elapsed, "_elapsed_s")),
        ("speedup.csv", series_csv(report, &speedup, "")),
        (
            "elapsed.svg",
            svg_chart("Elapsed time per number of GPUs", "elapsed (s)", &elapsed),
        ),
        (
            "speedup.svg",
            svg_chart("Speedup per number of GPUs", "speedup", &speedup),
        ),
    ];
    let mut written = Vec::new();
    for (name, body) in files {
        let path = dir.join(name);
        super::write_text(&path, &body)?;
        written.push(path);
    }
    Ok(written)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Feasibility {
    pub estimate_bytes: u64,
    pub capacity_bytes: u64,
    /// Capacity minus estimate; negative when the model does not fit.
    pub headroom_bytes: i128,
    pub fits: bool,
}

/// Compares the training-memory estimate for `batch` samples per replica
/// against one GPU of `topo`, in f32.
pub fn memory_feasibility_check(
    arch: &ArchDescriptor,
    input: TensorShape,
    batch: u64,
    topo: &ClusterTopology,
) -> Result<Feasibility, ArchError> {
    let estimate = estimate_activation_memory(arch, input, batch, 4)?;
    let capacity = topo.gpu_memory_bytes;
    Ok(Feasibility {
        estimate_bytes: estimate,
        capacity_bytes: capacity,
        headroom_bytes: capacity as i128 - estimate as i128,
        fits: estimate <= capacity,
    })
}

pub(super) fn ensure_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io {
        path: dir.to_path_buf(),
        source,
    })
}
