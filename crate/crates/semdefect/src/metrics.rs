//! Confusion-matrix metrics, accuracy-vs-shots curves, SVG plot emission
//! and the versioned JSON run report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// C x C count matrix; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub class_count: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn get(&self, true_class: usize, predicted: usize) -> u64 {
        self.counts[true_class * self.class_count + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Build a confusion matrix from dense `[0, C)` label lists.
pub fn confusion(true_labels: &[u32], predicted: &[u32], class_count: usize) -> Result<ConfusionMatrix> {
    if true_labels.len() != predicted.len() {
        return Err(Error::Dimension {
            what: "confusion labels".into(),
            expected: true_labels.len(),
            got: predicted.len(),
        });
    }
    let mut counts = vec![0u64; class_count * class_count];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t as usize >= class_count || p as usize >= class_count {
            return Err(Error::Data(format!(
                "label pair ({t}, {p}) out of range for {class_count} classes"
            )));
        }
        counts[t as usize * class_count + p as usize] += 1;
    }
    Ok(ConfusionMatrix {
        class_count,
        counts,
    })
}

/// Per-class precision/recall/F1 plus overall accuracy and macro F1.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub per_class: Vec<ClassMetrics>,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub class_index: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Derive rates from a confusion matrix. Zero denominators yield zero
/// rates; accuracy is trace over total computed in integers first.
pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Result<ClassReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Data("empty confusion matrix".into()));
    }
    let c = cm.class_count;
    let mut per_class = Vec::with_capacity(c);
    let mut trace = 0u64;
    let mut macro_f1 = 0.0;
    for k in 0..c {
        let diag = cm.get(k, k);
        trace += diag;
        let col_sum: u64 = (0..c).map(|i| cm.get(i, k)).sum();
        let row_sum: u64 = (0..c).map(|j| cm.get(k, j)).sum();
        let precision = if col_sum == 0 { 0.0 } else { diag as f64 / col_sum as f64 };
        let recall = if row_sum == 0 { 0.0 } else { diag as f64 / row_sum as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        macro_f1 += f1;
        per_class.push(ClassMetrics {
            class_index: k,
            precision,
            recall,
            f1,
            support: row_sum,
        });
    }
    Ok(ClassReport {
        per_class,
        accuracy: trace as f64 / total as f64,
        macro_f1: macro_f1 / c as f64,
        total,
    })
}

/// One point of an accuracy-vs-shots experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub shots: usize,
    pub accuracy: f64,
    pub method: String,
    pub layer: String,
}

/// Points grouped into (method, layer) series, shots strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveSeries {
    pub series: Vec<Series>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub method: String,
    pub layer: String,
    pub points: Vec<(usize, f64)>,
}

/// Group curve points, validate monotone shots, and emit the CSV
/// (`shots,accuracy,method,layer`) and the SVG line chart. Output bytes
/// are a pure function of the input.
pub fn shots_curve(points: &[CurvePoint], csv_path: &Path, svg_path: &Path) -> Result<CurveSeries> {
    let mut grouped: BTreeMap<(String, String), Vec<(usize, f64)>> = BTreeMap::new();
    for p in points {
        grouped
            .entry((p.method.clone(), p.layer.clone()))
            .or_default()
            .push((p.shots, p.accuracy));
    }
    let mut series = Vec::new();
    for ((method, layer), pts) in grouped {
        for window in pts.windows(2) {
            if window[1].0 <= window[0].0 {
                return Err(Error::Data(format!(
                    "shots must strictly increase within series {method}/{layer}: {} then {}",
                    window[0].0, window[1].0
                )));
            }
        }
        series.push(Series {
            method,
            layer,
            points: pts,
        });
    }
    let curves = CurveSeries { series };

    let mut csv = String::from("shots,accuracy,method,layer\n");
    for p in points {
        csv.push_str(&format!("{},{},{},{}\n", p.shots, p.accuracy, p.method, p.layer));
    }
    write_bytes(csv_path, csv.as_bytes())?;
    write_bytes(svg_path, curve_svg(&curves).as_bytes())?;
    Ok(curves)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(bytes).map_err(|e| Error::io(path, e))
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

const PLOT_W: f64 = 640.0;
const PLOT_H: f64 = 440.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 180.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 56.0;

fn curve_svg(curves: &CurveSeries) -> String {
    let (x_min, x_max) = curves
        .series
        .iter()
        .flat_map(|s| s.points.iter().map(|p| p.0))
        .fold((usize::MAX, 0usize), |(lo, hi), v| (lo.min(v), hi.max(v)));
    let have_data = x_min != usize::MAX;
    let (x_min, x_max) = if have_data && x_min < x_max {
        (x_min as f64, x_max as f64)
    } else if have_data {
        (x_min as f64 - 0.5, x_min as f64 + 0.5)
    } else {
        (0.0, 1.0)
    };

    let x_of = |v: f64| MARGIN_L + (v - x_min) / (x_max - x_min) * (PLOT_W - MARGIN_L - MARGIN_R);
    let y_of = |v: f64| MARGIN_T + (1.0 - v) * (PLOT_H - MARGIN_T - MARGIN_B);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\" \
         font-family=\"sans-serif\" font-size=\"13\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"0\" y=\"0\" width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n"
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        y_of(0.0),
        PLOT_W - MARGIN_R,
        y_of(0.0)
    ));
    svg.push_str(&format!(
        "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
        MARGIN_L,
        y_of(0.0),
        MARGIN_L,
        y_of(1.0)
    ));
    for tick in 0..=5 {
        let v = tick as f64 / 5.0;
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">{v:.1}</text>\n",
            MARGIN_L - 6.0,
            y_of(v) + 4.0
        ));
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"#cccccc\"/>\n",
            MARGIN_L,
            y_of(v),
            PLOT_W - MARGIN_R,
            y_of(v)
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">labeled shots per class</text>\n",
        (MARGIN_L + PLOT_W - MARGIN_R) / 2.0,
        PLOT_H - 16.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{:.2}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.2})\">accuracy</text>\n",
        (y_of(0.0) + y_of(1.0)) / 2.0,
        (y_of(0.0) + y_of(1.0)) / 2.0
    ));

    for (i, series) in curves.series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if !series.points.is_empty() {
            let pts: Vec<String> = series
                .points
                .iter()
                .map(|&(s, a)| format!("{:.2},{:.2}", x_of(s as f64), y_of(a.clamp(0.0, 1.0))))
                .collect();
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                pts.join(" ")
            ));
            for &(s, a) in &series.points {
                svg.push_str(&format!(
                    "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                    x_of(s as f64),
                    y_of(a.clamp(0.0, 1.0))
                ));
                svg.push_str(&format!(
                    "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\" font-size=\"11\">{s}</text>\n",
                    x_of(s as f64),
                    y_of(0.0) + 16.0
                ));
            }
        }
        let ly = MARGIN_T + 16.0 * (i as f64 + 1.0);
        svg.push_str(&format!(
            "<line x1=\"{:.2}\" y1=\"{:.2}\" x2=\"{:.2}\" y2=\"{:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            PLOT_W - MARGIN_R + 12.0,
            ly - 4.0,
            PLOT_W - MARGIN_R + 36.0,
            ly - 4.0
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{} / layer {}</text>\n",
            PLOT_W - MARGIN_R + 42.0,
            ly,
            series.method,
            series.layer
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

/// Scatter plot of a 2-D layout, one color per label.
pub fn write_layout_svg(points: &[[f64; 2]], labels: Option<&[u32]>, path: &Path) -> Result<()> {
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in points {
        x_min = x_min.min(p[0]);
        x_max = x_max.max(p[0]);
        y_min = y_min.min(p[1]);
        y_max = y_max.max(p[1]);
    }
    if points.is_empty() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad_x = ((x_max - x_min) * 0.05).max(1e-9);
    let pad_y = ((y_max - y_min) * 0.05).max(1e-9);
    let (x_min, x_max) = (x_min - pad_x, x_max + pad_x);
    let (y_min, y_max) = (y_min - pad_y, y_max + pad_y);
    let size = 520.0;
    let x_of = |v: f64| 20.0 + (v - x_min) / (x_max - x_min) * (size - 40.0);
    let y_of = |v: f64| 20.0 + (1.0 - (v - y_min) / (y_max - y_min)) * (size - 40.0);

    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {size} {size}\">\n\
         <rect x=\"0\" y=\"0\" width=\"{size}\" height=\"{size}\" fill=\"white\"/>\n"
    );
    for (i, p) in points.iter().enumerate() {
        let color = match labels {
            Some(l) => PALETTE[(l[i] as usize) % PALETTE.len()],
            None => PALETTE[0],
        };
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n",
            x_of(p[0]),
            y_of(p[1])
        ));
    }
    svg.push_str("</svg>\n");
    write_bytes(path, svg.as_bytes())
}

/// Versioned run report accumulated across pipeline stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    /// Echo of the resolved configuration.
    pub config: serde_json::Value,
    pub steps: Vec<StepEntry>,
    /// CRC32 (hex) of emitted files, keyed by file name.
    pub digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEntry {
    pub command: String,
    pub details: serde_json::Value,
}

pub const REPORT_SCHEMA_VERSION: u32 = 1;

impl RunReport {
    pub fn new(seed: u64, config: serde_json::Value) -> Self {
        RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            seed,
            config,
            steps: Vec::new(),
            digests: BTreeMap::new(),
        }
    }

    pub fn push_step(&mut self, command: &str, details: serde_json::Value) {
        self.steps.push(StepEntry {
            command: command.to_string(),
            details,
        });
    }
}

/// CRC32 of a file, as 8 hex digits.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:08x}", crc32fast::hash(&bytes)))
}

/// Write the report as pretty JSON (sorted keys, trailing newline).
pub fn emit_run_report(report: &RunReport, path: &Path) -> Result<()> {
    let mut text =
        serde_json::to_string_pretty(report).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

/// Load a previously emitted report.
pub fn load_run_report(path: &Path) -> Result<RunReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report: RunReport =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported report schema {}", report.schema_version),
        ));
    }
    Ok(report)
}
