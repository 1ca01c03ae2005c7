//! Byte-deterministic SVG rendering of run metrics: accuracy curves,
//! forgetting curves, and final-phase per-class bar charts for weight
//! norms and gradient magnitudes. Everything is hand-rolled text — no
//! raster backends, no timestamps, fixed float formatting — so the same
//! inputs always render the same bytes.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gradcil_core::metrics::{parse_metrics_csv, MetricsCsvRow};
use gradcil_core::{Error, Result};

use crate::commands::plot_label;

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 55.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

/// One named line in a chart.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// One named bar set, aligned with a chart's group names.
#[derive(Debug, Clone)]
pub struct BarSeries {
    pub label: String,
    pub values: Vec<f64>,
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

fn svg_header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"monospace\" font-size=\"12\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        fmt(WIDTH / 2.0)
    )
}

fn axes(x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN_L;
    let x1 = WIDTH - MARGIN_R;
    let y0 = HEIGHT - MARGIN_B;
    let y1 = MARGIN_T;
    format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"18\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        fmt(x0), fmt(y0), fmt(x1), fmt(y0),
        fmt(x0), fmt(y0), fmt(x0), fmt(y1),
        fmt((x0 + x1) / 2.0), fmt(HEIGHT - 12.0),
        fmt((y0 + y1) / 2.0), fmt((y0 + y1) / 2.0),
    )
}

fn legend(labels: &[&str]) -> String {
    let mut out = String::new();
    for (i, label) in labels.iter().enumerate() {
        let y = MARGIN_T + 14.0 + 18.0 * i as f64;
        let x = WIDTH - MARGIN_R + 12.0;
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"12\" height=\"12\" fill=\"{}\"/>\n\
             <text x=\"{}\" y=\"{}\">{label}</text>\n",
            fmt(x),
            fmt(y - 10.0),
            PALETTE[i % PALETTE.len()],
            fmt(x + 18.0),
            fmt(y)
        ));
    }
    out
}

/// Map a data point into plot coordinates.
fn scale(v: f64, lo: f64, hi: f64, out_lo: f64, out_hi: f64) -> f64 {
    if hi == lo {
        return (out_lo + out_hi) / 2.0;
    }
    out_lo + (v - lo) / (hi - lo) * (out_hi - out_lo)
}

fn y_ticks(lo: f64, hi: f64) -> String {
    let mut out = String::new();
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = scale(v, lo, hi, HEIGHT - MARGIN_B, MARGIN_T);
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#cccccc\"/>\n\
             <text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            fmt(MARGIN_L),
            fmt(y),
            fmt(WIDTH - MARGIN_R),
            fmt(y),
            fmt(MARGIN_L - 6.0),
            fmt(y + 4.0),
            format!("{v:.3}")
        ));
    }
    out
}

/// A line chart over integer x values (phases). `y_domain` pins the y
/// range (accuracy charts use [0, 1]); otherwise it is fitted to the data
/// with a little padding.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    y_domain: Option<(f64, f64)>,
) -> String {
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    let (x_lo, x_hi) = match (xs.iter().cloned().reduce(f64::min), xs.iter().cloned().reduce(f64::max)) {
        (Some(lo), Some(hi)) => (lo, hi),
        _ => (0.0, 1.0),
    };
    let (y_lo, y_hi) = y_domain.unwrap_or_else(|| {
        match (ys.iter().cloned().reduce(f64::min), ys.iter().cloned().reduce(f64::max)) {
            (Some(lo), Some(hi)) if lo != hi => (lo - 0.05 * (hi - lo), hi + 0.05 * (hi - lo)),
            (Some(v), Some(_)) => (v - 0.5, v + 0.5),
            _ => (0.0, 1.0),
        }
    });

    let mut out = svg_header(title);
    out.push_str(&y_ticks(y_lo, y_hi));
    out.push_str(&axes(x_label, y_label));
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        if s.points.is_empty() {
            continue;
        }
        let points: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| {
                format!(
                    "{},{}",
                    fmt(scale(x, x_lo, x_hi, MARGIN_L, WIDTH - MARGIN_R)),
                    fmt(scale(y, y_lo, y_hi, HEIGHT - MARGIN_B, MARGIN_T))
                )
            })
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            points.join(" ")
        ));
        for p in &points {
            let (x, y) = p.split_once(',').expect("formatted above");
            out.push_str(&format!(
                "<circle cx=\"{x}\" cy=\"{y}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
    }
    // Integer x tick labels.
    let phases = (x_hi - x_lo).round() as usize;
    for i in 0..=phases {
        let v = x_lo + i as f64;
        let x = scale(v, x_lo, x_hi, MARGIN_L, WIDTH - MARGIN_R);
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            fmt(x),
            fmt(HEIGHT - MARGIN_B + 18.0),
            v.round() as i64
        ));
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    out.push_str(&legend(&labels));
    out.push_str("</svg>\n");
    out
}

/// Grouped bar chart: one group per name, one bar per series within each
/// group. The y range always includes zero.
pub fn bar_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    group_names: &[String],
    series: &[BarSeries],
) -> String {
    let all: Vec<f64> = series.iter().flat_map(|s| s.values.iter().copied()).collect();
    let hi = all.iter().cloned().fold(0.0_f64, f64::max);
    let lo = all.iter().cloned().fold(0.0_f64, f64::min);
    let (y_lo, y_hi) = if hi == lo { (0.0, 1.0) } else { (lo, hi * 1.05) };

    let mut out = svg_header(title);
    out.push_str(&y_ticks(y_lo, y_hi));
    out.push_str(&axes(x_label, y_label));
    let groups = group_names.len().max(1) as f64;
    let group_width = (WIDTH - MARGIN_L - MARGIN_R) / groups;
    let bar_width = group_width * 0.8 / series.len().max(1) as f64;
    let zero_y = scale(0.0, y_lo, y_hi, HEIGHT - MARGIN_B, MARGIN_T);
    for (g, name) in group_names.iter().enumerate() {
        let group_x = MARGIN_L + group_width * g as f64;
        for (i, s) in series.iter().enumerate() {
            let v = s.values.get(g).copied().unwrap_or(0.0);
            let y = scale(v, y_lo, y_hi, HEIGHT - MARGIN_B, MARGIN_T);
            let (top, height) = if y <= zero_y {
                (y, zero_y - y)
            } else {
                (zero_y, y - zero_y)
            };
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"{}\" height=\"{}\" fill=\"{}\"/>\n",
                fmt(group_x + group_width * 0.1 + bar_width * i as f64),
                fmt(top),
                fmt(bar_width),
                fmt(height),
                PALETTE[i % PALETTE.len()]
            ));
        }
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{name}</text>\n",
            fmt(group_x + group_width / 2.0),
            fmt(HEIGHT - MARGIN_B + 18.0)
        ));
    }
    let labels: Vec<&str> = series.iter().map(|s| s.label.as_str()).collect();
    out.push_str(&legend(&labels));
    out.push_str("</svg>\n");
    out
}

struct LoadedRun {
    label: String,
    rows: Vec<MetricsCsvRow>,
    last_phase: usize,
}

fn curve(rows: &[MetricsCsvRow], metric: &str) -> Vec<(f64, f64)> {
    rows.iter()
        .filter(|r| r.metric == metric)
        .map(|r| (r.phase as f64, r.value))
        .collect()
}

fn final_phase_by_class(run: &LoadedRun, metric: &str) -> Vec<(usize, f64)> {
    let mut pairs: Vec<(usize, f64)> = run
        .rows
        .iter()
        .filter(|r| r.phase == run.last_phase && r.metric == metric)
        .filter_map(|r| r.key.parse::<usize>().ok().map(|c| (c, r.value)))
        .collect();
    pairs.sort_by_key(|&(c, _)| c);
    pairs
}

/// `plot`: read metrics CSVs, label each series from its sibling manifest,
/// and write the four figure files into `out_dir`.
pub fn cmd_plot(csv_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if csv_paths.is_empty() {
        return Err(Error::parameter("plot needs at least one metrics CSV path"));
    }
    let mut runs = Vec::new();
    for path in csv_paths {
        let text = std::fs::read_to_string(path)?;
        let rows = parse_metrics_csv(&text)
            .map_err(|e| Error::parameter(format!("{}: {e}", path.display())))?;
        let last_phase = rows.iter().map(|r| r.phase).max().unwrap_or(0);
        runs.push(LoadedRun {
            label: plot_label(path),
            rows,
            last_phase,
        });
    }

    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();

    let acc_series: Vec<Series> = runs
        .iter()
        .map(|r| Series {
            label: r.label.clone(),
            points: curve(&r.rows, "acc_seen"),
        })
        .collect();
    let path = out_dir.join("accuracy_curves.svg");
    std::fs::write(
        &path,
        line_chart(
            "Seen-classes accuracy by phase",
            "phase",
            "accuracy",
            &acc_series,
            Some((0.0, 1.0)),
        ),
    )?;
    written.push(path);

    let forget_series: Vec<Series> = runs
        .iter()
        .map(|r| Series {
            label: r.label.clone(),
            points: curve(&r.rows, "forgetting"),
        })
        .collect();
    let path = out_dir.join("forgetting_curves.svg");
    std::fs::write(
        &path,
        line_chart(
            "Forgetting by phase",
            "phase",
            "forgetting",
            &forget_series,
            None,
        ),
    )?;
    written.push(path);

    for (metric, file, title, y_label) in [
        (
            "weight_norm",
            "weight_norm_bars.svg",
            "Final per-class weight norms",
            "weight norm",
        ),
        (
            "grad_mag",
            "gradient_magnitude_bars.svg",
            "Final per-class average gradient magnitude",
            "gradient magnitude",
        ),
    ] {
        let classes: BTreeSet<usize> = runs
            .iter()
            .flat_map(|r| final_phase_by_class(r, metric).into_iter().map(|(c, _)| c))
            .collect();
        let group_names: Vec<String> = classes.iter().map(usize::to_string).collect();
        let series: Vec<BarSeries> = runs
            .iter()
            .map(|r| {
                let by_class = final_phase_by_class(r, metric);
                BarSeries {
                    label: r.label.clone(),
                    values: classes
                        .iter()
                        .map(|c| {
                            by_class
                                .iter()
                                .find(|&&(class, _)| class == *c)
                                .map(|&(_, v)| v)
                                .unwrap_or(0.0)
                        })
                        .collect(),
                }
            })
            .collect();
        let path = out_dir.join(file);
        std::fs::write(&path, bar_chart(title, "class", y_label, &group_names, &series))?;
        written.push(path);
    }

    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_rendering_is_deterministic() {
        let series = vec![
            Series {
                label: "a".into(),
                points: vec![(0.0, 0.9), (1.0, 0.7), (2.0, 0.6)],
            },
            Series {
                label: "b".into(),
                points: vec![(0.0, 0.8), (1.0, 0.75)],
            },
        ];
        let one = line_chart("t", "x", "y", &series, Some((0.0, 1.0)));
        let two = line_chart("t", "x", "y", &series, Some((0.0, 1.0)));
        assert_eq!(one, two);
        assert!(one.starts_with("<svg "));
        assert!(one.ends_with("</svg>\n"));
        assert!(one.contains("polyline"));
    }

    #[test]
    fn empty_input_list_is_a_parameter_error() {
        let err = cmd_plot(&[], Path::new("/tmp/unused")).unwrap_err();
        assert!(err.to_string().contains("at least one"), "{err}");
    }

    #[test]
    fn bars_handle_negative_values_without_inverting_rects() {
        let svg = bar_chart(
            "t",
            "class",
            "v",
            &["0".into(), "1".into()],
            &[BarSeries {
                label: "run".into(),
                values: vec![0.5, -0.25],
            }],
        );
        // Every rect height must be non-negative for the SVG to be valid.
        for piece in svg.split("height=\"").skip(1) {
            let value: f64 = piece.split('"').next().unwrap().parse().unwrap();
            assert!(value >= 0.0);
        }
    }

    #[test]
    fn flat_series_still_renders() {
        let series = vec![Series {
            label: "flat".into(),
            points: vec![(0.0, 0.5), (1.0, 0.5)],
        }];
        let svg = line_chart("t", "x", "y", &series, None);
        assert!(svg.contains("polyline"));
    }
}
