//! Semilog convergence plots as standalone SVG.
//!
//! Output is a pure function of the trace — coordinates are formatted with
//! fixed precision and nothing (timestamps, ids) varies between runs, so a
//! byte comparison against a golden file is meaningful.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::adapt::AdaptTrace;

#[derive(Debug, Error)]
pub enum PlotError {
    #[error("cannot plot an empty trace")]
    EmptyTrace,
    #[error("no positive values to place on a log axis")]
    NoPositiveValues,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 70.0; // left margin
const MR: f64 = 20.0;
const MT: f64 = 24.0;
const MB: f64 = 48.0;

struct Series<'a> {
    label: &'a str,
    color: &'a str,
    class: &'a str,
    /// (dofs, value); nonpositive values are dropped before layout.
    points: Vec<(f64, f64)>,
}

/// Estimate (and truth, when tracked) per iteration against reduced DOFs.
pub fn render_convergence(trace: &AdaptTrace) -> Result<String, PlotError> {
    if trace.iterations.is_empty() {
        return Err(PlotError::EmptyTrace);
    }
    let estimate: Vec<(f64, f64)> = trace
        .iterations
        .iter()
        .map(|rec| {
            let v = match &rec.report.eta_j {
                Some(eta) => eta.iter().sum(),
                None => rec.report.energy_bound,
            };
            (rec.dofs as f64, v)
        })
        .filter(|&(_, v)| v > 0.0 && v.is_finite())
        .collect();
    let truth: Vec<(f64, f64)> = trace
        .iterations
        .iter()
        .filter_map(|rec| rec.report.true_error.map(|t| (rec.dofs as f64, t)))
        .filter(|&(_, v)| v > 0.0 && v.is_finite())
        .collect();

    let series = [
        Series {
            label: "estimate",
            color: "#1f77b4",
            class: "m0",
            points: estimate,
        },
        Series {
            label: "error",
            color: "#d62728",
            class: "m1",
            points: truth,
        },
    ];
    if series.iter().all(|s| s.points.is_empty()) {
        return Err(PlotError::NoPositiveValues);
    }

    let xs: Vec<f64> = trace.iterations.iter().map(|r| r.dofs as f64).collect();
    let (mut x_lo, mut x_hi) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    if x_hi - x_lo < 1.0 {
        x_lo -= 1.0;
        x_hi += 1.0;
    }
    let values = series.iter().flat_map(|s| s.points.iter().map(|&(_, v)| v));
    let (v_lo, v_hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    let dec_lo = v_lo.log10().floor() as i32;
    let dec_hi = v_hi.log10().ceil() as i32;
    let dec_hi = if dec_hi == dec_lo { dec_lo + 1 } else { dec_hi };

    let x_of = |d: f64| ML + (d - x_lo) / (x_hi - x_lo) * (W - ML - MR);
    let y_of = |v: f64| {
        let t = (v.log10() - dec_lo as f64) / (dec_hi - dec_lo) as f64;
        H - MB - t * (H - MT - MB)
    };

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" \
         viewBox=\"0 0 {W} {H}\" font-family=\"monospace\" font-size=\"12\">\n"
    ));
    svg.push_str(&format!(
        "<rect x=\"{ML}\" y=\"{MT}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"white\" \
         stroke=\"black\"/>\n",
        W - ML - MR,
        H - MT - MB
    ));
    // Decade gridlines and labels.
    for d in dec_lo..=dec_hi {
        let y = y_of(10f64.powi(d));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{y:.2}\" x2=\"{:.2}\" y2=\"{y:.2}\" stroke=\"#cccccc\" \
             stroke-width=\"0.5\"/>\n",
            W - MR
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"end\">1e{d}</text>\n",
            ML - 6.0,
            y + 4.0
        ));
    }
    // Five x ticks.
    for k in 0..5 {
        let d = x_lo + (x_hi - x_lo) * k as f64 / 4.0;
        let x = x_of(d);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{:.2}\" x2=\"{x:.2}\" y2=\"{:.2}\" stroke=\"black\"/>\n",
            H - MB,
            H - MB + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{:.2}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 18.0,
            d.round() as i64
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" text-anchor=\"middle\">reduced DOFs</text>\n",
        ML + (W - ML - MR) / 2.0,
        H - 10.0
    ));

    for (k, s) in series.iter().enumerate() {
        if s.points.is_empty() {
            continue;
        }
        if s.points.len() > 1 {
            let path: Vec<String> = s
                .points
                .iter()
                .map(|&(d, v)| format!("{:.2},{:.2}", x_of(d), y_of(v)))
                .collect();
            svg.push_str(&format!(
                "<polyline points=\"{}\" fill=\"none\" stroke=\"{}\" stroke-width=\"1.5\"/>\n",
                path.join(" "),
                s.color
            ));
        }
        for &(d, v) in &s.points {
            let (x, y) = (x_of(d), y_of(v));
            if k == 0 {
                svg.push_str(&format!(
                    "<circle class=\"{}\" cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"3\" fill=\"{}\"/>\n",
                    s.class, s.color
                ));
            } else {
                svg.push_str(&format!(
                    "<rect class=\"{}\" x=\"{:.2}\" y=\"{:.2}\" width=\"6\" height=\"6\" \
                     fill=\"{}\"/>\n",
                    s.class,
                    x - 3.0,
                    y - 3.0,
                    s.color
                ));
            }
        }
        // Legend row.
        let ly = MT + 16.0 + 16.0 * k as f64;
        svg.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"10\" height=\"10\" fill=\"{}\"/>\n",
            W - MR - 110.0,
            ly - 9.0,
            s.color
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{:.2}\">{}</text>\n",
            W - MR - 95.0,
            ly,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

pub fn emit_convergence_plot(trace: &AdaptTrace, path: &Path) -> Result<(), PlotError> {
    let svg = render_convergence(trace)?;
    fs::write(path, svg).map_err(|source| PlotError::Io {
        path: path.display().to_string(),
        source,
    })
}
