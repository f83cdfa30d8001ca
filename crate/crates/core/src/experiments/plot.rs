//! Standalone SVG emitter for experiment CSVs. Output bytes are a pure
//! function of the input CSV, so plots are reproducible byte-for-byte.
//!
//! Expected CSV shapes (header row mandatory):
//!   - 2 columns: x,y            -> one polyline
//!   - 3 columns: series,x,y     -> one polyline per series value

use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    /// Line chart; `log_x` plots x on a log10 axis (query grids),
    /// `log_y` plots y on a log10 axis (p-values).
    Lines { log_x: bool, log_y: bool },
    /// ROC curve: axes fixed to [0,1] x [0,1] with the identity reference.
    Roc,
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 24.0;
const MARGIN_B: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f",
];

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

fn parse_csv(csv: &str) -> Result<(Vec<String>, Vec<Series>)> {
    let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::MalformedCsv("empty csv".into()))?
        .split(',')
        .map(str::to_string)
        .collect();
    if header.len() != 2 && header.len() != 3 {
        return Err(Error::MalformedCsv(format!(
            "expected 2 or 3 columns, got {}",
            header.len()
        )));
    }
    let mut series: Vec<Series> = Vec::new();
    let mut n_rows = 0usize;
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != header.len() {
            return Err(Error::MalformedCsv(format!(
                "row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                header.len()
            )));
        }
        let (name, xs, ys) = if header.len() == 3 {
            (fields[0].to_string(), fields[1], fields[2])
        } else {
            (String::new(), fields[0], fields[1])
        };
        let x: f64 = xs
            .parse()
            .map_err(|_| Error::MalformedCsv(format!("bad number {xs:?}")))?;
        let y: f64 = ys
            .parse()
            .map_err(|_| Error::MalformedCsv(format!("bad number {ys:?}")))?;
        match series.iter_mut().find(|s| s.name == name) {
            Some(s) => s.points.push((x, y)),
            None => series.push(Series {
                name,
                points: vec![(x, y)],
            }),
        }
        n_rows += 1;
    }
    if n_rows == 0 {
        return Err(Error::MalformedCsv("no data rows".into()));
    }
    Ok((header, series))
}

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Renders `csv` as a standalone SVG at `path`. Errors on malformed or empty
/// input without creating the file.
pub fn emit_plot(csv: &str, kind: PlotKind, path: &Path) -> Result<()> {
    let svg = render_svg(csv, kind)?;
    std::fs::write(path, svg)?;
    Ok(())
}

/// Pure renderer behind [`emit_plot`].
pub fn render_svg(csv: &str, kind: PlotKind) -> Result<String> {
    let (header, mut series) = parse_csv(csv)?;
    let (log_x, log_y, roc) = match kind {
        PlotKind::Lines { log_x, log_y } => (log_x, log_y, false),
        PlotKind::Roc => (false, false, true),
    };

    let tx = |v: f64| if log_x { v.log10() } else { v };
    let ty = |v: f64| if log_y { v.log10() } else { v };
    for s in series.iter_mut() {
        for p in s.points.iter_mut() {
            *p = (tx(p.0), ty(p.1));
            if !p.0.is_finite() || !p.1.is_finite() {
                return Err(Error::MalformedCsv(
                    "non-finite point after axis transform".into(),
                ));
            }
        }
    }

    let (mut x_min, mut x_max, mut y_min, mut y_max) = if roc {
        (0.0, 1.0, 0.0, 1.0)
    } else {
        let mut xs: Vec<f64> = vec![];
        let mut ys: Vec<f64> = vec![];
        for s in &series {
            for &(x, y) in &s.points {
                xs.push(x);
                ys.push(y);
            }
        }
        let min = |v: &[f64]| v.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = |v: &[f64]| v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        (min(&xs), max(&xs), min(&ys), max(&ys))
    };
    if x_max == x_min {
        x_min -= 0.5;
        x_max += 0.5;
    }
    if y_max == y_min {
        y_min -= 0.5;
        y_max += 0.5;
    }

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| MARGIN_T + plot_h - (y - y_min) / (y_max - y_min) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    // axes
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(MARGIN_T + plot_h)
    ));
    svg.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T + plot_h),
        fmt(MARGIN_L + plot_w),
        fmt(MARGIN_T + plot_h)
    ));

    // ticks and labels
    const TICKS: usize = 5;
    for i in 0..=TICKS {
        let fx = x_min + (x_max - x_min) * i as f64 / TICKS as f64;
        let fy = y_min + (y_max - y_min) * i as f64 / TICKS as f64;
        let label_x = if log_x {
            format!("1e{fx:.1}")
        } else {
            format!("{fx:.3}")
        };
        let label_y = if log_y {
            format!("1e{fy:.1}")
        } else {
            format!("{fy:.3}")
        };
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{label_x}</text>\n",
            fmt(px(fx)),
            fmt(MARGIN_T + plot_h + 18.0)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\" text-anchor=\"end\">{label_y}</text>\n",
            fmt(MARGIN_L - 6.0),
            fmt(py(fy) + 4.0)
        ));
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#dddddd\"/>\n",
            fmt(MARGIN_L),
            fmt(py(fy)),
            fmt(MARGIN_L + plot_w),
            fmt(py(fy))
        ));
    }

    // axis titles from the header
    let (x_name, y_name) = if header.len() == 3 {
        (header[1].clone(), header[2].clone())
    } else {
        (header[0].clone(), header[1].clone())
    };
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{x_name}</text>\n",
        fmt(MARGIN_L + plot_w / 2.0),
        fmt(HEIGHT - 10.0)
    ));
    svg.push_str(&format!(
        "<text x=\"14\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 14 {})\">{y_name}</text>\n",
        fmt(MARGIN_T + plot_h / 2.0),
        fmt(MARGIN_T + plot_h / 2.0)
    ));

    if roc {
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"#999999\" stroke-dasharray=\"4 3\"/>\n",
            fmt(px(0.0)),
            fmt(py(0.0)),
            fmt(px(1.0)),
            fmt(py(1.0))
        ));
    }

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        // legend
        let ly = MARGIN_T + 14.0 + 18.0 * si as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            fmt(WIDTH - MARGIN_R + 8.0),
            fmt(ly),
            fmt(WIDTH - MARGIN_R + 28.0),
            fmt(ly)
        ));
        let name = if s.name.is_empty() { &y_name } else { &s.name };
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"11\">{name}</text>\n",
            fmt(WIDTH - MARGIN_R + 34.0),
            fmt(ly + 4.0)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "model,queries,p\nstudent,1,0.5\nstudent,10,0.01\nbase,1,0.5\nbase,10,0.4\n";

    #[test]
    fn svg_header_and_determinism() {
        let kind = PlotKind::Lines {
            log_x: true,
            log_y: true,
        };
        let a = render_svg(CSV, kind).unwrap();
        let b = render_svg(CSV, kind).unwrap();
        assert!(a.starts_with("<svg "));
        assert_eq!(a, b);
        assert!(a.contains("student"));
        assert!(a.contains("base"));
    }

    #[test]
    fn empty_rows_error_without_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.svg");
        let err = emit_plot("a,b\n", PlotKind::Roc, &path);
        assert!(err.is_err());
        assert!(!path.exists());
    }

    #[test]
    fn malformed_rows_rejected() {
        assert!(render_svg("x,y\n1\n", PlotKind::Roc).is_err());
        assert!(render_svg("x,y\n1,abc\n", PlotKind::Roc).is_err());
        assert!(render_svg("", PlotKind::Roc).is_err());
    }

    #[test]
    fn roc_kind_draws_identity_reference() {
        let svg = render_svg("fpr,tpr\n0,0\n0.5,0.9\n1,1\n", PlotKind::Roc).unwrap();
        assert!(svg.contains("stroke-dasharray"));
    }

    #[test]
    fn emit_writes_identical_bytes_twice() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.svg");
        let p2 = dir.path().join("b.svg");
        let kind = PlotKind::Lines {
            log_x: false,
            log_y: false,
        };
        emit_plot(CSV, kind, &p1).unwrap();
        emit_plot(CSV, kind, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
