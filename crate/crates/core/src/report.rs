//! Top-k report rendering: evaluation CSVs to an SVG plot and a
//! markdown comparison table. The SVG is emitted by hand, no external
//! renderer.

use crate::error::{Error, Result};

/// One model's top-k error curve.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    /// (k, mean error), ascending in k
    pub points: Vec<(usize, f64)>,
}

/// Parses an evaluation CSV (`k,mean_error,stderr,n`). Errors name the
/// file and line.
pub fn parse_report_csv(name: &str, text: &str) -> Result<Curve> {
    let mut lines = text.lines().enumerate();
    let header = loop {
        match lines.next() {
            Some((_, l)) if l.trim().is_empty() || l.starts_with('#') => continue,
            Some((_, l)) => break l,
            None => return Err(Error::format(format!("{name}: empty report"))),
        }
    };
    if header.trim() != "k,mean_error,stderr,n" {
        return Err(Error::format(format!(
            "{name}: bad header '{header}', expected 'k,mean_error,stderr,n'"
        )));
    }
    let mut points = Vec::new();
    for (lineno, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(Error::format(format!(
                "{name} line {}: expected 4 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let k: usize = fields[0].trim().parse().map_err(|_| {
            Error::format(format!("{name} line {}: bad k '{}'", lineno + 1, fields[0]))
        })?;
        let mean: f64 = fields[1].trim().parse().map_err(|_| {
            Error::format(format!(
                "{name} line {}: bad mean_error '{}'",
                lineno + 1,
                fields[1]
            ))
        })?;
        points.push((k, mean));
    }
    if points.is_empty() {
        return Err(Error::format(format!("{name}: no data rows")));
    }
    Ok(Curve {
        label: name.to_string(),
        points,
    })
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 160.0;
const MARGIN_T: f64 = 30.0;
const MARGIN_B: f64 = 50.0;
const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

/// Renders top-k error curves, one polyline per model. Axis ranges
/// cover the plotted data.
pub fn render_svg(curves: &[Curve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::usage("nothing to plot"));
    }
    let k_min = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .min()
        .unwrap();
    let k_max = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .max()
        .unwrap();
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for c in curves {
        for &(_, v) in &c.points {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    let y_lo = y_min.min(0.0);
    let y_hi = if y_max > y_lo { y_max } else { y_lo + 1.0 };

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |k: usize| {
        let span = (k_max - k_min).max(1) as f64;
        MARGIN_L + (k as f64 - k_min as f64) / span * plot_w
    };
    let y_of = |v: f64| MARGIN_T + (1.0 - (v - y_lo) / (y_hi - y_lo)) * plot_h;

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    // y ticks
    for i in 0..=4 {
        let v = y_lo + (y_hi - y_lo) * i as f64 / 4.0;
        let y = y_of(v);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y:.2}\" x2=\"{MARGIN_L}\" y2=\"{y:.2}\" stroke=\"black\"/>\n",
            MARGIN_L - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\" text-anchor=\"end\">{v:.3}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0
        ));
    }
    // x ticks at integer k
    let k_step = ((k_max - k_min) / 10).max(1);
    let mut k = k_min;
    while k <= k_max {
        let x = x_of(k);
        svg.push_str(&format!(
            "<line x1=\"{x:.2}\" y1=\"{}\" x2=\"{x:.2}\" y2=\"{}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x:.2}\" y=\"{}\" font-size=\"11\" text-anchor=\"middle\">{k}</text>\n",
            HEIGHT - MARGIN_B + 18.0
        ));
        k += k_step;
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">k</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">top-k error</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(k, v)| format!("{:.2},{:.2}", x_of(k), y_of(v)))
            .collect();
        svg.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.8\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * i as f64 + 10.0;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{ly:.2}\" x2=\"{}\" y2=\"{ly:.2}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            WIDTH - MARGIN_R + 10.0,
            WIDTH - MARGIN_R + 30.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{:.2}\" font-size=\"11\">{}</text>\n",
            WIDTH - MARGIN_R + 36.0,
            ly + 4.0,
            xml_escape(&c.label)
        ));
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Markdown comparison table, one row per k, one column per model.
pub fn render_markdown(curves: &[Curve]) -> Result<String> {
    if curves.is_empty() {
        return Err(Error::usage("nothing to tabulate"));
    }
    let mut ks: Vec<usize> = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|p| p.0))
        .collect();
    ks.sort_unstable();
    ks.dedup();

    let mut out = String::from("| k |");
    for c in curves {
        out.push_str(&format!(" {} |", c.label));
    }
    out.push('\n');
    out.push_str("|---|");
    for _ in curves {
        out.push_str("---|");
    }
    out.push('\n');
    for &k in &ks {
        out.push_str(&format!("| {k} |"));
        for c in curves {
            match c.points.iter().find(|p| p.0 == k) {
                Some(&(_, v)) => out.push_str(&format!(" {v:.4} |")),
                None => out.push_str("  |"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const CSV: &str = "k,mean_error,stderr,n\n1,1.0,0.1,50\n2,0.5,0.05,50\n3,0.25,0.02,50\n";

    #[test]
    fn parse_and_plot_single_curve() {
        let curve = parse_report_csv("model_a.csv", CSV).unwrap();
        assert_eq!(curve.points.len(), 3);
        let svg = render_svg(std::slice::from_ref(&curve)).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 1);
        // three points on the polyline, one "x,y" pair each
        let poly = svg
            .lines()
            .find(|l| l.starts_with("<polyline"))
            .unwrap();
        let pts = poly.split("points=\"").nth(1).unwrap();
        let pts = &pts[..pts.find('"').unwrap()];
        assert_eq!(pts.split(' ').count(), 3);
        assert!(svg.contains("model_a.csv"));
    }

    #[test]
    fn axis_range_covers_data() {
        let curve = parse_report_csv("m.csv", CSV).unwrap();
        let svg = render_svg(&[curve]).unwrap();
        // the top y tick label must be >= the data maximum
        assert!(svg.contains("1.000"), "{svg}");
        // x ticks span k = 1..3
        assert!(svg.contains(">1</text>") && svg.contains(">3</text>"));
    }

    #[test]
    fn malformed_csv_names_file_and_line() {
        let bad = "k,mean_error,stderr,n\n1,1.0,0.1\n";
        let err = parse_report_csv("broken.csv", bad).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("broken.csv") && msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn bad_header_is_rejected() {
        let err = parse_report_csv("h.csv", "k,err\n1,2\n").unwrap_err();
        assert!(err.to_string().contains("header"));
    }

    #[test]
    fn markdown_table_lists_all_ks() {
        let a = parse_report_csv("a.csv", CSV).unwrap();
        let b = Curve {
            label: "b".into(),
            points: vec![(1, 0.9), (2, 0.4)],
        };
        let md = render_markdown(&[a, b]).unwrap();
        assert!(md.starts_with("| k | a.csv | b |"));
        assert_eq!(md.lines().count(), 2 + 3);
        assert!(md.contains("| 3 | 0.2500 |  |"));
    }
}
