//! Minimal standalone SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn finite_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn header(out: &mut String, title: &str) {
    let _ = write!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>\n",
        W / 2.0,
        escape(title)
    );
}

/// One polyline per series over a shared x axis.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<f64>)]) -> String {
    let longest = series.iter().map(|(_, ys)| ys.len()).max().unwrap_or(0).max(2);
    let (ylo, yhi) = finite_range(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    let px = |i: usize| MARGIN + (W - 2.0 * MARGIN) * i as f64 / (longest - 1) as f64;
    let py = |y: f64| H - MARGIN - (H - 2.0 * MARGIN) * (y - ylo) / (yhi - ylo);
    let mut out = String::new();
    header(&mut out, title);
    let _ = writeln!(
        out,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    );
    for (k, (name, ys)) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = ys
            .iter()
            .enumerate()
            .filter(|(_, y)| y.is_finite())
            .map(|(i, &y)| format!("{:.2},{:.2}", px(i), py(y)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\" points=\"{}\"/>",
            pts.join(" ")
        );
        let ly = MARGIN + 16.0 + 16.0 * k as f64;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{ly}\" font-family=\"sans-serif\" font-size=\"12\" fill=\"{colour}\">{}</text>",
            W - MARGIN - 110.0,
            escape(name)
        );
    }
    axis_labels(&mut out, x_label, y_label, (0.0, (longest - 1) as f64), (ylo, yhi));
    out.push_str("</svg>\n");
    out
}

fn axis_labels(out: &mut String, x_label: &str, y_label: &str, x: (f64, f64), y: (f64, f64)) {
    let small = "font-family=\"sans-serif\" font-size=\"11\"";
    let _ = writeln!(out, "<text x=\"{MARGIN}\" y=\"{}\" {small}>{:.3}</text>", H - MARGIN + 16.0, x.0);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" {small} text-anchor=\"end\">{:.3}</text>",
        W - MARGIN,
        H - MARGIN + 16.0,
        x.1
    );
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" {small} text-anchor=\"end\">{:.3}</text>", MARGIN - 4.0, H - MARGIN, y.0);
    let _ = writeln!(out, "<text x=\"{}\" y=\"{}\" {small} text-anchor=\"end\">{:.3}</text>", MARGIN - 4.0, MARGIN + 10.0, y.1);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{}</text>",
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>",
        H / 2.0,
        H / 2.0,
        escape(y_label)
    );
}

/// Grid of coloured cells; `values[r][c]` sits at `(xs[c], ys[r])`.
pub fn heatmap(title: &str, x_label: &str, y_label: &str, xs: &[f64], ys: &[f64], values: &[Vec<f64>]) -> String {
    let (lo, hi) = finite_range(values.iter().flatten().copied());
    let cw = (W - 2.0 * MARGIN) / xs.len().max(1) as f64;
    let ch = (H - 2.0 * MARGIN) / ys.len().max(1) as f64;
    let mut out = String::new();
    header(&mut out, title);
    for (r, row) in values.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            let t = if v.is_finite() { (v - lo) / (hi - lo) } else { 0.0 };
            // dark blue to yellow
            let (red, green, blue) = ((255.0 * t) as u8, (40.0 + 200.0 * t) as u8, (120.0 * (1.0 - t)) as u8);
            let x = MARGIN + c as f64 * cw;
            let y = H - MARGIN - (r + 1) as f64 * ch;
            let _ = writeln!(
                out,
                "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({red},{green},{blue})\"/>",
                cw + 0.3,
                ch + 0.3
            );
        }
    }
    let span = |v: &[f64]| (v.first().copied().unwrap_or(0.0), v.last().copied().unwrap_or(1.0));
    axis_labels(&mut out, x_label, y_label, span(xs), span(ys));
    out.push_str("</svg>\n");
    out
}
