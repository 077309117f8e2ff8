// SPDX-License-Identifier: MIT OR Apache-2.0

//! Minimal SVG emission for heatmaps and line charts. Output depends only on
//! the inputs, so identical data gives identical bytes.

use std::fmt::Write as _;

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Blue (low) to white to red (high); `t` in [0, 1].
fn diverging(t: f64) -> String {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.5 };
    let (r, g, b) = if t < 0.5 {
        let u = t / 0.5;
        (59.0 + u * 196.0, 76.0 + u * 179.0, 192.0 + u * 63.0)
    } else {
        let u = (t - 0.5) / 0.5;
        (255.0 - u * 75.0, 255.0 - u * 251.0, 255.0 - u * 217.0)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Rows are drawn bottom-up, so row 0 sits at the bottom.
pub(crate) fn heatmap(title: &str, col_labels: &[String], row_labels: &[String], values: &[Vec<f64>]) -> String {
    let (cell, left, top, bottom) = (22.0, 60.0, 40.0, 40.0);
    let cols = col_labels.len();
    let rows = values.len();
    let width = left + cell * cols as f64 + 90.0;
    let height = top + cell * rows as f64 + bottom;
    let finite = values.iter().flatten().copied().filter(|v| v.is_finite());
    let amax = finite.fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{left:.0}" y="20" font-size="13">{}</text>"#, esc(title));
    for (r, row) in values.iter().enumerate() {
        let y = top + cell * (rows - 1 - r) as f64;
        for (c, &v) in row.iter().enumerate() {
            let x = left + cell * c as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y:.1}" width="{cell:.1}" height="{cell:.1}" fill="{}"><title>{:.4}</title></rect>"#,
                diverging(0.5 + 0.5 * v / amax),
                v
            );
        }
        let label = row_labels.get(r).map(String::as_str).unwrap_or("");
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
            left - 6.0,
            y + cell * 0.7,
            esc(label)
        );
    }
    let ly = top + cell * rows as f64 + 14.0;
    for (c, label) in col_labels.iter().enumerate() {
        let x = left + cell * c as f64 + cell / 2.0;
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{ly:.1}" text-anchor="middle">{}</text>"#, esc(label));
    }
    let kx = left + cell * cols as f64 + 20.0;
    for i in 0..10 {
        let t = 1.0 - i as f64 / 9.0;
        let y = top + i as f64 * 12.0;
        let _ = writeln!(s, r#"<rect x="{kx:.1}" y="{y:.1}" width="12" height="12" fill="{}"/>"#, diverging(t));
    }
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{amax:.3}</text>"#, kx + 16.0, top + 10.0);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{:.3}</text>"#, kx + 16.0, top + 118.0, -amax);
    s.push_str("</svg>\n");
    s
}

pub(crate) struct Series<'a> {
    pub name: &'a str,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Line chart with fixed y range and a linear x axis spanning the data.
pub(crate) fn line_chart(title: &str, x_label: &str, y_label: &str, y_range: (f64, f64), series: &[Series]) -> String {
    let (w, h, l, r, t, b) = (560.0, 340.0, 60.0, 150.0, 40.0, 50.0);
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).filter(|x| x.is_finite());
    let (xmin, xmax) = xs.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x), b.max(x)));
    let (xmin, xmax) = if xmin.is_finite() && xmax > xmin { (xmin, xmax) } else { (0.0, xmin.max(0.0) + 1.0) };
    let (ymin, ymax) = y_range;
    let px = |x: f64| l + (x - xmin) / (xmax - xmin) * (w - l - r);
    let py = |y: f64| t + (1.0 - (y - ymin) / (ymax - ymin)) * (h - t - b);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w:.0}" height="{h:.0}" viewBox="0 0 {w:.0} {h:.0}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<text x="{l:.0}" y="20" font-size="13">{}</text>"#, esc(title));
    let _ = writeln!(
        s,
        r##"<rect x="{l:.1}" y="{t:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#444"/>"##,
        w - l - r,
        h - t - b
    );
    for i in 0..=4 {
        let y = ymin + (ymax - ymin) * i as f64 / 4.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{y:.2}</text>"#, l - 6.0, py(y) + 4.0);
        let _ = writeln!(s, r##"<line x1="{l:.1}" y1="{0:.1}" x2="{1:.1}" y2="{0:.1}" stroke="#ddd"/>"##, py(y), w - r);
    }
    for i in 0..=4 {
        let x = xmin + (xmax - xmin) * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(x),
            h - b + 16.0,
            trim_num(x)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        (l + w - r) / 2.0,
        h - 10.0,
        esc(x_label)
    );
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.1}" transform="rotate(-90 14 {:.1})" text-anchor="middle">{}</text>"#,
        (t + h - b) / 2.0,
        (t + h - b) / 2.0,
        esc(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y)))
            .collect();
        let _ =
            writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, pts.join(" "));
        for p in &pts {
            let (x, y) = p.split_once(',').expect("formatted pair");
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{y}" r="2.5" fill="{color}"/>"#);
        }
        let ly = t + 14.0 * i as f64 + 6.0;
        let _ = writeln!(
            s,
            r#"<line x1="{:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            w - r + 10.0,
            w - r + 26.0
        );
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{}</text>"#, w - r + 30.0, ly + 4.0, esc(ser.name));
    }
    s.push_str("</svg>\n");
    s
}

fn trim_num(x: f64) -> String {
    if (x - x.round()).abs() < 1e-9 {
        format!("{}", x.round() as i64)
    } else {
        format!("{x:.2}")
    }
}
