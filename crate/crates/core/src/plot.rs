//! Small static SVG charts: line curves, grouped bars and heatmaps.

use std::fmt::Write as _;

use ndarray::Array2;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 150.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 48.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
}

fn axes(out: &mut String, xlabel: &str, ylabel: &str, lo: f64, hi: f64) {
    let (x0, y0, x1, y1) = (LEFT, H - BOTTOM, W - RIGHT, TOP);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>"#);
    let _ = writeln!(out, r#"<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>"#);
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let y = y0 - (y0 - y1) * i as f64 / 4.0;
        let _ = writeln!(out, r##"<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>"##);
        let _ = writeln!(
            out,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            x0 - 6.0,
            y + 4.0,
            tick(v)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (x0 + x1) / 2.0,
        H - 10.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(ylabel)
    );
}

fn tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = TOP + 8.0 + 18.0 * i as f64;
        let x = W - RIGHT + 12.0;
        let _ = writeln!(
            out,
            r#"<rect x="{x}" y="{}" width="12" height="12" fill="{}"/>"#,
            y - 10.0,
            PALETTE[i % PALETTE.len()]
        );
        let _ = writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, x + 18.0, escape(name));
    }
}

fn range(values: impl Iterator<Item = f64>, floor_zero: bool) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if floor_zero {
        lo = lo.min(0.0);
    }
    if hi - lo < 1e-12 {
        hi = lo + 1.0;
    }
    (lo, hi)
}

/// One polyline per named series against its index.
pub fn line_chart(title: &str, xlabel: &str, ylabel: &str, series: &[(&str, &[f64])]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().copied()), false);
    axes(&mut out, xlabel, ylabel, lo, hi);
    let len = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let sx = (W - RIGHT - LEFT) / (len - 1) as f64;
    let sy = (H - BOTTOM - TOP) / (hi - lo);
    for (i, (_, values)) in series.iter().enumerate() {
        let pts: Vec<String> = values
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(j, v)| format!("{:.2},{:.2}", LEFT + sx * j as f64, H - BOTTOM - sy * (v - lo)))
            .collect();
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            PALETTE[i % PALETTE.len()],
            pts.join(" ")
        );
    }
    legend(&mut out, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Bars grouped by category; `series[i].1[g]` is the bar of series `i` in group `g`.
pub fn grouped_bars(title: &str, ylabel: &str, groups: &[&str], series: &[(&str, Vec<f64>)]) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (lo, hi) = range(series.iter().flat_map(|(_, v)| v.iter().copied()), true);
    axes(&mut out, "", ylabel, lo, hi);
    let gw = (W - RIGHT - LEFT) / groups.len().max(1) as f64;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    let sy = (H - BOTTOM - TOP) / (hi - lo);
    for (g, name) in groups.iter().enumerate() {
        let gx = LEFT + gw * g as f64 + gw * 0.1;
        for (i, (_, values)) in series.iter().enumerate() {
            let Some(&v) = values.get(g).filter(|v| v.is_finite()) else {
                continue;
            };
            let top = H - BOTTOM - sy * (v.max(lo) - lo);
            let _ = writeln!(
                out,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                gx + bw * i as f64,
                top,
                bw * 0.95,
                (H - BOTTOM - top).max(0.0),
                PALETTE[i % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{}</text>"#,
            gx + gw * 0.4,
            H - BOTTOM + 16.0,
            escape(name)
        );
    }
    legend(&mut out, &series.iter().map(|(n, _)| *n).collect::<Vec<_>>());
    out.push_str("</svg>\n");
    out
}

/// Heatmap with white for the minimum and dark blue for the maximum.
pub fn heatmap(title: &str, xlabel: &str, ylabel: &str, values: &Array2<f64>) -> String {
    let mut out = String::new();
    header(&mut out, title);
    let (rows, cols) = values.dim();
    let (lo, hi) = range(values.iter().copied(), false);
    let cw = (W - RIGHT - LEFT) / cols.max(1) as f64;
    let ch = (H - BOTTOM - TOP) / rows.max(1) as f64;
    for ((r, c), &v) in values.indexed_iter() {
        let t = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        let shade = |full: f64| (255.0 - t * (255.0 - full)).round() as u8;
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="rgb({},{},{})"><title>{v:.4}</title></rect>"#,
            LEFT + cw * c as f64,
            TOP + ch * r as f64,
            cw,
            ch,
            shade(8.0),
            shade(48.0),
            shade(107.0)
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        (W - RIGHT + LEFT) / 2.0,
        H - 16.0,
        escape(xlabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        (H - BOTTOM + TOP) / 2.0,
        (H - BOTTOM + TOP) / 2.0,
        escape(ylabel)
    );
    let _ = writeln!(
        out,
        r#"<text x="{}" y="{}">min {} / max {}</text>"#,
        W - RIGHT + 12.0,
        TOP + 10.0,
        tick(lo),
        tick(hi)
    );
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let a = [3.0, 2.0, 1.5];
        let svg = line_chart("loss", "epoch", "value", &[("total", &a), ("task", &[1.0, f64::NAN])]);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_eq!(svg.matches("<polyline").count(), 2);

        let bars = grouped_bars("rmse", "RMSE", &["test0", "test1"], &[("a<b", vec![1.0, 2.0])]);
        assert_eq!(bars.matches("<rect").count(), 1 + 2 + 1);
        assert!(bars.contains("a&lt;b"));

        let hm = heatmap("scores", "prototype", "node", &Array2::from_elem((2, 3), 0.5));
        assert_eq!(hm.matches("<title>").count(), 6);
    }
}
