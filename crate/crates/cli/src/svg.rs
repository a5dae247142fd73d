use std::fmt::Write;

use excitable::classify::{Chart, Region};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 600.0;
const MARGIN: f64 = 50.0;

fn fill(r: Option<Region>) -> &'static str {
    match r {
        Some(Region::I) => "#8fb9d8",
        Some(Region::II) => "#f2c57c",
        Some(Region::III) => "#e7e29a",
        Some(Region::IV) => "#9fd3a3",
        Some(Region::V) => "#d39fc6",
        Some(Region::Boundary) => "#555555",
        None => "#dddddd",
    }
}

/// Region map with the TC line, SN curves and the pitchfork marker.
pub fn chart_svg(chart: &Chart) -> String {
    let o = &chart.options;
    let sx = (WIDTH - 2.0 * MARGIN) / (o.v0_range.1 - o.v0_range.0);
    let sy = (HEIGHT - 2.0 * MARGIN) / (o.n0_range.1 - o.n0_range.0);
    let x = |v: f64| MARGIN + (v - o.v0_range.0) * sx;
    let y = |n: f64| HEIGHT - MARGIN - (n - o.n0_range.0) * sy;
    let (dv, dn) = o.cell_size();

    let mut s = String::new();
    let _ = writeln!(
        s,
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"##
    );
    let _ = writeln!(
        s,
        r##"<defs><clipPath id="plot"><rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}"/></clipPath></defs>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(s, r##"<g shape-rendering="crispEdges">"##);
    for c in &chart.cells {
        let _ = writeln!(
            s,
            r##"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"##,
            x(c.v0 - dv / 2.0),
            y(c.n0 + dn / 2.0),
            dv * sx + 0.05,
            dn * sy + 0.05,
            fill(c.region)
        );
    }
    let _ = writeln!(s, "</g>");

    let polyline = |pts: &[(f64, f64)], stroke: &str, dash: &str| {
        let p: Vec<String> = pts.iter().map(|&(v, n)| format!("{:.2},{:.2}", x(v), y(n))).collect();
        format!(
            r##"<polyline clip-path="url(#plot)" points="{}" fill="none" stroke="{stroke}" stroke-width="2"{dash}/>"##,
            p.join(" ")
        )
    };
    let _ = writeln!(s, "{}", polyline(&chart.tc_line, "#000000", ""));
    for cv in &chart.sn_curves {
        let _ = writeln!(s, "{}", polyline(&cv.points, "#b00020", r##" stroke-dasharray="6 3""##));
    }
    let (pv, pn) = chart.pitchfork;
    let _ = writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="5" fill="#ffffff" stroke="#000000" stroke-width="2"/>"##, x(pv), y(pn));

    let _ = writeln!(
        s,
        r##"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="#000000"/>"##,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    );
    let _ = writeln!(
        s,
        r##"<text x="{}" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle">V0</text>"##,
        WIDTH / 2.0,
        HEIGHT - 15.0
    );
    let _ = writeln!(
        s,
        r##"<text x="15" y="{}" font-family="sans-serif" font-size="14" text-anchor="middle" transform="rotate(-90 15 {})">n0</text>"##,
        HEIGHT / 2.0,
        HEIGHT / 2.0
    );
    for (k, (v, n)) in [(o.v0_range.0, o.n0_range.0), (o.v0_range.1, o.n0_range.1)].iter().enumerate() {
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.2}</text>"##,
            x(*v),
            HEIGHT - MARGIN + 15.0
        );
        let _ = writeln!(
            s,
            r##"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{n:.2}</text>"##,
            MARGIN - 4.0,
            y(*n) + if k == 0 { 0.0 } else { 10.0 }
        );
    }
    s.push_str("</svg>\n");
    s
}
