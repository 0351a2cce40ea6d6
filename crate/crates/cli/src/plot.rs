//! Hand-rolled SVG rendering of the per-phase Dice curve.
//!
//! One polyline over phase index with the annotated phases (ES, ED, MD,
//! MD-1) called out under the axis, so inter-phase consistency is visible at
//! a glance without any plotting toolchain.

use cycleseg::metrics::MetricsReport;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN_L: f64 = 56.0;
const MARGIN_R: f64 = 24.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 56.0;

pub fn dice_curve_svg(report: &MetricsReport) -> String {
    let n = report.rows.len().max(1);
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x = |i: usize| MARGIN_L + plot_w * i as f64 / (n.max(2) - 1) as f64;
    let y = |dice_pct: f64| MARGIN_T + plot_h * (1.0 - dice_pct.clamp(0.0, 100.0) / 100.0);

    let mut svg = format!(
        concat!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {w} {h}\" ",
            "font-family=\"monospace\" font-size=\"13\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n",
            "<text x=\"{tx}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">",
            "Dice across the phase cycle — {id}</text>\n"
        ),
        w = WIDTH,
        h = HEIGHT,
        tx = WIDTH / 2.0,
        id = xml_escape(&report.patient_id),
    );

    // horizontal grid with y labels every 25 Dice points
    for tick in [0.0, 25.0, 50.0, 75.0, 100.0] {
        let ty = y(tick);
        svg.push_str(&format!(
            "<line x1=\"{MARGIN_L}\" y1=\"{ty}\" x2=\"{}\" y2=\"{ty}\" stroke=\"#ccc\"/>\n",
            WIDTH - MARGIN_R
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{tick:.0}</text>\n",
            MARGIN_L - 8.0,
            ty + 4.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" transform=\"rotate(-90 16 {})\" text-anchor=\"middle\">Dice (pct)</text>\n",
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    ));

    // axes
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    svg.push_str(&format!(
        "<line x1=\"{MARGIN_L}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R
    ));

    // the curve itself
    let points: Vec<String> = report
        .rows
        .iter()
        .enumerate()
        .map(|(i, r)| format!("{:.2},{:.2}", x(i), y(r.dice_pct)))
        .collect();
    svg.push_str(&format!(
        "<polyline points=\"{}\" fill=\"none\" stroke=\"#1f6fb2\" stroke-width=\"2\"/>\n",
        points.join(" ")
    ));
    for (i, r) in report.rows.iter().enumerate() {
        svg.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3.5\" fill=\"#1f6fb2\"/>\n",
            x(i),
            y(r.dice_pct)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            x(i),
            HEIGHT - MARGIN_B + 18.0,
            r.phase_index
        ));
        let tag = format!("{}", r.tag);
        if tag != "other" {
            svg.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" fill=\"#a33\">{}</text>\n",
                x(i),
                HEIGHT - MARGIN_B + 34.0,
                xml_escape(&tag)
            ));
        }
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">phase</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 8.0
    ));
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
