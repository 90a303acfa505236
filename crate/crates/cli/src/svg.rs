//! Predicted-vs-actual SOH line chart.

use acla::eval::Curve;

const W: f64 = 640.0;
const H: f64 = 400.0;
const M: f64 = 48.0;

fn polyline(xs: &[f64], ys: &[f64], sx: impl Fn(f64) -> f64, sy: impl Fn(f64) -> f64) -> String {
    xs.iter()
        .zip(ys)
        .map(|(&x, &y)| format!("{:.2},{:.2}", sx(x), sy(y)))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn curve_svg(title: &str, c: &Curve) -> String {
    let xs: Vec<f64> = c.cycles.iter().map(|&k| k as f64).collect();
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let all = c.soh_actual.iter().chain(&c.soh_pred).copied().filter(|v| v.is_finite());
    let (mut y0, mut y1) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !(y1 > y0) {
        y0 -= 0.01;
        y1 += 0.01;
    }
    let pad = 0.05 * (y1 - y0);
    let (y0, y1) = (y0 - pad, y1 + pad);
    let sx = |x: f64| M + (x - x0) / (x1 - x0).max(1e-12) * (W - 2.0 * M);
    let sy = |y: f64| H - M - (y - y0) / (y1 - y0) * (H - 2.0 * M);
    let split = xs[c.n_train.min(xs.len() - 1)];
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{M}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        escape(title)
    ));
    s.push_str(&format!(
        "<rect x=\"{M}\" y=\"{M}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"none\" stroke=\"#888\"/>\n",
        W - 2.0 * M,
        H - 2.0 * M
    ));
    s.push_str(&format!(
        "<line x1=\"{0:.2}\" y1=\"{M}\" x2=\"{0:.2}\" y2=\"{1:.2}\" stroke=\"#bbb\" stroke-dasharray=\"4 3\"/>\n",
        sx(split),
        H - M
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#222\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        polyline(&xs, &c.soh_actual, sx, sy)
    ));
    s.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        polyline(&xs, &c.soh_pred, sx, sy)
    ));
    for (label, y) in [(format!("{y1:.3}"), M), (format!("{y0:.3}"), H - M)] {
        s.push_str(&format!(
            "<text x=\"4\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">{label}</text>\n",
            y + 4.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{M}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\">cycle {x0}</text>\n",
        H - M + 16.0
    ));
    s.push_str(&format!(
        "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">cycle {x1}</text>\n",
        W - M,
        H - M + 16.0
    ));
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
