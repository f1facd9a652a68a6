//! Minimal hand-rolled SVG output for the evaluation artifacts: one-vs-rest
//! ROC curves and a confusion-matrix heatmap. No styling beyond what the
//! plots need.

use crate::metrics::ConfusionMatrix;

const ROC_SIZE: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// One-vs-rest ROC curves, one polyline per (label, points) pair, with the
/// chance diagonal for reference.
pub fn roc_svg(curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let w = ROC_SIZE + 2.0 * MARGIN;
    let h = ROC_SIZE + 2.0 * MARGIN;
    let px = |fpr: f64| MARGIN + fpr * ROC_SIZE;
    let py = |tpr: f64| MARGIN + (1.0 - tpr) * ROC_SIZE;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
viewBox=\"0 0 {w} {h}\">\n\
<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
<rect x=\"{m}\" y=\"{m}\" width=\"{s}\" height=\"{s}\" fill=\"none\" stroke=\"black\"/>\n\
<line x1=\"{m}\" y1=\"{ye}\" x2=\"{xe}\" y2=\"{m}\" stroke=\"#bbbbbb\" stroke-dasharray=\"4 4\"/>\n",
        m = MARGIN,
        s = ROC_SIZE,
        xe = MARGIN + ROC_SIZE,
        ye = MARGIN + ROC_SIZE,
    );
    for t in 0..=4 {
        let f = t as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" text-anchor=\"middle\">{f:.2}</text>\n",
            x = px(f),
            y = MARGIN + ROC_SIZE + 20.0,
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" text-anchor=\"end\">{f:.2}</text>\n",
            x = MARGIN - 8.0,
            y = py(f) + 4.0,
        ));
    }
    out.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\">false positive rate</text>\n",
        x = MARGIN + ROC_SIZE / 2.0,
        y = MARGIN + ROC_SIZE + 38.0,
    ));
    out.push_str(&format!(
        "<text x=\"{x}\" y=\"{y}\" font-size=\"13\" text-anchor=\"middle\" \
transform=\"rotate(-90 {x} {y})\">true positive rate</text>\n",
        x = 16.0,
        y = MARGIN + ROC_SIZE / 2.0,
    ));
    for (i, (label, points)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let path: Vec<String> = points
            .iter()
            .map(|&(fpr, tpr)| format!("{:.2},{:.2}", px(fpr), py(tpr)))
            .collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            path.join(" ")
        ));
        let ly = MARGIN + 16.0 + 16.0 * i as f64;
        out.push_str(&format!(
            "<line x1=\"{x0}\" y1=\"{ly}\" x2=\"{x1}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n\
<text x=\"{tx}\" y=\"{ty}\" font-size=\"12\">{}</text>\n",
            esc(label),
            x0 = MARGIN + ROC_SIZE - 130.0,
            x1 = MARGIN + ROC_SIZE - 110.0,
            tx = MARGIN + ROC_SIZE - 104.0,
            ty = ly + 4.0,
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Confusion-matrix heatmap: darker cells hold more samples; every cell is
/// annotated with its count.
pub fn confusion_svg(cm: &ConfusionMatrix, labels: &[&str]) -> String {
    let k = cm.k;
    let cell = 70.0;
    let left = 110.0;
    let top = 60.0;
    let w = left + k as f64 * cell + 20.0;
    let h = top + k as f64 * cell + 20.0;
    let max = cm.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" \
viewBox=\"0 0 {w} {h}\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    );
    for t in 0..k {
        for p in 0..k {
            let v = cm.get(t, p);
            let frac = v as f64 / max;
            let shade = (255.0 - 175.0 * frac).round() as u8;
            let x = left + p as f64 * cell;
            let y = top + t as f64 * cell;
            let text_fill = if frac > 0.55 { "white" } else { "black" };
            out.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" \
fill=\"rgb({shade},{shade},255)\" stroke=\"#888888\"/>\n\
<text x=\"{cx}\" y=\"{cy}\" font-size=\"14\" text-anchor=\"middle\" fill=\"{text_fill}\">{v}</text>\n",
                cx = x + cell / 2.0,
                cy = y + cell / 2.0 + 5.0,
            ));
        }
    }
    for (i, label) in labels.iter().enumerate().take(k) {
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            esc(label),
            x = left + i as f64 * cell + cell / 2.0,
            y = top - 10.0,
        ));
        out.push_str(&format!(
            "<text x=\"{x}\" y=\"{y}\" font-size=\"12\" text-anchor=\"end\">{}</text>\n",
            esc(label),
            x = left - 8.0,
            y = top + i as f64 * cell + cell / 2.0 + 4.0,
        ));
    }
    out.push_str(&format!(
        "<text x=\"{x}\" y=\"20\" font-size=\"13\" text-anchor=\"middle\">predicted</text>\n",
        x = left + k as f64 * cell / 2.0,
    ));
    out.push_str("</svg>\n");
    out
}
