// SPDX-License-Identifier: MIT OR Apache-2.0

//! Figure tables and self-contained SVG bar charts built from a report.

use std::fmt::Write as _;

use crate::metrics::{Band, MetricReport};

/// A figure: a table of named numeric columns over categories.
#[derive(Debug, Clone, PartialEq)]
pub struct Figure {
    /// File stem, also the SVG name.
    pub name: &'static str,
    pub title: &'static str,
    pub subtitle: String,
    pub x_label: &'static str,
    pub y_label: &'static str,
    pub categories: Vec<String>,
    pub series: Vec<Series>,
    /// Per-bar colors for single-series charts.
    pub bar_colors: Option<Vec<&'static str>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: &'static str,
    pub color: &'static str,
    pub values: Vec<f64>,
}

pub const FIGURE_NAMES: [&str; 5] = [
    "lexical_sensitivity",
    "position_specificity",
    "context_independence",
    "peak_layer_distribution",
    "layer_importance_gradient",
];

const BLUE: &str = "#3b6ea8";
const ORANGE: &str = "#d9822b";
const GREEN: &str = "#4a9a5b";
const BAND_COLORS: [&str; 3] = ["#7fa7d1", "#d9a441", "#b8504b"];

fn layer_labels(n: usize) -> Vec<String> {
    (0..n).map(|l| format!("L{l}")).collect()
}

fn band_of(report: &MetricReport, layer: usize) -> usize {
    report
        .bands
        .as_array()
        .iter()
        .position(|b| b.is_some_and(|b: Band| b.contains(layer)))
        .unwrap_or(0)
}

/// The five figures; a metric that was not computed gives an empty figure.
pub fn figures(report: &MetricReport) -> Vec<Figure> {
    let n = report.n_layers;
    let layers = layer_labels(n);
    let lex = report.lexical.as_ref();
    let ctx = report.contextual.as_ref();
    let empty = |name, title, x_label, y_label| Figure {
        name,
        title,
        subtitle: "not computed in this run".into(),
        x_label,
        y_label,
        categories: Vec::new(),
        series: Vec::new(),
        bar_colors: None,
    };

    let fig1 = match lex {
        Some(l) => Figure {
            name: FIGURE_NAMES[0],
            title: "Lexical Sensitivity",
            subtitle: format!(
                "{} pairs; mean |effect| per layer, target-word patching; p = {:.3e}",
                l.n_pairs, l.sensitivity_test.p_value
            ),
            x_label: "layer",
            y_label: "mean |effect|",
            categories: layers.clone(),
            series: vec![Series { name: "sensitivity", color: BLUE, values: l.sensitivity.clone() }],
            bar_colors: None,
        },
        None => empty(FIGURE_NAMES[0], "Lexical Sensitivity", "layer", "mean |effect|"),
    };

    let fig2 = match lex.and_then(|l| Some((l, l.control_sensitivity.as_ref()?, l.specificity.as_ref()?))) {
        Some((l, control, spec)) => Figure {
            name: FIGURE_NAMES[1],
            title: "Position Specificity",
            subtitle: format!(
                "specificity mean {:.4} over layers {}-{}, p = {:.3e}",
                spec.mean,
                l.specificity_layers.map_or(0, |b| b.first),
                l.specificity_layers.map_or(0, |b| b.last),
                spec.p_value
            ),
            x_label: "layer",
            y_label: "mean |effect|",
            categories: layers.clone(),
            series: vec![
                Series { name: "target_words", color: BLUE, values: l.sensitivity.clone() },
                Series { name: "control_words", color: ORANGE, values: control.clone() },
            ],
            bar_colors: None,
        },
        None => empty(FIGURE_NAMES[1], "Position Specificity", "layer", "mean |effect|"),
    };

    let fig3 = match lex.and_then(|l| Some((l, l.variability.as_ref()?))) {
        Some((l, v)) => Figure {
            name: FIGURE_NAMES[2],
            title: "Context Independence of Sentiment Effects",
            subtitle: format!(
                "{} words with at least {} contexts; early mean {}, later mean {}",
                v.n_words,
                v.min_contexts,
                fmt_opt(l.band_variability.as_ref().and_then(|b| b.early)),
                fmt_opt(l.variability_after_early)
            ),
            x_label: "layer",
            y_label: "sd of |effect| across contexts",
            categories: layers.clone(),
            series: vec![Series { name: "variability", color: GREEN, values: v.per_layer.clone() }],
            bar_colors: None,
        },
        None => empty(FIGURE_NAMES[2], "Context Independence of Sentiment Effects", "layer", "variability"),
    };

    let fig4 = match ctx {
        Some(c) => Figure {
            name: FIGURE_NAMES[3],
            title: "Peak Layer Distribution Across Context Types",
            subtitle: format!("{} phenomena, {} pairs", c.phenomena.len(), c.n_pairs),
            x_label: "peak layer",
            y_label: "phenomena",
            categories: layers.clone(),
            series: vec![Series {
                name: "phenomena",
                color: BLUE,
                values: c.peak_histogram.iter().map(|&k| k as f64).collect(),
            }],
            bar_colors: Some((0..n).map(|l| BAND_COLORS[band_of(report, l)]).collect()),
        },
        None => empty(FIGURE_NAMES[3], "Peak Layer Distribution Across Context Types", "peak layer", "phenomena"),
    };

    let fig5 = match ctx {
        Some(c) => Figure {
            name: FIGURE_NAMES[4],
            title: "Layer Importance Gradient",
            subtitle: format!(
                "band shares early {:.1}% / mid {:.1}% / late {:.1}%",
                100.0 * c.band_shares[0],
                100.0 * c.band_shares[1],
                100.0 * c.band_shares[2]
            ),
            x_label: "layer",
            y_label: "total |effect|",
            categories: layers,
            series: vec![Series { name: "total", color: BLUE, values: c.totals.clone() }],
            bar_colors: Some((0..n).map(|l| BAND_COLORS[band_of(report, l)]).collect()),
        },
        None => empty(FIGURE_NAMES[4], "Layer Importance Gradient", "layer", "total |effect|"),
    };

    vec![fig1, fig2, fig3, fig4, fig5]
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x:.4}"))
}

impl Figure {
    /// CSV table: one row per category, one column per series.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![self.x_label.replace(' ', "_")];
        header.extend(self.series.iter().map(|s| s.name.to_string()));
        w.write_record(&header).expect("in-memory write");
        for (i, c) in self.categories.iter().enumerate() {
            let mut row = vec![c.clone()];
            row.extend(self.series.iter().map(|s| s.values[i].to_string()));
            w.write_record(&row).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }

    pub fn to_svg(&self) -> String {
        const W: f64 = 760.0;
        const H: f64 = 440.0;
        const LEFT: f64 = 80.0;
        const RIGHT: f64 = 24.0;
        const TOP: f64 = 70.0;
        const BOTTOM: f64 = 64.0;
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{LEFT}" y="28" font-size="18" font-weight="bold">{}</text>"#, esc(self.title));
        let _ = writeln!(s, r##"<text x="{LEFT}" y="50" font-size="12" fill="#555">{}</text>"##, esc(&self.subtitle));
        let plot_w = W - LEFT - RIGHT;
        let plot_h = H - TOP - BOTTOM;
        let all = self.series.iter().flat_map(|x| x.values.iter().copied());
        let (lo, hi) = all.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let (lo, hi) = if hi > lo { (lo, hi) } else { (0.0, 1.0) };
        let y = |v: f64| TOP + plot_h * (hi - v) / (hi - lo);
        for k in 0..=5 {
            let v = lo + (hi - lo) * k as f64 / 5.0;
            let yy = y(v);
            let _ = writeln!(
                s,
                r##"<line x1="{LEFT}" x2="{:.1}" y1="{yy:.1}" y2="{yy:.1}" stroke="#e3e3e3"/><text x="{:.1}" y="{:.1}" font-size="11" text-anchor="end">{}</text>"##,
                W - RIGHT,
                LEFT - 6.0,
                yy + 4.0,
                tick(v, hi - lo)
            );
        }
        let n = self.categories.len();
        if n > 0 && !self.series.is_empty() {
            let slot = plot_w / n as f64;
            let bar = slot * 0.8 / self.series.len() as f64;
            for (i, c) in self.categories.iter().enumerate() {
                let x0 = LEFT + slot * i as f64 + slot * 0.1;
                for (j, ser) in self.series.iter().enumerate() {
                    let v = ser.values[i];
                    let color = match (&self.bar_colors, self.series.len()) {
                        (Some(c), 1) => c[i],
                        _ => ser.color,
                    };
                    let (top, bottom) = (y(v.max(0.0)), y(v.min(0.0)));
                    let _ = writeln!(
                        s,
                        r#"<rect x="{:.1}" y="{top:.1}" width="{:.1}" height="{:.1}" fill="{color}"><title>{} {}: {}</title></rect>"#,
                        x0 + bar * j as f64,
                        bar.max(1.0) - 1.0,
                        (bottom - top).max(0.0),
                        esc(c),
                        ser.name,
                        v
                    );
                }
                let _ = writeln!(
                    s,
                    r#"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">{}</text>"#,
                    LEFT + slot * (i as f64 + 0.5),
                    TOP + plot_h + 16.0,
                    esc(c)
                );
            }
            if self.series.len() > 1 {
                for (j, ser) in self.series.iter().enumerate() {
                    let lx = W - RIGHT - 150.0;
                    let ly = TOP + 8.0 + 18.0 * j as f64;
                    let _ = writeln!(
                        s,
                        r#"<rect x="{lx}" y="{:.1}" width="12" height="12" fill="{}"/><text x="{:.1}" y="{ly:.1}" font-size="12">{}</text>"#,
                        ly - 10.0,
                        ser.color,
                        lx + 18.0,
                        esc(ser.name)
                    );
                }
            }
        } else {
            let _ = writeln!(
                s,
                r##"<text x="{:.1}" y="{:.1}" font-size="14" text-anchor="middle" fill="#888">no data</text>"##,
                LEFT + plot_w / 2.0,
                TOP + plot_h / 2.0
            );
        }
        let _ = writeln!(
            s,
            r#"<line x1="{LEFT}" x2="{LEFT}" y1="{TOP}" y2="{:.1}" stroke="black"/><line x1="{LEFT}" x2="{:.1}" y1="{:.1}" y2="{:.1}" stroke="black"/>"#,
            TOP + plot_h,
            W - RIGHT,
            y(0.0),
            y(0.0)
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" font-size="12" text-anchor="middle">{}</text>"#,
            LEFT + plot_w / 2.0,
            H - 18.0,
            esc(self.x_label)
        );
        let _ = writeln!(
            s,
            r#"<text transform="translate(20 {:.1}) rotate(-90)" font-size="12" text-anchor="middle">{}</text>"#,
            TOP + plot_h / 2.0,
            esc(self.y_label)
        );
        s.push_str("</svg>\n");
        s
    }
}

fn tick(v: f64, range: f64) -> String {
    if range >= 50.0 {
        format!("{v:.0}")
    } else if range >= 5.0 {
        format!("{v:.1}")
    } else if range >= 0.05 {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Per-phenomenon table behind the peak-layer figure.
pub fn phenomena_csv(report: &MetricReport) -> Option<Vec<u8>> {
    let c = report.contextual.as_ref()?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = ["code", "name", "n_pairs", "peak_layer", "peak_tie", "top3", "in_modal_set"]
        .map(String::from)
        .to_vec();
    header.extend((0..report.n_layers).map(|l| format!("mean_abs_L{l}")));
    w.write_record(&header).expect("in-memory write");
    for p in &c.phenomena {
        let mut sorted = p.top3.clone();
        sorted.sort_unstable();
        let mut row = vec![
            p.code.clone(),
            p.name.clone(),
            p.n_pairs.to_string(),
            p.peak_layer.to_string(),
            p.peak_tie.to_string(),
            p.top3.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(" "),
            (sorted == c.modal_top3).to_string(),
        ];
        row.extend((0..report.n_layers).map(|l| p.mean_abs.get(l).map_or_else(String::new, f64::to_string)));
        w.write_record(&row).expect("in-memory write");
    }
    Some(w.into_inner().expect("in-memory flush"))
}

pub fn verdicts_csv(report: &MetricReport) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "hypothesis", "status", "criterion", "observed"]).expect("in-memory write");
    for v in &report.verdicts {
        let status = serde_json::to_value(v.status).expect("status serializes");
        w.write_record([
            v.id.as_str(),
            v.hypothesis.as_str(),
            status.as_str().unwrap_or_default(),
            v.criterion.as_str(),
            v.observed.as_str(),
        ])
        .expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::published_reference;

    #[test]
    fn published_figures_render() {
        let r = published_reference();
        let figs = figures(&r);
        assert_eq!(figs.iter().map(|f| f.name).collect::<Vec<_>>(), FIGURE_NAMES);
        for f in &figs {
            let svg = f.to_svg();
            assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
            assert!(!svg.contains("href"));
        }
        let csv = String::from_utf8(figs[4].to_csv()).unwrap();
        assert!(csv.starts_with("layer,total\nL0,828.7\n"));
        assert_eq!(figs[3].series[0].values.iter().sum::<f64>(), 15.0);
        assert!(phenomena_csv(&r).is_some());
    }

    #[test]
    fn escaping() {
        assert_eq!(esc(r#"<a & "b">"#), "&lt;a &amp; &quot;b&quot;&gt;");
    }
}
