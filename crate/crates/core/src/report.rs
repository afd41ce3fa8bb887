//! CSV and SVG emitters. Output depends only on the inputs (no timestamps),
//! so identical runs produce identical bytes.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::analysis::{ScatterRow, SweepResult};
use crate::fitap::{CurveRecord, EvalReport};

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8")
}

/// One row per (category, theta) plus `__all__` rows for the pooled APs.
pub fn threshold_csv(report: &EvalReport) -> String {
    let mut rows = Vec::new();
    for t in &report.per_threshold {
        rows.push(vec!["__all__".into(), format!("{:.2}", t.theta), t.ap.to_string()]);
    }
    for (cat, rep) in &report.per_category {
        for (t, ap) in report.per_threshold.iter().zip(&rep.aps) {
            rows.push(vec![cat.clone(), format!("{:.2}", t.theta), ap.to_string()]);
        }
    }
    csv_string(&["category", "theta", "ap"], rows)
}

pub fn curve_csv(rec: &CurveRecord) -> String {
    csv_string(
        &["rank", "recall", "precision", "envelope_precision"],
        rec.curve
            .points
            .iter()
            .zip(&rec.envelope.points)
            .enumerate()
            .map(|(k, (p, e))| {
                vec![
                    (k + 1).to_string(),
                    p.recall.to_string(),
                    p.precision.to_string(),
                    e.precision.to_string(),
                ]
            }),
    )
}

/// Plain row-per-line numeric matrix.
pub fn matrix_csv(m: &Array2<f64>) -> String {
    let header: Vec<String> = (0..m.ncols()).map(|j| format!("k{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    csv_string(
        &header,
        m.outer_iter()
            .map(|row| row.iter().map(|v| v.to_string()).collect()),
    )
}

pub fn scatter_csv(rows: &[ScatterRow]) -> String {
    csv_string(
        &["m", "s_count", "theta", "seed"],
        rows.iter().map(|r| {
            vec![
                r.m.to_string(),
                r.s_count.to_string(),
                r.theta.to_string(),
                r.seed.map_or_else(String::new, |s| s.to_string()),
            ]
        }),
    )
}

pub fn sweep_csv(res: &SweepResult) -> String {
    csv_string(
        &["m", "s_count", "theta", "seed", "tau"],
        res.points.iter().map(|p| {
            vec![
                p.m.to_string(),
                p.s_count.to_string(),
                p.theta.to_string(),
                p.seed.to_string(),
                p.tau.to_string(),
            ]
        }),
    )
}

const W: f64 = 420.0;
const H: f64 = 320.0;
const PAD: f64 = 48.0;

struct Frame {
    x: (f64, f64),
    y: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        let span = (self.x.1 - self.x.0).max(f64::EPSILON);
        PAD + (x - self.x.0) / span * (W - 2.0 * PAD)
    }

    fn py(&self, y: f64) -> f64 {
        let span = (self.y.1 - self.y.0).max(f64::EPSILON);
        H - PAD - (y - self.y.0) / span * (H - 2.0 * PAD)
    }

    fn open(&self, title: &str, xlabel: &str, ylabel: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
            W / 2.0,
            escape(title)
        );
        let (x0, x1, y0, y1) = (PAD, W - PAD, H - PAD, PAD);
        let _ = writeln!(
            s,
            r#"<path d="M{x0} {y1} L{x0} {y0} L{x1} {y0}" fill="none" stroke="black"/>"#
        );
        for (v, anchor) in [(self.x.0, "start"), (self.x.1, "end")] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="{anchor}">{}</text>"#,
                self.px(v),
                y0 + 14.0,
                fmt_tick(v)
            );
        }
        for v in [self.y.0, self.y.1] {
            let _ = writeln!(
                s,
                r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#,
                x0 - 4.0,
                self.py(v) + 4.0,
                fmt_tick(v)
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
            W / 2.0,
            H - 12.0,
            escape(xlabel)
        );
        let _ = writeln!(
            s,
            r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
            H / 2.0,
            H / 2.0,
            escape(ylabel)
        );
        s
    }
}

fn fmt_tick(v: f64) -> String {
    format!("{v:.3}").trim_end_matches('0').trim_end_matches('.').to_string()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(frame: &Frame, pts: impl Iterator<Item = (f64, f64)>, attrs: &str) -> String {
    let coords: Vec<String> = pts
        .map(|(x, y)| format!("{:.2},{:.2}", frame.px(x), frame.py(y)))
        .collect();
    format!(r#"<polyline points="{}" fill="none" {attrs}/>"#, coords.join(" "))
}

/// Empirical curve (solid) and its envelope (dashed).
pub fn pr_curve_svg(rec: &CurveRecord) -> String {
    let frame = Frame {
        x: (0.0, 1.0),
        y: (0.0, 1.0),
    };
    let title = format!("{}  IoU={:.2}  AP={:.3}", rec.category, rec.theta, rec.ap);
    let mut s = frame.open(&title, "recall", "precision");
    // step from recall 0 at the first point's precision, as AP integrates it
    let lead = |pts: &[crate::fitap::PrPoint]| {
        pts.first()
            .map(|p| (0.0, p.precision))
            .into_iter()
            .chain(pts.iter().map(|p| (p.recall, p.precision)))
            .collect::<Vec<_>>()
    };
    s += &polyline(&frame, lead(&rec.curve.points).into_iter(), r##"stroke="#1f4fb4" stroke-width="1.5""##);
    s.push('\n');
    s += &polyline(
        &frame,
        lead(&rec.envelope.points).into_iter(),
        r##"stroke="#c0392b" stroke-width="1.5" stroke-dasharray="5 3""##,
    );
    s += "\n</svg>\n";
    s
}

/// Scatter of `(m, |S|)`.
pub fn scatter_svg(title: &str, pts: &[(f64, f64)]) -> String {
    let range = |sel: fn(&(f64, f64)) -> f64| {
        let lo = pts.iter().map(sel).fold(f64::INFINITY, f64::min);
        let hi = pts.iter().map(sel).fold(f64::NEG_INFINITY, f64::max);
        if lo.is_finite() && hi > lo {
            (lo, hi)
        } else if lo.is_finite() {
            (lo - 0.5, lo + 0.5)
        } else {
            (0.0, 1.0)
        }
    };
    let frame = Frame {
        x: range(|p| p.0),
        y: range(|p| p.1),
    };
    let mut s = frame.open(title, "m (mean column max of head-max attention)", "|S|");
    for &(x, y) in pts {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.2}" cy="{:.2}" r="2" fill="#1f4fb4" fill-opacity="0.5"/>"##,
            frame.px(x),
            frame.py(y)
        );
    }
    s += "</svg>\n";
    s
}
