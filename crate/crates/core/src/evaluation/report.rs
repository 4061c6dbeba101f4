use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::*;
use super::PredictionRecord;
use crate::Result;

/// Largest N reported for N-shot accuracy.
pub const MAX_SHOTS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub ap_trapezoid: f64,
    /// Entry `i` holds the (i+1)-shot accuracy.
    pub n_shot: Vec<Option<ShotAccuracy>>,
    pub forgetting: ForgettingTable,
    pub curve: Vec<Option<Cell>>,
    pub sequences: usize,
    pub records: usize,
}

impl MetricsReport {
    pub fn from_records(records: &[PredictionRecord]) -> Result<Self> {
        Ok(Self {
            ap: average_precision(records, ApIntegral::RightRiemann)?,
            ap_trapezoid: average_precision(records, ApIntegral::Trapezoid)?,
            n_shot: (1..=MAX_SHOTS).map(|n| n_shot_accuracy(records, n)).collect(),
            forgetting: forgetting_table(records),
            curve: timestep_curve(records),
            sequences: records.iter().map(|r| r.sequence).collect::<BTreeSet<_>>().len(),
            records: records.len(),
        })
    }

    /// Long-format CSV: `metric,key,value,se,count`. Lines of `header` are
    /// emitted first as `#` comments.
    pub fn to_csv(&self, header: &str) -> String {
        let mut s = String::new();
        for line in header.lines() {
            let _ = writeln!(s, "# {line}");
        }
        s.push_str("metric,key,value,se,count\n");
        let _ = writeln!(s, "ap,,{},,{}", self.ap, self.records);
        let _ = writeln!(s, "ap_trapezoid,,{},,{}", self.ap_trapezoid, self.records);
        for (i, acc) in self.n_shot.iter().enumerate() {
            match acc {
                Some(a) => {
                    let _ = writeln!(s, "n_shot,{},{},{},{}", i + 1, a.mean, a.se, a.sequences);
                }
                None => {
                    let _ = writeln!(s, "n_shot,{},,,0", i + 1);
                }
            }
        }
        for (si, shots) in FORGETTING_SHOTS.iter().enumerate() {
            for (bi, (lo, hi)) in FORGETTING_BINS.iter().enumerate() {
                match self.forgetting.cells[si][bi] {
                    Some(c) => {
                        let _ = writeln!(s, "forgetting_{shots}shot,{lo}-{hi},{},{},{}", c.accuracy, c.se, c.count);
                    }
                    None => {
                        let _ = writeln!(s, "forgetting_{shots}shot,{lo}-{hi},,,0");
                    }
                }
            }
        }
        for (t, c) in self.curve.iter().enumerate() {
            if let Some(c) = c {
                let _ = writeln!(s, "timestep,{t},{},{},{}", c.accuracy, c.se, c.count);
            }
        }
        s
    }
}

/// Plain SVG line plot of per-timestep accuracy.
pub fn curve_svg(curve: &[Option<Cell>], title: &str) -> String {
    let (w, h, pad) = (640.0, 320.0, 40.0);
    let n = curve.len().max(2) as f64;
    let x = |t: usize| pad + (w - 2.0 * pad) * t as f64 / (n - 1.0);
    let y = |a: f64| h - pad - (h - 2.0 * pad) * a;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{pad} {pad} V{} H{}" stroke="black" fill="none"/>"#,
        h - pad,
        w - pad
    );
    for tick in [0.0, 0.5, 1.0] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="end">{tick}</text>"#,
            pad - 4.0,
            y(tick) + 3.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">time step</text>"#,
        w / 2.0,
        h - 10.0
    );
    let points: Vec<String> = curve
        .iter()
        .enumerate()
        .filter_map(|(t, c)| c.map(|c| format!("{:.2},{:.2}", x(t), y(c.accuracy))))
        .collect();
    if !points.is_empty() {
        let _ = writeln!(
            s,
            r#"<polyline points="{}" stroke="steelblue" stroke-width="1.5" fill="none"/>"#,
            points.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
