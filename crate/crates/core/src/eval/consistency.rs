use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::stats::mean_se;
use crate::error::{Error, Result};
use crate::tta::TtaTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyRow {
    #[serde(rename = "K")]
    pub total: usize,
    pub k: usize,
    pub n: usize,
    /// Mean over episodes of the block-averaged percentage difference.
    pub mean_pct: f64,
    pub se: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRow {
    pub k: usize,
    pub mean_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyReport {
    pub baseline_k: usize,
    pub rows: Vec<ConsistencyRow>,
    pub magnitude: Vec<MagnitudeRow>,
}

impl ConsistencyReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("K,k,n,mean_pct,se,ci_low,ci_high\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.total, r.k, r.n, r.mean_pct, r.se, r.ci_low, r.ci_high
            ));
        }
        s
    }
}

/// Percentage difference of each shorter schedule's scales against the
/// `baseline_k` schedule at the same step index, matched per episode id.
pub fn schedule_consistency<S>(groups: &BTreeMap<usize, Vec<TtaTrace<S>>>, baseline_k: usize) -> Result<ConsistencyReport> {
    let base = groups
        .get(&baseline_k)
        .ok_or_else(|| Error::Input(format!("no traces for the baseline schedule K={baseline_k}")))?;
    let by_id: HashMap<&str, &TtaTrace<S>> = base.iter().filter(|t| !t.diverged).map(|t| (t.id.as_str(), t)).collect();
    let n_blocks = base.iter().find_map(|t| t.n_blocks());

    let mut rows = Vec::new();
    for (&total, traces) in groups.range(1..baseline_k) {
        for k in 1..=total {
            let mut per_episode = Vec::new();
            for t in traces.iter().filter(|t| !t.diverged) {
                let Some(b) = by_id.get(t.id.as_str()) else { continue };
                let (s, sb) = (&t.steps[k - 1].scales, &b.steps[k - 1].scales);
                if s.len() != sb.len() || Some(s.len()) != n_blocks {
                    return Err(Error::Shape(format!("trace {} has a different block count", t.id)));
                }
                let pct: f64 = s.iter().zip(sb).map(|(x, y)| 100.0 * (x - y) / y).sum::<f64>() / s.len() as f64;
                per_episode.push(pct);
            }
            let m = mean_se(&per_episode);
            let (lo, hi) = m.ci95();
            rows.push(ConsistencyRow {
                total,
                k,
                n: m.n,
                mean_pct: m.mean,
                se: m.se,
                ci_low: lo,
                ci_high: hi,
            });
        }
    }

    let max_k = groups.keys().copied().max().unwrap_or(0);
    let magnitude = (1..=max_k)
        .map(|k| {
            let vals: Vec<f64> = groups
                .values()
                .flatten()
                .filter(|t| !t.diverged && t.steps.len() >= k)
                .flat_map(|t| t.steps[k - 1].scales.iter().copied())
                .collect();
            MagnitudeRow {
                k,
                mean_scale: vals.iter().sum::<f64>() / vals.len().max(1) as f64,
            }
        })
        .collect();
    Ok(ConsistencyReport {
        baseline_k,
        rows,
        magnitude,
    })
}

/// Bar chart of the mean scale per step index.
pub fn render_magnitude_svg(report: &ConsistencyReport, stamp: &str) -> String {
    use std::fmt::Write as _;
    let (bw, h, left, top) = (48.0, 160.0, 50.0, 20.0);
    let max = report.magnitude.iter().map(|m| m.mean_scale).fold(0.0f64, f64::max).max(1e-12);
    let width = left + bw * report.magnitude.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
        top + h + 30.0
    );
    let _ = writeln!(s, "<!-- {} {stamp} -->", super::heatmap::RENDERER_VERSION);
    for (i, m) in report.magnitude.iter().enumerate() {
        let bh = h * m.mean_scale / max;
        let x = left + bw * i as f64 + 6.0;
        let y = top + h - bh;
        let _ = writeln!(
            s,
            r##"<rect x="{x}" y="{y}" width="{}" height="{bh}" fill="#4575b4"/><text x="{}" y="{}" text-anchor="middle">{:.3}</text><text x="{}" y="{}" text-anchor="middle">k={}</text>"##,
            bw - 12.0,
            x + (bw - 12.0) / 2.0,
            y - 3.0,
            m.mean_scale,
            x + (bw - 12.0) / 2.0,
            top + h + 14.0,
            m.k
        );
    }
    s.push_str("</svg>\n");
    s
}
