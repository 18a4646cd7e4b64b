use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tta::TtaTrace;

pub const RENDERER_VERSION: &str = "lwtta-heatmap-1";

/// Mean scale per layer (rows, shallow first) and `(q_k, v_k)` column pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapGrid {
    pub columns: Vec<String>,
    pub cells: Vec<Vec<f64>>,
}

impl HeatmapGrid {
    pub fn from_traces<S>(traces: &[TtaTrace<S>]) -> Result<Self> {
        let first = traces.first().ok_or_else(|| Error::Empty("no traces for the heatmap".into()))?;
        let total = first.total;
        let n_blocks = first.n_blocks().unwrap_or(0);
        if total == 0 || n_blocks == 0 || n_blocks % 2 != 0 {
            return Err(Error::Input(format!("cannot map K={total} with {n_blocks} blocks to a grid")));
        }
        let layers = n_blocks / 2;
        let mut cells = vec![vec![0.0; 2 * total]; layers];
        for t in traces {
            if t.total != total || t.steps.len() != total || t.steps.iter().any(|s| s.scales.len() != n_blocks) {
                return Err(Error::Shape(format!("trace {} does not share K={total}", t.id)));
            }
            for (k, s) in t.steps.iter().enumerate() {
                for (b, v) in s.scales.iter().enumerate() {
                    cells[b / 2][2 * k + b % 2] += v;
                }
            }
        }
        let n = traces.len() as f64;
        cells.iter_mut().flatten().for_each(|v| *v /= n);
        let columns = (1..=total).flat_map(|k| [format!("q{k}"), format!("v{k}")]).collect();
        Ok(Self { columns, cells })
    }

    pub fn to_csv(&self, stamp: &str) -> String {
        let mut s = String::new();
        if !stamp.is_empty() {
            let _ = writeln!(s, "# {stamp}");
        }
        let _ = writeln!(s, "layer,{}", self.columns.join(","));
        for (l, row) in self.cells.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{},{}", l + 1, vals.join(","));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::Empty("empty heatmap CSV".into()))?;
        let columns: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
        let mut cells = Vec::new();
        for line in lines {
            let row = line
                .split(',')
                .skip(1)
                .map(|v| v.parse::<f64>().map_err(|e| Error::Input(format!("heatmap cell '{v}': {e}"))))
                .collect::<Result<Vec<_>>>()?;
            if row.len() != columns.len() {
                return Err(Error::Shape("heatmap row width differs from header".into()));
            }
            cells.push(row);
        }
        Ok(Self { columns, cells })
    }
}

fn color(t: f64) -> String {
    // Dark blue through white to dark red.
    let t = t.clamp(0.0, 1.0);
    let (lo, mid, hi) = ([49.0, 54.0, 149.0], [247.0, 247.0, 247.0], [165.0, 0.0, 38.0]);
    let (a, b, u) = if t < 0.5 { (lo, mid, t * 2.0) } else { (mid, hi, t * 2.0 - 1.0) };
    let c: Vec<u8> = (0..3).map(|i| (a[i] + (b[i] - a[i]) * u).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

/// Standalone SVG drawn from the CSV text, with log-scaled colors.
pub fn render_heatmap_svg(csv: &str, stamp: &str) -> Result<String> {
    let grid = HeatmapGrid::from_csv(csv)?;
    let logs: Vec<f64> = grid.cells.iter().flatten().map(|v| v.max(1e-12).ln()).collect();
    let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (cw, ch, left, top) = (56.0, 32.0, 60.0, 30.0);
    let width = left + cw * grid.columns.len() as f64 + 10.0;
    let height = top + ch * grid.cells.len() as f64 + 10.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, "<!-- {RENDERER_VERSION} {stamp} -->");
    for (j, c) in grid.columns.iter().enumerate() {
        let x = left + cw * (j as f64 + 0.5);
        let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{c}</text>"#, top - 8.0);
    }
    for (i, row) in grid.cells.iter().enumerate() {
        let y = top + ch * i as f64;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">layer {}</text>"#, left - 6.0, y + ch / 2.0 + 4.0, i + 1);
        for (j, v) in row.iter().enumerate() {
            let t = if hi > lo { (v.max(1e-12).ln() - lo) / (hi - lo) } else { 0.5 };
            let x = left + cw * j as f64;
            let _ = writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{}"/><text x="{}" y="{}" text-anchor="middle">{v:.3}</text>"#,
                color(t),
                x + cw / 2.0,
                y + ch / 2.0 + 4.0
            );
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Write `<prefix>.csv` and `<prefix>.svg`; the SVG is rendered from the CSV.
pub fn export_heatmap<S>(traces: &[TtaTrace<S>], csv_path: &Path, svg_path: &Path, stamp: &str) -> Result<HeatmapGrid> {
    let grid = HeatmapGrid::from_traces(traces)?;
    let csv = grid.to_csv(stamp);
    fs::write(csv_path, &csv)?;
    fs::write(svg_path, render_heatmap_svg(&csv, stamp)?)?;
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip() {
        let g = HeatmapGrid {
            columns: vec!["q1".into(), "v1".into()],
            cells: vec![vec![1.0, 0.5], vec![2.25, 41.0]],
        };
        assert_eq!(HeatmapGrid::from_csv(&g.to_csv("config=abc")).unwrap(), g);
    }

    #[test]
    fn uniform_grid_renders() {
        let g = HeatmapGrid {
            columns: vec!["q1".into(), "v1".into()],
            cells: vec![vec![1.0, 1.0]],
        };
        let svg = render_heatmap_svg(&g.to_csv(""), "").unwrap();
        assert_eq!(svg.matches("<rect").count(), 2);
        assert_eq!(svg.matches(&color(0.5)).count(), 2);
    }
}
