//! Attention-distribution analytics: how much of the total attention mass the
//! most-attended fraction of tokens captures, optionally ignoring the leading
//! sink tokens, and grayscale heatmaps of individual attention maps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traceio::AttentionTrace;

/// Evenly spaced samples (besides the exact breakpoints) on every curve.
pub const CURVE_SAMPLES: usize = 1000;

/// Cumulative attention mass against token fraction, tokens sorted by
/// descending score. Piecewise linear between its points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageCurve {
    pub points: Vec<(f64, f64)>,
    pub exclude_first_n: usize,
    pub source: String,
}

/// Score of key `t` summed over layers, heads and query rows.
pub fn aggregate_attention(trace: &AttentionTrace) -> Vec<f64> {
    let mut scores = vec![0.0f64; trace.keys()];
    for l in 0..trace.layers() {
        for h in 0..trace.heads() {
            for q in 0..trace.queries() {
                for (s, &w) in scores.iter_mut().zip(trace.row(l, h, q)) {
                    *s += w as f64;
                }
            }
        }
    }
    scores
}

pub fn cumulative_distribution(scores: &[f64], exclude_first_n: usize) -> Result<CoverageCurve> {
    if scores.len() <= exclude_first_n {
        return Err(Error::DegenerateCurve(format!(
            "{} scores leave nothing after excluding {exclude_first_n}",
            scores.len()
        )));
    }
    let mut rest: Vec<f64> = scores[exclude_first_n..].to_vec();
    if let Some(bad) = rest.iter().find(|s| !s.is_finite() || **s < 0.0) {
        return Err(Error::DegenerateCurve(format!("invalid score {bad}")));
    }
    rest.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = rest.iter().sum();
    if total <= 0.0 {
        return Err(Error::DegenerateCurve(
            "remaining attention mass is zero".into(),
        ));
    }
    let m = rest.len();
    let mut breaks = Vec::with_capacity(m + 1);
    breaks.push((0.0, 0.0));
    let mut acc = 0.0;
    for (i, s) in rest.iter().enumerate() {
        acc += s;
        let p = (i + 1) as f64 / m as f64;
        let mass = if i + 1 == m { 1.0 } else { (acc / total).min(1.0) };
        breaks.push((p, mass));
    }

    let mut points = breaks.clone();
    points.extend((1..CURVE_SAMPLES).map(|i| {
        let p = i as f64 / CURVE_SAMPLES as f64;
        (p, interpolate(&breaks, p))
    }));
    points.sort_by(|a, b| a.0.total_cmp(&b.0));
    points.dedup_by(|b, a| a.0 == b.0);
    Ok(CoverageCurve {
        points,
        exclude_first_n,
        source: String::new(),
    })
}

fn interpolate(points: &[(f64, f64)], p: f64) -> f64 {
    let p = p.clamp(0.0, 1.0);
    let i = points.partition_point(|&(x, _)| x < p);
    if i == 0 {
        return points[0].1;
    }
    if i == points.len() {
        return points[points.len() - 1].1;
    }
    let (x1, y1) = points[i];
    if x1 == p {
        return y1;
    }
    let (x0, y0) = points[i - 1];
    y0 + (y1 - y0) * (p - x0) / (x1 - x0)
}

/// Attention-mass fraction held by the top `p` fraction of tokens.
pub fn coverage_at(curve: &CoverageCurve, p: f64) -> f64 {
    interpolate(&curve.points, p)
}

/// `p,mass` rows, nine significant digits.
pub fn curve_csv(curve: &CoverageCurve) -> String {
    let mut out = String::from("p,mass\n");
    for &(p, m) in &curve.points {
        let _ = writeln!(out, "{},{}", sig9(p), sig9(m));
    }
    out
}

pub fn write_curve_csv(curve: &CoverageCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curve_csv(curve)).map_err(|e| Error::io(path, e))
}

/// Fixed-point decimal with nine significant digits.
pub fn sig9(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_finite() { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (8 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

/// Picks one index or averages over all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Index(usize),
    Mean,
}

impl std::str::FromStr for Selector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("mean") {
            return Ok(Selector::Mean);
        }
        s.parse()
            .map(Selector::Index)
            .map_err(|_| Error::Config(format!("selector must be an index or \"mean\", got {s:?}")))
    }
}

fn selected(sel: Selector, count: usize, what: &str) -> Result<Vec<usize>> {
    match sel {
        Selector::Mean => Ok((0..count).collect()),
        Selector::Index(i) if i < count => Ok(vec![i]),
        Selector::Index(i) => Err(Error::Config(format!(
            "{what} {i} out of range (have {count})"
        ))),
    }
}

/// Binary PGM (P5): one row per query, one column per key, each row scaled
/// so its maximum maps to 255.
pub fn heatmap_pgm(trace: &AttentionTrace, layer: Selector, head: Selector) -> Result<Vec<u8>> {
    let layers = selected(layer, trace.layers(), "layer")?;
    let heads = selected(head, trace.heads(), "head")?;
    let (rows, cols) = (trace.queries(), trace.keys());
    let mut out = format!("P5\n{cols} {rows}\n255\n").into_bytes();
    let count = (layers.len() * heads.len()) as f64;
    let mut row = vec![0.0f64; cols];
    for q in 0..rows {
        row.iter_mut().for_each(|v| *v = 0.0);
        for &l in &layers {
            for &h in &heads {
                for (v, &w) in row.iter_mut().zip(trace.row(l, h, q)) {
                    *v += w as f64;
                }
            }
        }
        row.iter_mut().for_each(|v| *v /= count);
        let max = row.iter().copied().fold(0.0f64, f64::max);
        out.extend(row.iter().map(|&v| {
            if max > 0.0 {
                (255.0 * v / max).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
    }
    Ok(out)
}

pub fn heatmap_export(
    trace: &AttentionTrace,
    layer: Selector,
    head: Selector,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = heatmap_pgm(trace, layer, head)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traceio::TraceMeta;

    #[test]
    fn uniform_curve_is_diagonal() {
        let curve = cumulative_distribution(&[1.0; 37], 0).unwrap();
        for i in 0..=10 {
            let p = i as f64 / 10.0;
            assert!((coverage_at(&curve, p) - p).abs() < 1e-9);
        }
    }

    #[test]
    fn single_heavy_token_jumps() {
        let mut scores = vec![0.0; 10];
        scores[3] = 2.0;
        let curve = cumulative_distribution(&scores, 0).unwrap();
        assert_eq!(coverage_at(&curve, 0.1), 1.0);
        assert!((coverage_at(&curve, 0.05) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn endpoints_exact() {
        let curve = cumulative_distribution(&[0.3, 0.1, 0.7, 0.2], 1).unwrap();
        assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(coverage_at(&curve, 0.0), 0.0);
        assert_eq!(coverage_at(&curve, 1.0), 1.0);
    }

    #[test]
    fn degenerate_inputs() {
        assert!(matches!(
            cumulative_distribution(&[1.0, 0.0, 0.0], 1),
            Err(Error::DegenerateCurve(_))
        ));
        assert!(matches!(
            cumulative_distribution(&[1.0], 1),
            Err(Error::DegenerateCurve(_))
        ));
    }

    #[test]
    fn sig9_format() {
        assert_eq!(sig9(0.0), "0");
        assert_eq!(sig9(1.0), "1.00000000");
        assert_eq!(sig9(0.123456789012), "0.123456789");
        assert_eq!(sig9(0.001), "0.00100000000");
        assert_eq!(sig9(123.456), "123.456000");
    }

    #[test]
    fn csv_header_and_rows() {
        let curve = cumulative_distribution(&[1.0, 1.0], 0).unwrap();
        let csv = curve_csv(&curve);
        assert!(csv.starts_with("p,mass\n0,0\n"));
        assert_eq!(csv.lines().count(), curve.points.len() + 1);
    }

    #[test]
    fn one_pixel_heatmap() {
        let t = AttentionTrace::new(1, 1, 1, 1, vec![1.0], TraceMeta::default()).unwrap();
        let pgm = heatmap_pgm(&t, Selector::Index(0), Selector::Mean).unwrap();
        assert_eq!(pgm, b"P5\n1 1\n255\n\xff");
    }

    #[test]
    fn heatmap_selector_out_of_range() {
        let t = AttentionTrace::new(1, 1, 1, 1, vec![1.0], TraceMeta::default()).unwrap();
        assert!(heatmap_pgm(&t, Selector::Index(1), Selector::Mean).is_err());
    }
}
