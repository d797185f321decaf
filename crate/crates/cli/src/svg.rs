//! Forecast-band figures. Output is plain SVG text with fixed-precision
//! coordinates so identical inputs give identical bytes.

use std::fmt::Write as _;
use std::io::Write;

use mqrnn_core::data::SeriesRecord;
use mqrnn_core::{ForecastGrid, MqError};

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 40.0;
/// Bands drawn for a full percentile grid.
const PERCENTILE_BANDS: [(f64, f64); 5] = [(0.05, 0.95), (0.15, 0.85), (0.25, 0.75), (0.35, 0.65), (0.45, 0.55)];

fn find(levels: &[f64], q: f64) -> Option<usize> {
    levels.iter().position(|&l| (l - q).abs() < 1e-9)
}

/// Symmetric (lower, upper) column pairs, widest first.
pub fn band_pairs(levels: &[f64]) -> Vec<(usize, usize)> {
    if levels.len() >= 99 {
        return PERCENTILE_BANDS.iter().filter_map(|&(lo, hi)| Some((find(levels, lo)?, find(levels, hi)?))).collect();
    }
    let mut pairs: Vec<(usize, usize)> = levels
        .iter()
        .enumerate()
        .filter(|(_, &q)| q < 0.5)
        .filter_map(|(i, &q)| Some((i, find(levels, 1.0 - q)?)))
        .collect();
    pairs.sort_by(|a, b| levels[a.0].total_cmp(&levels[b.0]));
    pairs
}

/// One CSV row per horizon: time, actual (if known) and the band edges.
#[derive(Debug, Clone)]
pub struct BandRow {
    pub series_id: String,
    pub fct: i64,
    pub t: i64,
    pub actual: Option<f64>,
    pub values: Vec<f64>,
}

pub fn band_rows(rec: &SeriesRecord, grid: &ForecastGrid) -> Vec<BandRow> {
    grid.values
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let t = grid.fct + k as i64 + 1;
            BandRow {
                series_id: grid.series_id.clone(),
                fct: grid.fct,
                t,
                actual: rec.index_of(t).map(|i| rec.y[i]),
                values: row.clone(),
            }
        })
        .collect()
}

pub fn write_band_csv(levels: &[f64], rows: &[BandRow], w: impl Write) -> Result<(), MqError> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["series_id".to_string(), "fct".into(), "t".into(), "actual".into()];
    header.extend(levels.iter().map(|q| format!("q{q}")));
    out.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.series_id.clone(), r.fct.to_string(), r.t.to_string(), r.actual.map(|a| a.to_string()).unwrap_or_default()];
        rec.extend(r.values.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

struct Frame {
    t0: f64,
    t1: f64,
    lo: f64,
    hi: f64,
}

impl Frame {
    fn x(&self, t: f64) -> f64 {
        MARGIN + (t - self.t0) / (self.t1 - self.t0).max(1.0) * (WIDTH - 2.0 * MARGIN)
    }

    fn y(&self, v: f64) -> f64 {
        HEIGHT - MARGIN - (v - self.lo) / (self.hi - self.lo).max(1e-12) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn polyline(s: &mut String, pts: &[(f64, f64)], style: &str) {
    let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
    let _ = writeln!(s, r#"<polyline points="{}" {style}/>"#, coords.join(" "));
}

/// Truth line, FCT marker, nested bands and the median.
pub fn band_figure(rec: &SeriesRecord, grid: &ForecastGrid) -> String {
    let k = grid.values.len() as i64;
    let t0 = (grid.fct - 3 * k).max(rec.start);
    let t1 = (grid.fct + k).max(t0 + 1);
    let truth: Vec<(i64, f64)> = (t0..=t1.min(rec.end())).filter_map(|t| rec.index_of(t).map(|i| (t, rec.y[i]))).collect();
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in truth.iter().map(|p| p.1).chain(grid.values.iter().flatten().copied()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        lo = 0.0;
        hi = 1.0;
    }
    let pad = 0.05 * (hi - lo).max(1e-6);
    let f = Frame { t0: t0 as f64, t1: t1 as f64, lo: lo - pad, hi: hi + pad };

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">"#);
    let _ = writeln!(s, r#"<title>{} fct={}</title>"#, xml_escape(&grid.series_id), grid.fct);
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>"#);

    let pairs = band_pairs(&grid.quantiles);
    let n = pairs.len().max(1) as f64;
    for (b, &(il, ih)) in pairs.iter().enumerate() {
        let opacity = 0.15 + 0.5 * (b as f64 + 1.0) / n;
        let mut pts: Vec<(f64, f64)> = Vec::new();
        for (h, row) in grid.values.iter().enumerate() {
            pts.push((f.x((grid.fct + h as i64 + 1) as f64), f.y(row[ih])));
        }
        for (h, row) in grid.values.iter().enumerate().rev() {
            pts.push((f.x((grid.fct + h as i64 + 1) as f64), f.y(row[il])));
        }
        let coords: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.2},{y:.2}")).collect();
        let _ = writeln!(
            s,
            r#"<polygon points="{}" fill="steelblue" fill-opacity="{opacity:.3}" stroke="none"><title>P{}-P{}</title></polygon>"#,
            coords.join(" "),
            (grid.quantiles[il] * 100.0).round(),
            (grid.quantiles[ih] * 100.0).round()
        );
    }
    if let Some(m) = find(&grid.quantiles, 0.5) {
        let pts: Vec<(f64, f64)> = grid.values.iter().enumerate().map(|(h, row)| (f.x((grid.fct + h as i64 + 1) as f64), f.y(row[m]))).collect();
        polyline(&mut s, &pts, r#"fill="none" stroke="navy" stroke-width="2""#);
    }
    let pts: Vec<(f64, f64)> = truth.iter().map(|&(t, v)| (f.x(t as f64), f.y(v))).collect();
    polyline(&mut s, &pts, r#"fill="none" stroke="black" stroke-width="1.5""#);
    let xf = f.x(grid.fct as f64);
    let _ = writeln!(
        s,
        r#"<line x1="{xf:.2}" y1="{MARGIN}" x2="{xf:.2}" y2="{:.2}" stroke="firebrick" stroke-dasharray="4 3"/>"#,
        HEIGHT - MARGIN
    );
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_for_three_levels() {
        assert_eq!(band_pairs(&[0.1, 0.5, 0.9]), vec![(0, 2)]);
    }

    #[test]
    fn pairs_for_percentiles() {
        let levels: Vec<f64> = (1..=99).map(|i| i as f64 / 100.0).collect();
        assert_eq!(band_pairs(&levels), vec![(4, 94), (14, 84), (24, 74), (34, 64), (44, 54)]);
    }
}
