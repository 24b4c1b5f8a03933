//! Minimal SVG rendering for sample scatters, energy heatmaps, and
//! histograms. Reads the CSV artifacts other commands emit; writes
//! self-contained .svg files.

use clel_core::error::{Error, Result};
use std::path::Path;

const W: f64 = 640.0;
const H: f64 = 640.0;
const MARGIN: f64 = 40.0;

fn svg_open(w: f64, h: f64) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n"
    )
}

fn frame(s: &mut String) {
    s.push_str(&format!(
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#444\"/>\n",
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    ));
}

struct Mapper {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Mapper {
    fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let px = MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN);
        let py = H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN);
        (px, py)
    }
}

fn bounds(rows: &[(f64, f64)]) -> Mapper {
    let mut m = Mapper {
        x0: f64::INFINITY,
        x1: f64::NEG_INFINITY,
        y0: f64::INFINITY,
        y1: f64::NEG_INFINITY,
    };
    for (x, y) in rows {
        m.x0 = m.x0.min(*x);
        m.x1 = m.x1.max(*x);
        m.y0 = m.y0.min(*y);
        m.y1 = m.y1.max(*y);
    }
    let pad_x = (m.x1 - m.x0).max(1e-9) * 0.05;
    let pad_y = (m.y1 - m.y0).max(1e-9) * 0.05;
    m.x0 -= pad_x;
    m.x1 += pad_x;
    m.y0 -= pad_y;
    m.y1 += pad_y;
    m
}

fn read_xy(path: &Path) -> Result<Vec<(f64, f64)>> {
    let data = clel_core::data::read_samples_csv(path)?;
    if data.ncols() < 2 {
        return Err(Error::Argument(format!(
            "{} has {} columns; scatter needs at least 2",
            path.display(),
            data.ncols()
        )));
    }
    Ok(data.rows().into_iter().map(|r| (r[0], r[1])).collect())
}

/// Scatter plot of 2D samples; optional second series drawn underneath.
pub fn scatter(input: &Path, overlay: Option<&Path>, out: &Path) -> Result<()> {
    let main = read_xy(input)?;
    let under = overlay.map(read_xy).transpose()?;
    let mut all = main.clone();
    if let Some(u) = &under {
        all.extend_from_slice(u);
    }
    let mapper = bounds(&all);
    let mut s = svg_open(W, H);
    if let Some(u) = &under {
        for (x, y) in u {
            let (px, py) = mapper.map(*x, *y);
            s.push_str(&format!(
                "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"#9ecae1\" fill-opacity=\"0.6\"/>\n"
            ));
        }
    }
    for (x, y) in &main {
        let (px, py) = mapper.map(*x, *y);
        s.push_str(&format!(
            "<circle cx=\"{px:.2}\" cy=\"{py:.2}\" r=\"2\" fill=\"#d6604d\" fill-opacity=\"0.7\"/>\n"
        ));
    }
    frame(&mut s);
    s.push_str("</svg>\n");
    std::fs::write(out, s)?;
    Ok(())
}

/// Heatmap from (x0, x1, value) grid rows.
pub fn heatmap(input: &Path, out: &Path) -> Result<()> {
    let data = clel_core::data::read_samples_csv(input)?;
    if data.ncols() < 3 {
        return Err(Error::Argument("heatmap needs x0,x1,value columns".into()));
    }
    let mut xs: Vec<f64> = data.column(0).to_vec();
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    xs.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let nx = xs.len();
    let ny = data.nrows() / nx.max(1);
    if nx < 2 || ny < 2 || nx * ny != data.nrows() {
        return Err(Error::Argument(format!(
            "grid is not rectangular: {} rows, {nx} unique x0",
            data.nrows()
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in data.column(2) {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = (hi - lo).max(1e-12);
    let cell_w = (W - 2.0 * MARGIN) / nx as f64;
    let cell_h = (H - 2.0 * MARGIN) / ny as f64;
    let pts: Vec<(f64, f64)> = data.rows().into_iter().map(|r| (r[0], r[1])).collect();
    let mapper = bounds(&pts);
    let mut s = svg_open(W, H);
    for row in data.rows() {
        let t = (row[2] - lo) / span;
        // dark blue (low energy) → yellow (high energy)
        let r = (255.0 * t) as u8;
        let g = (220.0 * t + 20.0 * (1.0 - t)) as u8;
        let b = (60.0 * t + 140.0 * (1.0 - t)) as u8;
        let (px, py) = mapper.map(row[0], row[1]);
        s.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({r},{g},{b})\"/>\n",
            px - cell_w / 2.0,
            py - cell_h / 2.0,
            cell_w + 0.5,
            cell_h + 0.5
        ));
    }
    frame(&mut s);
    s.push_str("</svg>\n");
    std::fs::write(out, s)?;
    Ok(())
}

/// Bar histogram from (bin_edge, count) rows.
pub fn histogram(input: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(input).map_err(|_| {
        Error::MissingArtifact(input.display().to_string())
    })?;
    let mut edges = Vec::new();
    let mut counts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let e: f64 = parts
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| Error::Argument(format!("bad histogram row {i}")))?;
        let c: f64 = parts
            .next()
            .and_then(|t| t.trim().parse().ok())
            .ok_or_else(|| Error::Argument(format!("bad histogram row {i}")))?;
        edges.push(e);
        counts.push(c);
    }
    if edges.len() < 2 {
        return Err(Error::Argument("histogram needs at least 2 edges".into()));
    }
    counts.pop(); // last row is the closing edge
    let max_c = counts.iter().cloned().fold(1.0f64, f64::max);
    let (e0, e1) = (edges[0], edges[edges.len() - 1]);
    let mut s = svg_open(W, H);
    for (i, c) in counts.iter().enumerate() {
        let x0 = MARGIN + (edges[i] - e0) / (e1 - e0) * (W - 2.0 * MARGIN);
        let x1 = MARGIN + (edges[i + 1] - e0) / (e1 - e0) * (W - 2.0 * MARGIN);
        let h = c / max_c * (H - 2.0 * MARGIN);
        s.push_str(&format!(
            "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"#4393c3\"/>\n",
            x0,
            H - MARGIN - h,
            (x1 - x0).max(0.5),
            h
        ));
    }
    frame(&mut s);
    s.push_str("</svg>\n");
    std::fs::write(out, s)?;
    Ok(())
}
