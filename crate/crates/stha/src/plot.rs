//! Static score curves: anomaly score against frame index with ground-truth
//! anomalies shaded.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::error::{CliError, Result};

pub const WIDTH: usize = 640;
pub const HEIGHT: usize = 240;
const MARGIN: usize = 20;

const WHITE: [u8; 3] = [255, 255, 255];
const SHADE: [u8; 3] = [250, 205, 205];
const AXIS: [u8; 3] = [90, 90, 90];
const GRID: [u8; 3] = [225, 225, 225];
const CURVE: [u8; 3] = [30, 80, 200];
const STREAM: [u8; 3] = [150, 180, 230];

struct Canvas {
    px: Vec<u8>,
}

impl Canvas {
    fn new() -> Self {
        let mut px = Vec::with_capacity(WIDTH * HEIGHT * 3);
        for _ in 0..WIDTH * HEIGHT {
            px.extend_from_slice(&WHITE);
        }
        Self { px }
    }

    fn set(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= WIDTH as i64 || y >= HEIGHT as i64 {
            return;
        }
        let i = (y as usize * WIDTH + x as usize) * 3;
        self.px[i..i + 3].copy_from_slice(&c);
    }

    fn rect(&mut self, x0: usize, x1: usize, y0: usize, y1: usize, c: [u8; 3]) {
        for y in y0..y1 {
            for x in x0..x1 {
                self.set(x as i64, y as i64, c);
            }
        }
    }

    fn line(
        &mut self,
        (mut x0, mut y0): (i64, i64),
        (x1, y1): (i64, i64),
        c: [u8; 3],
        thick: bool,
    ) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.set(x0, y0, c);
            if thick {
                self.set(x0, y0 + 1, c);
            }
            if x0 == x1 && y0 == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x0 += sx;
            }
            if e2 <= dx {
                err += dx;
                y0 += sy;
            }
        }
    }
}

/// Renders `score` (fused, drawn dark) and optional per-stream curves (drawn
/// light) over `frames`, shading frames whose label is set. Scores are
/// expected in `[0, 1]`.
pub fn render_scores(
    frames: &[usize],
    score: &[f64],
    streams: &[&[f64]],
    labels: &[bool],
) -> Vec<u8> {
    let mut c = Canvas::new();
    let (left, right) = (MARGIN, WIDTH - MARGIN);
    let (top, bottom) = (MARGIN, HEIGHT - MARGIN);
    let lo = frames.first().copied().unwrap_or(0) as f64;
    let hi = frames.last().copied().unwrap_or(1).max(lo as usize + 1) as f64;
    let span = (right - left) as f64;
    let fx = |f: f64| left as f64 + (f - lo) / (hi - lo) * span;
    let fy = |s: f64| bottom as f64 - s.clamp(0.0, 1.0) * (bottom - top) as f64;
    let half = 0.5 * span / (hi - lo).max(1.0);
    for (i, &f) in frames.iter().enumerate() {
        if labels.get(i).copied().unwrap_or(false) {
            let x0 = (fx(f as f64) - half).floor().max(left as f64) as usize;
            let x1 = (fx(f as f64) + half).ceil().min(right as f64) as usize;
            c.rect(x0, x1.max(x0 + 1), top, bottom, SHADE);
        }
    }
    for q in [0.25, 0.5, 0.75, 1.0] {
        let y = fy(q).round() as i64;
        c.line((left as i64, y), (right as i64, y), GRID, false);
    }
    c.line(
        (left as i64, bottom as i64),
        (right as i64, bottom as i64),
        AXIS,
        false,
    );
    c.line(
        (left as i64, top as i64),
        (left as i64, bottom as i64),
        AXIS,
        false,
    );
    let mut draw = |values: &[f64], colour, thick| {
        let pts: Vec<(i64, i64)> = frames
            .iter()
            .zip(values)
            .map(|(&f, &s)| (fx(f as f64).round() as i64, fy(s).round() as i64))
            .collect();
        for w in pts.windows(2) {
            c.line(w[0], w[1], colour, thick);
        }
        if let [p] = pts.as_slice() {
            c.set(p.0, p.1, colour);
        }
    };
    for s in streams {
        draw(s, STREAM, false);
    }
    draw(score, CURVE, true);
    c.px
}

pub fn write_png(path: &Path, rgb: &[u8]) -> Result<()> {
    let f = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(f), WIDTH as u32, HEIGHT as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header().map_err(|e| CliError::parse(path, e))?;
    w.write_image_data(rgb)
        .map_err(|e| CliError::parse(path, e))
}
