//! Minimal PNG charts: line plots and a count heatmap. Tick labels use a
//! built-in 3×5 numeric font; titles and legends belong in the markdown
//! report that embeds the images.

use std::path::Path;

use image::{Rgb, RgbImage};
use mgproto::{Error, Result};

pub type Color = [u8; 3];

pub const PALETTE: [Color; 8] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
    [227, 119, 194],
    [127, 127, 127],
];

const WHITE: Color = [255, 255, 255];
const BLACK: Color = [0, 0, 0];
const GRID: Color = [225, 225, 225];

/// Rows of a 3-wide glyph, top to bottom, high bit on the left.
fn glyph(c: char) -> Option<[u8; 5]> {
    Some(match c {
        '0' => [0b111, 0b101, 0b101, 0b101, 0b111],
        '1' => [0b010, 0b110, 0b010, 0b010, 0b111],
        '2' => [0b111, 0b001, 0b111, 0b100, 0b111],
        '3' => [0b111, 0b001, 0b111, 0b001, 0b111],
        '4' => [0b101, 0b101, 0b111, 0b001, 0b001],
        '5' => [0b111, 0b100, 0b111, 0b001, 0b111],
        '6' => [0b111, 0b100, 0b111, 0b101, 0b111],
        '7' => [0b111, 0b001, 0b010, 0b010, 0b010],
        '8' => [0b111, 0b101, 0b111, 0b101, 0b111],
        '9' => [0b111, 0b101, 0b111, 0b001, 0b111],
        '.' => [0b000, 0b000, 0b000, 0b000, 0b010],
        '-' => [0b000, 0b000, 0b111, 0b000, 0b000],
        '+' => [0b000, 0b010, 0b111, 0b010, 0b000],
        'e' => [0b000, 0b111, 0b111, 0b100, 0b111],
        _ => return None,
    })
}

/// Short tick label using only characters the font has.
pub fn format_tick(v: f64) -> String {
    let a = v.abs();
    if v != 0.0 && !(0.01..1000.0).contains(&a) {
        return format!("{v:.1e}");
    }
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s == "-0" { "0".into() } else { s.into() }
}

pub struct Canvas {
    img: RgbImage,
}

impl Canvas {
    pub fn new(w: u32, h: u32) -> Self {
        Self {
            img: RgbImage::from_pixel(w, h, Rgb(WHITE)),
        }
    }

    pub fn width(&self) -> u32 {
        self.img.width()
    }

    pub fn height(&self) -> u32 {
        self.img.height()
    }

    pub fn pixel(&self, x: u32, y: u32) -> Color {
        self.img.get_pixel(x, y).0
    }

    fn put(&mut self, x: i64, y: i64, c: Color) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, Rgb(c));
        }
    }

    pub fn fill_rect(&mut self, x: i64, y: i64, w: i64, h: i64, c: Color) {
        for yy in y..y + h {
            for xx in x..x + w {
                self.put(xx, yy, c);
            }
        }
    }

    /// Bresenham line, `width` pixels thick.
    pub fn line(&mut self, (x0, y0): (i64, i64), (x1, y1): (i64, i64), width: i64, c: Color) {
        let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
        let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
        let (mut x, mut y, mut err) = (x0, y0, dx + dy);
        let off = (width - 1) / 2;
        loop {
            self.fill_rect(x - off, y - off, width, width, c);
            if x == x1 && y == y1 {
                break;
            }
            let e2 = 2 * err;
            if e2 >= dy {
                err += dy;
                x += sx;
            }
            if e2 <= dx {
                err += dx;
                y += sy;
            }
        }
    }

    /// Draws `s` with its top-left corner at `(x, y)`; returns the width used.
    pub fn text(&mut self, x: i64, y: i64, s: &str, scale: i64, c: Color) -> i64 {
        let mut cx = x;
        for ch in s.chars() {
            if let Some(rows) = glyph(ch) {
                for (r, bits) in rows.iter().enumerate() {
                    for col in 0..3 {
                        if bits & (0b100 >> col) != 0 {
                            self.fill_rect(cx + col * scale, y + r as i64 * scale, scale, scale, c);
                        }
                    }
                }
            }
            cx += 4 * scale;
        }
        cx - x
    }

    pub fn text_width(s: &str, scale: i64) -> i64 {
        s.chars().count() as i64 * 4 * scale
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.img.save(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::validation(format!("{}: {other}", path.display())),
        })
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

fn padded_range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        let pad = (lo.abs() * 0.1).max(0.5);
        return (lo - pad, hi + pad);
    }
    let pad = (hi - lo) * 0.05;
    (lo - pad, hi + pad)
}

const LEFT: i64 = 70;
const BOTTOM: i64 = 30;
const TOP: i64 = 12;
const RIGHT: i64 = 16;

/// Line chart of every series over a shared x axis; series colors follow
/// [`PALETTE`] in order.
pub fn line_chart(series: &[Series], w: u32, h: u32) -> Canvas {
    let mut cv = Canvas::new(w, h);
    let all = || series.iter().flat_map(|s| s.points.iter());
    let (x0, x1) = padded_range(all().map(|p| p.0));
    let (y0, y1) = padded_range(all().map(|p| p.1));
    let (pw, ph) = (w as i64 - LEFT - RIGHT, h as i64 - TOP - BOTTOM);
    let sx = |x: f64| LEFT + ((x - x0) / (x1 - x0) * pw as f64).round() as i64;
    let sy = |y: f64| TOP + ph - ((y - y0) / (y1 - y0) * ph as f64).round() as i64;

    for i in 0..=4 {
        let v = y0 + (y1 - y0) * i as f64 / 4.0;
        let y = sy(v);
        cv.line((LEFT, y), (LEFT + pw, y), 1, GRID);
        let label = format_tick(v);
        cv.text(LEFT - 6 - Canvas::text_width(&label, 2), y - 5, &label, 2, BLACK);
    }
    let step = ((x1 - x0) / 10.0).ceil().max(1.0);
    let mut t = x0.ceil();
    while t <= x1 {
        let x = sx(t);
        cv.line((x, TOP + ph), (x, TOP + ph + 4), 1, BLACK);
        let label = format_tick(t);
        cv.text(x - Canvas::text_width(&label, 2) / 2, TOP + ph + 8, &label, 2, BLACK);
        t += step;
    }
    cv.line((LEFT, TOP), (LEFT, TOP + ph), 1, BLACK);
    cv.line((LEFT, TOP + ph), (LEFT + pw, TOP + ph), 1, BLACK);

    for (s, color) in series.iter().zip(PALETTE.iter().cycle()) {
        let pts: Vec<(i64, i64)> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| (sx(x), sy(y)))
            .collect();
        for pair in pts.windows(2) {
            cv.line(pair[0], pair[1], 2, *color);
        }
        for &(x, y) in &pts {
            cv.fill_rect(x - 2, y - 2, 5, 5, *color);
        }
    }
    cv
}

/// Count matrix as a heatmap shaded by row-normalized value, with the count
/// printed in each cell. Row and column indices label the margins.
pub fn heatmap(counts: &[Vec<usize>], cell: u32) -> Canvas {
    let n = counts.len() as u32;
    let m = counts.first().map_or(0, Vec::len) as u32;
    let margin = 30i64;
    let mut cv = Canvas::new(margin as u32 + m * cell + 4, margin as u32 + n * cell + 4);
    let c = cell as i64;
    for (i, row) in counts.iter().enumerate() {
        let total: usize = row.iter().sum();
        let label = i.to_string();
        cv.text(4, margin + i as i64 * c + c / 2 - 5, &label, 2, BLACK);
        for (j, &v) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { v as f64 / total as f64 };
            let shade = |hi: u8| (255.0 - frac * (255.0 - hi as f64)).round() as u8;
            let fill = [shade(8), shade(48), shade(107)];
            let (x, y) = (margin + j as i64 * c, margin + i as i64 * c);
            cv.fill_rect(x, y, c - 1, c - 1, fill);
            let s = v.to_string();
            let ink = if frac > 0.5 { WHITE } else { BLACK };
            cv.text(x + (c - Canvas::text_width(&s, 2)) / 2, y + c / 2 - 5, &s, 2, ink);
        }
    }
    for j in 0..m as i64 {
        let s = j.to_string();
        cv.text(margin + j * c + (c - Canvas::text_width(&s, 2)) / 2, 8, &s, 2, BLACK);
    }
    cv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tick_labels_use_known_glyphs() {
        for v in [0.0, 1.0, -2.5, 0.12345, 1234.5, 1e-5, -0.0, 30.0] {
            let s = format_tick(v);
            assert!(s.chars().all(|c| glyph(c).is_some()), "{v} -> {s}");
        }
        assert_eq!(format_tick(0.5), "0.5");
        assert_eq!(format_tick(2.0), "2");
        assert_eq!(format_tick(-0.0), "0");
        assert_eq!(format_tick(1e-5), "1.0e-5");
    }

    #[test]
    fn line_chart_draws_series_color() {
        let s = Series {
            label: "a".into(),
            points: (0..5).map(|i| (i as f64, (i * i) as f64)).collect(),
        };
        let cv = line_chart(&[s], 300, 200);
        assert_eq!((cv.width(), cv.height()), (300, 200));
        let hits = (0..300)
            .flat_map(|x| (0..200).map(move |y| (x, y)))
            .filter(|&(x, y)| cv.pixel(x, y) == PALETTE[0])
            .count();
        assert!(hits > 50);
    }

    #[test]
    fn flat_and_empty_series_do_not_panic() {
        let flat = Series {
            label: "f".into(),
            points: vec![(0.0, 1.0), (1.0, 1.0)],
        };
        line_chart(&[flat], 120, 80);
        line_chart(&[], 120, 80);
    }

    #[test]
    fn heatmap_shades_by_row_fraction() {
        let cv = heatmap(&[vec![4, 0], vec![1, 3]], 40);
        // top-left corner of cell (0,0) is fully shaded, cell (0,1) is white
        assert_eq!(cv.pixel(31, 31), [8, 48, 107]);
        assert_eq!(cv.pixel(71, 31), WHITE);
    }

    #[test]
    fn saves_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        heatmap(&[vec![1]], 20).save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[1..4], b"PNG");
    }
}
