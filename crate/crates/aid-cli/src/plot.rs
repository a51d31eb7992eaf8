//! Minimal deterministic PNG plotting: a pixel canvas with a 5x7 bitmap
//! font, plus the two chart kinds the report command emits.

use image::{Rgb, RgbImage};

pub const WHITE: Rgb<u8> = Rgb([250, 250, 250]);
pub const BLACK: Rgb<u8> = Rgb([30, 30, 30]);
pub const GRAY: Rgb<u8> = Rgb([175, 175, 175]);

/// Distinct series colors.
pub const PALETTE: [Rgb<u8>; 6] = [
    Rgb([214, 69, 65]),
    Rgb([31, 119, 180]),
    Rgb([44, 160, 44]),
    Rgb([148, 103, 189]),
    Rgb([255, 127, 14]),
    Rgb([23, 190, 207]),
];

// Each glyph is 5 bits x 7 rows, MSB left.
fn glyph(c: char) -> [u8; 7] {
    match c {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x11, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0F, 0x11, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x08, 0x1C, 0x08, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x1E, 0x11, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x1E, 0x11, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x15, 0x15, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x11, 0x11, 0x0F, 0x01, 0x11, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        _ => [0x00; 7], // space and anything unknown
    }
}

pub struct Canvas {
    pub img: RgbImage,
}

impl Canvas {
    pub fn new(width: u32, height: u32) -> Self {
        let mut img = RgbImage::new(width, height);
        for p in img.pixels_mut() {
            *p = WHITE;
        }
        Canvas { img }
    }

    pub fn put(&mut self, x: i64, y: i64, color: Rgb<u8>) {
        if x >= 0 && y >= 0 && (x as u32) < self.img.width() && (y as u32) < self.img.height() {
            self.img.put_pixel(x as u32, y as u32, color);
        }
    }

    pub fn line(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        let (mut x, mut y) = (x0, y0);
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            self.put(x, y, color);
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

    pub fn fill_rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        for y in y0.min(y1)..=y0.max(y1) {
            for x in x0.min(x1)..=x0.max(x1) {
                self.put(x, y, color);
            }
        }
    }

    pub fn rect(&mut self, x0: i64, y0: i64, x1: i64, y1: i64, color: Rgb<u8>) {
        self.line(x0, y0, x1, y0, color);
        self.line(x0, y1, x1, y1, color);
        self.line(x0, y0, x0, y1, color);
        self.line(x1, y0, x1, y1, color);
    }

    pub fn text(&mut self, x: i64, y: i64, s: &str, color: Rgb<u8>) {
        let mut cx = x;
        for ch in s.chars() {
            let g = glyph(ch.to_ascii_lowercase());
            for (row, bits) in g.iter().enumerate() {
                for col in 0..5 {
                    if bits & (0x10 >> col) != 0 {
                        self.put(cx + col as i64, y + row as i64, color);
                    }
                }
            }
            cx += 6;
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), image::ImageError> {
        self.img.save(path)
    }
}

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        "0".to_string()
    } else if v.abs() >= 100.0 {
        format!("{v:.0}")
    } else if v.abs() >= 1.0 {
        format!("{v:.1}")
    } else {
        format!("{v:.2}")
    }
}

/// Overlaid histograms (one per labeled value set) on a fixed x-range.
pub fn histogram(
    series: &[(String, Vec<f64>)],
    x_min: f64,
    x_max: f64,
    bins: usize,
    title: &str,
    path: &std::path::Path,
) -> Result<(), image::ImageError> {
    let (w, h) = (640u32, 360u32);
    let (left, right, top, bottom) = (50i64, 20i64, 30i64, 40i64);
    let plot_w = w as i64 - left - right;
    let plot_h = h as i64 - top - bottom;
    let mut canvas = Canvas::new(w, h);
    canvas.text(left, 10, title, BLACK);

    let mut counts: Vec<Vec<usize>> = Vec::new();
    let mut max_count = 1usize;
    for (_, values) in series {
        let mut c = vec![0usize; bins];
        for &v in values {
            let t = ((v - x_min) / (x_max - x_min)).clamp(0.0, 1.0);
            let b = ((t * bins as f64) as usize).min(bins - 1);
            c[b] += 1;
        }
        max_count = max_count.max(c.iter().copied().max().unwrap_or(0));
        counts.push(c);
    }

    // axes
    canvas.line(left, top, left, top + plot_h, BLACK);
    canvas.line(left, top + plot_h, left + plot_w, top + plot_h, BLACK);
    for i in 0..=4 {
        let x = left + plot_w * i / 4;
        let v = x_min + (x_max - x_min) * i as f64 / 4.0;
        canvas.line(x, top + plot_h, x, top + plot_h + 3, BLACK);
        canvas.text(x - 8, top + plot_h + 8, &fmt_tick(v), BLACK);
    }
    canvas.text(2, top - 4, &format!("{max_count}"), BLACK);

    let bar_w = (plot_w / bins as i64).max(1);
    for (si, c) in counts.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for (b, &n) in c.iter().enumerate() {
            if n == 0 {
                continue;
            }
            let x0 = left + b as i64 * plot_w / bins as i64;
            let bh = (n as f64 / max_count as f64 * plot_h as f64) as i64;
            // narrower bars per series so overlaps stay visible
            let inset = si as i64 * (bar_w / series.len().max(1) as i64);
            canvas.fill_rect(
                x0 + inset,
                top + plot_h - bh,
                x0 + inset + (bar_w / series.len().max(1) as i64).max(1) - 1,
                top + plot_h - 1,
                color,
            );
        }
    }
    for (si, (label, _)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let y = top + 4 + 10 * si as i64;
        canvas.fill_rect(left + plot_w - 120, y, left + plot_w - 112, y + 6, color);
        canvas.text(left + plot_w - 108, y, label, BLACK);
    }
    canvas.save(path)
}

/// Multi-series line chart with automatic y-range.
pub fn line_chart(
    series: &[(String, Vec<(f64, f64)>)],
    title: &str,
    y_label: &str,
    path: &std::path::Path,
) -> Result<(), image::ImageError> {
    let (w, h) = (640u32, 360u32);
    let (left, right, top, bottom) = (56i64, 20i64, 30i64, 40i64);
    let plot_w = w as i64 - left - right;
    let plot_h = h as i64 - top - bottom;
    let mut canvas = Canvas::new(w, h);
    canvas.text(left, 10, title, BLACK);
    canvas.text(4, top - 14, y_label, GRAY);

    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, pts) in series {
        for &(x, y) in pts {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(y);
            y_max = y_max.max(y);
        }
    }
    if !x_min.is_finite() {
        (x_min, x_max, y_min, y_max) = (0.0, 1.0, 0.0, 1.0);
    }
    if (x_max - x_min).abs() < 1e-12 {
        x_max = x_min + 1.0;
    }
    let pad = ((y_max - y_min) * 0.05).max(1e-6);
    y_min -= pad;
    y_max += pad;

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = left + ((x - x_min) / (x_max - x_min) * plot_w as f64) as i64;
        let py = top + plot_h - ((y - y_min) / (y_max - y_min) * plot_h as f64) as i64;
        (px, py)
    };

    canvas.line(left, top, left, top + plot_h, BLACK);
    canvas.line(left, top + plot_h, left + plot_w, top + plot_h, BLACK);
    for i in 0..=4 {
        let yv = y_min + (y_max - y_min) * i as f64 / 4.0;
        let (_, py) = to_px(x_min, yv);
        canvas.line(left - 3, py, left, py, BLACK);
        canvas.text(4, py - 3, &fmt_tick(yv), BLACK);
        let xv = x_min + (x_max - x_min) * i as f64 / 4.0;
        let (px, _) = to_px(xv, y_min);
        canvas.line(px, top + plot_h, px, top + plot_h + 3, BLACK);
        canvas.text(px - 8, top + plot_h + 8, &fmt_tick(xv), BLACK);
    }

    for (si, (label, pts)) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        for pair in pts.windows(2) {
            let (x0, y0) = to_px(pair[0].0, pair[0].1);
            let (x1, y1) = to_px(pair[1].0, pair[1].1);
            canvas.line(x0, y0, x1, y1, color);
        }
        let y = top + 4 + 10 * si as i64;
        canvas.fill_rect(left + plot_w - 150, y, left + plot_w - 142, y + 6, color);
        canvas.text(left + plot_w - 138, y, label, BLACK);
    }
    canvas.save(path)
}
