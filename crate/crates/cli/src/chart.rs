//! Bar charts rendered straight into RGB buffers with a 5×7 bitmap font.

use std::path::Path;

use anyhow::{Context, Result};
use image::{Rgb, RgbImage};

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([210, 210, 210]);
const PALETTE: [Rgb<u8>; 6] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
    Rgb([148, 103, 189]),
    Rgb([140, 86, 75]),
];

fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'A' => [0x0E, 0x11, 0x11, 0x11, 0x1F, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0, 0, 0, 0, 0, 0x0C, 0x0C],
        ',' => [0, 0, 0, 0, 0x0C, 0x04, 0x08],
        '-' => [0, 0, 0, 0x1F, 0, 0, 0],
        '+' => [0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0],
        '±' => [0x04, 0x04, 0x1F, 0x04, 0x04, 0, 0x1F],
        ':' => [0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0],
        '_' => [0, 0, 0, 0, 0, 0, 0x1F],
        '/' => [0, 0x01, 0x02, 0x04, 0x08, 0x10, 0],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0, 0, 0x1F, 0, 0x1F, 0, 0],
        ' ' => [0; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04],
    }
}

const SCALE: u32 = 2;
const ADVANCE: u32 = 6 * SCALE;

fn text_width(s: &str) -> u32 {
    s.chars().count() as u32 * ADVANCE
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn draw_text(img: &mut RgbImage, x: i64, y: i64, s: &str, color: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        let rows = glyph(ch);
        let x0 = x + (i as u32 * ADVANCE) as i64;
        for (r, bits) in rows.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    for dy in 0..SCALE as i64 {
                        for dx in 0..SCALE as i64 {
                            put(img, x0 + col * SCALE as i64 + dx, y + r as i64 * SCALE as i64 + dy, color);
                        }
                    }
                }
            }
        }
    }
}

fn draw_centered(img: &mut RgbImage, cx: i64, y: i64, s: &str, color: Rgb<u8>) {
    draw_text(img, cx - text_width(s) as i64 / 2, y, s, color);
}

fn fill(img: &mut RgbImage, x0: i64, y0: i64, x1: i64, y1: i64, c: Rgb<u8>) {
    for y in y0.min(y1)..=y0.max(y1) {
        for x in x0.min(x1)..=x0.max(x1) {
            put(img, x, y, c);
        }
    }
}

fn fmt_value(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-3 || v.abs() >= 1e4) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

/// One bar with its error half-width.
#[derive(Clone, Debug)]
pub struct Bar {
    pub label: String,
    pub mean: f64,
    pub std: f64,
}

/// Renders mean bars with ±std error bars and writes a PNG.
pub fn bar_chart(title: &str, bars: &[Bar], path: &Path) -> Result<()> {
    let (w, h) = (160 + 140 * bars.len().max(1) as u32, 440u32);
    let mut img = RgbImage::from_pixel(w, h, WHITE);
    let (left, right, top, bottom) = (90i64, w as i64 - 30, 50i64, h as i64 - 70);

    let hi = bars.iter().map(|b| b.mean + b.std).fold(0.0f64, f64::max);
    let lo = bars.iter().map(|b| b.mean - b.std).fold(0.0f64, f64::min);
    let span = if hi - lo > 0.0 { (hi - lo) * 1.1 } else { 1.0 };
    let (lo, hi) = (if lo < 0.0 { lo * 1.1 } else { 0.0 }, if lo < 0.0 { lo * 1.1 + span } else { span });
    let to_y = |v: f64| bottom - ((v - lo) / (hi - lo) * (bottom - top) as f64).round() as i64;

    draw_centered(&mut img, w as i64 / 2, 15, title, BLACK);
    for t in 0..=5 {
        let v = lo + (hi - lo) * t as f64 / 5.0;
        let y = to_y(v);
        fill(&mut img, left, y, right, y, GREY);
        let s = fmt_value(v);
        draw_text(&mut img, left - 8 - text_width(&s) as i64, y - 7, &s, BLACK);
    }
    fill(&mut img, left, top, left, bottom, BLACK);
    fill(&mut img, left, to_y(0.0), right, to_y(0.0), BLACK);

    let slot = (right - left) / bars.len().max(1) as i64;
    for (i, b) in bars.iter().enumerate() {
        let cx = left + slot * i as i64 + slot / 2;
        let half = slot / 4;
        fill(&mut img, cx - half, to_y(0.0), cx + half, to_y(b.mean), PALETTE[i % PALETTE.len()]);
        let (ey0, ey1) = (to_y(b.mean - b.std), to_y(b.mean + b.std));
        fill(&mut img, cx, ey0, cx, ey1, BLACK);
        fill(&mut img, cx - 8, ey0, cx + 8, ey0, BLACK);
        fill(&mut img, cx - 8, ey1, cx + 8, ey1, BLACK);
        let label = format!("{}±{}", fmt_value(b.mean), fmt_value(b.std));
        draw_centered(&mut img, cx, ey1.min(to_y(b.mean)) - 20, &label, BLACK);
        draw_centered(&mut img, cx, bottom + 12, &b.label, BLACK);
    }
    img.save(path).with_context(|| format!("writing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_is_a_png_of_expected_size() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        let bars = vec![
            Bar { label: "sinc".into(), mean: 0.8, std: 0.05 },
            Bar { label: "shuffleunet".into(), mean: 0.9, std: 0.02 },
        ];
        bar_chart("ssim", &bars, &p).unwrap();
        let img = image::open(&p).unwrap();
        assert_eq!((img.width(), img.height()), (440, 440));
    }
}
