//! Minimal line-chart renderer for training logs: axes, gridlines, colored
//! polylines, and 3x5 bitmap digits for the axis extents. No font or plot
//! dependencies; output is a plain PNG.

use std::path::Path;

use image::{Rgb, RgbImage};

pub struct Series {
    pub label: String,
    pub color: [u8; 3],
    pub points: Vec<(f64, f64)>,
}

const W: u32 = 900;
const H: u32 = 560;
const MARGIN_L: u32 = 64;
const MARGIN_R: u32 = 16;
const MARGIN_T: u32 = 16;
const MARGIN_B: u32 = 40;

// 3x5 glyphs for "0123456789.-e", one bit per pixel, row-major.
const GLYPHS: [(char, [u8; 15]); 13] = [
    ('0', [1, 1, 1, 1, 0, 1, 1, 0, 1, 1, 0, 1, 1, 1, 1]),
    ('1', [0, 1, 0, 1, 1, 0, 0, 1, 0, 0, 1, 0, 1, 1, 1]),
    ('2', [1, 1, 1, 0, 0, 1, 1, 1, 1, 1, 0, 0, 1, 1, 1]),
    ('3', [1, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 1, 1]),
    ('4', [1, 0, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 0, 0, 1]),
    ('5', [1, 1, 1, 1, 0, 0, 1, 1, 1, 0, 0, 1, 1, 1, 1]),
    ('6', [1, 1, 1, 1, 0, 0, 1, 1, 1, 1, 0, 1, 1, 1, 1]),
    ('7', [1, 1, 1, 0, 0, 1, 0, 1, 0, 0, 1, 0, 0, 1, 0]),
    ('8', [1, 1, 1, 1, 0, 1, 1, 1, 1, 1, 0, 1, 1, 1, 1]),
    ('9', [1, 1, 1, 1, 0, 1, 1, 1, 1, 0, 0, 1, 1, 1, 1]),
    ('.', [0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 0]),
    ('-', [0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, 0]),
    ('e', [0, 0, 0, 1, 1, 1, 1, 1, 0, 1, 0, 0, 1, 1, 1]),
];

fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        if let Some((_, bits)) = GLYPHS.iter().find(|(g, _)| *g == ch) {
            for (i, &b) in bits.iter().enumerate() {
                if b == 1 {
                    let px = cx + (i % 3) as u32;
                    let py = y + (i / 3) as u32;
                    if px < img.width() && py < img.height() {
                        img.put_pixel(px, py, Rgb(color));
                    }
                }
            }
        }
        cx += 4;
    }
}

fn format_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    let s = if (1e-3..1e4).contains(&a) {
        format!("{v:.3}")
    } else {
        format!("{v:.1e}")
    };
    s.chars().filter(|c| GLYPHS.iter().any(|(g, _)| g == c)).collect()
}

fn draw_line(img: &mut RgbImage, a: (f32, f32), b: (f32, f32), color: [u8; 3]) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as u32).max(1);
    for i in 0..=steps {
        let t = i as f32 / steps as f32;
        let x = a.0 + t * (b.0 - a.0);
        let y = a.1 + t * (b.1 - a.1);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, Rgb(color));
        }
    }
}

/// Render series to a PNG and a sibling `.legend.txt` naming each color.
pub fn render_chart(series: &[Series], path: &Path) -> Result<(), String> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));

    let (mut x_min, mut x_max) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for &(x, y) in &s.points {
            if x.is_finite() && y.is_finite() {
                x_min = x_min.min(x);
                x_max = x_max.max(x);
                y_min = y_min.min(y);
                y_max = y_max.max(y);
            }
        }
    }
    if !x_min.is_finite() {
        return Err("no finite points to plot".into());
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }

    let plot_w = (W - MARGIN_L - MARGIN_R) as f64;
    let plot_h = (H - MARGIN_T - MARGIN_B) as f64;
    let to_px = |x: f64, y: f64| -> (f32, f32) {
        let fx = MARGIN_L as f64 + (x - x_min) / (x_max - x_min) * plot_w;
        let fy = MARGIN_T as f64 + (1.0 - (y - y_min) / (y_max - y_min)) * plot_h;
        (fx as f32, fy as f32)
    };

    // frame + quarter gridlines
    let frame = [120u8, 120, 120];
    let grid = [225u8, 225, 225];
    for q in 1..4 {
        let gy = MARGIN_T as f32 + plot_h as f32 * q as f32 / 4.0;
        draw_line(&mut img, (MARGIN_L as f32, gy), ((W - MARGIN_R) as f32, gy), grid);
        let gx = MARGIN_L as f32 + plot_w as f32 * q as f32 / 4.0;
        draw_line(&mut img, (gx, MARGIN_T as f32), (gx, (H - MARGIN_B) as f32), grid);
    }
    draw_line(
        &mut img,
        (MARGIN_L as f32, MARGIN_T as f32),
        (MARGIN_L as f32, (H - MARGIN_B) as f32),
        frame,
    );
    draw_line(
        &mut img,
        (MARGIN_L as f32, (H - MARGIN_B) as f32),
        ((W - MARGIN_R) as f32, (H - MARGIN_B) as f32),
        frame,
    );

    for s in series {
        let mut prev: Option<(f32, f32)> = None;
        for &(x, y) in &s.points {
            if !(x.is_finite() && y.is_finite()) {
                prev = None;
                continue;
            }
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, s.color);
            }
            prev = Some(p);
        }
    }

    let black = [0u8, 0, 0];
    draw_text(&mut img, 4, MARGIN_T, &format_tick(y_max), black);
    draw_text(&mut img, 4, H - MARGIN_B - 6, &format_tick(y_min), black);
    draw_text(&mut img, MARGIN_L, H - MARGIN_B + 8, &format_tick(x_min), black);
    draw_text(
        &mut img,
        W - MARGIN_R - 40,
        H - MARGIN_B + 8,
        &format_tick(x_max),
        black,
    );

    img.save(path).map_err(|e| format!("write {}: {e}", path.display()))?;
    let legend: String = series
        .iter()
        .map(|s| format!("{}: #{:02x}{:02x}{:02x}\n", s.label, s.color[0], s.color[1], s.color[2]))
        .collect();
    let legend_path = path.with_extension("legend.txt");
    std::fs::write(&legend_path, legend)
        .map_err(|e| format!("write {}: {e}", legend_path.display()))
}
