//! Synthetic dataset generator.
//!
//! Crack images are dark random-walk curves (1-5 px wide) stamped onto a
//! textured background with shadow-like distractor blobs; road images are a
//! meandering top-to-bottom band. Curve/band stamping continues until the
//! mask reaches the configured foreground fraction, so the mean mask density
//! tracks `foreground_fraction_target` closely.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ImageSample, SynthConfig, Task};
use crate::error::Result;
use crate::par::map_indices;
use crate::rng::{normal, stream};

/// Generate `cfg.n_images` fully labeled samples, deterministically from
/// `cfg.seed`.
pub fn generate_synthetic_dataset(cfg: &SynthConfig) -> Result<Vec<ImageSample>> {
    cfg.validate()?;
    let cfg = cfg.clone();
    Ok(map_indices(cfg.n_images, move |i| {
        let id = format!("img_{i:05}");
        match cfg.task {
            Task::Crack => crack_sample(id, &cfg, i as u64),
            Task::Road => road_sample(id, &cfg, i as u64),
        }
    }))
}

/// Smooth per-image background: base level + bilinearly upsampled coarse
/// field + per-pixel noise.
fn textured_background(size: usize, noise_level: f64, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let base = 0.4 + 0.3 * rng.random::<f64>();
    let grid_n = 5;
    let amp = 0.04 + 0.16 * rng.random::<f64>();
    let mut grid = vec![0.0f64; grid_n * grid_n];
    for g in grid.iter_mut() {
        *g = amp * (2.0 * rng.random::<f64>() - 1.0);
    }
    let mut img = Array2::<f32>::zeros((size, size));
    let scale = (grid_n - 1) as f64 / (size - 1) as f64;
    for y in 0..size {
        let gy = y as f64 * scale;
        let y0 = (gy as usize).min(grid_n - 2);
        let fy = gy - y0 as f64;
        for x in 0..size {
            let gx = x as f64 * scale;
            let x0 = (gx as usize).min(grid_n - 2);
            let fx = gx - x0 as f64;
            let g00 = grid[y0 * grid_n + x0];
            let g01 = grid[y0 * grid_n + x0 + 1];
            let g10 = grid[(y0 + 1) * grid_n + x0];
            let g11 = grid[(y0 + 1) * grid_n + x0 + 1];
            let low = g00 * (1.0 - fy) * (1.0 - fx)
                + g01 * (1.0 - fy) * fx
                + g10 * fy * (1.0 - fx)
                + g11 * fy * fx;
            img[[y, x]] = (base + low) as f32;
        }
    }
    for v in img.iter_mut() {
        let n = noise_level * 0.35 * (2.0 * rng.random::<f64>() - 1.0);
        *v = (*v as f64 + n).clamp(0.0, 1.0) as f32;
    }
    img
}

/// Dark elliptical smudges that are NOT foreground (shadow distractors);
/// some are elongated enough to pass for cracks locally.
fn stamp_distractors(img: &mut Array2<f32>, size: usize, rng: &mut ChaCha8Rng) {
    let count = rng.random_range(1..=6);
    for _ in 0..count {
        let cy = rng.random_range(0..size) as f64;
        let cx = rng.random_range(0..size) as f64;
        let ry = 2.0 + 14.0 * rng.random::<f64>();
        let rx = 2.0 + 14.0 * rng.random::<f64>();
        let depth = 0.05 + 0.15 * rng.random::<f64>();
        let y_lo = (cy - ry).floor().max(0.0) as usize;
        let y_hi = ((cy + ry).ceil() as usize).min(size - 1);
        let x_lo = (cx - rx).floor().max(0.0) as usize;
        let x_hi = ((cx + rx).ceil() as usize).min(size - 1);
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let dy = (y as f64 - cy) / ry;
                let dx = (x as f64 - cx) / rx;
                let d2 = dy * dy + dx * dx;
                if d2 < 1.0 {
                    let fall = (1.0 - d2) * depth;
                    img[[y, x]] = (img[[y, x]] as f64 - fall).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }
}

fn stamp_disc(
    img: &mut Array2<f32>,
    mask: &mut Array2<u8>,
    size: usize,
    cy: f64,
    cx: f64,
    radius: f64,
    depth: f64,
) -> usize {
    let mut stamped = 0;
    let y_lo = (cy - radius).floor().max(0.0) as usize;
    let y_hi = ((cy + radius).ceil() as usize).min(size - 1);
    let x_lo = (cx - radius).floor().max(0.0) as usize;
    let x_hi = ((cx + radius).ceil() as usize).min(size - 1);
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dy = y as f64 - cy;
            let dx = x as f64 - cx;
            if dy * dy + dx * dx <= radius * radius {
                img[[y, x]] = (img[[y, x]] as f64 - depth).clamp(0.0, 1.0) as f32;
                if mask[[y, x]] == 0 {
                    mask[[y, x]] = 1;
                    stamped += 1;
                }
            }
        }
    }
    stamped
}

fn crack_sample(id: String, cfg: &SynthConfig, index: u64) -> ImageSample {
    let size = cfg.image_size;
    let mut rng = stream(cfg.seed, "crack-img", &[index]);
    let mut img = textured_background(size, cfg.noise_level, &mut rng);
    stamp_distractors(&mut img, size, &mut rng);

    let mut mask = Array2::<u8>::zeros((size, size));
    let target_px = (cfg.foreground_fraction_target * (size * size) as f64).round() as usize;
    let target_px = target_px.max(1);
    let mut fg = 0usize;
    while fg < target_px {
        // one momentum random walk, width 1-5 px, darkened with soft depth
        let mut y = rng.random_range(0..size) as f64;
        let mut x = rng.random_range(0..size) as f64;
        let mut theta = rng.random::<f64>() * std::f64::consts::TAU;
        let width = 1.0 + 4.0 * rng.random::<f64>().powi(2); // biased toward thin cracks
        let depth = 0.12 + 0.3 * rng.random::<f64>(); // includes faint cracks
        let steps = (size as f64 * (0.6 + 0.9 * rng.random::<f64>())) as usize;
        for _ in 0..steps {
            fg += stamp_disc(&mut img, &mut mask, size, y, x, width * 0.5, depth);
            theta += 0.22 * normal(&mut rng);
            y += theta.sin();
            x += theta.cos();
            if y < 0.0 || x < 0.0 || y >= size as f64 || x >= size as f64 {
                break;
            }
            if fg >= target_px {
                break;
            }
        }
    }

    ImageSample {
        id,
        image: into_one_channel(img),
        mask: Some(mask),
    }
}

fn road_sample(id: String, cfg: &SynthConfig, index: u64) -> ImageSample {
    let size = cfg.image_size;
    let mut rng = stream(cfg.seed, "road-img", &[index]);
    let mut img = textured_background(size, cfg.noise_level, &mut rng);

    // Top-to-bottom band: sinusoidal lateral meander, width from the target
    // foreground fraction (path length ~ image height).
    let width = (cfg.foreground_fraction_target * size as f64).max(2.0);
    let cx = (0.3 + 0.4 * rng.random::<f64>()) * size as f64;
    let amp = (0.05 + 0.10 * rng.random::<f64>()) * size as f64;
    let freq = 0.5 + 1.0 * rng.random::<f64>();
    let phase = rng.random::<f64>() * std::f64::consts::TAU;
    let shade = -(0.12 + 0.12 * rng.random::<f64>()); // asphalt darker

    let mut mask = Array2::<u8>::zeros((size, size));
    for y in 0..size {
        let t = y as f64 / size as f64;
        let center = cx + amp * (std::f64::consts::TAU * freq * t + phase).sin();
        let xl = (center - width * 0.5).round().max(0.0) as usize;
        let xr = ((center + width * 0.5).round() as usize).min(size - 1);
        for x in xl..=xr.max(xl) {
            mask[[y, x]] = 1;
            img[[y, x]] = (img[[y, x]] as f64 + shade).clamp(0.0, 1.0) as f32;
        }
    }

    ImageSample {
        id,
        image: into_one_channel(img),
        mask: Some(mask),
    }
}

fn into_one_channel(plane: Array2<f32>) -> Array3<f32> {
    let (h, w) = plane.dim();
    plane
        .into_shape_with_order((1, h, w))
        .expect("reshape (H,W) -> (1,H,W) cannot fail")
}
