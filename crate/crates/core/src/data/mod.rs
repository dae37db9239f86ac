//! Core sample types, the synthetic crack/road dataset generator, on-disk
//! dataset I/O, and the labeled/unlabeled split.
//!
//! Disk layout (written by [`save_dataset`], read by [`load_dataset`]):
//!
//! ```text
//! root/images/<id>.png      8-bit grayscale or RGB, intensities = value/255
//! root/masks/<id>.png       8-bit, {0,255} mapped to {0,1}; present iff labeled
//! root/manifest.tsv         header "id\tlabeled", rows "<id>\t<0|1>"
//! ```

mod io;
mod synth;

pub use io::{load_dataset, save_dataset};
pub use synth::generate_synthetic_dataset;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};
use crate::rng::stream;

/// One training/evaluation image with an optional binary ground-truth mask.
///
/// A sample is labeled exactly when `mask` is present; `1` marks the
/// foreground class (crack pixels, or the road component).
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// (C, H, W) intensities in [0, 1]; C is 1 (grayscale) or 3.
    pub image: Array3<f32>,
    /// (H, W) values in {0, 1}.
    pub mask: Option<Array2<u8>>,
}

impl ImageSample {
    pub fn labeled(&self) -> bool {
        self.mask.is_some()
    }

    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    /// Check the type invariants: intensity range, mask values, mask shape.
    pub fn validate(&self) -> Result<()> {
        if self.image.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Argument(format!(
                "sample {}: image values outside [0,1]",
                self.id
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != [self.height(), self.width()] {
                return Err(Error::Argument(format!(
                    "sample {}: mask shape {:?} != image spatial shape {:?}",
                    self.id,
                    mask.shape(),
                    &self.image.shape()[1..]
                )));
            }
            if mask.iter().any(|&v| v > 1) {
                return Err(Error::Argument(format!(
                    "sample {}: mask values outside {{0,1}}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Which synthetic task to generate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Crack,
    Road,
}

impl std::str::FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crack" => Ok(Task::Crack),
            "road" => Ok(Task::Road),
            other => Err(Error::Argument(format!("unknown task '{other}'"))),
        }
    }
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub image_size: usize,
    pub foreground_fraction_target: f64,
    pub task: Task,
    pub n_images: usize,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 128,
            foreground_fraction_target: 0.02,
            task: Task::Crack,
            n_images: 100,
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::Config(format!(
                "image_size must be >= 32, got {}",
                self.image_size
            )));
        }
        if !(self.foreground_fraction_target > 0.0 && self.foreground_fraction_target < 0.5) {
            return Err(Error::Config(format!(
                "foreground_fraction_target must lie in (0, 0.5), got {}",
                self.foreground_fraction_target
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(Error::Config(format!(
                "noise_level must lie in [0, 1], got {}",
                self.noise_level
            )));
        }
        Ok(())
    }
}

/// A deterministic partition of sample ids into labeled and unlabeled pools.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub labeled_ids: Vec<String>,
    pub unlabeled_ids: Vec<String>,
    pub label_fraction: f64,
    pub seed: u64,
}

/// Split `ids` into labeled/unlabeled pools with a seeded uniform draw
/// without replacement. The labeled count is `max(1, round(fraction * n))`;
/// both lists keep the input order.
pub fn make_split(ids: &[String], label_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if ids.is_empty() {
        return Err(Error::Argument("make_split: empty id list".into()));
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "make_split: label_fraction must lie in (0, 1], got {label_fraction}"
        )));
    }
    let n = ids.len();
    let n_labeled = ((label_fraction * n as f64).round() as usize).clamp(1, n);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "split", &[]);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        order.swap(i, j);
    }
    let mut chosen = vec![false; n];
    for &idx in order.iter().take(n_labeled) {
        chosen[idx] = true;
    }
    let labeled_ids = ids
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| c)
        .map(|(id, _)| id.clone())
        .collect();
    let unlabeled_ids = ids
        .iter()
        .zip(&chosen)
        .filter(|(_, &c)| !c)
        .map(|(id, _)| id.clone())
        .collect();
    Ok(DatasetSplit {
        labeled_ids,
        unlabeled_ids,
        label_fraction,
        seed,
    })
}

/// Pixels of the road surface that touch the background (4-neighborhood,
/// image border counts as background).
pub fn road_edge_mask(surface: &Array2<u8>) -> Array2<u8> {
    let (h, w) = surface.dim();
    let mut edge = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            if surface[[y, x]] == 0 {
                continue;
            }
            let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let has_bg_neighbor = on_border
                || surface[[y - 1, x]] == 0
                || surface[[y + 1, x]] == 0
                || surface[[y, x - 1]] == 0
                || surface[[y, x + 1]] == 0;
            if has_bg_neighbor {
                edge[[y, x]] = 1;
            }
        }
    }
    edge
}

/// Midpoint of each horizontal run of road-surface pixels. Synthetic roads
/// run top-to-bottom, so row-run midpoints trace the centerline.
pub fn road_centerline_mask(surface: &Array2<u8>) -> Array2<u8> {
    let (h, w) = surface.dim();
    let mut center = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        let mut x = 0;
        while x < w {
            if surface[[y, x]] == 1 {
                let start = x;
                while x < w && surface[[y, x]] == 1 {
                    x += 1;
                }
                center[[y, (start + x - 1) / 2]] = 1;
            } else {
                x += 1;
            }
        }
    }
    center
}
