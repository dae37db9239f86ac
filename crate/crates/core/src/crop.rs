//! Overlapping crop pairs and exact pixel correspondence.
//!
//! Two equal-sized, axis-aligned crops are sampled from one image so that
//! their intersection covers at least a configured fraction of the crop
//! area. [`paired_pixel_indices`] then walks a stride lattice anchored at
//! the overlap origin and reports, for every lattice point, the feature-map
//! cell it falls into inside each crop — the substrate for pulling the same
//! pixel's features together across the two contexts.

use rand::Rng;

use crate::error::{Error, Result};

/// Axis-aligned rectangle: top-left corner plus extent, in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        self.w * self.h
    }

    /// Intersection of two rects in the same frame; `None` when disjoint.
    pub fn intersect(&self, other: &Rect) -> Option<Rect> {
        let x0 = self.x0.max(other.x0);
        let y0 = self.y0.max(other.y0);
        let x1 = (self.x0 + self.w).min(other.x0 + other.w);
        let y1 = (self.y0 + self.h).min(other.y0 + other.h);
        (x1 > x0 && y1 > y0).then(|| Rect {
            x0,
            y0,
            w: x1 - x0,
            h: y1 - y0,
        })
    }
}

/// Two crops of one image plus their overlap, expressed in both crop frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPair {
    /// First crop, image frame.
    pub crop_a: Rect,
    /// Second crop, image frame (same extent as `crop_a`).
    pub crop_b: Rect,
    /// Overlap in crop-a coordinates.
    pub overlap_in_a: Rect,
    /// Overlap in crop-b coordinates.
    pub overlap_in_b: Rect,
}

impl CropPair {
    /// The overlap rectangle mapped back to image coordinates.
    pub fn overlap_in_image(&self) -> Rect {
        Rect {
            x0: self.crop_a.x0 + self.overlap_in_a.x0,
            y0: self.crop_a.y0 + self.overlap_in_a.y0,
            w: self.overlap_in_a.w,
            h: self.overlap_in_a.h,
        }
    }
}

/// Sample a pair of overlapping `crop_size`² crops from an
/// `image_h` × `image_w` image.
///
/// `crop_a` is uniform over all valid positions; `crop_b` is uniform over
/// positions whose overlap with `crop_a` covers at least
/// `min_overlap_fraction` of the crop area (rejection sampling on the given
/// rng). Identical positions are allowed, so any fraction in (0, 1] is
/// satisfiable.
pub fn sample_crop_pair(
    image_h: usize,
    image_w: usize,
    crop_size: usize,
    min_overlap_fraction: f64,
    rng: &mut impl Rng,
) -> Result<CropPair> {
    if crop_size == 0 || crop_size > image_h.min(image_w) {
        return Err(Error::Argument(format!(
            "crop_size {crop_size} does not fit a {image_h}x{image_w} image"
        )));
    }
    if !(min_overlap_fraction > 0.0 && min_overlap_fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "min_overlap_fraction must lie in (0, 1], got {min_overlap_fraction}"
        )));
    }
    let min_area = min_overlap_fraction * (crop_size * crop_size) as f64;
    let y_max = image_h - crop_size;
    let x_max = image_w - crop_size;

    let ay = rng.random_range(0..=y_max);
    let ax = rng.random_range(0..=x_max);
    let crop_a = Rect {
        x0: ax,
        y0: ay,
        w: crop_size,
        h: crop_size,
    };

    let mut crop_b = crop_a;
    let mut overlap_img = crop_a;
    for _ in 0..10_000 {
        let by = rng.random_range(0..=y_max);
        let bx = rng.random_range(0..=x_max);
        let candidate = Rect {
            x0: bx,
            y0: by,
            w: crop_size,
            h: crop_size,
        };
        if let Some(inter) = crop_a.intersect(&candidate) {
            if inter.area() as f64 >= min_area {
                crop_b = candidate;
                overlap_img = inter;
                break;
            }
        }
        // exhausted attempts: crop_b stays at crop_a (full overlap)
    }

    Ok(CropPair {
        crop_a,
        crop_b,
        overlap_in_a: Rect {
            x0: overlap_img.x0 - crop_a.x0,
            y0: overlap_img.y0 - crop_a.y0,
            w: overlap_img.w,
            h: overlap_img.h,
        },
        overlap_in_b: Rect {
            x0: overlap_img.x0 - crop_b.x0,
            y0: overlap_img.y0 - crop_b.y0,
            w: overlap_img.w,
            h: overlap_img.h,
        },
    })
}

/// Feature-cell correspondence over the overlap at a given stride.
///
/// Walks the overlap on a `stride` lattice anchored at the overlap origin;
/// each lattice point is one image pixel seen by both crops, and the
/// returned `((row_a, col_a), (row_b, col_b))` are the stride-quantized
/// feature-map cells containing it in each crop frame. Only full stride
/// cells count, so an overlap smaller than one cell yields an empty list.
pub fn paired_pixel_indices(
    pair: &CropPair,
    stride: usize,
) -> Vec<((usize, usize), (usize, usize))> {
    assert!(stride >= 1, "stride must be >= 1");
    let oa = pair.overlap_in_a;
    let ob = pair.overlap_in_b;
    let rows = oa.h / stride;
    let cols = oa.w / stride;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let ia = ((oa.y0 + r * stride) / stride, (oa.x0 + c * stride) / stride);
            let ib = ((ob.y0 + r * stride) / stride, (ob.x0 + c * stride) / stride);
            out.push((ia, ib));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use proptest::prelude::*;

    fn check_invariants(pair: &CropPair, h: usize, w: usize, crop: usize, min_frac: f64) {
        assert_eq!(pair.crop_a.w, crop);
        assert_eq!(pair.crop_a.h, crop);
        assert_eq!(pair.crop_b.w, crop);
        assert_eq!(pair.crop_b.h, crop);
        assert!(pair.crop_a.x0 + crop <= w && pair.crop_a.y0 + crop <= h);
        assert!(pair.crop_b.x0 + crop <= w && pair.crop_b.y0 + crop <= h);
        assert_eq!(pair.overlap_in_a.w, pair.overlap_in_b.w);
        assert_eq!(pair.overlap_in_a.h, pair.overlap_in_b.h);
        // both overlap rects map to the same image rectangle = a ∩ b
        let inter = pair.crop_a.intersect(&pair.crop_b).expect("must overlap");
        assert_eq!(pair.overlap_in_image(), inter);
        assert_eq!(
            Rect {
                x0: pair.crop_b.x0 + pair.overlap_in_b.x0,
                y0: pair.crop_b.y0 + pair.overlap_in_b.y0,
                w: pair.overlap_in_b.w,
                h: pair.overlap_in_b.h,
            },
            inter
        );
        assert!(inter.area() as f64 >= min_frac * (crop * crop) as f64);
    }

    #[test]
    fn full_size_crop_is_forced_degenerate() {
        let mut rng = stream(0, "crop", &[]);
        let pair = sample_crop_pair(128, 128, 128, 0.25, &mut rng).unwrap();
        assert_eq!(pair.crop_a, pair.crop_b);
        assert_eq!(pair.overlap_in_a.area(), 128 * 128);
    }

    #[test]
    fn overlap_area_bound_holds_over_many_seeds() {
        for seed in 0..10_000u64 {
            let mut rng = stream(seed, "crop", &[]);
            let pair = sample_crop_pair(128, 128, 64, 0.25, &mut rng).unwrap();
            check_invariants(&pair, 128, 128, 64, 0.25);
            assert!(pair.overlap_in_a.area() >= 1024);
        }
    }

    #[test]
    fn oversized_crop_is_an_argument_error() {
        let mut rng = stream(0, "crop", &[]);
        assert!(matches!(
            sample_crop_pair(128, 128, 256, 0.25, &mut rng),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn full_overlap_stride_one_is_identity() {
        let full = Rect {
            x0: 0,
            y0: 0,
            w: 4,
            h: 4,
        };
        let pair = CropPair {
            crop_a: full,
            crop_b: full,
            overlap_in_a: full,
            overlap_in_b: full,
        };
        let pairs = paired_pixel_indices(&pair, 1);
        assert_eq!(pairs.len(), 16);
        for (ia, ib) in pairs {
            assert_eq!(ia, ib);
        }
    }

    #[test]
    fn offset_overlap_maps_with_column_shift() {
        // crop 8, overlap 4x4 at offset (4,0) in a and (0,0) in b
        let pair = CropPair {
            crop_a: Rect {
                x0: 0,
                y0: 0,
                w: 8,
                h: 8,
            },
            crop_b: Rect {
                x0: 4,
                y0: 0,
                w: 8,
                h: 8,
            },
            overlap_in_a: Rect {
                x0: 4,
                y0: 0,
                w: 4,
                h: 4,
            },
            overlap_in_b: Rect {
                x0: 0,
                y0: 0,
                w: 4,
                h: 4,
            },
        };
        let pairs = paired_pixel_indices(&pair, 1);
        assert_eq!(pairs.len(), 16);
        for ((ra, ca), (rb, cb)) in pairs {
            assert_eq!(ra, rb);
            assert_eq!(ca, cb + 4);
        }
    }

    #[test]
    fn sub_cell_overlap_yields_empty_list() {
        let o = Rect {
            x0: 0,
            y0: 0,
            w: 3,
            h: 3,
        };
        let pair = CropPair {
            crop_a: Rect {
                x0: 0,
                y0: 0,
                w: 8,
                h: 8,
            },
            crop_b: Rect {
                x0: 5,
                y0: 5,
                w: 8,
                h: 8,
            },
            overlap_in_a: Rect {
                x0: 5,
                y0: 5,
                w: 3,
                h: 3,
            },
            overlap_in_b: o,
        };
        assert!(paired_pixel_indices(&pair, 4).is_empty());
    }

    #[test]
    fn paired_pixels_carry_identical_image_values_at_stride_one() {
        // random images, 1000 trials: crop at both indices, compare values
        for trial in 0..1000u64 {
            let mut rng = stream(trial, "roundtrip", &[]);
            let h = 32 + (trial % 17) as usize;
            let w = 32 + (trial % 23) as usize;
            let crop = 16 + (trial % 8) as usize;
            let image: Vec<f32> = (0..h * w)
                .map(|_| rand::Rng::random::<f32>(&mut rng))
                .collect();
            let pair = sample_crop_pair(h, w, crop, 0.25, &mut rng).unwrap();
            for ((ra, ca), (rb, cb)) in paired_pixel_indices(&pair, 1) {
                let va = image[(pair.crop_a.y0 + ra) * w + pair.crop_a.x0 + ca];
                let vb = image[(pair.crop_b.y0 + rb) * w + pair.crop_b.x0 + cb];
                assert_eq!(va, vb);
            }
        }
    }

    proptest! {
        #[test]
        fn sampled_pairs_satisfy_invariants(
            seed in 0u64..1_000_000,
            h in 32usize..200,
            w in 32usize..200,
            crop_frac in 0.3f64..1.0,
            min_frac in 0.05f64..0.9,
        ) {
            let crop = ((h.min(w) as f64 * crop_frac) as usize).max(8);
            let mut rng = stream(seed, "prop", &[]);
            let pair = sample_crop_pair(h, w, crop, min_frac, &mut rng).unwrap();
            check_invariants(&pair, h, w, crop, min_frac);
        }

        #[test]
        fn swapping_the_pair_swaps_the_tuples(
            seed in 0u64..1_000_000,
            stride in 1usize..9,
        ) {
            let mut rng = stream(seed, "sym", &[]);
            let pair = sample_crop_pair(96, 96, 48, 0.25, &mut rng).unwrap();
            let swapped = CropPair {
                crop_a: pair.crop_b,
                crop_b: pair.crop_a,
                overlap_in_a: pair.overlap_in_b,
                overlap_in_b: pair.overlap_in_a,
            };
            let fwd = paired_pixel_indices(&pair, stride);
            let back = paired_pixel_indices(&swapped, stride);
            let flipped: Vec<_> = back.into_iter().map(|(a, b)| (b, a)).collect();
            prop_assert_eq!(fwd, flipped);
        }
    }
}
