//! Layer primitives: convolution (im2col + gemm), SeLU, ceil-mode max
//! pooling, bilinear resizing, sigmoid, per-pixel L2 normalization.
//!
//! Forward/backward pairs operate on single samples in (C, H, W) layout.
//! Everything is sequential and allocation-honest; batch parallelism lives
//! one level up, where whole samples are independent jobs.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use crate::rng::normal;

pub(crate) const SELU_LAMBDA: f32 = 1.050_701;
pub(crate) const SELU_ALPHA: f32 = 1.673_263_2;

/// A kxk convolution (k = 1 or 3; 3x3 uses zero padding 1, so spatial size
/// is preserved).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Conv {
    /// (out, in, k, k)
    pub w: Array4<f32>,
    pub b: Array1<f32>,
}

impl Conv {
    pub fn seeded(out_ch: usize, in_ch: usize, k: usize, rng: &mut ChaCha8Rng) -> Conv {
        assert!(k == 1 || k == 3);
        let fan_in = (in_ch * k * k) as f64;
        let std = (1.0 / fan_in).sqrt();
        let w = Array4::from_shape_fn((out_ch, in_ch, k, k), |_| (std * normal(rng)) as f32);
        let b = Array1::from_shape_fn(out_ch, |_| (0.05 * normal(rng)) as f32);
        Conv { w, b }
    }

    pub fn zeros_like(&self) -> Conv {
        Conv {
            w: Array4::zeros(self.w.raw_dim()),
            b: Array1::zeros(self.b.raw_dim()),
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Array3<f32>) -> Array3<f32> {
        let (out_ch, in_ch, k, _) = self.w.dim();
        let (c, h, w) = x.dim();
        debug_assert_eq!(c, in_ch);
        let w2 = self
            .w
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("conv weight is contiguous");
        let mut y2 = if k == 3 {
            let col = im2col3(x);
            w2.dot(&col)
        } else {
            let x2 = x
                .view()
                .into_shape_with_order((c, h * w))
                .expect("input is contiguous");
            w2.dot(&x2)
        };
        for (mut row, &bias) in y2.rows_mut().into_iter().zip(self.b.iter()) {
            row.mapv_inplace(|v| v + bias);
        }
        y2.into_shape_with_order((out_ch, h, w))
            .expect("gemm output is contiguous")
    }

    /// Accumulate parameter gradients into `grad` and return the gradient
    /// w.r.t. the input.
    pub fn backward(&self, x: &Array3<f32>, dy: &Array3<f32>, grad: &mut Conv) -> Array3<f32> {
        let (out_ch, in_ch, k, _) = self.w.dim();
        let (c, h, w) = x.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((out_ch, h * w))
            .expect("dy is contiguous");
        let w2 = self
            .w
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("conv weight is contiguous");

        grad.b += &dy2.sum_axis(Axis(1));
        let mut gw = grad
            .w
            .view_mut()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("grad weight is contiguous");
        if k == 3 {
            let col = im2col3(x);
            gw += &dy2.dot(&col.t());
            let dcol = w2.t().dot(&dy2);
            col2im3(&dcol, c, h, w)
        } else {
            let x2 = x
                .view()
                .into_shape_with_order((c, h * w))
                .expect("input is contiguous");
            gw += &dy2.dot(&x2.t());
            let dx2 = w2.t().dot(&dy2);
            let dx = if dx2.is_standard_layout() {
                dx2
            } else {
                dx2.as_standard_layout().into_owned()
            };
            dx.into_shape_with_order((c, h, w))
                .expect("dx is contiguous")
        }
    }
}

/// (C*9, H*W) patch matrix for a 3x3 convolution with zero padding 1.
fn im2col3(x: &Array3<f32>) -> Array2<f32> {
    let (c, h, w) = x.dim();
    let mut col = Array2::<f32>::zeros((c * 9, h * w));
    let xs = x.as_slice().expect("x is contiguous");
    let cs = col.as_slice_mut().expect("col is contiguous");
    for ci in 0..c {
        for ky in 0..3 {
            let dy = ky as isize - 1;
            for kx in 0..3 {
                let dx = kx as isize - 1;
                let row_base = (ci * 9 + ky * 3 + kx) * (h * w);
                let (x_lo, x_hi) = match dx {
                    -1 => (1usize, w),
                    1 => (0, w - 1),
                    _ => (0, w),
                };
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + sy as usize * w;
                    let dst = row_base + y * w;
                    let s_lo = (x_lo as isize + dx) as usize;
                    let s_hi = (x_hi as isize + dx) as usize;
                    cs[dst + x_lo..dst + x_hi].copy_from_slice(&xs[src + s_lo..src + s_hi]);
                }
            }
        }
    }
    col
}

/// Transpose of [`im2col3`]: scatter-add patch gradients back to the input.
fn col2im3(dcol: &Array2<f32>, c: usize, h: usize, w: usize) -> Array3<f32> {
    let mut dx = Array3::<f32>::zeros((c, h, w));
    let ds = dcol.as_slice().expect("dcol is contiguous");
    let xs = dx.as_slice_mut().expect("dx is contiguous");
    for ci in 0..c {
        for ky in 0..3 {
            let dy = ky as isize - 1;
            for kx in 0..3 {
                let dx_off = kx as isize - 1;
                let row_base = (ci * 9 + ky * 3 + kx) * (h * w);
                let (x_lo, x_hi) = match dx_off {
                    -1 => (1usize, w),
                    1 => (0, w - 1),
                    _ => (0, w),
                };
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = ci * h * w + sy as usize * w;
                    let dst = row_base + y * w;
                    let off = dx_off;
                    for xo in x_lo..x_hi {
                        xs[src + (xo as isize + off) as usize] += ds[dst + xo];
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn selu_inplace(x: &mut Array3<f32>) {
    x.mapv_inplace(|v| {
        if v > 0.0 {
            SELU_LAMBDA * v
        } else {
            SELU_LAMBDA * SELU_ALPHA * (v.exp() - 1.0)
        }
    });
}

/// Multiply `dy` by SeLU'(x), reconstructed from the activation output:
/// for y > 0 the slope is lambda, otherwise lambda*alpha*e^x = y + lambda*alpha.
pub(crate) fn selu_backward_inplace(dy: &mut Array3<f32>, y: &Array3<f32>) {
    dy.zip_mut_with(y, |g, &out| {
        *g *= if out > 0.0 {
            SELU_LAMBDA
        } else {
            out + SELU_LAMBDA * SELU_ALPHA
        };
    });
}

/// 2x2 stride-2 max pooling with ceil-mode sizing; edge windows shrink to
/// the available pixels. Returns the pooled map and per-cell argmax indices
/// (flat within each channel plane) for the backward pass.
pub(crate) fn maxpool2_ceil(x: &Array3<f32>) -> (Array3<f32>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let ho = h.div_ceil(2);
    let wo = w.div_ceil(2);
    let mut y = Array3::<f32>::zeros((c, ho, wo));
    let mut argmax = vec![0u32; c * ho * wo];
    let xs = x.as_slice().expect("x is contiguous");
    let ys = y.as_slice_mut().expect("y is contiguous");
    for ci in 0..c {
        let plane = ci * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let y0 = oy * 2;
                let x0 = ox * 2;
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0u32;
                for yy in y0..(y0 + 2).min(h) {
                    for xx in x0..(x0 + 2).min(w) {
                        let v = xs[plane + yy * w + xx];
                        if v > best {
                            best = v;
                            best_idx = (yy * w + xx) as u32;
                        }
                    }
                }
                let out_idx = ci * ho * wo + oy * wo + ox;
                ys[out_idx] = best;
                argmax[out_idx] = best_idx;
            }
        }
    }
    (y, argmax)
}

pub(crate) fn maxpool2_backward(
    dy: &Array3<f32>,
    argmax: &[u32],
    in_h: usize,
    in_w: usize,
) -> Array3<f32> {
    let (c, ho, wo) = dy.dim();
    let mut dx = Array3::<f32>::zeros((c, in_h, in_w));
    let dys = dy.as_slice().expect("dy is contiguous");
    let dxs = dx.as_slice_mut().expect("dx is contiguous");
    for ci in 0..c {
        let plane = ci * in_h * in_w;
        let out_plane = ci * ho * wo;
        for i in 0..ho * wo {
            dxs[plane + argmax[out_plane + i] as usize] += dys[out_plane + i];
        }
    }
    dx
}

/// Per-axis sampling plan: (low index, high index, high weight).
fn resize_axis_plan(src: usize, dst: usize) -> Vec<(usize, usize, f32)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, (pos - i0 as f64) as f32)
        })
        .collect()
}

/// Bilinear resize of a single-channel map to an exact target size.
pub(crate) fn bilinear_resize2(x: &Array2<f32>, th: usize, tw: usize) -> Array2<f32> {
    let (h, w) = x.dim();
    if (h, w) == (th, tw) {
        return x.clone();
    }
    let rows = resize_axis_plan(h, th);
    let cols = resize_axis_plan(w, tw);
    let mut y = Array2::<f32>::zeros((th, tw));
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = x[[y0, x0]] * (1.0 - fx) + x[[y0, x1]] * fx;
            let bot = x[[y1, x0]] * (1.0 - fx) + x[[y1, x1]] * fx;
            y[[oy, ox]] = top * (1.0 - fy) + bot * fy;
        }
    }
    y
}

/// Transpose of [`bilinear_resize2`]: scatter output-side gradients back to
/// an `sh` x `sw` source map.
pub(crate) fn bilinear_backward2(dy: &Array2<f32>, sh: usize, sw: usize) -> Array2<f32> {
    let (th, tw) = dy.dim();
    if (sh, sw) == (th, tw) {
        return dy.clone();
    }
    let rows = resize_axis_plan(sh, th);
    let cols = resize_axis_plan(sw, tw);
    let mut dx = Array2::<f32>::zeros((sh, sw));
    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
            let g = dy[[oy, ox]];
            dx[[y0, x0]] += g * (1.0 - fy) * (1.0 - fx);
            dx[[y0, x1]] += g * (1.0 - fy) * fx;
            dx[[y1, x0]] += g * fy * (1.0 - fx);
            dx[[y1, x1]] += g * fy * fx;
        }
    }
    dx
}

pub(crate) fn sigmoid2(x: &Array2<f32>) -> Array2<f32> {
    x.mapv(|v| 1.0 / (1.0 + (-v).exp()))
}

/// dL/dlogit from dL/dprob: multiply by p(1-p).
pub(crate) fn sigmoid_backward2(d_prob: &Array2<f32>, prob: &Array2<f32>) -> Array2<f32> {
    let mut d = d_prob.clone();
    d.zip_mut_with(prob, |g, &p| *g *= p * (1.0 - p));
    d
}

/// Normalize each pixel's channel vector to unit L2 norm. Returns the
/// normalized map and the per-pixel norms (clamped away from zero).
pub(crate) fn l2_normalize(x: &Array3<f32>) -> (Array3<f32>, Array2<f32>) {
    let (c, h, w) = x.dim();
    let mut norms = Array2::<f32>::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                norms[[y, xx]] += x[[ci, y, xx]] * x[[ci, y, xx]];
            }
        }
    }
    norms.mapv_inplace(|v| v.sqrt().max(1e-12));
    let mut out = x.clone();
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                out[[ci, y, xx]] /= norms[[y, xx]];
            }
        }
    }
    (out, norms)
}

/// Backward of per-pixel normalization:
/// dx = (dy - emb * <emb, dy>) / norm.
pub(crate) fn l2_normalize_backward(
    d_emb: &Array3<f32>,
    emb: &Array3<f32>,
    norms: &Array2<f32>,
) -> Array3<f32> {
    let (c, h, w) = emb.dim();
    let mut dots = Array2::<f32>::zeros((h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dots[[y, xx]] += emb[[ci, y, xx]] * d_emb[[ci, y, xx]];
            }
        }
    }
    let mut dx = Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        for y in 0..h {
            for xx in 0..w {
                dx[[ci, y, xx]] =
                    (d_emb[[ci, y, xx]] - emb[[ci, y, xx]] * dots[[y, xx]]) / norms[[y, xx]];
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use rand::Rng;

    fn random3(c: usize, h: usize, w: usize, seed: u64) -> Array3<f32> {
        let mut rng = stream(seed, "layer-in", &[]);
        Array3::from_shape_fn((c, h, w), |_| rng.random::<f32>() * 2.0 - 1.0)
    }

    /// Scalar probe loss: weighted sum of outputs with fixed pseudo-random
    /// weights, so every output element participates.
    fn probe_weights(len: usize, seed: u64) -> Vec<f32> {
        let mut rng = stream(seed, "probe", &[]);
        (0..len).map(|_| rng.random::<f32>() * 2.0 - 1.0).collect()
    }

    fn finite_diff_check<F>(x: &Array3<f32>, analytic: &Array3<f32>, f: F, tol: f32)
    where
        F: Fn(&Array3<f32>) -> f32,
    {
        let step = 1e-2;
        let mut worst = 0.0f32;
        for idx in 0..x.len() {
            let mut plus = x.clone();
            plus.as_slice_mut().unwrap()[idx] += step;
            let mut minus = x.clone();
            minus.as_slice_mut().unwrap()[idx] -= step;
            let fd = (f(&plus) - f(&minus)) / (2.0 * step);
            let a = analytic.as_slice().unwrap()[idx];
            let denom = fd.abs().max(a.abs()).max(1e-2);
            worst = worst.max((fd - a).abs() / denom);
        }
        assert!(worst < tol, "worst relative error {worst}");
    }

    #[test]
    fn conv3_matches_direct_convolution() {
        let mut rng = stream(1, "conv", &[]);
        let conv = Conv::seeded(3, 2, 3, &mut rng);
        let x = random3(2, 5, 6, 2);
        let y = conv.forward(&x);
        assert_eq!(y.dim(), (3, 5, 6));
        // direct nested-loop reference
        for o in 0..3 {
            for yy in 0..5 {
                for xx in 0..6 {
                    let mut acc = conv.b[o];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let sy = yy as isize + ky as isize - 1;
                                let sx = xx as isize + kx as isize - 1;
                                if sy >= 0 && sy < 5 && sx >= 0 && sx < 6 {
                                    acc += conv.w[[o, ci, ky, kx]]
                                        * x[[ci, sy as usize, sx as usize]];
                                }
                            }
                        }
                    }
                    assert!((y[[o, yy, xx]] - acc).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for k in [1usize, 3] {
            let mut rng = stream(3, "convgrad", &[k as u64]);
            let conv = Conv::seeded(2, 3, k, &mut rng);
            let x = random3(3, 4, 5, 4 + k as u64);
            let pw = probe_weights(2 * 4 * 5, 5);
            let loss = |input: &Array3<f32>| -> f32 {
                conv.forward(input)
                    .iter()
                    .zip(&pw)
                    .map(|(y, w)| y * w)
                    .sum()
            };
            let y = conv.forward(&x);
            let dy = Array3::from_shape_vec(y.raw_dim(), pw.clone()).unwrap();
            let mut grad = conv.zeros_like();
            let dx = conv.backward(&x, &dy, &mut grad);
            finite_diff_check(&x, &dx, loss, 2e-2);

            // weight gradient via the same probe
            let step = 1e-2;
            let mut worst = 0.0f32;
            for idx in 0..conv.w.len() {
                let mut plus = conv.clone();
                plus.w.as_slice_mut().unwrap()[idx] += step;
                let mut minus = conv.clone();
                minus.w.as_slice_mut().unwrap()[idx] -= step;
                let fd = (plus
                    .forward(&x)
                    .iter()
                    .zip(&pw)
                    .map(|(y, w)| y * w)
                    .sum::<f32>()
                    - minus
                        .forward(&x)
                        .iter()
                        .zip(&pw)
                        .map(|(y, w)| y * w)
                        .sum::<f32>())
                    / (2.0 * step);
                let a = grad.w.as_slice().unwrap()[idx];
                let denom = fd.abs().max(a.abs()).max(1e-2);
                worst = worst.max((fd - a).abs() / denom);
            }
            assert!(worst < 2e-2, "k={k}: worst weight-grad error {worst}");
        }
    }

    #[test]
    fn selu_backward_matches_finite_differences() {
        let x = random3(2, 4, 4, 6);
        let pw = probe_weights(2 * 4 * 4, 7);
        let loss = |input: &Array3<f32>| -> f32 {
            let mut y = input.clone();
            selu_inplace(&mut y);
            y.iter().zip(&pw).map(|(v, w)| v * w).sum()
        };
        let mut y = x.clone();
        selu_inplace(&mut y);
        let mut dy = Array3::from_shape_vec(y.raw_dim(), pw.clone()).unwrap();
        selu_backward_inplace(&mut dy, &y);
        finite_diff_check(&x, &dy, loss, 2e-2);
    }

    #[test]
    fn maxpool_ceil_shapes_and_backward() {
        let x = random3(2, 5, 7, 8);
        let (y, argmax) = maxpool2_ceil(&x);
        assert_eq!(y.dim(), (2, 3, 4));
        // every pooled value is the max of its window
        for ci in 0..2 {
            for oy in 0..3 {
                for ox in 0..4 {
                    let mut best = f32::NEG_INFINITY;
                    for yy in oy * 2..(oy * 2 + 2).min(5) {
                        for xx in ox * 2..(ox * 2 + 2).min(7) {
                            best = best.max(x[[ci, yy, xx]]);
                        }
                    }
                    assert_eq!(y[[ci, oy, ox]], best);
                }
            }
        }
        let dy = random3(2, 3, 4, 9);
        let dx = maxpool2_backward(&dy, &argmax, 5, 7);
        // total gradient mass is conserved
        let sum_dy: f32 = dy.iter().sum();
        let sum_dx: f32 = dx.iter().sum();
        assert!((sum_dy - sum_dx).abs() < 1e-4);
    }

    #[test]
    fn bilinear_resize_is_exact_for_constant_maps_and_identity() {
        let x = Array2::from_elem((5, 9), 0.37f32);
        let y = bilinear_resize2(&x, 23, 31);
        assert!(y.iter().all(|&v| (v - 0.37).abs() < 1e-6));
        let same = bilinear_resize2(&x, 5, 9);
        assert_eq!(same, x);
    }

    #[test]
    fn bilinear_backward_is_the_adjoint() {
        // <resize(x), g> == <x, resize_backward(g)> for the linear map
        let mut rng = stream(10, "adjoint", &[]);
        let x = Array2::from_shape_fn((6, 5), |_| rng.random::<f32>());
        let g = Array2::from_shape_fn((17, 13), |_| rng.random::<f32>());
        let y = bilinear_resize2(&x, 17, 13);
        let gx = bilinear_backward2(&g, 6, 5);
        let lhs: f32 = y.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        let rhs: f32 = x.iter().zip(gx.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }

    #[test]
    fn l2_normalize_backward_matches_finite_differences() {
        let x = random3(4, 3, 3, 11);
        let pw = probe_weights(4 * 3 * 3, 12);
        let loss = |input: &Array3<f32>| -> f32 {
            let (emb, _) = l2_normalize(input);
            emb.iter().zip(&pw).map(|(v, w)| v * w).sum()
        };
        let (emb, norms) = l2_normalize(&x);
        for y in 0..3 {
            for xx in 0..3 {
                let n: f32 = (0..4).map(|c| emb[[c, y, xx]] * emb[[c, y, xx]]).sum();
                assert!((n - 1.0).abs() < 1e-5);
            }
        }
        let d_emb = Array3::from_shape_vec(emb.raw_dim(), pw.clone()).unwrap();
        let dx = l2_normalize_backward(&d_emb, &emb, &norms);
        finite_diff_check(&x, &dx, loss, 2e-2);
    }
}
