//! Max pooling and ROI max pooling.
//!
//! Ties are resolved by the first maximum in row-major order, so the
//! backward passes are deterministic.

use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::geometry::BBox;

fn pool_out(len: usize, window: usize, stride: usize) -> usize {
    (len - window) / stride + 1
}

fn check_pool(x: &Tensor, window: usize, stride: usize) -> Result<(usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    if window == 0 || stride == 0 {
        return Err(Error::Invalid("pool window and stride must be >= 1".into()));
    }
    if window > h || window > w {
        return shape_err(format!("pool window {window} larger than {h}x{w} input"));
    }
    Ok((n, c, h, w))
}

/// Index (within a plane) of the first maximum of each pooling window.
fn pool_argmax(plane: &[f64], w: usize, oy: usize, ox: usize, window: usize, stride: usize) -> usize {
    let mut best = (oy * stride) * w + ox * stride;
    let mut best_v = plane[best];
    for i in 0..window {
        let row = (oy * stride + i) * w;
        for j in 0..window {
            let idx = row + ox * stride + j;
            if plane[idx] > best_v {
                best_v = plane[idx];
                best = idx;
            }
        }
    }
    best
}

pub fn max_pool2d(x: &Tensor, window: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = check_pool(x, window, stride)?;
    let (oh, ow) = (pool_out(h, window, stride), pool_out(w, window, stride));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (p, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[oy * ow + ox] = plane[pool_argmax(plane, w, oy, ox, window, stride)];
            }
        }
    }
    debug_assert_eq!(out.numel(), n * c * oh * ow);
    out.ensure_finite("max_pool2d")
}

/// Routes each output gradient to the argmax position of its window.
pub fn max_pool2d_backward(x: &Tensor, window: usize, stride: usize, dy: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = check_pool(x, window, stride)?;
    let (oh, ow) = (pool_out(h, window, stride), pool_out(w, window, stride));
    if dy.shape() != [n, c, oh, ow] {
        return shape_err(format!("max_pool2d_backward: gradient {:?}", dy.shape()));
    }
    let mut dx = Tensor::zeros(x.shape());
    for p in 0..n * c {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        let g = &dy.data()[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut dx.data_mut()[p * h * w..(p + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                dst[pool_argmax(plane, w, oy, ox, window, stride)] += g[oy * ow + ox];
            }
        }
    }
    Ok(dx)
}

/// Feature-map cell range `[start, end)` covered by `[lo, hi)` in image pixels.
fn footprint(lo: f64, hi: f64, stride: f64) -> (isize, isize) {
    const EPS: f64 = 1e-6;
    let start = (lo / stride + EPS).floor() as isize;
    let end = ((hi / stride - EPS).ceil() as isize).max(start + 1);
    (start, end)
}

/// Unclamped extent `(rows, cols)` in feature cells of `roi` on a map of the given stride.
pub fn roi_footprint(roi: &BBox, stride: usize) -> (usize, usize) {
    let (x1, y1, x2, y2) = roi.corners();
    let s = stride as f64;
    let (sx, ex) = footprint(x1, x2, s);
    let (sy, ey) = footprint(y1, y2, s);
    ((ey - sy) as usize, (ex - sx) as usize)
}

struct RoiBins {
    ys: Vec<(usize, usize)>,
    xs: Vec<(usize, usize)>,
}

fn roi_bins(h: usize, w: usize, roi: &BBox, out_h: usize, out_w: usize, stride: usize) -> Result<RoiBins> {
    if out_h == 0 || out_w == 0 || stride == 0 {
        return Err(Error::Invalid("roi_pool output extents and stride must be >= 1".into()));
    }
    let (x1, y1, x2, y2) = roi.corners();
    let s = stride as f64;
    let (sx, ex) = footprint(x1, x2, s);
    let (sy, ey) = footprint(y1, y2, s);
    if ex <= 0 || ey <= 0 || sx >= w as isize || sy >= h as isize {
        return Err(Error::Invalid(format!(
            "roi {:?} lies outside the {}x{} feature map (stride {})",
            roi.corners(),
            h,
            w,
            stride
        )));
    }
    let split = |start: isize, end: isize, bins: usize, limit: usize| -> Vec<(usize, usize)> {
        let len = (end - start) as usize;
        (0..bins)
            .map(|b| {
                let lo = start + ((b * len) / bins) as isize;
                let hi = start + ((b + 1) * len).div_ceil(bins) as isize;
                let lo = lo.clamp(0, limit as isize) as usize;
                let hi = hi.clamp(0, limit as isize) as usize;
                (lo, hi)
            })
            .collect()
    };
    Ok(RoiBins {
        ys: split(sy, ey, out_h, h),
        xs: split(sx, ex, out_w, w),
    })
}

/// Index of the first maximum inside a bin, `None` when the bin is empty.
fn bin_argmax(plane: &[f64], w: usize, (y0, y1): (usize, usize), (x0, x1): (usize, usize)) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for y in y0..y1 {
        for x in x0..x1 {
            let idx = y * w + x;
            match best {
                Some((_, v)) if plane[idx] <= v => {}
                _ => best = Some((idx, plane[idx])),
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Max-pools the region of `features` (batch 1) under `roi` into an
/// `out_h × out_w` grid per channel. `roi` is in image pixels and `stride`
/// is the feature map's stride relative to the image. Empty bins output 0.
pub fn roi_pool(features: &Tensor, roi: &BBox, out_h: usize, out_w: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, w) = features.dims4()?;
    if n != 1 {
        return shape_err(format!("roi_pool expects batch 1, got {n}"));
    }
    let bins = roi_bins(h, w, roi, out_h, out_w, stride)?;
    let mut out = Tensor::zeros(&[1, c, out_h, out_w]);
    for ch in 0..c {
        let plane = &features.data()[ch * h * w..(ch + 1) * h * w];
        for (by, &ry) in bins.ys.iter().enumerate() {
            for (bx, &rx) in bins.xs.iter().enumerate() {
                let v = bin_argmax(plane, w, ry, rx).map_or(0.0, |i| plane[i]);
                out.data_mut()[(ch * out_h + by) * out_w + bx] = v;
            }
        }
    }
    out.ensure_finite("roi_pool")
}

/// Scatters the pooled gradient to the argmax cells, summing over bins that
/// share a source cell. Returns a gradient shaped like `features`.
pub fn roi_pool_backward(
    features: &Tensor,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    stride: usize,
    dy: &Tensor,
) -> Result<Tensor> {
    let mut dx = Tensor::zeros(features.shape());
    roi_pool_backward_into(features, roi, out_h, out_w, stride, dy, dx.data_mut())?;
    Ok(dx)
}

/// Accumulating form of [`roi_pool_backward`], used when many ROIs share one feature map.
pub fn roi_pool_backward_into(
    features: &Tensor,
    roi: &BBox,
    out_h: usize,
    out_w: usize,
    stride: usize,
    dy: &Tensor,
    dx: &mut [f64],
) -> Result<()> {
    let (n, c, h, w) = features.dims4()?;
    if n != 1 || dx.len() != features.numel() {
        return shape_err("roi_pool_backward expects batch 1 and a matching gradient buffer");
    }
    if dy.shape() != [1, c, out_h, out_w] {
        return shape_err(format!("roi_pool_backward: gradient {:?}", dy.shape()));
    }
    let bins = roi_bins(h, w, roi, out_h, out_w, stride)?;
    for ch in 0..c {
        let plane = &features.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (by, &ry) in bins.ys.iter().enumerate() {
            for (bx, &rx) in bins.xs.iter().enumerate() {
                if let Some(i) = bin_argmax(plane, w, ry, rx) {
                    dst[i] += dy.data()[(ch * out_h + by) * out_w + bx];
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_max() {
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(max_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);
    }

    #[test]
    fn constant_map_routes_gradient_to_first_index() {
        let x = Tensor::full(&[1, 1, 4, 4], 7.0);
        let y = max_pool2d(&x, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 7.0));
        let dx = max_pool2d_backward(&x, 2, 2, &Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let want = [
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0, //
            1.0, 0.0, 1.0, 0.0, //
            0.0, 0.0, 0.0, 0.0,
        ];
        assert_eq!(dx.data(), &want);
    }

    #[test]
    fn matches_window_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
        for (win, stride) in [(2, 2), (3, 1), (3, 2)] {
            let y = max_pool2d(&x, win, stride).unwrap();
            let (oh, ow) = ((7 - win) / stride + 1, (6 - win) / stride + 1);
            assert_eq!(y.shape(), &[2, 3, oh, ow]);
            for p in 0..6 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut m = f64::NEG_INFINITY;
                        for i in 0..win {
                            for j in 0..win {
                                m = m.max(x.data()[p * 42 + (oy * stride + i) * 6 + ox * stride + j]);
                            }
                        }
                        assert_eq!(y.data()[(p * oh + oy) * ow + ox], m);
                    }
                }
            }
        }
    }

    #[test]
    fn window_larger_than_input_is_an_error() {
        assert!(max_pool2d(&Tensor::zeros(&[1, 1, 2, 3]), 3, 1).is_err());
    }

    #[test]
    fn roi_covering_seven_cells_reads_each_cell() {
        let s = 4;
        let feat = Tensor::from_vec(&[1, 1, 10, 10], (0..100).map(f64::from).collect()).unwrap();
        // Cells 2..9 in x and 1..8 in y.
        let roi = BBox::from_corners(2.0 * s as f64, 1.0 * s as f64, 9.0 * s as f64, 8.0 * s as f64);
        let y = roi_pool(&feat, &roi, 7, 7, s).unwrap();
        for by in 0..7 {
            for bx in 0..7 {
                assert_eq!(y.data()[by * 7 + bx], ((by + 1) * 10 + bx + 2) as f64);
            }
        }
    }

    #[test]
    fn narrow_roi_duplicates_sources_and_sums_gradients() {
        let feat = Tensor::from_vec(&[1, 1, 3, 6], (0..18).map(f64::from).collect()).unwrap();
        // Three cells wide, one cell high, pooled to 1×7.
        let roi = BBox::from_corners(1.0, 1.0, 4.0, 2.0);
        let y = roi_pool(&feat, &roi, 1, 7, 1).unwrap();
        let dy = Tensor::full(&[1, 1, 1, 7], 1.0);
        let dx = roi_pool_backward(&feat, &roi, 1, 7, 1, &dy).unwrap();
        // Scatter-add oracle: count how often each source cell is the pooled value.
        let mut oracle = [0.0; 18];
        for v in y.data() {
            let idx = feat.data().iter().position(|f| f == v).unwrap();
            oracle[idx] += 1.0;
        }
        assert_eq!(dx.data(), &oracle[..]);
        assert_eq!(dx.sum(), 7.0);
        assert!(oracle.iter().any(|&v| v > 1.0));
    }

    #[test]
    fn constant_features_pool_to_constant() {
        let feat = Tensor::full(&[1, 2, 12, 12], 3.25);
        let roi = BBox::new(30.0, 22.0, 17.0, 29.0);
        let y = roi_pool(&feat, &roi, 7, 5, 4).unwrap();
        assert_eq!(y.shape(), &[1, 2, 7, 5]);
        assert!(y.data().iter().all(|&v| v == 3.25));
    }

    #[test]
    fn partially_outside_roi_yields_zero_bins_without_gradient() {
        let feat = Tensor::full(&[1, 1, 4, 4], 1.0);
        let roi = BBox::from_corners(-8.0, 0.0, 4.0, 4.0);
        let y = roi_pool(&feat, &roi, 1, 3, 1).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 1.0]);
        let dx = roi_pool_backward(&feat, &roi, 1, 3, 1, &Tensor::full(&[1, 1, 1, 3], 1.0)).unwrap();
        assert_eq!(dx.sum(), 1.0);
    }

    #[test]
    fn roi_outside_map_is_an_error() {
        let feat = Tensor::zeros(&[1, 1, 4, 4]);
        assert!(roi_pool(&feat, &BBox::from_corners(20.0, 20.0, 30.0, 30.0), 2, 2, 1).is_err());
    }
}
