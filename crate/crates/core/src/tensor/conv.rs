//! 2-D convolution and transposed convolution via im2col + GEMM.

use super::gemm::{gemm, Op};
use super::Tensor;
use crate::error::{invalid, shape_err, Result};
use rand::Rng;

/// Parameters and geometry of a (possibly transposed) convolution.
///
/// A regular convolution stores weights as `out × in × kh × kw`. A transposed
/// convolution stores them as `in × out × kh × kw`, so a transposed spec
/// sharing the weight buffer of a regular one computes its exact adjoint.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub transposed: bool,
    pub weights: Tensor,
    pub bias: Tensor,
}

impl ConvSpec {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        Self::build(in_channels, out_channels, kernel, stride, padding, false)
    }

    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel: (usize, usize),
        stride: usize,
        padding: (usize, usize),
    ) -> Result<Self> {
        Self::build(in_channels, out_channels, kernel, stride, padding, true)
    }

    fn build(
        in_channels: usize,
        out_channels: usize,
        (kernel_h, kernel_w): (usize, usize),
        stride: usize,
        (pad_h, pad_w): (usize, usize),
        transposed: bool,
    ) -> Result<Self> {
        if kernel_h == 0 || kernel_w == 0 {
            return invalid("kernel extents must be >= 1");
        }
        if stride == 0 {
            return invalid("stride must be >= 1");
        }
        if in_channels == 0 || out_channels == 0 {
            return invalid("channel counts must be >= 1");
        }
        let wshape = if transposed {
            [in_channels, out_channels, kernel_h, kernel_w]
        } else {
            [out_channels, in_channels, kernel_h, kernel_w]
        };
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            pad_h,
            pad_w,
            transposed,
            weights: Tensor::zeros(&wshape),
            bias: Tensor::zeros(&[out_channels]),
        })
    }

    /// Same-size 3×3 (or odd `k`) convolution with stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kh: usize, kw: usize) -> Result<Self> {
        Self::new(in_channels, out_channels, (kh, kw), 1, (kh / 2, kw / 2))
    }

    /// He (fan-in scaled Gaussian) initialization with zero bias.
    pub fn he_init<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = self.in_channels * self.kernel_h * self.kernel_w;
        let std = (2.0 / fan_in as f64).sqrt();
        self.gaussian_init(std, rng);
    }

    pub fn gaussian_init<R: Rng + ?Sized>(&mut self, std: f64, rng: &mut R) {
        self.weights = Tensor::randn(self.weights.shape(), std, rng);
        self.bias = Tensor::zeros(&[self.out_channels]);
    }

    /// Spatial output extent of a regular convolution.
    pub fn conv_out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.pad_h;
        let pw = w + 2 * self.pad_w;
        if ph < self.kernel_h || pw < self.kernel_w {
            return shape_err(format!(
                "{}x{} input (padded {}x{}) smaller than {}x{} kernel",
                h, w, ph, pw, self.kernel_h, self.kernel_w
            ));
        }
        Ok((
            (ph - self.kernel_h) / self.stride + 1,
            (pw - self.kernel_w) / self.stride + 1,
        ))
    }

    /// Spatial output extent of a transposed convolution.
    pub fn deconv_out_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h == 0 || w == 0 {
            return shape_err("empty input");
        }
        let oh = (h - 1) * self.stride + self.kernel_h;
        let ow = (w - 1) * self.stride + self.kernel_w;
        if oh <= 2 * self.pad_h || ow <= 2 * self.pad_w {
            return shape_err("padding exceeds transposed output");
        }
        Ok((oh - 2 * self.pad_h, ow - 2 * self.pad_w))
    }

    fn check_input(&self, x: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = x.dims4()?;
        if c != channels {
            return shape_err(format!(
                "{what}: input has {c} channels, spec expects {channels}"
            ));
        }
        Ok((n, h, w))
    }
}

struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `c × h × w` input patches into a `(c·kh·kw) × (oh·ow)` matrix.
fn im2col(x: &[f64], g: &Geometry, cols: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let out = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.ph as isize;
                    let seg = &mut out[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        seg.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in seg.iter_mut().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pw as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-adds a column matrix back onto `c × h × w`.
fn col2im(cols: &[f64], g: &Geometry, x: &mut [f64]) {
    let ncols = g.cols();
    for c in 0..g.c {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = (c * g.kh + i) * g.kw + j;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + i) as isize - g.ph as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + j) as isize - g.pw as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Regular convolution. Output extent is `floor((in + 2·pad − k)/stride) + 1` per axis.
pub fn conv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if spec.transposed {
        return invalid("conv2d called with a transposed spec; use deconv2d");
    }
    let (n, h, w) = spec.check_input(x, spec.in_channels, "conv2d")?;
    let (oh, ow) = spec.conv_out_size(h, w)?;
    let g = Geometry {
        c: spec.in_channels,
        h,
        w,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        ph: spec.pad_h,
        pw: spec.pad_w,
        oh,
        ow,
    };
    let co = spec.out_channels;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut cols = vec![0.0; g.rows() * g.cols()];
    let in_len = spec.in_channels * h * w;
    let out_len = co * oh * ow;
    for b in 0..n {
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
        let dst = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
            plane.fill(spec.bias.data()[oc]);
        }
        gemm(co, g.rows(), g.cols(), 1.0, spec.weights.data(), Op::N, &cols, Op::N, 1.0, dst);
    }
    out.ensure_finite("conv2d")
}

/// Backward pass of [`conv2d`]: accumulates weight and bias gradients into
/// `spec` and returns the gradient with respect to `x`.
pub fn conv2d_backward(x: &Tensor, spec: &mut ConvSpec, dy: &Tensor) -> Result<Tensor> {
    conv2d_backward_impl(x, spec, dy, true).map(|dx| dx.expect("input gradient requested"))
}

/// Like [`conv2d_backward`] but only accumulates parameter gradients.
pub fn conv2d_backward_params(x: &Tensor, spec: &mut ConvSpec, dy: &Tensor) -> Result<()> {
    conv2d_backward_impl(x, spec, dy, false).map(|_| ())
}

fn conv2d_backward_impl(
    x: &Tensor,
    spec: &mut ConvSpec,
    dy: &Tensor,
    input_grad: bool,
) -> Result<Option<Tensor>> {
    if spec.transposed {
        return invalid("conv2d_backward called with a transposed spec");
    }
    let (n, h, w) = spec.check_input(x, spec.in_channels, "conv2d_backward")?;
    let (oh, ow) = spec.conv_out_size(h, w)?;
    let co = spec.out_channels;
    if dy.shape() != [n, co, oh, ow] {
        return shape_err(format!(
            "conv2d_backward: upstream gradient {:?}, expected {:?}",
            dy.shape(),
            [n, co, oh, ow]
        ));
    }
    let g = Geometry {
        c: spec.in_channels,
        h,
        w,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        ph: spec.pad_h,
        pw: spec.pad_w,
        oh,
        ow,
    };
    let rows = g.rows();
    let ncols = g.cols();
    let in_len = spec.in_channels * h * w;
    let out_len = co * oh * ow;
    let mut cols = vec![0.0; rows * ncols];
    let mut dcols = if input_grad { vec![0.0; rows * ncols] } else { Vec::new() };
    let mut dx = if input_grad { Some(Tensor::zeros(x.shape())) } else { None };
    let mut dw = vec![0.0; co * rows];
    let mut db = vec![0.0; co];
    for b in 0..n {
        let dyb = &dy.data()[b * out_len..(b + 1) * out_len];
        im2col(&x.data()[b * in_len..(b + 1) * in_len], &g, &mut cols);
        gemm(co, ncols, rows, 1.0, dyb, Op::N, &cols, Op::T, 1.0, &mut dw);
        for (oc, plane) in dyb.chunks(ncols).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, co, ncols, 1.0, spec.weights.data(), Op::T, dyb, Op::N, 0.0, &mut dcols);
            col2im(&dcols, &g, &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
        }
    }
    spec.weights.accumulate_grad(&dw)?;
    spec.bias.accumulate_grad(&db)?;
    dx.map(|t| t.ensure_finite("conv2d_backward")).transpose()
}

/// Transposed convolution ("deconvolution"). Output extent is
/// `(in − 1)·stride − 2·pad + k` per axis; the forward map is the adjoint of
/// [`conv2d`] with the same geometry and weight buffer (bias aside).
pub fn deconv2d(x: &Tensor, spec: &ConvSpec) -> Result<Tensor> {
    if !spec.transposed {
        return invalid("deconv2d called with a regular spec; use ConvSpec::transposed");
    }
    let (n, h, w) = spec.check_input(x, spec.in_channels, "deconv2d")?;
    let (oh, ow) = spec.deconv_out_size(h, w)?;
    // Geometry of the adjoint convolution: maps the (oh, ow) output back to (h, w).
    let g = Geometry {
        c: spec.out_channels,
        h: oh,
        w: ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        ph: spec.pad_h,
        pw: spec.pad_w,
        oh: h,
        ow: w,
    };
    let ci = spec.in_channels;
    let co = spec.out_channels;
    let rows = g.rows();
    let ncols = g.cols();
    let in_len = ci * h * w;
    let out_len = co * oh * ow;
    let mut out = Tensor::zeros(&[n, co, oh, ow]);
    let mut cols = vec![0.0; rows * ncols];
    for b in 0..n {
        gemm(
            rows,
            ci,
            ncols,
            1.0,
            spec.weights.data(),
            Op::T,
            &x.data()[b * in_len..(b + 1) * in_len],
            Op::N,
            0.0,
            &mut cols,
        );
        let dst = &mut out.data_mut()[b * out_len..(b + 1) * out_len];
        col2im(&cols, &g, dst);
        for (oc, plane) in dst.chunks_mut(oh * ow).enumerate() {
            let bias = spec.bias.data()[oc];
            plane.iter_mut().for_each(|v| *v += bias);
        }
    }
    out.ensure_finite("deconv2d")
}

/// Backward pass of [`deconv2d`]; accumulates parameter gradients and returns the input gradient.
pub fn deconv2d_backward(x: &Tensor, spec: &mut ConvSpec, dy: &Tensor) -> Result<Tensor> {
    if !spec.transposed {
        return invalid("deconv2d_backward called with a regular spec");
    }
    let (n, h, w) = spec.check_input(x, spec.in_channels, "deconv2d_backward")?;
    let (oh, ow) = spec.deconv_out_size(h, w)?;
    let ci = spec.in_channels;
    let co = spec.out_channels;
    if dy.shape() != [n, co, oh, ow] {
        return shape_err(format!(
            "deconv2d_backward: upstream gradient {:?}, expected {:?}",
            dy.shape(),
            [n, co, oh, ow]
        ));
    }
    let g = Geometry {
        c: co,
        h: oh,
        w: ow,
        kh: spec.kernel_h,
        kw: spec.kernel_w,
        stride: spec.stride,
        ph: spec.pad_h,
        pw: spec.pad_w,
        oh: h,
        ow: w,
    };
    let rows = g.rows();
    let ncols = g.cols();
    let in_len = ci * h * w;
    let out_len = co * oh * ow;
    let mut cols = vec![0.0; rows * ncols];
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = vec![0.0; ci * rows];
    let mut db = vec![0.0; co];
    for b in 0..n {
        let dyb = &dy.data()[b * out_len..(b + 1) * out_len];
        im2col(dyb, &g, &mut cols);
        let xb = &x.data()[b * in_len..(b + 1) * in_len];
        gemm(ci, rows, ncols, 1.0, spec.weights.data(), Op::N, &cols, Op::N, 0.0,
            &mut dx.data_mut()[b * in_len..(b + 1) * in_len]);
        gemm(ci, ncols, rows, 1.0, xb, Op::N, &cols, Op::T, 1.0, &mut dw);
        for (oc, plane) in dyb.chunks(oh * ow).enumerate() {
            db[oc] += plane.iter().sum::<f64>();
        }
    }
    spec.weights.accumulate_grad(&dw)?;
    spec.bias.accumulate_grad(&db)?;
    dx.ensure_finite("deconv2d_backward")
}

/// Per-channel bilinear upsampling kernel for a transposed convolution
/// (`channels × channels × k × k`, zero off the channel diagonal), with
/// `k = 2·factor − factor mod 2`.
pub fn bilinear_weights(channels: usize, factor: usize) -> Result<Tensor> {
    if factor < 2 {
        return invalid(format!("upsampling factor must be >= 2, got {factor}"));
    }
    let k = 2 * factor - factor % 2;
    let center = if k % 2 == 1 {
        (factor - 1) as f64
    } else {
        factor as f64 - 0.5
    };
    let tent: Vec<f64> = (0..k)
        .map(|i| 1.0 - (i as f64 - center).abs() / factor as f64)
        .collect();
    let mut t = Tensor::zeros(&[channels, channels, k, k]);
    let kk = k * k;
    for c in 0..channels {
        let base = (c * channels + c) * kk;
        for i in 0..k {
            for j in 0..k {
                t.data_mut()[base + i * k + j] = tent[i] * tent[j];
            }
        }
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct six-loop convolution, the independent reference.
    fn naive_conv(x: &Tensor, spec: &ConvSpec) -> Tensor {
        let (n, ci, h, w) = x.dims4().unwrap();
        let (oh, ow) = spec.conv_out_size(h, w).unwrap();
        let co = spec.out_channels;
        let (kh, kw) = (spec.kernel_h, spec.kernel_w);
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut s = spec.bias.data()[o];
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (oy * spec.stride + i) as isize - spec.pad_h as isize;
                                    let ix = (ox * spec.stride + j) as isize - spec.pad_w as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x.data()
                                        [((b * ci + c) * h + iy as usize) * w + ix as usize];
                                    let wv = spec.weights.data()[((o * ci + c) * kh + i) * kw + j];
                                    s += xv * wv;
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * oh + oy) * ow + ox] = s;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn ones_kernel_sums_ones() {
        let x = Tensor::full(&[1, 1, 3, 3], 1.0);
        let mut spec = ConvSpec::new(1, 1, (3, 3), 1, (0, 0)).unwrap();
        spec.weights = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data()[0], 9.0);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[1, 1, 5, 4], 1.0, &mut rng);
        let mut spec = ConvSpec::same(1, 1, 3, 3).unwrap();
        spec.weights.data_mut()[4] = 1.0;
        let y = conv2d(&x, &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
        for (stride, pad) in [(1, (0, 0)), (1, (1, 1)), (2, (1, 0))] {
            let mut spec = ConvSpec::new(2, 3, (3, 3), stride, pad).unwrap();
            spec.weights = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
            spec.bias = Tensor::randn(&[3], 1.0, &mut rng);
            let fast = conv2d(&x, &spec).unwrap();
            let slow = naive_conv(&x, &spec);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn output_extent_formula() {
        let spec = ConvSpec::new(1, 1, (5, 3), 2, (2, 1)).unwrap();
        assert_eq!(spec.conv_out_size(11, 8).unwrap(), ((11 + 4 - 5) / 2 + 1, (8 + 2 - 3) / 2 + 1));
        let d = ConvSpec::transposed(1, 1, (4, 4), 2, (1, 1)).unwrap();
        assert_eq!(d.deconv_out_size(5, 7).unwrap(), (10, 14));
    }

    #[test]
    fn rejects_channel_mismatch_and_small_input() {
        let spec = ConvSpec::new(2, 1, (3, 3), 1, (0, 0)).unwrap();
        assert!(conv2d(&Tensor::zeros(&[1, 3, 5, 5]), &spec).is_err());
        assert!(conv2d(&Tensor::zeros(&[1, 2, 2, 2]), &spec).is_err());
        assert!(ConvSpec::new(1, 1, (0, 3), 1, (0, 0)).is_err());
        assert!(ConvSpec::new(1, 1, (3, 3), 0, (0, 0)).is_err());
    }

    #[test]
    fn adjoint_identity_with_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let mut conv = ConvSpec::new(3, 2, (4, 4), 2, (1, 1)).unwrap();
            conv.weights = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut rng);
            let mut deconv = ConvSpec::transposed(2, 3, (4, 4), 2, (1, 1)).unwrap();
            deconv.weights = conv.weights.clone();
            let x = Tensor::randn(&[1, 3, 8, 6], 1.0, &mut rng);
            let y = Tensor::randn(&[1, 2, 4, 3], 1.0, &mut rng);
            let lhs = conv2d(&x, &conv).unwrap().dot(&y).unwrap();
            let rhs = x.dot(&deconv2d(&y, &deconv).unwrap()).unwrap();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn bilinear_factor_two_kernel() {
        let k = bilinear_weights(1, 2).unwrap();
        assert_eq!(k.shape(), &[1, 1, 4, 4]);
        let d = k.data();
        assert!((d[5] - 0.5625).abs() < 1e-15);
        assert!((d[0] - 0.0625).abs() < 1e-15);
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(d[i * 4 + j], d[(3 - i) * 4 + j]);
                assert_eq!(d[i * 4 + j], d[i * 4 + 3 - j]);
            }
        }
        // Each stride-2 phase is a partition of unity.
        for pi in 0..2 {
            for pj in 0..2 {
                let s: f64 = [pi, pi + 2]
                    .iter()
                    .flat_map(|&i| [pj, pj + 2].map(|j| d[i * 4 + j]))
                    .sum();
                assert!((s - 1.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn bilinear_does_not_mix_channels_and_rejects_factor_one() {
        let k = bilinear_weights(3, 3).unwrap();
        assert_eq!(k.shape(), &[3, 3, 5, 5]);
        let off: f64 = (0..3)
            .flat_map(|a| (0..3).map(move |b| (a, b)))
            .filter(|(a, b)| a != b)
            .map(|(a, b)| k.data()[(a * 3 + b) * 25..(a * 3 + b + 1) * 25].iter().sum::<f64>())
            .sum();
        assert_eq!(off, 0.0);
        assert!(bilinear_weights(2, 1).is_err());
    }

    #[test]
    fn bilinear_deconv_preserves_constants_and_interpolates_ramps() {
        let mut spec = ConvSpec::transposed(1, 1, (4, 4), 2, (1, 1)).unwrap();
        spec.weights = bilinear_weights(1, 2).unwrap();
        let y = deconv2d(&Tensor::full(&[1, 1, 4, 5], 2.5), &spec).unwrap();
        assert_eq!(y.shape(), &[1, 1, 8, 10]);
        for r in 1..7 {
            for c in 1..9 {
                assert!((y.data()[r * 10 + c] - 2.5).abs() < 1e-12);
            }
        }
        // Ramp 0,1,2 along width: output column o samples input coordinate (o − 0.5)/2.
        let ramp = Tensor::from_vec(&[1, 1, 3, 3], vec![0.0, 1.0, 2.0, 0.0, 1.0, 2.0, 0.0, 1.0, 2.0])
            .unwrap();
        let y = deconv2d(&ramp, &spec).unwrap();
        for o in 1..5 {
            let want = (o as f64 - 0.5) / 2.0;
            assert!((y.data()[2 * 6 + o] - want).abs() < 1e-12);
        }
    }
}
