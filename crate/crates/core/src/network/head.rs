//! Detection sub-network: feature upsampling, object + context ROI pooling,
//! an unpadded reduction convolution and fully connected heads.

use crate::error::{invalid, Result};
use crate::geometry::BBox;
use crate::tensor::pool::roi_pool_backward_into;
use crate::tensor::{
    bilinear_weights, conv2d, conv2d_backward, deconv2d, deconv2d_backward, linear, linear_backward, relu,
    relu_backward, roi_pool, ConvSpec, Linear, Tensor,
};
use rand::Rng;

/// Stride of the trunk tap the head reads.
pub const HEAD_TAP_STRIDE: usize = 8;

/// How the stride-8 features are upsampled before ROI pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeconvMode {
    /// Pool directly from the stride-8 tap.
    None,
    /// Fixed 2× bilinear interpolation kernel.
    Bilinear,
    /// Bilinear initialization, then learned.
    BilinearLearned,
    /// Gaussian initialization, learned.
    Gaussian,
}

impl DeconvMode {
    pub fn name(self) -> &'static str {
        match self {
            DeconvMode::None => "none",
            DeconvMode::Bilinear => "bilinear",
            DeconvMode::BilinearLearned => "bilinear-learned",
            DeconvMode::Gaussian => "gaussian",
        }
    }

    pub fn parse(s: &str) -> Result<DeconvMode> {
        Ok(match s {
            "none" => DeconvMode::None,
            "bilinear" => DeconvMode::Bilinear,
            "bilinear-learned" => DeconvMode::BilinearLearned,
            "gaussian" => DeconvMode::Gaussian,
            other => return invalid(format!("unknown deconv mode {other:?}")),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadConfig {
    /// ROI pooling grid (h, w).
    pub roi: (usize, usize),
    pub fc_width: usize,
    pub context: bool,
    pub context_scale: f64,
    pub deconv: DeconvMode,
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.roi.0 < 3 || self.roi.1 < 3 {
            return invalid(format!("roi grid {:?} too small for a 3x3 unpadded convolution", self.roi));
        }
        if self.fc_width == 0 {
            return invalid("fc width must be positive");
        }
        if !(self.context_scale >= 1.0 && self.context_scale.is_finite()) {
            return invalid("context scale must be >= 1");
        }
        Ok(())
    }

    /// Stride of the pooled feature map relative to the image.
    pub fn feature_stride(&self) -> usize {
        match self.deconv {
            DeconvMode::None => HEAD_TAP_STRIDE,
            _ => HEAD_TAP_STRIDE / 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionHead {
    pub config: HeadConfig,
    pub channels: usize,
    pub classes: usize,
    pub deconv: Option<ConvSpec>,
    pub reduce: ConvSpec,
    pub fc: Linear,
    pub cls: Linear,
    pub bbox: Linear,
}

/// Activations of one head forward pass over a set of regions.
#[derive(Clone, Debug)]
pub struct HeadForward {
    pub features: Tensor,
    pub rois: Vec<BBox>,
    pooled: Tensor,
    reduced: Tensor,
    hidden: Tensor,
    /// `n × (K+1)`.
    pub logits: Tensor,
    /// `n × 4`, class-agnostic offsets relative to each region.
    pub deltas: Tensor,
}

impl DetectionHead {
    /// `channels` is the stride-8 tap width; `classes` is K (background excluded).
    pub fn new<R: Rng + ?Sized>(config: HeadConfig, channels: usize, classes: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let deconv = match config.deconv {
            DeconvMode::None => None,
            mode => {
                let mut d = ConvSpec::transposed(channels, channels, (4, 4), 2, (1, 1))?;
                match mode {
                    DeconvMode::Gaussian => d.gaussian_init(0.01, rng),
                    _ => d.weights = bilinear_weights(channels, 2)?,
                }
                Some(d)
            }
        };
        let in_c = if config.context { 2 * channels } else { channels };
        let mut reduce = ConvSpec::new(in_c, channels, (3, 3), 1, (0, 0))?;
        reduce.he_init(rng);
        let (rh, rw) = config.roi;
        let mut fc = Linear::new(channels * (rh - 2) * (rw - 2), config.fc_width);
        fc.he_init(rng);
        let mut cls = Linear::new(config.fc_width, classes + 1);
        cls.gaussian_init(0.01, rng);
        let mut bbox = Linear::new(config.fc_width, 4);
        bbox.gaussian_init(0.001, rng);
        Ok(DetectionHead { config, channels, classes, deconv, reduce, fc, cls, bbox })
    }

    /// Whether the upsampling kernel is held fixed.
    pub fn deconv_fixed(&self) -> bool {
        self.config.deconv == DeconvMode::Bilinear
    }

    fn pool_region(&self, features: &Tensor, roi: &BBox) -> Result<Tensor> {
        let (rh, rw) = self.config.roi;
        let s = self.config.feature_stride();
        let obj = roi_pool(features, roi, rh, rw, s)?;
        if !self.config.context {
            return Ok(obj);
        }
        let ctx = roi_pool(features, &roi.scaled(self.config.context_scale), rh, rw, s)?;
        Tensor::concat_channels(&[&obj, &ctx])
    }

    /// Runs the head on `rois` (image pixels) over the stride-8 tap (batch 1).
    pub fn forward(&self, tap: &Tensor, rois: &[BBox]) -> Result<HeadForward> {
        if rois.is_empty() {
            return invalid("detection head needs at least one region");
        }
        let features = match &self.deconv {
            Some(d) => deconv2d(tap, d)?,
            None => tap.clone(),
        };
        let parts = rois
            .iter()
            .map(|r| self.pool_region(&features, r))
            .collect::<Result<Vec<_>>>()?;
        let pooled = Tensor::stack_batch(&parts)?;
        let reduced = relu(&conv2d(&pooled, &self.reduce)?)?;
        let hidden = relu(&linear(&reduced, &self.fc)?)?;
        let logits = linear(&hidden, &self.cls)?;
        let deltas = linear(&hidden, &self.bbox)?;
        Ok(HeadForward { features, rois: rois.to_vec(), pooled, reduced, hidden, logits, deltas })
    }

    /// Accumulates parameter gradients; returns the gradient at the tap.
    pub fn backward(&mut self, tap: &Tensor, fwd: &HeadForward, d_logits: &[f64], d_deltas: &[f64]) -> Result<Tensor> {
        let n = fwd.rois.len();
        let dl = Tensor::from_vec(&[n, self.classes + 1], d_logits.to_vec())?;
        let dd = Tensor::from_vec(&[n, 4], d_deltas.to_vec())?;
        let mut dh = linear_backward(&fwd.hidden, &mut self.cls, &dl)?;
        let dh2 = linear_backward(&fwd.hidden, &mut self.bbox, &dd)?;
        dh.data_mut().iter_mut().zip(dh2.data()).for_each(|(a, b)| *a += b);
        let dh = relu_backward(&fwd.hidden, &dh)?;
        let dr = linear_backward(&fwd.reduced, &mut self.fc, &dh)?.reshape(fwd.reduced.shape())?;
        let dr = relu_backward(&fwd.reduced, &dr)?;
        let dpooled = conv2d_backward(&fwd.pooled, &mut self.reduce, &dr)?;

        let (rh, rw) = self.config.roi;
        let s = self.config.feature_stride();
        let c = self.channels;
        let mut dfeat = Tensor::zeros(fwd.features.shape());
        for (i, roi) in fwd.rois.iter().enumerate() {
            let g = dpooled.batch_item(i)?;
            let (g_obj, g_ctx) = if self.config.context {
                let mut v = g.split_channels(&[c, c])?;
                let ctx = v.pop().expect("two parts");
                (v.pop().expect("two parts"), Some(ctx))
            } else {
                (g, None)
            };
            roi_pool_backward_into(&fwd.features, roi, rh, rw, s, &g_obj, dfeat.data_mut())?;
            if let Some(g_ctx) = g_ctx {
                let ctx = roi.scaled(self.config.context_scale);
                roi_pool_backward_into(&fwd.features, &ctx, rh, rw, s, &g_ctx, dfeat.data_mut())?;
            }
        }
        let fixed = self.deconv_fixed();
        match &mut self.deconv {
            Some(d) => {
                let dx = deconv2d_backward(tap, d, &dfeat)?;
                if fixed {
                    d.weights.clear_grad();
                    d.bias.clear_grad();
                }
                Ok(dx)
            }
            None => Ok(dfeat),
        }
    }
}
