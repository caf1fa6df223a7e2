//! Per-scale detection branches of the proposal sub-network.

use super::trunk::TrunkCache;
use crate::anchors::{grid_size, Anchor, BranchConfig};
use crate::error::{invalid, Result};
use crate::tensor::dense::softmax_row;
use crate::tensor::{conv2d, conv2d_backward, relu, relu_backward, ConvSpec, Tensor};
use rand::Rng;

/// Standard deviation of the detection convolutions' initial weights.
const DET_INIT_STD: f64 = 0.01;

/// One detection branch: an optional buffer convolution followed by one
/// detection convolution per (filter, anchor) slot. Each detection
/// convolution emits `K + 1` class logits and 4 box offsets per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectionBranch {
    pub config: BranchConfig,
    pub buffer: Option<ConvSpec>,
    pub det: Vec<ConvSpec>,
}

impl DetectionBranch {
    pub fn new<R: Rng + ?Sized>(
        config: BranchConfig,
        in_channels: usize,
        classes: usize,
        buffer: bool,
        rng: &mut R,
    ) -> Result<DetectionBranch> {
        config.validate()?;
        let buffer = if buffer {
            let mut b = ConvSpec::same(in_channels, in_channels, 3, 3)?;
            b.he_init(rng);
            Some(b)
        } else {
            None
        };
        let mut det = Vec::with_capacity(config.num_anchors());
        for &(fh, fw) in &config.filter_sizes {
            if fh % 2 == 0 || fw % 2 == 0 {
                return invalid(format!("{}: filter {fh}x{fw} must have odd extents", config.name));
            }
            let mut c = ConvSpec::same(in_channels, classes + 1 + 4, fh, fw)?;
            c.gaussian_init(DET_INIT_STD, rng);
            det.push(c);
        }
        Ok(DetectionBranch { config, buffer, det })
    }

    /// Output channels summed over anchor slots: `A × (K + 1 + 4)`.
    pub fn output_channels(&self) -> usize {
        self.det.iter().map(|c| c.out_channels).sum()
    }
}

/// Branch score and offset maps for one image, with what the backward pass needs.
#[derive(Clone, Debug)]
pub struct ProposalForward {
    pub trunk: TrunkCache,
    /// Buffer-convolution outputs (post-ReLU), per branch.
    buffered: Vec<Option<Tensor>>,
    /// `maps[branch][slot]` is `1 × (K+1+4) × rows × cols`.
    pub maps: Vec<Vec<Tensor>>,
    pub classes: usize,
    pub width: usize,
    pub height: usize,
}

impl ProposalForward {
    pub fn grid(&self, branch: usize) -> (usize, usize) {
        let s = self.maps[branch][0].shape();
        (s[2], s[3])
    }

    fn cell(&self, a: &Anchor) -> (&[f64], usize, usize) {
        let m = &self.maps[a.branch][a.slot];
        let (rows, cols) = (m.shape()[2], m.shape()[3]);
        (m.data(), rows * cols, a.row * cols + a.col)
    }

    /// The `K + 1` class logits predicted for `a`.
    pub fn logits(&self, a: &Anchor) -> Vec<f64> {
        let (d, plane, at) = self.cell(a);
        (0..=self.classes).map(|c| d[c * plane + at]).collect()
    }

    pub fn deltas(&self, a: &Anchor) -> [f64; 4] {
        let (d, plane, at) = self.cell(a);
        let k = self.classes + 1;
        [0, 1, 2, 3].map(|j| d[(k + j) * plane + at])
    }

    pub fn probabilities(&self, a: &Anchor) -> Vec<f64> {
        softmax_row(&self.logits(a))
    }

    /// `1 − p(background)`.
    pub fn objectness(&self, a: &Anchor) -> f64 {
        1.0 - self.probabilities(a)[0]
    }
}

/// Gradients w.r.t. every branch output map, laid out like [`ProposalForward::maps`].
#[derive(Clone, Debug)]
pub struct OutputGrads {
    pub maps: Vec<Vec<Tensor>>,
    classes: usize,
}

impl OutputGrads {
    pub fn zeros_like(fwd: &ProposalForward) -> OutputGrads {
        OutputGrads {
            maps: fwd
                .maps
                .iter()
                .map(|b| b.iter().map(|m| Tensor::zeros(m.shape())).collect())
                .collect(),
            classes: fwd.classes,
        }
    }

    /// Adds `scale × (d_logits, d_deltas)` at anchor `a`.
    pub fn add(&mut self, a: &Anchor, d_logits: &[f64], d_deltas: &[f64], scale: f64) {
        let m = &mut self.maps[a.branch][a.slot];
        let (rows, cols) = (m.shape()[2], m.shape()[3]);
        let plane = rows * cols;
        let at = a.row * cols + a.col;
        let k = self.classes + 1;
        let d = m.data_mut();
        for (c, g) in d_logits.iter().enumerate().take(k) {
            d[c * plane + at] += scale * g;
        }
        for (j, g) in d_deltas.iter().enumerate().take(4) {
            d[(k + j) * plane + at] += scale * g;
        }
    }
}

pub(crate) fn branch_forward(branch: &DetectionBranch, tap: &Tensor) -> Result<(Option<Tensor>, Vec<Tensor>)> {
    let buffered = match &branch.buffer {
        Some(b) => Some(relu(&conv2d(tap, b)?)?),
        None => None,
    };
    let h = buffered.as_ref().unwrap_or(tap);
    let maps = branch.det.iter().map(|c| conv2d(h, c)).collect::<Result<Vec<_>>>()?;
    Ok((buffered, maps))
}

/// Accumulates parameter gradients and returns the gradient at the tap.
pub(crate) fn branch_backward(
    branch: &mut DetectionBranch,
    tap: &Tensor,
    buffered: Option<&Tensor>,
    d_maps: &[Tensor],
) -> Result<Tensor> {
    let h = buffered.unwrap_or(tap);
    let mut dh = Tensor::zeros(h.shape());
    for (conv, g) in branch.det.iter_mut().zip(d_maps) {
        let d = conv2d_backward(h, conv, g)?;
        dh.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
    }
    match (&mut branch.buffer, buffered) {
        (Some(b), Some(out)) => {
            let dpre = relu_backward(out, &dh)?;
            conv2d_backward(tap, b, &dpre)
        }
        _ => Ok(dh),
    }
}

pub(crate) fn new_forward(
    trunk: TrunkCache,
    parts: Vec<(Option<Tensor>, Vec<Tensor>)>,
    branches: &[DetectionBranch],
    classes: usize,
    width: usize,
    height: usize,
) -> Result<ProposalForward> {
    let (buffered, maps): (Vec<_>, Vec<_>) = parts.into_iter().unzip();
    for (b, m) in branches.iter().zip(&maps) {
        let want = grid_size(&b.config, width, height);
        let got = (m[0].shape()[2], m[0].shape()[3]);
        if got != want {
            return invalid(format!("{}: output grid {got:?} but anchor grid {want:?}", b.config.name));
        }
    }
    Ok(ProposalForward { trunk, buffered, maps, classes, width, height })
}

impl ProposalForward {
    pub(crate) fn buffered(&self, branch: usize) -> Option<&Tensor> {
        self.buffered[branch].as_ref()
    }
}
