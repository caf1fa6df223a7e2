//! Multi-scale CNN object detection: a proposal network with detection
//! branches tapped at strides 8/16/32/64, a detection sub-network with
//! feature deconvolution and context pooling, scale-aware anchor sampling,
//! the multi-task losses, two-stage training and recall evaluation.
//!
//! Every layer pairs an explicit forward pass with a hand-written backward
//! pass; [`tensor::gradcheck`] verifies them against central differences.

pub mod anchors;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod gradsuite;
pub mod loss;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use geometry::{BBox, RegressionTarget};
pub use tensor::Tensor;

/// One annotated object: class label in `1..=K` and its box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

/// An image tensor (1×C×H×W) together with its annotations.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: Tensor,
    pub objects: Vec<GroundTruth>,
}

impl Scene {
    pub fn width(&self) -> usize {
        self.image.shape()[3]
    }

    pub fn height(&self) -> usize {
        self.image.shape()[2]
    }
}
