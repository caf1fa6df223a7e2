//! Shared convolutional trunk with taps at strides 8, 16, 32 and 64.

use crate::error::{invalid, Result};
use crate::tensor::conv::conv2d_backward_params;
use crate::tensor::{conv2d, conv2d_backward, max_pool2d, max_pool2d_backward, relu, relu_backward, ConvSpec, Tensor};
use rand::Rng;

/// Strides at which detection branches attach.
pub const TAP_STRIDES: [usize; 4] = [8, 16, 32, 64];

/// One trunk stage: 3×3 convolutions (each followed by ReLU), then an
/// optional 2×2 max-pool.
#[derive(Clone, Debug, PartialEq)]
pub struct StageSpec {
    pub channels: Vec<usize>,
    pub pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrunkSpec {
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
}

impl TrunkSpec {
    /// Desk-scale trunk: three single-conv downsampling stages to stride 8,
    /// a two-conv stage tapped at stride 8, then one conv stage per
    /// remaining tap.
    pub fn desk(in_channels: usize) -> TrunkSpec {
        let st = |channels: &[usize], pool| StageSpec { channels: channels.to_vec(), pool };
        TrunkSpec {
            in_channels,
            stages: vec![
                st(&[8], true),
                st(&[16], true),
                st(&[32], true),
                st(&[32, 32], true),
                st(&[64], true),
                st(&[64], true),
                st(&[64], false),
            ],
        }
    }

    /// Stride of each stage's convolution outputs.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut s = 1;
        self.stages
            .iter()
            .map(|st| {
                let here = s;
                if st.pool {
                    s *= 2;
                }
                here
            })
            .collect()
    }

    /// Index of the stage feeding each tap stride (the last stage at that stride).
    pub fn tap_stages(&self) -> Result<[usize; 4]> {
        let strides = self.stage_strides();
        let mut taps = [0; 4];
        for (t, &s) in TAP_STRIDES.iter().enumerate() {
            taps[t] = strides
                .iter()
                .rposition(|&x| x == s)
                .ok_or_else(|| crate::Error::Invalid(format!("trunk has no stage at stride {s}")))?;
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.channels.is_empty() {
                return invalid(format!("trunk stage {i} has no convolutions"));
            }
        }
        Ok(taps)
    }

    /// Output channels at each tap.
    pub fn tap_channels(&self) -> Result<[usize; 4]> {
        let taps = self.tap_stages()?;
        Ok(taps.map(|s| *self.stages[s].channels.last().expect("validated non-empty")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer {
    Conv(ConvSpec),
    Pool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trunk {
    pub spec: TrunkSpec,
    pub(crate) layers: Vec<Layer>,
    /// Layer index whose output is each tap.
    tap_layers: [usize; 4],
}

/// Activations kept for the backward pass: `inputs[i]` feeds layer `i`,
/// `inputs[len]` is the final output.
#[derive(Clone, Debug)]
pub struct TrunkCache {
    inputs: Vec<Tensor>,
    tap_layers: [usize; 4],
}

impl TrunkCache {
    pub fn tap(&self, t: usize) -> &Tensor {
        &self.inputs[self.tap_layers[t] + 1]
    }
}

impl Trunk {
    pub fn new<R: Rng + ?Sized>(spec: TrunkSpec, rng: &mut R) -> Result<Trunk> {
        let tap_stages = spec.tap_stages()?;
        let mut layers = Vec::new();
        let mut tap_layers = [0; 4];
        let mut c = spec.in_channels;
        for (i, st) in spec.stages.iter().enumerate() {
            for &out in &st.channels {
                let mut conv = ConvSpec::same(c, out, 3, 3)?;
                conv.he_init(rng);
                layers.push(Layer::Conv(conv));
                c = out;
            }
            for (t, &s) in tap_stages.iter().enumerate() {
                if s == i {
                    tap_layers[t] = layers.len() - 1;
                }
            }
            if st.pool {
                layers.push(Layer::Pool);
            }
        }
        Ok(Trunk { spec, layers, tap_layers })
    }

    pub fn num_convs(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Conv(_))).count()
    }

    /// Convolutions of the first `stages` stages.
    pub fn convs_in_stages(&self, stages: usize) -> usize {
        self.spec.stages.iter().take(stages).map(|s| s.channels.len()).sum()
    }

    pub fn forward(&self, image: &Tensor) -> Result<TrunkCache> {
        let (_, c, h, w) = image.dims4()?;
        if c != self.spec.in_channels {
            return invalid(format!("image has {c} channels, trunk expects {}", self.spec.in_channels));
        }
        if h < 64 || w < 64 {
            return invalid(format!("{w}x{h} image is smaller than the largest stride (64)"));
        }
        let mut inputs = Vec::with_capacity(self.layers.len() + 1);
        inputs.push(image.clone());
        for layer in &self.layers {
            let x = inputs.last().expect("non-empty");
            let y = match layer {
                Layer::Conv(spec) => relu(&conv2d(x, spec)?)?,
                Layer::Pool => max_pool2d(x, 2, 2)?,
            };
            inputs.push(y);
        }
        Ok(TrunkCache { inputs, tap_layers: self.tap_layers })
    }

    /// Back-propagates tap gradients (`None` = no gradient at that tap).
    /// The first `frozen_convs` convolutions receive no gradient, and
    /// propagation stops below them.
    pub fn backward(&mut self, cache: &TrunkCache, tap_grads: [Option<&Tensor>; 4], frozen_convs: usize) -> Result<()> {
        let mut conv_index: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut k = 0;
        for l in &self.layers {
            conv_index.push(k);
            if matches!(l, Layer::Conv(_)) {
                k += 1;
            }
        }
        let lowest_tap = tap_grads
            .iter()
            .enumerate()
            .filter(|(_, g)| g.is_some())
            .map(|(t, _)| self.tap_layers[t])
            .max();
        let Some(top) = lowest_tap else { return Ok(()) };
        let mut grad: Option<Tensor> = None;
        for i in (0..=top).rev() {
            for (t, g) in tap_grads.iter().enumerate() {
                if let (Some(g), true) = (g, self.tap_layers[t] == i) {
                    grad = Some(match grad.take() {
                        None => (*g).clone(),
                        Some(mut acc) => {
                            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                            acc
                        }
                    });
                }
            }
            let Some(g) = grad.take() else { continue };
            let x = &cache.inputs[i];
            match &mut self.layers[i] {
                Layer::Pool => grad = Some(max_pool2d_backward(x, 2, 2, &g)?),
                Layer::Conv(spec) => {
                    let ci = conv_index[i];
                    if ci < frozen_convs {
                        return Ok(());
                    }
                    let g = relu_backward(&cache.inputs[i + 1], &g)?;
                    if i == 0 || ci == frozen_convs && frozen_convs > 0 {
                        conv2d_backward_params(x, spec, &g)?;
                        return Ok(());
                    }
                    grad = Some(conv2d_backward(x, spec, &g)?);
                }
            }
        }
        Ok(())
    }

    pub fn convs(&self) -> impl Iterator<Item = &ConvSpec> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::Pool => None,
        })
    }

    pub fn convs_mut(&mut self) -> impl Iterator<Item = &mut ConvSpec> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Conv(c) => Some(c),
            Layer::Pool => None,
        })
    }
}
