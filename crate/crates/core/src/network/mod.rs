//! The unified network: trunk, proposal branches and detection head.

pub mod branch;
pub mod head;
pub mod proposals;
pub mod trunk;

pub use branch::{DetectionBranch, OutputGrads, ProposalForward};
pub use head::{DeconvMode, DetectionHead, HeadConfig, HeadForward, HEAD_TAP_STRIDE};
pub use proposals::{
    collect_proposals, proposal_as_detector, Detection, DetectorMode, Proposal, RawPrediction,
};
pub use trunk::{StageSpec, Trunk, TrunkSpec, TAP_STRIDES};

use crate::anchors::{build_anchor_grid, Anchor, BranchConfig};
use crate::error::{invalid, Error, Result};
use crate::tensor::checkpoint::{read_checkpoint, write_checkpoint};
use crate::tensor::Tensor;
use rand::Rng;
use std::io::{Read, Write};

/// Complete architecture description; serialized as the checkpoint header.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub trunk: TrunkSpec,
    pub branches: Vec<BranchConfig>,
    /// Object classes K (background excluded).
    pub classes: usize,
    /// Buffer convolution on the stride-8 branch.
    pub buffer_conv: bool,
    pub head: Option<HeadConfig>,
}

fn fmt_pairs<T: std::fmt::Display>(pairs: impl Iterator<Item = (T, T)>) -> String {
    pairs.map(|(a, b)| format!("{a}x{b}")).collect::<Vec<_>>().join(",")
}

fn parse_pairs<T: std::str::FromStr>(s: &str) -> Result<Vec<(T, T)>> {
    s.split(',')
        .map(|p| {
            let (a, b) = p
                .split_once('x')
                .ok_or_else(|| Error::Invalid(format!("expected AxB, got {p:?}")))?;
            let a = a.trim().parse().map_err(|_| Error::Invalid(format!("bad number in {p:?}")))?;
            let b = b.trim().parse().map_err(|_| Error::Invalid(format!("bad number in {p:?}")))?;
            Ok((a, b))
        })
        .collect()
}

/// Formats `8 | 16 | 32,32 p` style stage lists: convs joined by `,`,
/// stages by `|`, a trailing `p` marks a pooled stage.
pub fn format_stages(stages: &[StageSpec]) -> String {
    stages
        .iter()
        .map(|s| {
            let c = s.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",");
            if s.pool {
                format!("{c}p")
            } else {
                c
            }
        })
        .collect::<Vec<_>>()
        .join("|")
}

pub fn parse_stages(s: &str) -> Result<Vec<StageSpec>> {
    s.split('|')
        .map(|part| {
            let part = part.trim();
            let (body, pool) = match part.strip_suffix('p') {
                Some(b) => (b, true),
                None => (part, false),
            };
            let channels = body
                .split(',')
                .map(|c| c.trim().parse::<usize>().map_err(|_| Error::Invalid(format!("bad stage {part:?}"))))
                .collect::<Result<Vec<_>>>()?;
            Ok(StageSpec { channels, pool })
        })
        .collect()
}

/// One branch as `name;stride;filters(HxW);anchors(HxW);alpha`.
pub fn format_branch(b: &BranchConfig) -> String {
    format!(
        "{};{};{};{};{}",
        b.name,
        b.stride,
        fmt_pairs(b.filter_sizes.iter().copied()),
        fmt_pairs(b.anchor_sizes.iter().map(|&(w, h)| (h, w))),
        b.alpha
    )
}

pub fn parse_branch(s: &str) -> Result<BranchConfig> {
    let f: Vec<&str> = s.split(';').map(str::trim).collect();
    if f.len() != 5 {
        return invalid(format!("branch needs name;stride;filters;anchors;alpha, got {s:?}"));
    }
    let num = |v: &str| -> Result<f64> { v.parse().map_err(|_| Error::Invalid(format!("bad number {v:?}"))) };
    let b = BranchConfig {
        name: f[0].to_string(),
        stride: num(f[1])? as usize,
        filter_sizes: parse_pairs(f[2])?,
        anchor_sizes: parse_pairs::<f64>(f[3])?.into_iter().map(|(h, w)| (w, h)).collect(),
        alpha: num(f[4])?,
    };
    b.validate()?;
    Ok(b)
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        self.trunk.tap_stages()?;
        if self.classes == 0 {
            return invalid("at least one object class required");
        }
        if self.branches.is_empty() {
            return invalid("at least one detection branch required");
        }
        for b in &self.branches {
            b.validate()?;
        }
        if let Some(h) = &self.head {
            h.validate()?;
        }
        Ok(())
    }

    pub fn to_header(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("in_channels={}\n", self.trunk.in_channels));
        s.push_str(&format!("trunk={}\n", format_stages(&self.trunk.stages)));
        s.push_str(&format!("classes={}\n", self.classes));
        s.push_str(&format!("buffer_conv={}\n", self.buffer_conv));
        for b in &self.branches {
            s.push_str(&format!("branch={}\n", format_branch(b)));
        }
        if let Some(h) = &self.head {
            s.push_str(&format!("head.roi={}x{}\n", h.roi.0, h.roi.1));
            s.push_str(&format!("head.fc={}\n", h.fc_width));
            s.push_str(&format!("head.context={}\n", h.context));
            s.push_str(&format!("head.context_scale={}\n", h.context_scale));
            s.push_str(&format!("head.deconv={}\n", h.deconv.name()));
        }
        s
    }

    pub fn from_header(text: &str) -> Result<NetworkConfig> {
        let bad = |k: &str, v: &str| Error::Checkpoint(format!("bad header value {k}={v}"));
        let mut in_channels = None;
        let mut stages = None;
        let mut classes = None;
        let mut buffer_conv = false;
        let mut branches = Vec::new();
        let mut roi = None;
        let mut fc = None;
        let mut context = true;
        let mut context_scale = 1.5;
        let mut deconv = None;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad header line {line:?}")))?;
            match k {
                "in_channels" => in_channels = Some(v.parse().map_err(|_| bad(k, v))?),
                "trunk" => stages = Some(parse_stages(v)?),
                "classes" => classes = Some(v.parse().map_err(|_| bad(k, v))?),
                "buffer_conv" => buffer_conv = v.parse().map_err(|_| bad(k, v))?,
                "branch" => branches.push(parse_branch(v)?),
                "head.roi" => roi = Some(parse_pairs::<usize>(v)?.first().copied().ok_or_else(|| bad(k, v))?),
                "head.fc" => fc = Some(v.parse().map_err(|_| bad(k, v))?),
                "head.context" => context = v.parse().map_err(|_| bad(k, v))?,
                "head.context_scale" => context_scale = v.parse().map_err(|_| bad(k, v))?,
                "head.deconv" => deconv = Some(DeconvMode::parse(v)?),
                other => return Err(Error::Checkpoint(format!("unknown header key {other:?}"))),
            }
        }
        let missing = |k: &str| Error::Checkpoint(format!("header lacks {k}"));
        let head = match (roi, fc, deconv) {
            (Some(roi), Some(fc_width), Some(deconv)) => Some(HeadConfig { roi, fc_width, context, context_scale, deconv }),
            (None, None, None) => None,
            _ => return Err(Error::Checkpoint("incomplete head description".into())),
        };
        let cfg = NetworkConfig {
            trunk: TrunkSpec {
                in_channels: in_channels.ok_or_else(|| missing("in_channels"))?,
                stages: stages.ok_or_else(|| missing("trunk"))?,
            },
            branches,
            classes: classes.ok_or_else(|| missing("classes"))?,
            buffer_conv,
            head,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// The trunk, the proposal branches and (optionally) the detection head.
#[derive(Clone, Debug, PartialEq)]
pub struct MsCnn {
    pub config: NetworkConfig,
    pub trunk: Trunk,
    pub branches: Vec<DetectionBranch>,
    pub head: Option<DetectionHead>,
}

impl MsCnn {
    pub fn new<R: Rng + ?Sized>(config: NetworkConfig, rng: &mut R) -> Result<MsCnn> {
        config.validate()?;
        let trunk = Trunk::new(config.trunk.clone(), rng)?;
        let tap_channels = config.trunk.tap_channels()?;
        let mut branches = Vec::with_capacity(config.branches.len());
        for b in &config.branches {
            let t = tap_index(b.stride)?;
            let buffer = config.buffer_conv && b.stride == 8;
            branches.push(DetectionBranch::new(b.clone(), tap_channels[t], config.classes, buffer, rng)?);
        }
        let head = match &config.head {
            Some(h) => Some(DetectionHead::new(h.clone(), tap_channels[0], config.classes, rng)?),
            None => None,
        };
        Ok(MsCnn { config, trunk, branches, head })
    }

    pub fn classes(&self) -> usize {
        self.config.classes
    }

    /// Branch loss weights α.
    pub fn alphas(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.config.alpha).collect()
    }

    /// Anchor grids of every branch for a `width × height` input.
    pub fn anchors(&self, width: usize, height: usize) -> Vec<Vec<Anchor>> {
        self.branches
            .iter()
            .enumerate()
            .map(|(m, b)| build_anchor_grid(&b.config, m, width, height))
            .collect()
    }

    pub fn proposal_forward(&self, image: &Tensor) -> Result<ProposalForward> {
        let (_, _, h, w) = image.dims4()?;
        let tc = self.trunk.forward(image)?;
        let mut parts = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let tap = tc.tap(tap_index(b.config.stride)?);
            parts.push(branch::branch_forward(b, tap)?);
        }
        branch::new_forward(tc, parts, &self.branches, self.classes(), w, h)
    }

    /// Back-propagates branch-output gradients (plus an optional gradient
    /// arriving at the stride-8 tap from the head) into all parameters,
    /// leaving the first `frozen_convs` trunk convolutions untouched.
    pub fn proposal_backward(
        &mut self,
        fwd: &ProposalForward,
        grads: &OutputGrads,
        head_tap_grad: Option<&Tensor>,
        frozen_convs: usize,
    ) -> Result<()> {
        let mut taps: [Option<Tensor>; 4] = [None, None, None, None];
        if let Some(g) = head_tap_grad {
            taps[0] = Some(g.clone());
        }
        for (m, b) in self.branches.iter_mut().enumerate() {
            let t = tap_index(b.config.stride)?;
            let d = branch::branch_backward(b, fwd.trunk.tap(t), fwd.buffered(m), &grads.maps[m])?;
            match &mut taps[t] {
                Some(acc) => acc.data_mut().iter_mut().zip(d.data()).for_each(|(a, v)| *a += v),
                slot => *slot = Some(d),
            }
        }
        let refs = [taps[0].as_ref(), taps[1].as_ref(), taps[2].as_ref(), taps[3].as_ref()];
        self.trunk.backward(&fwd.trunk, refs, frozen_convs)
    }

    pub fn head(&self) -> Result<&DetectionHead> {
        self.head.as_ref().ok_or_else(|| Error::Invalid("network has no detection head".into()))
    }

    /// Runs the detection head on `rois` (already clipped to the image).
    pub fn detection_forward(&self, fwd: &ProposalForward, rois: &[BBox]) -> Result<HeadForward> {
        self.head()?.forward(fwd.trunk.tap(0), rois)
    }

    /// Head backward; returns the gradient at the stride-8 tap.
    pub fn detection_backward(
        &mut self,
        fwd: &ProposalForward,
        head_fwd: &HeadForward,
        d_logits: &[f64],
        d_deltas: &[f64],
    ) -> Result<Tensor> {
        let head = self.head.as_mut().ok_or_else(|| Error::Invalid("network has no detection head".into()))?;
        head.backward(fwd.trunk.tap(0), head_fwd, d_logits, d_deltas)
    }

    /// All parameters in a fixed order with stable names.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.trunk.convs().enumerate() {
            out.push((format!("trunk.conv{i}.weight"), &c.weights));
            out.push((format!("trunk.conv{i}.bias"), &c.bias));
        }
        for (m, b) in self.branches.iter().enumerate() {
            if let Some(c) = &b.buffer {
                out.push((format!("branch{m}.buffer.weight"), &c.weights));
                out.push((format!("branch{m}.buffer.bias"), &c.bias));
            }
            for (s, c) in b.det.iter().enumerate() {
                out.push((format!("branch{m}.det{s}.weight"), &c.weights));
                out.push((format!("branch{m}.det{s}.bias"), &c.bias));
            }
        }
        if let Some(h) = &self.head {
            if let Some(d) = &h.deconv {
                out.push(("head.deconv.weight".into(), &d.weights));
                out.push(("head.deconv.bias".into(), &d.bias));
            }
            out.push(("head.reduce.weight".into(), &h.reduce.weights));
            out.push(("head.reduce.bias".into(), &h.reduce.bias));
            for (n, l) in [("fc", &h.fc), ("cls", &h.cls), ("bbox", &h.bbox)] {
                out.push((format!("head.{n}.weight"), &l.weights));
                out.push((format!("head.{n}.bias"), &l.bias));
            }
        }
        out
    }

    /// Mutable counterpart of [`MsCnn::params`], same order and names.
    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.trunk.convs_mut().enumerate() {
            out.push((format!("trunk.conv{i}.weight"), &mut c.weights));
            out.push((format!("trunk.conv{i}.bias"), &mut c.bias));
        }
        for (m, b) in self.branches.iter_mut().enumerate() {
            if let Some(c) = &mut b.buffer {
                out.push((format!("branch{m}.buffer.weight"), &mut c.weights));
                out.push((format!("branch{m}.buffer.bias"), &mut c.bias));
            }
            for (s, c) in b.det.iter_mut().enumerate() {
                out.push((format!("branch{m}.det{s}.weight"), &mut c.weights));
                out.push((format!("branch{m}.det{s}.bias"), &mut c.bias));
            }
        }
        if let Some(h) = &mut self.head {
            if let Some(d) = &mut h.deconv {
                out.push(("head.deconv.weight".into(), &mut d.weights));
                out.push(("head.deconv.bias".into(), &mut d.bias));
            }
            out.push(("head.reduce.weight".into(), &mut h.reduce.weights));
            out.push(("head.reduce.bias".into(), &mut h.reduce.bias));
            for (n, l) in [("fc", &mut h.fc), ("cls", &mut h.cls), ("bbox", &mut h.bbox)] {
                out.push((format!("head.{n}.weight"), &mut l.weights));
                out.push((format!("head.{n}.bias"), &mut l.bias));
            }
        }
        out
    }

    /// Whether a named parameter is architecturally fixed (never updated).
    pub fn is_fixed(&self, name: &str) -> bool {
        name.starts_with("head.deconv.") && self.head.as_ref().is_some_and(|h| h.deconv_fixed())
    }

    /// Trunk convolution index encoded in a parameter name.
    pub fn trunk_conv_index(name: &str) -> Option<usize> {
        name.strip_prefix("trunk.conv")?.split('.').next()?.parse().ok()
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.clear_grad();
        }
    }

    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        let params = self.params();
        let refs: Vec<(&str, &Tensor)> = params.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_checkpoint(w, &self.config.to_header(), &refs)
    }

    /// Rebuilds a network from a checkpoint; every parameter must be present with the right shape.
    pub fn load<R: Read>(r: &mut R) -> Result<MsCnn> {
        let ck = read_checkpoint(r)?;
        let config = NetworkConfig::from_header(&ck.header)?;
        // Initial values are overwritten below; the generator only sizes tensors.
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut net = MsCnn::new(config, &mut rng)?;
        let expected = net.params().len();
        if ck.params.len() != expected {
            return Err(Error::Checkpoint(format!("{} tensors, architecture has {expected}", ck.params.len())));
        }
        for (name, p) in net.params_mut() {
            let t = ck.get(&name).ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if t.shape() != p.shape() {
                return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {:?}", t.shape(), p.shape())));
            }
            p.data_mut().copy_from_slice(t.data());
        }
        Ok(net)
    }

    /// Adds a detection head to a proposal-only network.
    pub fn attach_head<R: Rng + ?Sized>(&mut self, config: HeadConfig, rng: &mut R) -> Result<()> {
        let c = self.config.trunk.tap_channels()?[0];
        self.head = Some(DetectionHead::new(config.clone(), c, self.classes(), rng)?);
        self.config.head = Some(config);
        Ok(())
    }
}

use crate::geometry::BBox;

pub(crate) fn tap_index(stride: usize) -> Result<usize> {
    TAP_STRIDES
        .iter()
        .position(|&s| s == stride)
        .ok_or_else(|| Error::Invalid(format!("no trunk tap at stride {stride}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::Profile;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> NetworkConfig {
        NetworkConfig {
            trunk: TrunkSpec::desk(3),
            branches: Profile::Car.branches(),
            classes: 1,
            buffer_conv: true,
            head: Some(HeadConfig {
                roi: (7, 7),
                fc_width: 16,
                context: true,
                context_scale: 1.5,
                deconv: DeconvMode::Bilinear,
            }),
        }
    }

    #[test]
    fn grids_and_channels_follow_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = MsCnn::new(small_config(), &mut rng).unwrap();
        let img = Tensor::uniform(&[1, 3, 320, 320], 0.0, 1.0, &mut rng);
        let fwd = net.proposal_forward(&img).unwrap();
        let grids: Vec<_> = (0..4).map(|m| fwd.grid(m)).collect();
        assert_eq!(grids, vec![(40, 40), (20, 20), (10, 10), (5, 5)]);
        assert_eq!(net.branches[0].output_channels(), 12);
        let again = net.proposal_forward(&img).unwrap();
        assert_eq!(fwd.maps, again.maps);
    }

    #[test]
    fn header_round_trip() {
        let cfg = small_config();
        let text = cfg.to_header();
        assert_eq!(NetworkConfig::from_header(&text).unwrap(), cfg);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MsCnn::new(small_config(), &mut rng).unwrap();
        let mut buf = Vec::new();
        net.save(&mut buf).unwrap();
        let back = MsCnn::load(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params().len(), net.params().len());
        for ((n1, a), (n2, b)) in net.params().iter().zip(back.params()) {
            assert_eq!(n1, &n2);
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn proposal_from_zero_deltas_is_the_anchor() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = MsCnn::new(small_config(), &mut rng).unwrap();
        for b in &mut net.branches {
            for c in &mut b.det {
                c.weights.data_mut().fill(0.0);
            }
        }
        let img = Tensor::zeros(&[1, 3, 64, 64]);
        let fwd = net.proposal_forward(&img).unwrap();
        let anchors = net.anchors(64, 64);
        let only = vec![vec![anchors[3][0]], vec![], vec![], vec![]];
        let props = collect_proposals(&fwd, &only, 10, 0.7, usize::MAX);
        assert_eq!(props.len(), 1);
        assert_eq!(props[0].bbox, crate::geometry::clip(&anchors[3][0].bbox, 64.0, 64.0).unwrap());
    }
}
