//! Finite-difference checks of every differentiable building block and of
//! the full unified loss through a small network.
//!
//! Errors are `|a − n| / max(|a|, |n|, GRAD_FLOOR)` for analytic `a` and
//! central-difference `n`, maximized over the probed coordinates.

use crate::anchors::{BranchConfig, Profile, SamplingStrategy};
use crate::error::Result;
use crate::geometry::{BBox, RegressionTarget};
use crate::loss::{branch_loss, loc_loss, loc_loss_grad, total_loss, SampleLabel};
use crate::network::{DeconvMode, HeadConfig, MsCnn, NetworkConfig, StageSpec, TrunkSpec};
use crate::tensor::{
    conv2d, conv2d_backward, deconv2d, deconv2d_backward, linear, linear_backward, max_pool2d, max_pool2d_backward,
    numeric_gradient, roi_pool, roi_pool_backward, ConvSpec, Linear, Tensor,
};
use crate::train::{branch_sample_loss, draw_branch_samples, sample_rois, BranchSamples, JointConfig, ProposalObjective, RoiSamples};
use crate::{GroundTruth, Scene};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Gradient magnitudes below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-3;
/// Tolerance for single layers and losses.
pub const LAYER_TOL: f64 = 1e-4;
/// Tolerance for probes through the whole network.
pub const COMPOSITE_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_error: f64,
    pub tolerance: f64,
    pub probes: usize,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_error < self.tolerance
    }
}

pub fn scaled_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

fn compare<F>(name: &str, tol: f64, x: &Tensor, analytic: &[f64], coords: &[usize], eps: f64, value: F) -> Result<CheckResult>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let numeric = numeric_gradient(value, x, coords, eps)?;
    let max_error = coords.iter().zip(&numeric).map(|(&i, &n)| scaled_error(analytic[i], n)).fold(0.0, f64::max);
    Ok(CheckResult { name: name.into(), max_error, tolerance: tol, probes: coords.len() })
}

fn all(t: &Tensor) -> Vec<usize> {
    (0..t.numel()).collect()
}

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn grad_of(t: &Tensor) -> Vec<f64> {
    t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
}

/// `⟨f(x), r⟩` checks of one convolution-like layer w.r.t. input, weights and bias.
fn conv_like(name: &str, spec: ConvSpec, x: Tensor, rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let fwd = |x: &Tensor, s: &ConvSpec| if s.transposed { deconv2d(x, s) } else { conv2d(x, s) };
    let y = fwd(&x, &spec)?;
    let r = uniform(y.shape(), rng);
    let mut s = spec.clone();
    let dx = if s.transposed { deconv2d_backward(&x, &mut s, &r)? } else { conv2d_backward(&x, &mut s, &r)? };
    let mut out = vec![compare(&format!("{name} input"), LAYER_TOL, &x, dx.data(), &all(&x), 1e-6, |t| fwd(t, &spec)?.dot(&r))?];
    let (dw, db) = (grad_of(&s.weights), grad_of(&s.bias));
    out.push(compare(&format!("{name} weights"), LAYER_TOL, &spec.weights, &dw, &all(&spec.weights), 1e-6, |w| {
        let mut p = spec.clone();
        p.weights = w.clone();
        fwd(&x, &p)?.dot(&r)
    })?);
    out.push(compare(&format!("{name} bias"), LAYER_TOL, &spec.bias, &db, &all(&spec.bias), 1e-6, |b| {
        let mut p = spec.clone();
        p.bias = b.clone();
        fwd(&x, &p)?.dot(&r)
    })?);
    Ok(out)
}

fn layer_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();

    let mut spec = ConvSpec::new(3, 4, (3, 3), 2, (1, 1))?;
    spec.weights = uniform(spec.weights.shape(), rng);
    spec.bias = uniform(spec.bias.shape(), rng);
    out.extend(conv_like("conv2d", spec, uniform(&[2, 3, 7, 6], rng), rng)?);

    let mut spec = ConvSpec::transposed(3, 2, (4, 4), 2, (1, 1))?;
    spec.weights = uniform(spec.weights.shape(), rng);
    spec.bias = uniform(spec.bias.shape(), rng);
    out.extend(conv_like("deconv2d", spec, uniform(&[2, 3, 4, 5], rng), rng)?);

    // Distinct values keep every pooling argmax away from ties.
    let distinct = |shape: &[usize], rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
        for i in (1..n).rev() {
            v.swap(i, rng.gen_range(0..=i));
        }
        Tensor::from_vec(shape, v)
    };
    for (window, stride) in [(2, 2), (3, 2)] {
        let x = distinct(&[2, 2, 7, 7], rng)?;
        let y = max_pool2d(&x, window, stride)?;
        let r = uniform(y.shape(), rng);
        let dx = max_pool2d_backward(&x, window, stride, &r)?;
        out.push(compare(&format!("max_pool2d {window}/{stride}"), LAYER_TOL, &x, dx.data(), &all(&x), 1e-6, |t| {
            max_pool2d(t, window, stride)?.dot(&r)
        })?);
    }

    let x = distinct(&[1, 3, 10, 12], rng)?;
    let roi = BBox::from_corners(5.0, 3.0, 37.0, 30.0);
    let y = roi_pool(&x, &roi, 3, 4, 4)?;
    let r = uniform(y.shape(), rng);
    let dx = roi_pool_backward(&x, &roi, 3, 4, 4, &r)?;
    out.push(compare("roi_pool", LAYER_TOL, &x, dx.data(), &all(&x), 1e-6, |t| roi_pool(t, &roi, 3, 4, 4)?.dot(&r))?);

    let mut layer = Linear::new(5, 4);
    layer.weights = uniform(layer.weights.shape(), rng);
    layer.bias = uniform(layer.bias.shape(), rng);
    let x = uniform(&[3, 5], rng);
    let r = uniform(&[3, 4], rng);
    let mut l2 = layer.clone();
    let dx = linear_backward(&x, &mut l2, &r)?;
    out.push(compare("linear input", LAYER_TOL, &x, dx.data(), &all(&x), 1e-6, |t| linear(t, &layer)?.dot(&r))?);
    out.push(compare("linear weights", LAYER_TOL, &layer.weights, &grad_of(&l2.weights), &all(&layer.weights), 1e-6, |w| {
        linear(&x, &Linear { weights: w.clone(), bias: layer.bias.clone() })?.dot(&r)
    })?);
    Ok(out)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, n_pos: usize, classes: usize) -> Vec<SampleLabel> {
    (0..n)
        .map(|i| {
            if i < n_pos {
                SampleLabel {
                    class: rng.gen_range(1..classes),
                    target: Some(RegressionTarget::from_array(std::array::from_fn(|_| rng.gen_range(-1.5..1.5)))),
                }
            } else {
                SampleLabel { class: 0, target: None }
            }
        })
        .collect()
}

/// Keeps every smooth-L1 residual away from the kinks at ±1.
fn off_kink(t: &[f64], d: &mut [f64]) {
    for (p, q) in d.iter_mut().zip(t.iter().cycle()) {
        if ((*p - q).abs() - 1.0).abs() < 0.05 {
            *p += 0.2;
        }
    }
}

fn loss_checks(rng: &mut ChaCha8Rng) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    let k = 4;

    let labels = random_labels(rng, 10, 10, k);
    let z = uniform(&[10 * k], rng);
    let zero_d = vec![0.0; 40];
    let bl = branch_loss(&labels, z.data(), k, &zero_d, 0.0, 0.0)?;
    out.push(compare("softmax cross-entropy", LAYER_TOL, &z, &bl.d_logits, &all(&z), 1e-6, |t| {
        Ok(branch_loss(&labels, t.data(), k, &zero_d, 0.0, 0.0)?.terms.value())
    })?);

    let targets: Vec<RegressionTarget> =
        (0..6).map(|_| RegressionTarget::from_array(std::array::from_fn(|_| rng.gen_range(-2.0..2.0)))).collect();
    let mut pred = uniform(&[24], rng).into_data().iter().map(|v| v * 2.5).collect::<Vec<_>>();
    let flat: Vec<f64> = targets.iter().flat_map(|t| t.to_array()).collect();
    off_kink(&flat, &mut pred);
    let pred = Tensor::from_vec(&[24], pred)?;
    let as_targets = |p: &[f64]| -> Vec<RegressionTarget> {
        p.chunks(4).map(|c| RegressionTarget::from_array([c[0], c[1], c[2], c[3]])).collect()
    };
    let analytic: Vec<f64> =
        targets.iter().zip(as_targets(pred.data())).flat_map(|(t, p)| loc_loss_grad(t, &p)).collect();
    out.push(compare("smooth-L1 location loss", LAYER_TOL, &pred, &analytic, &all(&pred), 1e-6, |p| {
        Ok(targets.iter().zip(as_targets(p.data())).map(|(t, q)| loc_loss(t, &q)).sum())
    })?);

    let labels = random_labels(rng, 16, 5, k);
    let z = uniform(&[16 * k], rng);
    let zero_d = vec![0.0; 64];
    let bl = branch_loss(&labels, z.data(), k, &zero_d, 0.0, 3.0)?;
    out.push(compare("balanced cross-entropy", LAYER_TOL, &z, &bl.d_logits, &all(&z), 1e-6, |t| {
        Ok(branch_loss(&labels, t.data(), k, &zero_d, 0.0, 3.0)?.terms.value())
    })?);

    let labels = random_labels(rng, 14, 6, k);
    let z = uniform(&[14 * k], rng);
    let flat: Vec<f64> = labels.iter().flat_map(|l| l.target.unwrap_or_default().to_array()).collect();
    let mut d = uniform(&[56], rng).into_data().iter().map(|v| v * 2.0).collect::<Vec<_>>();
    off_kink(&flat, &mut d);
    let d = Tensor::from_vec(&[56], d)?;
    let bl = branch_loss(&labels, z.data(), k, d.data(), 0.7, 3.0)?;
    out.push(compare("branch loss logits", LAYER_TOL, &z, &bl.d_logits, &all(&z), 1e-6, |t| {
        Ok(branch_loss(&labels, t.data(), k, d.data(), 0.7, 3.0)?.terms.value())
    })?);
    out.push(compare("branch loss offsets", LAYER_TOL, &d, &bl.d_deltas, &all(&d), 1e-6, |t| {
        Ok(branch_loss(&labels, z.data(), k, t.data(), 0.7, 3.0)?.terms.value())
    })?);
    Ok(out)
}

/// A network small enough for exhaustive probing, with every component
/// (buffer convolution, learned deconvolution, context pooling) enabled.
/// The deconvolution starts from Gaussian weights: a bilinear kernel on a
/// sparse rectified map yields exactly tied neighbors, where ROI max
/// pooling is not differentiable.
pub fn probe_network(seed: u64) -> Result<(MsCnn, Scene)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let st = |c: &[usize], pool| StageSpec { channels: c.to_vec(), pool };
    let config = NetworkConfig {
        trunk: TrunkSpec {
            in_channels: 3,
            stages: vec![st(&[4], true), st(&[6], true), st(&[8], true), st(&[8, 8], true), st(&[8], true), st(&[8], true), st(&[8], false)],
        },
        branches: Profile::Car.branches().iter().map(|b: &BranchConfig| b.with_anchor_scale(0.25)).collect(),
        classes: 3,
        buffer_conv: true,
        head: Some(HeadConfig { roi: (5, 5), fc_width: 16, context: true, context_scale: 1.5, deconv: DeconvMode::Gaussian }),
    };
    let mut net = MsCnn::new(config, &mut rng)?;
    // Larger output weights than the training initialization make every
    // loss term depend visibly on the parameters.
    for (name, p) in net.params_mut() {
        if name.starts_with("branch") || name.starts_with("head.cls") || name.starts_with("head.bbox") {
            *p = Tensor::uniform(p.shape(), -0.2, 0.2, &mut rng);
        }
    }
    let image = Tensor::uniform(&[1, 3, 64, 64], -0.5, 0.5, &mut rng);
    let objects = vec![
        GroundTruth { class: 1, bbox: BBox::new(18.0, 20.0, 9.0, 12.0) },
        GroundTruth { class: 2, bbox: BBox::new(44.0, 38.0, 18.0, 24.0) },
        GroundTruth { class: 3, bbox: BBox::new(30.0, 34.0, 44.0, 50.0) },
    ];
    Ok((net, Scene { image, objects }))
}

/// Samples held fixed while parameters are perturbed.
#[derive(Clone, Debug)]
pub struct FixedSamples {
    pub branches: Vec<BranchSamples>,
    pub rois: RoiSamples,
}

pub fn fix_samples(net: &MsCnn, scene: &Scene, obj: &ProposalObjective, rng: &mut ChaCha8Rng) -> Result<FixedSamples> {
    let fwd = net.proposal_forward(&scene.image)?;
    let branches = draw_branch_samples(net, &fwd, scene, obj, rng)?;
    let mut candidates: Vec<BBox> = scene.objects.iter().map(|g| g.bbox).collect();
    for g in &scene.objects {
        for _ in 0..6 {
            let j = |s: f64, rng: &mut ChaCha8Rng| rng.gen_range(-0.3..0.3) * s;
            let b = BBox::new(g.bbox.cx + j(g.bbox.w, rng), g.bbox.cy + j(g.bbox.h, rng), g.bbox.w * rng.gen_range(0.7..1.4), g.bbox.h * rng.gen_range(0.7..1.4));
            candidates.push(crate::geometry::clip(&b, 64.0, 64.0)?);
        }
    }
    let joint = JointConfig { rois_per_image: 12, positive_fraction: 0.5, ..crate::train::TrainConfig::default().joint };
    let rois = sample_rois(&candidates, &scene.objects, &joint, rng)?;
    Ok(FixedSamples { branches, rois })
}

/// Unified loss (weighted branch losses plus the weighted detection loss)
/// on fixed samples; with `backward`, also accumulates parameter gradients.
pub fn unified_loss(net: &mut MsCnn, scene: &Scene, fixed: &FixedSamples, obj: &ProposalObjective, alpha_det: f64, backward: bool) -> Result<f64> {
    let fwd = net.proposal_forward(&scene.image)?;
    let (terms, grads) = branch_sample_loss(net, &fwd, &fixed.branches, obj, 1.0)?;
    let hf = net.detection_forward(&fwd, &fixed.rois.rois)?;
    let k = net.classes() + 1;
    let bl = branch_loss(&fixed.rois.labels, hf.logits.data(), k, hf.deltas.data(), 1.0, obj.gamma)?;
    let total = total_loss(&terms, &net.alphas(), Some(bl.terms), alpha_det)?.total;
    if backward {
        let dl: Vec<f64> = bl.d_logits.iter().map(|g| g * alpha_det).collect();
        let dd: Vec<f64> = bl.d_deltas.iter().map(|g| g * alpha_det).collect();
        let dtap = net.detection_backward(&fwd, &hf, &dl, &dd)?;
        net.proposal_backward(&fwd, &grads, Some(&dtap), 0)?;
    }
    Ok(total)
}

fn value_only(net: &MsCnn, scene: &Scene, fixed: &FixedSamples, obj: &ProposalObjective, alpha_det: f64) -> Result<f64> {
    let mut n = net.clone();
    unified_loss(&mut n, scene, fixed, obj, alpha_det, false)
}

/// Probes the unified loss w.r.t. the largest-gradient coordinates and a
/// few random coordinates of every parameter tensor, grouped by component.
pub fn unified_checks(seed: u64, per_tensor: usize) -> Result<Vec<CheckResult>> {
    let (mut net, scene) = probe_network(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let obj = ProposalObjective { strategy: SamplingStrategy::Random, lambda: 1.0, gamma: 3.0 };
    let fixed = fix_samples(&net, &scene, &obj, &mut rng)?;
    let alpha_det = 1.0;
    net.zero_grads();
    unified_loss(&mut net, &scene, &fixed, &obj, alpha_det, true)?;
    let analytic: Vec<(String, Vec<f64>)> = net.params().into_iter().map(|(n, t)| (n, grad_of(t))).collect();

    let groups = ["trunk", "branch", "head"];
    let mut worst = [0.0f64; 3];
    let mut probes = [0usize; 3];
    for (pi, (name, g)) in analytic.iter().enumerate() {
        let mut order: Vec<usize> = (0..g.len()).collect();
        order.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
        let mut coords: Vec<usize> = order.into_iter().take(per_tensor.div_ceil(2)).collect();
        coords.extend(index::sample(&mut rng, g.len(), (per_tensor / 2).min(g.len())));
        coords.sort_unstable();
        coords.dedup();
        let x = net.params()[pi].1.clone();
        let numeric = numeric_gradient(
            |t| {
                let mut n = net.clone();
                n.params_mut()[pi].1.data_mut().copy_from_slice(t.data());
                value_only(&n, &scene, &fixed, &obj, alpha_det)
            },
            &x,
            &coords,
            1e-6,
        )?;
        let gi = groups.iter().position(|p| name.starts_with(p)).unwrap_or(2);
        for (&c, n) in coords.iter().zip(numeric) {
            worst[gi] = worst[gi].max(scaled_error(g[c], n));
            probes[gi] += 1;
        }
    }
    Ok(groups
        .iter()
        .enumerate()
        .map(|(i, g)| CheckResult {
            name: format!("unified loss via {g} parameters"),
            max_error: worst[i],
            tolerance: COMPOSITE_TOL,
            probes: probes[i],
        })
        .collect())
}

/// Every check of the suite.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = layer_checks(&mut rng)?;
    out.extend(loss_checks(&mut rng)?);
    out.extend(unified_checks(seed, 4)?);
    Ok(out)
}
