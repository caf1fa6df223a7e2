//! Augmentation, SGD and the proposal / joint training procedures.

use crate::anchors::{assign_scale_branch, best_match, Anchor, SampleSet, SamplingStrategy, DEFAULT_GAMMA};
use crate::error::{invalid, Error, Result};
use crate::geometry::{clip, encode, BBox};
use crate::loss::{branch_loss, total_loss, BranchTerms, LossReport, SampleLabel};
use crate::network::{collect_proposals, MsCnn, OutputGrads, ProposalForward};
use crate::tensor::Tensor;
use crate::{GroundTruth, Scene};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct StageConfig {
    pub strategy: SamplingStrategy,
    pub lambda: f64,
    pub iters: usize,
    pub lr: f64,
    /// Iterations between learning-rate decays; 0 disables decay.
    pub decay_every: usize,
    pub decay_factor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointConfig {
    pub iters: usize,
    pub lr: f64,
    pub decay_every: usize,
    pub decay_factor: f64,
    /// Leading trunk stages whose parameters stay fixed.
    pub frozen_stages: usize,
    pub strategy: SamplingStrategy,
    pub lambda: f64,
    /// Weight of the detection term.
    pub alpha_det: f64,
    /// Proposals per image fed to the detection head.
    pub proposals: usize,
    pub nms_iou: f64,
    /// Regions sampled per image for the detection loss.
    pub rois_per_image: usize,
    pub positive_fraction: f64,
    pub fg_iou: f64,
    pub bg_iou_lo: f64,
    /// Train only the detection head on fixed proposal-network features.
    pub head_only: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub joint: JointConfig,
    pub crop_size: usize,
    pub resize_scales: Vec<f64>,
    pub batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub gamma: f64,
    pub seed: u64,
    /// Training aborts once the loss exceeds this multiple of the first iteration's.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            stage1: StageConfig {
                strategy: SamplingStrategy::Random,
                lambda: 0.05,
                iters: 400,
                lr: 0.005,
                decay_every: 0,
                decay_factor: 0.1,
            },
            stage2: StageConfig {
                strategy: SamplingStrategy::Bootstrapping,
                lambda: 1.0,
                iters: 400,
                lr: 0.005,
                decay_every: 300,
                decay_factor: 0.1,
            },
            joint: JointConfig {
                iters: 300,
                lr: 0.002,
                decay_every: 200,
                decay_factor: 0.1,
                frozen_stages: 2,
                strategy: SamplingStrategy::Bootstrapping,
                lambda: 1.0,
                alpha_det: 1.0,
                proposals: 100,
                nms_iou: 0.7,
                rois_per_image: 32,
                positive_fraction: 0.25,
                fg_iou: 0.5,
                bg_iou_lo: 0.1,
                head_only: false,
            },
            crop_size: 256,
            resize_scales: vec![0.75, 1.0, 1.25],
            batch_size: 4,
            momentum: 0.9,
            weight_decay: 0.0,
            gamma: DEFAULT_GAMMA,
            seed: 0,
            divergence_factor: 1e3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("stage1", self.stage1.lr), ("stage2", self.stage2.lr), ("joint", self.joint.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return invalid(format!("{name} learning rate must be positive"));
            }
        }
        if self.batch_size == 0 || self.crop_size < 64 {
            return invalid("batch size must be positive and crop at least 64 pixels");
        }
        if self.resize_scales.is_empty() || self.resize_scales.iter().any(|&s| !(s > 0.0)) {
            return invalid("resize scales must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid("momentum must be in [0, 1)");
        }
        let j = &self.joint;
        if !(j.positive_fraction > 0.0 && j.positive_fraction <= 1.0) || j.rois_per_image == 0 {
            return invalid("joint sampling needs rois_per_image > 0 and positive_fraction in (0, 1]");
        }
        if !(j.bg_iou_lo < j.fg_iou) {
            return invalid("background IoU window must lie below the foreground threshold");
        }
        Ok(())
    }
}

/// Learning rate after `iter` iterations: `base · factor^⌊iter / every⌋`.
pub fn lr_at(base: f64, iter: usize, every: usize, factor: f64) -> f64 {
    if every == 0 {
        base
    } else {
        base * factor.powi((iter / every) as i32)
    }
}

/// Bilinear resize of a `1 × C × H × W` image (pixel-center aligned).
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = image.dims4()?;
    if n != 1 || out_h == 0 || out_w == 0 {
        return invalid("resize expects a single image and a non-empty target");
    }
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let taps = |o: usize, s: f64, len: usize| {
        let src = ((o as f64 + 0.5) * s - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| taps(x, sx, w)).collect();
    let mut out = Tensor::zeros(&[1, c, out_h, out_w]);
    let src = image.data();
    let dst = out.data_mut();
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = taps(oy, sy, h);
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                dst[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(out)
}

/// A cropped training patch.
#[derive(Clone, Debug)]
pub struct AugmentedSample {
    pub patch: Scene,
    pub scale: f64,
    /// Top-left corner of the patch in resized-image pixels.
    pub origin: (usize, usize),
    /// The resized image was smaller than the crop and was padded with its mean.
    pub padded: bool,
}

/// Minimum visible fraction for a cropped ground-truth box to be kept.
pub const MIN_VISIBLE: f64 = 0.5;

/// Resizes by a uniformly chosen scale, then crops a `crop × crop` window
/// containing the center of a uniformly chosen object. Boxes are clipped
/// to the window; those with less than half their area visible are dropped.
pub fn augment<R: Rng + ?Sized>(scene: &Scene, scales: &[f64], crop: usize, rng: &mut R) -> Result<AugmentedSample> {
    if scene.objects.is_empty() {
        return invalid("augmentation crops around objects; scene has none");
    }
    let scale = *scales.choose(rng).ok_or_else(|| Error::Invalid("no resize scales".into()))?;
    let (w, h) = (scene.width(), scene.height());
    let nw = ((w as f64 * scale).round() as usize).max(1);
    let nh = ((h as f64 * scale).round() as usize).max(1);
    let resized = if (nw, nh) == (w, h) { scene.image.clone() } else { resize_bilinear(&scene.image, nh, nw)? };
    let (fx, fy) = (nw as f64 / w as f64, nh as f64 / h as f64);
    let boxes: Vec<BBox> = scene
        .objects
        .iter()
        .map(|g| BBox::new(g.bbox.cx * fx, g.bbox.cy * fy, g.bbox.w * fx, g.bbox.h * fy))
        .collect();
    let anchor = boxes[rng.gen_range(0..boxes.len())];
    let origin_range = |center: f64, len: usize| -> (usize, usize) {
        if len <= crop {
            return (0, 0);
        }
        let hi = (center.floor().max(0.0) as usize).min(len - crop);
        let lo = ((center - crop as f64).floor() + 1.0).max(0.0) as usize;
        (lo.min(hi), hi)
    };
    let (xlo, xhi) = origin_range(anchor.cx, nw);
    let (ylo, yhi) = origin_range(anchor.cy, nh);
    let x0 = rng.gen_range(xlo..=xhi);
    let y0 = rng.gen_range(ylo..=yhi);
    let padded = nw < crop || nh < crop;

    let c = resized.shape()[1];
    let mut patch = Tensor::zeros(&[1, c, crop, crop]);
    let src = resized.data();
    for ch in 0..c {
        let plane = &src[ch * nh * nw..(ch + 1) * nh * nw];
        let mean = plane.iter().sum::<f64>() / plane.len() as f64;
        let dst = &mut patch.data_mut()[ch * crop * crop..(ch + 1) * crop * crop];
        for y in 0..crop {
            for x in 0..crop {
                let (sx, sy) = (x0 + x, y0 + y);
                dst[y * crop + x] = if sx < nw && sy < nh { plane[sy * nw + sx] } else { mean };
            }
        }
    }
    let mut objects = Vec::new();
    for (g, b) in scene.objects.iter().zip(&boxes) {
        let shifted = BBox::new(b.cx - x0 as f64, b.cy - y0 as f64, b.w, b.h);
        let Ok(visible) = clip(&shifted, crop.min(nw - x0) as f64, crop.min(nh - y0) as f64) else { continue };
        if visible.area() >= MIN_VISIBLE * shifted.area() {
            objects.push(GroundTruth { class: g.class, bbox: visible });
        }
    }
    Ok(AugmentedSample { patch: Scene { image: patch, objects }, scale, origin: (x0, y0), padded })
}

/// `v ← μv − lr·(g + wd·p); p ← p + v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return invalid("sgd_step: parameter, gradient and velocity lengths differ");
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("gradient"));
    }
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v - lr * (g + weight_decay * *p);
        *p += *v;
    }
    Ok(())
}

/// Momentum SGD over a network's named parameters.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<(String, Vec<f64>)>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Sgd {
        Sgd { momentum, weight_decay, velocity: Vec::new() }
    }

    /// Applies accumulated gradients and clears them. Parameters of the
    /// first `frozen_convs` trunk convolutions and architecturally fixed
    /// ones are left untouched. Any non-finite gradient aborts the whole
    /// step before anything is modified.
    pub fn step(&mut self, net: &mut MsCnn, lr: f64, frozen_convs: usize) -> Result<()> {
        let fixed: Vec<bool> = net
            .params()
            .iter()
            .map(|(n, _)| net.is_fixed(n) || MsCnn::trunk_conv_index(n).is_some_and(|i| i < frozen_convs))
            .collect();
        let mut params = net.params_mut();
        for (_, p) in params.iter() {
            if p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFinite("gradient"));
            }
        }
        if self.velocity.len() != params.len() {
            self.velocity = params.iter().map(|(n, p)| (n.clone(), vec![0.0; p.numel()])).collect();
        }
        for (((name, p), frozen), (vname, v)) in params.iter_mut().zip(&fixed).zip(self.velocity.iter_mut()) {
            if name != vname || v.len() != p.numel() {
                return invalid(format!("optimizer state for {vname} does not match parameter {name}"));
            }
            if !*frozen {
                if let Some(g) = p.grad().map(<[f64]>::to_vec) {
                    sgd_step(p.data_mut(), &g, v, lr, self.momentum, self.weight_decay)?;
                }
            }
            p.clear_grad();
        }
        Ok(())
    }
}

/// Sampling and weighting of the proposal-network loss.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalObjective {
    pub strategy: SamplingStrategy,
    pub lambda: f64,
    pub gamma: f64,
}

/// Sampled anchors of one branch with their training labels.
pub type BranchSamples = Vec<(Anchor, SampleLabel)>;

/// Labels every branch's anchors against the ground truth and draws the
/// per-branch sample sets.
pub fn draw_branch_samples<R: Rng + ?Sized>(
    net: &MsCnn,
    fwd: &ProposalForward,
    scene: &Scene,
    obj: &ProposalObjective,
    rng: &mut R,
) -> Result<Vec<BranchSamples>> {
    let anchors = net.anchors(scene.width(), scene.height());
    let configs: Vec<_> = net.branches.iter().map(|b| b.config.clone()).collect();
    let gt_branch: Vec<usize> = scene.objects.iter().map(|g| assign_scale_branch(&g.bbox, &configs)).collect();
    let mut out = Vec::with_capacity(configs.len());
    for (m, grid) in anchors.iter().enumerate() {
        let labeling = crate::anchors::label_anchors_for_branch(grid, &scene.objects, &gt_branch, m)?;
        let scores: Option<Vec<f64>> = match obj.strategy {
            SamplingStrategy::Random => None,
            _ => Some(labeling.negatives.iter().map(|s| fwd.objectness(&grid[s.anchor_index])).collect()),
        };
        let set = SampleSet::draw(&labeling, scores.as_deref(), obj.strategy, obj.gamma, rng)?;
        out.push(
            set.positives
                .iter()
                .chain(&set.negatives)
                .map(|s| (grid[s.anchor_index], SampleLabel { class: s.class, target: s.target }))
                .collect(),
        );
    }
    Ok(out)
}

/// Loss terms of fixed sample sets and the gradient w.r.t. the branch
/// outputs, scaled by `scale · α_m`.
pub fn branch_sample_loss(
    net: &MsCnn,
    fwd: &ProposalForward,
    samples: &[BranchSamples],
    obj: &ProposalObjective,
    scale: f64,
) -> Result<(Vec<BranchTerms>, OutputGrads)> {
    let mut grads = OutputGrads::zeros_like(fwd);
    let k = net.classes() + 1;
    let mut terms = Vec::with_capacity(samples.len());
    for (set, branch) in samples.iter().zip(&net.branches) {
        let mut labels = Vec::with_capacity(set.len());
        let mut logits = Vec::with_capacity(set.len() * k);
        let mut deltas = Vec::with_capacity(set.len() * 4);
        for (a, label) in set {
            labels.push(*label);
            logits.extend(fwd.logits(a));
            deltas.extend(fwd.deltas(a));
        }
        let bl = branch_loss(&labels, &logits, k, &deltas, obj.lambda, obj.gamma)?;
        for (i, (a, _)) in set.iter().enumerate() {
            grads.add(a, &bl.d_logits[i * k..(i + 1) * k], &bl.d_deltas[i * 4..(i + 1) * 4], scale * branch.config.alpha);
        }
        terms.push(bl.terms);
    }
    Ok((terms, grads))
}

/// Proposal-network loss of one image and the gradient w.r.t. its branch
/// outputs, scaled by `scale`.
pub fn proposal_loss<R: Rng + ?Sized>(
    net: &MsCnn,
    scene: &Scene,
    obj: &ProposalObjective,
    scale: f64,
    rng: &mut R,
) -> Result<(Vec<BranchTerms>, ProposalForward, OutputGrads)> {
    let fwd = net.proposal_forward(&scene.image)?;
    let samples = draw_branch_samples(net, &fwd, scene, obj, rng)?;
    let (terms, grads) = branch_sample_loss(net, &fwd, &samples, obj, scale)?;
    Ok((terms, fwd, grads))
}

/// Labeled regions for the detection loss.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RoiSamples {
    pub rois: Vec<BBox>,
    pub labels: Vec<SampleLabel>,
}

/// Labels candidate regions against the ground truth (IoU ≥ `fg_iou`
/// object, `[bg_lo, fg_iou)` background, otherwise unused) and samples at
/// most `count` of them with at most `positive_fraction` objects.
pub fn sample_rois<R: Rng + ?Sized>(
    candidates: &[BBox],
    gts: &[GroundTruth],
    cfg: &JointConfig,
    rng: &mut R,
) -> Result<RoiSamples> {
    let mut pos = Vec::new();
    let mut negs = Vec::new();
    for r in candidates {
        match best_match(r, gts) {
            Some((gi, o)) if o >= cfg.fg_iou => pos.push((
                *r,
                SampleLabel { class: gts[gi].class, target: Some(encode(r, &gts[gi].bbox)?) },
            )),
            Some((_, o)) if o >= cfg.bg_iou_lo => negs.push(*r),
            Some(_) => {}
            None => negs.push(*r),
        }
    }
    let max_pos = ((cfg.rois_per_image as f64 * cfg.positive_fraction).round() as usize).max(1);
    let n_pos = pos.len().min(max_pos);
    let n_neg = negs.len().min(cfg.rois_per_image - n_pos.min(cfg.rois_per_image));
    let mut pi = rand::seq::index::sample(rng, pos.len(), n_pos).into_vec();
    let mut ni = rand::seq::index::sample(rng, negs.len(), n_neg).into_vec();
    pi.sort_unstable();
    ni.sort_unstable();
    let mut out = RoiSamples::default();
    for i in pi {
        out.rois.push(pos[i].0);
        out.labels.push(pos[i].1);
    }
    for i in ni {
        out.rois.push(negs[i]);
        out.labels.push(SampleLabel { class: 0, target: None });
    }
    Ok(out)
}

/// Per-image loss terms of one training step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTerms {
    pub branches: Vec<BranchTerms>,
    pub detection: Option<BranchTerms>,
}

/// Forward and backward for one image under the proposal objective, or the
/// unified objective when `joint` is given. Gradients are scaled by
/// `scale` and accumulated into the network.
pub fn accumulate_image<R: Rng + ?Sized>(
    net: &mut MsCnn,
    scene: &Scene,
    obj: &ProposalObjective,
    joint: Option<&JointConfig>,
    scale: f64,
    frozen_convs: usize,
    rng: &mut R,
) -> Result<StepTerms> {
    let (branches, fwd, grads) = proposal_loss(net, scene, obj, scale, rng)?;
    let Some(j) = joint else {
        net.proposal_backward(&fwd, &grads, None, frozen_convs)?;
        return Ok(StepTerms { branches, detection: None });
    };
    let anchors = net.anchors(scene.width(), scene.height());
    let mut candidates: Vec<BBox> = collect_proposals(&fwd, &anchors, j.proposals, j.nms_iou, 4 * j.proposals.max(500))
        .into_iter()
        .map(|p| p.bbox)
        .collect();
    let (w, h) = (scene.width() as f64, scene.height() as f64);
    candidates.extend(scene.objects.iter().filter_map(|g| clip(&g.bbox, w, h).ok()));
    let rs = sample_rois(&candidates, &scene.objects, j, rng)?;
    if rs.rois.is_empty() {
        if !j.head_only {
            net.proposal_backward(&fwd, &grads, None, frozen_convs)?;
        }
        return Ok(StepTerms { branches, detection: Some(BranchTerms { lambda: 1.0, ..Default::default() }) });
    }
    let hf = net.detection_forward(&fwd, &rs.rois)?;
    let k = net.classes() + 1;
    let bl = branch_loss(&rs.labels, hf.logits.data(), k, hf.deltas.data(), 1.0, obj.gamma)?;
    let s = scale * j.alpha_det;
    let dl: Vec<f64> = bl.d_logits.iter().map(|g| g * s).collect();
    let dd: Vec<f64> = bl.d_deltas.iter().map(|g| g * s).collect();
    let dtap = net.detection_backward(&fwd, &hf, &dl, &dd)?;
    if !j.head_only {
        net.proposal_backward(&fwd, &grads, Some(&dtap), frozen_convs)?;
    }
    Ok(StepTerms { branches, detection: Some(bl.terms) })
}

/// Averages per-image terms into a loss report.
pub fn batch_report(net: &MsCnn, terms: &[StepTerms], alpha_det: f64) -> Result<LossReport> {
    let reports = terms
        .iter()
        .map(|t| total_loss(&t.branches, &net.alphas(), t.detection, alpha_det))
        .collect::<Result<Vec<_>>>()?;
    LossReport::mean(&reports).ok_or_else(|| Error::Invalid("empty batch".into()))
}

/// One SGD iteration on `scenes` (already augmented). Returns the batch-mean loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<R: Rng + ?Sized>(
    net: &mut MsCnn,
    sgd: &mut Sgd,
    scenes: &[Scene],
    obj: &ProposalObjective,
    joint: Option<&JointConfig>,
    lr: f64,
    frozen_convs: usize,
    rng: &mut R,
) -> Result<LossReport> {
    net.zero_grads();
    let scale = 1.0 / scenes.len() as f64;
    let mut terms = Vec::with_capacity(scenes.len());
    for s in scenes {
        terms.push(accumulate_image(net, s, obj, joint, scale, frozen_convs, rng)?);
    }
    let report = batch_report(net, &terms, joint.map_or(0.0, |j| j.alpha_det))?;
    if !report.total.is_finite() {
        return Err(Error::NonFinite("training loss"));
    }
    sgd.step(net, lr, frozen_convs)?;
    Ok(report)
}

/// One logged iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub stage: &'static str,
    pub lr: f64,
    pub strategy: SamplingStrategy,
    pub report: LossReport,
}

impl LogRow {
    pub fn csv_header(branch_names: &[String], detection: bool) -> String {
        let mut cols = vec!["iteration".to_string(), "stage".into(), "strategy".into(), "lr".into(), "total".into()];
        for n in branch_names {
            cols.extend([format!("{n}_cls"), format!("{n}_loc"), format!("{n}_pos"), format!("{n}_neg")]);
        }
        if detection {
            cols.extend(["det_cls".into(), "det_loc".into(), "det_pos".into(), "det_neg".into()]);
        }
        cols.join(",")
    }

    pub fn csv_line(&self, detection: bool) -> String {
        let mut cols = vec![
            self.iteration.to_string(),
            self.stage.to_string(),
            self.strategy.name().to_string(),
            format!("{:e}", self.lr),
            format!("{:e}", self.report.total),
        ];
        let push = |cols: &mut Vec<String>, t: &BranchTerms| {
            cols.extend([format!("{:e}", t.cls), format!("{:e}", t.loc), t.num_pos.to_string(), t.num_neg.to_string()]);
        };
        for w in &self.report.per_branch {
            push(&mut cols, &w.terms);
        }
        if detection {
            push(&mut cols, &self.report.detection.map(|w| w.terms).unwrap_or_default());
        }
        cols.join(",")
    }
}

/// Cycles through scene indices in seeded random order.
struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize) -> BatchSampler {
        BatchSampler { order: (0..n).collect(), pos: n }
    }

    fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> usize {
        if self.pos >= self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Called after every iteration with the logged row and the updated network.
pub type Observer<'a> = dyn FnMut(&LogRow, &MsCnn) -> Result<()> + 'a;

struct Phase<'a> {
    stage: &'static str,
    iters: usize,
    lr: f64,
    decay_every: usize,
    decay_factor: f64,
    obj: ProposalObjective,
    joint: Option<&'a JointConfig>,
    frozen_convs: usize,
}

fn run_phases(
    net: &mut MsCnn,
    data: &[Scene],
    cfg: &TrainConfig,
    phases: &[Phase],
    observer: &mut Observer,
) -> Result<Vec<LogRow>> {
    cfg.validate()?;
    let usable: Vec<usize> = (0..data.len()).filter(|&i| !data[i].objects.is_empty()).collect();
    if usable.is_empty() {
        return invalid("training needs at least one scene with objects");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sampler = BatchSampler::new(usable.len());
    let mut sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
    let mut log = Vec::new();
    let mut initial: Option<f64> = None;
    let mut iteration = 0;
    for ph in phases {
        for it in 0..ph.iters {
            let lr = lr_at(ph.lr, it, ph.decay_every, ph.decay_factor);
            let mut batch = Vec::with_capacity(cfg.batch_size);
            for _ in 0..cfg.batch_size {
                let scene = &data[usable[sampler.next(&mut rng)]];
                batch.push(augment(scene, &cfg.resize_scales, cfg.crop_size, &mut rng)?.patch);
            }
            let report = train_step(net, &mut sgd, &batch, &ph.obj, ph.joint, lr, ph.frozen_convs, &mut rng)?;
            let base = *initial.get_or_insert(report.total);
            let limit = cfg.divergence_factor * base;
            if report.total > limit {
                return Err(Error::Diverged { iteration, loss: report.total, limit });
            }
            let row = LogRow { iteration, stage: ph.stage, lr, strategy: ph.obj.strategy, report };
            observer(&row, net)?;
            log.push(row);
            iteration += 1;
        }
    }
    Ok(log)
}

/// Two-stage proposal-network training: random sampling with the stage-1
/// λ, then bootstrapped sampling with the stage-2 λ.
pub fn train_proposal(net: &mut MsCnn, data: &[Scene], cfg: &TrainConfig, observer: &mut Observer) -> Result<Vec<LogRow>> {
    let phase = |stage, s: &StageConfig| Phase {
        stage,
        iters: s.iters,
        lr: s.lr,
        decay_every: s.decay_every,
        decay_factor: s.decay_factor,
        obj: ProposalObjective { strategy: s.strategy, lambda: s.lambda, gamma: cfg.gamma },
        joint: None,
        frozen_convs: 0,
    };
    run_phases(net, data, cfg, &[phase("stage1", &cfg.stage1), phase("stage2", &cfg.stage2)], observer)
}

/// Joint optimization of proposal branches and detection head, starting
/// from a trained proposal network. The network must have a head.
pub fn train_joint(net: &mut MsCnn, data: &[Scene], cfg: &TrainConfig, observer: &mut Observer) -> Result<Vec<LogRow>> {
    net.head()?;
    let j = &cfg.joint;
    let frozen_convs = net.trunk.convs_in_stages(j.frozen_stages);
    let phase = Phase {
        stage: "joint",
        iters: j.iters,
        lr: j.lr,
        decay_every: j.decay_every,
        decay_factor: j.decay_factor,
        obj: ProposalObjective { strategy: j.strategy, lambda: j.lambda, gamma: cfg.gamma },
        joint: Some(j),
        frozen_convs,
    };
    run_phases(net, data, cfg, &[phase], observer)
}

/// A no-op observer.
pub fn ignore(_: &LogRow, _: &MsCnn) -> Result<()> {
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        assert_eq!(lr_at(0.01, 0, 100, 0.1), 0.01);
        assert_eq!(lr_at(0.01, 99, 100, 0.1), 0.01);
        assert!((lr_at(0.01, 100, 100, 0.1) - 0.001).abs() < 1e-18);
        assert!((lr_at(0.01, 250, 100, 0.1) - 0.0001).abs() < 1e-18);
        assert_eq!(lr_at(0.01, 10_000, 0, 0.1), 0.01);
    }

    #[test]
    fn sgd_zero_gradient_and_vanilla() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0, 0.0];
        sgd_step(&mut p, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        sgd_step(&mut p, &[1.0, 2.0], &mut v, 0.1, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![0.9, -2.2]);
        assert!(sgd_step(&mut p, &[f64::NAN, 0.0], &mut v, 0.1, 0.0, 0.0).is_err());
    }

    #[test]
    fn sgd_quadratic_closed_form() {
        // f(p) = a/2 p², g = a p.
        let (a, lr, mu, p0) = (2.0, 0.1, 0.9, 1.0);
        let mut p = vec![p0];
        let mut v = vec![0.0];
        let g = [a * p[0]];
        sgd_step(&mut p, &g, &mut v, lr, mu, 0.0).unwrap();
        let g = [a * p[0]];
        sgd_step(&mut p, &g, &mut v, lr, mu, 0.0).unwrap();
        let v1 = -lr * a * p0;
        let p1 = p0 + v1;
        let v2 = mu * v1 - lr * a * p1;
        let p2 = p1 + v2;
        assert!((p[0] - p2).abs() < 1e-15);
    }

    #[test]
    fn resize_identity_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let img = Tensor::uniform(&[1, 2, 5, 7], 0.0, 1.0, &mut rng);
        assert_eq!(resize_bilinear(&img, 5, 7).unwrap().data(), img.data());
        let c = Tensor::full(&[1, 1, 4, 4], 0.3);
        assert!(resize_bilinear(&c, 9, 6).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    fn scene(w: usize, h: usize, boxes: &[BBox]) -> Scene {
        Scene {
            image: Tensor::zeros(&[1, 1, h, w]),
            objects: boxes.iter().map(|&b| GroundTruth { class: 1, bbox: b }).collect(),
        }
    }

    #[test]
    fn unit_scale_crop_only_translates() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = BBox::from_corners(100.0, 120.0, 140.0, 150.0);
        let s = scene(300, 300, &[b]);
        let a = augment(&s, &[1.0], 256, &mut rng).unwrap();
        let (x0, y0) = a.origin;
        let g = a.patch.objects[0].bbox;
        assert_eq!(g, BBox::new(b.cx - x0 as f64, b.cy - y0 as f64, b.w, b.h));
    }

    #[test]
    fn scale_two_doubles_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = BBox::from_corners(40.0, 40.0, 60.0, 70.0);
        let s = scene(200, 200, &[b]);
        let a = augment(&s, &[2.0], 400, &mut rng).unwrap();
        let g = a.patch.objects[0].bbox;
        assert_eq!((g.w, g.h), (40.0, 60.0));
    }

    #[test]
    fn small_image_is_padded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = scene(100, 80, &[BBox::from_corners(10.0, 10.0, 30.0, 30.0)]);
        let a = augment(&s, &[1.0], 128, &mut rng).unwrap();
        assert!(a.padded);
        assert_eq!(a.patch.image.shape(), &[1, 1, 128, 128]);
    }

    #[test]
    fn augmented_centers_stay_inside() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..1000 {
            let w = 150 + (i * 37) % 300;
            let h = 150 + (i * 53) % 300;
            let mut boxes = Vec::new();
            for k in 0..3 {
                let x = rng.gen_range(0.0..w as f64 - 20.0);
                let y = rng.gen_range(0.0..h as f64 - 20.0);
                let bw = rng.gen_range(10.0..(w as f64 - x).min(200.0) + 10.0);
                let bh = rng.gen_range(10.0..(h as f64 - y).min(200.0) + 10.0);
                boxes.push(BBox::from_corners(x, y, (x + bw).min(w as f64), (y + bh).min(h as f64)));
                let _ = k;
            }
            let a = augment(&scene(w, h, &boxes), &[0.5, 1.0, 1.5], 128, &mut rng).unwrap();
            for g in &a.patch.objects {
                assert!(g.bbox.cx >= 0.0 && g.bbox.cx <= 128.0 && g.bbox.cy >= 0.0 && g.bbox.cy <= 128.0);
                let (x1, y1, x2, y2) = g.bbox.corners();
                assert!(x1 >= -1e-9 && y1 >= -1e-9 && x2 <= 128.0 + 1e-9 && y2 <= 128.0 + 1e-9);
            }
        }
    }

    #[test]
    fn roi_sampling_respects_windows_and_quota() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gts = vec![GroundTruth { class: 2, bbox: BBox::from_corners(0.0, 0.0, 100.0, 100.0) }];
        let cfg = TrainConfig::default().joint;
        let mut cands = Vec::new();
        for i in 0..40 {
            let s = 60.0 + i as f64 * 2.0;
            cands.push(BBox::from_corners(0.0, 0.0, s, s));
            cands.push(BBox::from_corners(150.0 + i as f64, 150.0, 200.0 + i as f64, 200.0));
        }
        let rs = sample_rois(&cands, &gts, &cfg, &mut rng).unwrap();
        assert!(rs.rois.len() <= cfg.rois_per_image);
        let npos = rs.labels.iter().filter(|l| l.class > 0).count();
        assert!(npos <= 8 && npos > 0);
        for (r, l) in rs.rois.iter().zip(&rs.labels) {
            let o = crate::geometry::iou(r, &gts[0].bbox);
            if l.class > 0 {
                assert!(o >= 0.5 && l.class == 2);
            } else {
                assert!((0.1..0.5).contains(&o));
            }
        }
    }
}
