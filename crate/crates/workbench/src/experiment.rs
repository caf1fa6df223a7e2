//! Proposal extraction, detection and evaluation over whole datasets.

use mscnn_core::eval::{
    average_precision, dataset_recall, recall_table, recall_vs_budget, recall_vs_iou, HeightBin, ImageProposals, Recall,
    RecallTable, ScoredDetection,
};
use mscnn_core::geometry::{clip, decode_clamped, BBox, RegressionTarget};
use mscnn_core::network::proposals::{decode_predictions, per_class_nms, raw_predictions, select_proposals};
use mscnn_core::network::{Detection, MsCnn};
use mscnn_core::tensor::dense::softmax_row;
use mscnn_core::{Result, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;

/// Initialization generator: the run seed on stream `stream`, so it never
/// overlaps the training stream.
fn init_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A freshly initialized proposal network for `cfg`.
pub fn init_network(cfg: &RunConfig) -> Result<MsCnn> {
    MsCnn::new(cfg.network(), &mut init_rng(cfg.train.seed, 1))
}

/// Attaches a freshly initialized detection head described by `cfg.head`.
pub fn init_head(net: &mut MsCnn, cfg: &RunConfig) -> Result<()> {
    net.attach_head(cfg.head.clone(), &mut init_rng(cfg.train.seed, 2))
}

/// How proposals are ranked and pruned.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProposalSettings {
    pub top_n: usize,
    pub nms_iou: f64,
    pub pre_nms: usize,
}

impl Default for ProposalSettings {
    fn default() -> Self {
        ProposalSettings { top_n: 300, nms_iou: 0.7, pre_nms: 3000 }
    }
}

/// Ranked proposals of every branch alone and of all branches together.
pub fn image_proposals(net: &MsCnn, scene: &Scene, s: &ProposalSettings) -> Result<ImageProposals> {
    let fwd = net.proposal_forward(&scene.image)?;
    let anchors = net.anchors(scene.width(), scene.height());
    let (w, h) = (scene.width() as f64, scene.height() as f64);
    let mut per_branch = Vec::with_capacity(anchors.len());
    let mut all = Vec::new();
    for grid in &anchors {
        let decoded = decode_predictions(&raw_predictions(&fwd, std::slice::from_ref(grid)), w, h);
        per_branch.push(select_proposals(decoded.clone(), s.top_n, s.nms_iou, s.pre_nms).iter().map(|p| p.bbox).collect());
        all.extend(decoded);
    }
    let combined = select_proposals(all, s.top_n, s.nms_iou, s.pre_nms).iter().map(|p| p.bbox).collect();
    Ok(ImageProposals { gts: scene.objects.iter().map(|g| g.bbox).collect(), per_branch, combined })
}

pub fn dataset_proposals(net: &MsCnn, scenes: &[Scene], s: &ProposalSettings) -> Result<Vec<ImageProposals>> {
    scenes.iter().map(|sc| image_proposals(net, sc, s)).collect()
}

/// Recall results of one evaluation run.
#[derive(Clone, Debug)]
pub struct RecallReport {
    pub table: RecallTable,
    pub by_budget: Vec<(usize, Recall)>,
    pub by_iou: Vec<(f64, Recall)>,
    pub at_budget: Recall,
}

pub fn iou_grid() -> Vec<f64> {
    (0..=20).map(|i| 0.5 + i as f64 * 0.025).collect()
}

pub fn recall_report(
    images: &[ImageProposals],
    branch_names: &[String],
    bins: &[HeightBin],
    budgets: &[usize],
    budget: usize,
    iou_t: f64,
) -> Result<RecallReport> {
    Ok(RecallReport {
        table: recall_table(images, branch_names, bins, budget, iou_t)?,
        by_budget: recall_vs_budget(images, budgets, iou_t),
        by_iou: recall_vs_iou(images, budget, &iou_grid()),
        at_budget: dataset_recall(images, budget, iou_t),
    })
}

/// Runs the detection head on the top proposals of each image and returns
/// per-class detections after NMS.
pub fn detect(net: &MsCnn, scene: &Scene, s: &ProposalSettings, min_score: f64, nms_iou: f64) -> Result<Vec<Detection>> {
    let fwd = net.proposal_forward(&scene.image)?;
    let anchors = net.anchors(scene.width(), scene.height());
    let (w, h) = (scene.width() as f64, scene.height() as f64);
    let decoded = decode_predictions(&raw_predictions(&fwd, &anchors), w, h);
    let rois: Vec<BBox> = select_proposals(decoded, s.top_n, s.nms_iou, s.pre_nms).iter().map(|p| p.bbox).collect();
    if rois.is_empty() {
        return Ok(Vec::new());
    }
    let out = net.detection_forward(&fwd, &rois)?;
    let k = net.classes() + 1;
    let mut dets = Vec::new();
    for (i, roi) in rois.iter().enumerate() {
        let p = softmax_row(&out.logits.data()[i * k..(i + 1) * k]);
        let d = &out.deltas.data()[i * 4..(i + 1) * 4];
        let t = RegressionTarget::from_array([d[0], d[1], d[2], d[3]]);
        let Ok(b) = decode_clamped(roi, &t).and_then(|b| clip(&b, w, h)) else { continue };
        for (c, &pc) in p.iter().enumerate().skip(1) {
            if pc >= min_score {
                dets.push(Detection { bbox: b, class: c, score: pc });
            }
        }
    }
    Ok(per_class_nms(dets, nms_iou))
}

/// Per-class AP over a dataset, plus their mean.
pub fn evaluate_ap(
    net: &MsCnn,
    scenes: &[Scene],
    s: &ProposalSettings,
    min_score: f64,
    nms_iou: f64,
    iou_t: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = net.classes();
    let mut dets: Vec<Vec<ScoredDetection>> = vec![Vec::new(); k];
    let mut gts: Vec<Vec<Vec<BBox>>> = vec![vec![Vec::new(); scenes.len()]; k];
    for (i, sc) in scenes.iter().enumerate() {
        for g in &sc.objects {
            gts[g.class - 1][i].push(g.bbox);
        }
        for d in detect(net, sc, s, min_score, nms_iou)? {
            dets[d.class - 1].push(ScoredDetection { image: i, bbox: d.bbox, score: d.score });
        }
    }
    let aps: Vec<f64> = (0..k).map(|c| average_precision(&dets[c], &gts[c], iou_t)).collect();
    let mean = aps.iter().sum::<f64>() / k.max(1) as f64;
    Ok((aps, mean))
}
