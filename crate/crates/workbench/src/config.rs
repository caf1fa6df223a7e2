//! Run configuration: flat sectioned `key = value` text.
//!
//! ```text
//! # comment
//! [run]
//! profile = car
//! seed = 0
//! [branch det-8]
//! stride = 8
//! filters = 5x5,7x7
//! anchors = 20x20,28x28
//! alpha = 0.9
//! ```
//!
//! Every key has a default; unknown sections and keys are errors.
//! `[branch NAME]` sections, when present, replace the profile's branch rows.

use crate::dataset::Source;
use crate::experiment::ProposalSettings;
use crate::synth::{SynthSpec, SYNTH_CLASSES};
use mscnn_core::anchors::{BranchConfig, Profile, SamplingStrategy};
use mscnn_core::eval::HeightBin;
use mscnn_core::network::{format_stages, parse_stages, DeconvMode, HeadConfig, NetworkConfig, StageSpec, TrunkSpec};
use mscnn_core::train::{StageConfig, TrainConfig};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
#[error("config line {line}: {message}")]
pub struct ConfigError {
    pub line: usize,
    pub message: String,
}

fn err<T>(line: usize, message: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError { line, message: message.into() })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: Source,
    /// Directory with `image_2/` and `label_2/`; synthetic data is generated
    /// in memory when unset.
    pub train_dir: Option<PathBuf>,
    pub val_dir: Option<PathBuf>,
    /// Per-channel mean subtracted after scaling pixels to [0, 1].
    pub mean: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub iou: f64,
    pub budget: usize,
    pub budgets: Vec<usize>,
    pub bins: Vec<HeightBin>,
    pub ap_iou: f64,
    pub min_score: f64,
    pub detect_nms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub profile: Profile,
    pub classes: Vec<String>,
    pub in_channels: usize,
    pub trunk: Vec<StageSpec>,
    pub buffer_conv: bool,
    /// Multiplier on the profile's anchor sizes.
    pub anchor_scale: f64,
    /// Explicit branch rows; the scaled profile rows when `None`.
    pub branches: Option<Vec<BranchConfig>>,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SynthSpec,
    pub val_images: usize,
    pub val_seed: u64,
    pub proposals: ProposalSettings,
    pub eval: EvalConfig,
    /// Iterations between intermediate checkpoints; 0 saves only the final one.
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let profile = Profile::Car;
        RunConfig {
            profile,
            classes: SYNTH_CLASSES.iter().map(|s| s.to_string()).collect(),
            in_channels: 3,
            trunk: TrunkSpec::desk(3).stages,
            buffer_conv: true,
            anchor_scale: 0.5,
            branches: None,
            head: HeadConfig {
                roi: profile.roi_size(),
                fc_width: 128,
                context: true,
                context_scale: 1.5,
                deconv: DeconvMode::Bilinear,
            },
            train: TrainConfig::default(),
            data: DataConfig { source: Source::Synthetic, train_dir: None, val_dir: None, mean: vec![0.5; 3] },
            synthetic: SynthSpec::default(),
            val_images: 100,
            val_seed: 1,
            proposals: ProposalSettings { top_n: 100, nms_iou: 0.7, pre_nms: 3000 },
            eval: EvalConfig {
                iou: 0.5,
                budget: 100,
                budgets: vec![1, 5, 10, 20, 50, 100, 200, 300],
                bins: octave_bins(),
                ap_iou: 0.5,
                min_score: 0.01,
                detect_nms: 0.5,
            },
            checkpoint_every: 0,
        }
    }
}

/// Height bins matching the synthetic octaves: [20,40), [40,80), [80,160), [160,∞).
pub fn octave_bins() -> Vec<HeightBin> {
    vec![
        HeightBin { lo: 20.0, hi: 40.0 },
        HeightBin { lo: 40.0, hi: 80.0 },
        HeightBin { lo: 80.0, hi: 160.0 },
        HeightBin { lo: 160.0, hi: f64::INFINITY },
    ]
}

impl RunConfig {
    pub fn branch_rows(&self) -> Vec<BranchConfig> {
        match &self.branches {
            Some(b) => b.clone(),
            None => self.profile.branches().iter().map(|b| b.with_anchor_scale(self.anchor_scale)).collect(),
        }
    }

    /// The proposal network (no detection head).
    pub fn network(&self) -> NetworkConfig {
        NetworkConfig {
            trunk: TrunkSpec { in_channels: self.in_channels, stages: self.trunk.clone() },
            branches: self.branch_rows(),
            classes: self.classes.len(),
            buffer_conv: self.buffer_conv,
            head: None,
        }
    }

    pub fn synthetic_val(&self) -> SynthSpec {
        SynthSpec { images: self.val_images, seed: self.val_seed, ..self.synthetic.clone() }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.classes.is_empty() {
            return Err("at least one class required".into());
        }
        if !(self.anchor_scale > 0.0) {
            return Err("anchor_scale must be positive".into());
        }
        if self.data.mean.len() != self.in_channels {
            return Err(format!("mean has {} values for {} channels", self.data.mean.len(), self.in_channels));
        }
        if !(self.eval.iou > 0.0 && self.eval.iou < 1.0) || !(self.eval.ap_iou > 0.0 && self.eval.ap_iou < 1.0) {
            return Err("IoU thresholds must lie in (0, 1)".into());
        }
        if self.synthetic.min_height <= 0.0 || self.synthetic.max_height < self.synthetic.min_height {
            return Err("synthetic height range is empty".into());
        }
        let spec = mscnn_core::eval::RecallSpec {
            iou_threshold: self.eval.iou,
            budgets: self.eval.budgets.clone(),
            height_bins: self.eval.bins.clone(),
        };
        spec.validate().map_err(|e| e.to_string())?;
        self.network().validate().map_err(|e| e.to_string())?;
        self.head.validate().map_err(|e| e.to_string())?;
        self.train.validate().map_err(|e| e.to_string())
    }

    pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Ok(RunConfig::parse(&text)?)
    }

    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let sections = split_sections(text)?;
        let mut cfg = RunConfig::default();
        let mut branches = Vec::new();
        for mut sec in sections {
            let line = sec.line;
            match sec.name.as_str() {
                "run" => {
                    if let Some((v, l)) = sec.take("profile") {
                        cfg.profile = Profile::parse(v).or_else(|e| err(l, e.to_string()))?;
                    }
                    sec.num("seed", &mut cfg.train.seed)?;
                }
                "model" => {
                    if let Some((v, _)) = sec.take("classes") {
                        cfg.classes = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
                    }
                    sec.num("in_channels", &mut cfg.in_channels)?;
                    if let Some((v, l)) = sec.take("trunk") {
                        cfg.trunk = parse_stages(v).or_else(|e| err(l, e.to_string()))?;
                    }
                    sec.num("buffer_conv", &mut cfg.buffer_conv)?;
                    sec.num("anchor_scale", &mut cfg.anchor_scale)?;
                }
                "head" => {
                    if let Some((v, l)) = sec.take("roi") {
                        cfg.head.roi = parse_pair(v).ok_or(()).or_else(|_| err(l, format!("bad roi {v:?}")))?;
                    }
                    sec.num("fc", &mut cfg.head.fc_width)?;
                    sec.num("context", &mut cfg.head.context)?;
                    sec.num("context_scale", &mut cfg.head.context_scale)?;
                    if let Some((v, l)) = sec.take("deconv") {
                        cfg.head.deconv = DeconvMode::parse(v).or_else(|e| err(l, e.to_string()))?;
                    }
                }
                "data" => {
                    if let Some((v, l)) = sec.take("source") {
                        cfg.data.source = match v {
                            "kitti" => Source::Kitti,
                            "synthetic" => Source::Synthetic,
                            _ => return err(l, format!("unknown source {v:?} (kitti|synthetic)")),
                        };
                    }
                    if let Some((v, _)) = sec.take("train_dir") {
                        cfg.data.train_dir = Some(PathBuf::from(v));
                    }
                    if let Some((v, _)) = sec.take("val_dir") {
                        cfg.data.val_dir = Some(PathBuf::from(v));
                    }
                    sec.list("mean", &mut cfg.data.mean)?;
                }
                "synthetic" => {
                    let s = &mut cfg.synthetic;
                    sec.num("images", &mut s.images)?;
                    sec.num("size", &mut s.size)?;
                    sec.num("min_height", &mut s.min_height)?;
                    sec.num("max_height", &mut s.max_height)?;
                    sec.num("max_objects", &mut s.max_objects)?;
                    sec.num("seed", &mut s.seed)?;
                    sec.num("val_images", &mut cfg.val_images)?;
                    sec.num("val_seed", &mut cfg.val_seed)?;
                }
                "train" => {
                    let t = &mut cfg.train;
                    sec.num("crop_size", &mut t.crop_size)?;
                    sec.list("resize_scales", &mut t.resize_scales)?;
                    sec.num("batch_size", &mut t.batch_size)?;
                    sec.num("momentum", &mut t.momentum)?;
                    sec.num("weight_decay", &mut t.weight_decay)?;
                    sec.num("gamma", &mut t.gamma)?;
                    sec.num("divergence_factor", &mut t.divergence_factor)?;
                    sec.num("checkpoint_every", &mut cfg.checkpoint_every)?;
                }
                "stage1" => stage_keys(&mut sec, &mut cfg.train.stage1)?,
                "stage2" => stage_keys(&mut sec, &mut cfg.train.stage2)?,
                "joint" => {
                    let j = &mut cfg.train.joint;
                    sec.num("iters", &mut j.iters)?;
                    sec.num("lr", &mut j.lr)?;
                    sec.num("decay_every", &mut j.decay_every)?;
                    sec.num("decay_factor", &mut j.decay_factor)?;
                    sec.num("frozen_stages", &mut j.frozen_stages)?;
                    sec.strategy("strategy", &mut j.strategy)?;
                    sec.num("lambda", &mut j.lambda)?;
                    sec.num("alpha_det", &mut j.alpha_det)?;
                    sec.num("proposals", &mut j.proposals)?;
                    sec.num("nms_iou", &mut j.nms_iou)?;
                    sec.num("rois_per_image", &mut j.rois_per_image)?;
                    sec.num("positive_fraction", &mut j.positive_fraction)?;
                    sec.num("fg_iou", &mut j.fg_iou)?;
                    sec.num("bg_iou_lo", &mut j.bg_iou_lo)?;
                    sec.num("head_only", &mut j.head_only)?;
                }
                "proposals" => {
                    sec.num("top_n", &mut cfg.proposals.top_n)?;
                    sec.num("nms_iou", &mut cfg.proposals.nms_iou)?;
                    sec.num("pre_nms", &mut cfg.proposals.pre_nms)?;
                }
                "eval" => {
                    let e = &mut cfg.eval;
                    sec.num("iou", &mut e.iou)?;
                    sec.num("budget", &mut e.budget)?;
                    sec.list("budgets", &mut e.budgets)?;
                    if let Some((v, l)) = sec.take("bins") {
                        e.bins = parse_bins(v).ok_or(()).or_else(|_| err(l, format!("bad bins {v:?}")))?;
                    }
                    sec.num("ap_iou", &mut e.ap_iou)?;
                    sec.num("min_score", &mut e.min_score)?;
                    sec.num("detect_nms", &mut e.detect_nms)?;
                }
                name if name.starts_with("branch ") => {
                    let mut b = BranchConfig {
                        name: name["branch ".len()..].trim().to_string(),
                        stride: 0,
                        filter_sizes: Vec::new(),
                        anchor_sizes: Vec::new(),
                        alpha: 1.0,
                    };
                    sec.num("stride", &mut b.stride)?;
                    if let Some((v, l)) = sec.take("filters") {
                        b.filter_sizes = parse_pairs(v).ok_or(()).or_else(|_| err(l, format!("bad filters {v:?}")))?;
                    }
                    // Anchors are written height x width like the filters.
                    if let Some((v, l)) = sec.take("anchors") {
                        let hw: Vec<(f64, f64)> =
                            parse_pairs(v).ok_or(()).or_else(|_| err(l, format!("bad anchors {v:?}")))?;
                        b.anchor_sizes = hw.into_iter().map(|(h, w)| (w, h)).collect();
                    }
                    sec.num("alpha", &mut b.alpha)?;
                    b.validate().or_else(|e| err(line, e.to_string()))?;
                    branches.push(b);
                }
                other => return err(line, format!("unknown section [{other}]")),
            }
            sec.finish()?;
        }
        if !branches.is_empty() {
            cfg.branches = Some(branches);
        }
        cfg.validate().or_else(|e| err(0, e))?;
        Ok(cfg)
    }

    /// Canonical text form; `parse(to_text(c)) == c`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let w = &mut s;
        let join = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let t = &self.train;
        let _ = writeln!(w, "[run]\nprofile = {}\nseed = {}\n", self.profile.name(), t.seed);
        let _ = writeln!(
            w,
            "[model]\nclasses = {}\nin_channels = {}\ntrunk = {}\nbuffer_conv = {}\nanchor_scale = {}\n",
            self.classes.join(","),
            self.in_channels,
            format_stages(&self.trunk),
            self.buffer_conv,
            self.anchor_scale
        );
        let h = &self.head;
        let _ = writeln!(
            w,
            "[head]\nroi = {}x{}\nfc = {}\ncontext = {}\ncontext_scale = {}\ndeconv = {}\n",
            h.roi.0,
            h.roi.1,
            h.fc_width,
            h.context,
            h.context_scale,
            h.deconv.name()
        );
        let _ = writeln!(w, "[data]\nsource = {}", if self.data.source == Source::Kitti { "kitti" } else { "synthetic" });
        for (k, d) in [("train_dir", &self.data.train_dir), ("val_dir", &self.data.val_dir)] {
            if let Some(p) = d {
                let _ = writeln!(w, "{k} = {}", p.display());
            }
        }
        let _ = writeln!(w, "mean = {}\n", join(&self.data.mean));
        let y = &self.synthetic;
        let _ = writeln!(
            w,
            "[synthetic]\nimages = {}\nsize = {}\nmin_height = {}\nmax_height = {}\nmax_objects = {}\nseed = {}\nval_images = {}\nval_seed = {}\n",
            y.images, y.size, y.min_height, y.max_height, y.max_objects, y.seed, self.val_images, self.val_seed
        );
        let _ = writeln!(
            w,
            "[train]\ncrop_size = {}\nresize_scales = {}\nbatch_size = {}\nmomentum = {}\nweight_decay = {}\ngamma = {}\ndivergence_factor = {}\ncheckpoint_every = {}\n",
            t.crop_size,
            join(&t.resize_scales),
            t.batch_size,
            t.momentum,
            t.weight_decay,
            t.gamma,
            t.divergence_factor,
            self.checkpoint_every
        );
        for (name, st) in [("stage1", &t.stage1), ("stage2", &t.stage2)] {
            let _ = writeln!(
                w,
                "[{name}]\nstrategy = {}\nlambda = {}\niters = {}\nlr = {}\ndecay_every = {}\ndecay_factor = {}\n",
                st.strategy.name(),
                st.lambda,
                st.iters,
                st.lr,
                st.decay_every,
                st.decay_factor
            );
        }
        let j = &t.joint;
        let _ = writeln!(
            w,
            "[joint]\niters = {}\nlr = {}\ndecay_every = {}\ndecay_factor = {}\nfrozen_stages = {}\nstrategy = {}\nlambda = {}\nalpha_det = {}\nproposals = {}\nnms_iou = {}\nrois_per_image = {}\npositive_fraction = {}\nfg_iou = {}\nbg_iou_lo = {}\nhead_only = {}\n",
            j.iters,
            j.lr,
            j.decay_every,
            j.decay_factor,
            j.frozen_stages,
            j.strategy.name(),
            j.lambda,
            j.alpha_det,
            j.proposals,
            j.nms_iou,
            j.rois_per_image,
            j.positive_fraction,
            j.fg_iou,
            j.bg_iou_lo,
            j.head_only
        );
        let p = &self.proposals;
        let _ = writeln!(w, "[proposals]\ntop_n = {}\nnms_iou = {}\npre_nms = {}\n", p.top_n, p.nms_iou, p.pre_nms);
        let e = &self.eval;
        let _ = writeln!(
            w,
            "[eval]\niou = {}\nbudget = {}\nbudgets = {}\nbins = {}\nap_iou = {}\nmin_score = {}\ndetect_nms = {}",
            e.iou,
            e.budget,
            e.budgets.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
            format_bins(&e.bins),
            e.ap_iou,
            e.min_score,
            e.detect_nms
        );
        for b in self.branches.iter().flatten() {
            let pairs = |v: Vec<String>| v.join(",");
            let _ = writeln!(
                w,
                "\n[branch {}]\nstride = {}\nfilters = {}\nanchors = {}\nalpha = {}",
                b.name,
                b.stride,
                pairs(b.filter_sizes.iter().map(|(h, w)| format!("{h}x{w}")).collect()),
                pairs(b.anchor_sizes.iter().map(|(w, h)| format!("{h}x{w}")).collect()),
                b.alpha
            );
        }
        s
    }
}

fn stage_keys(sec: &mut Section, st: &mut StageConfig) -> Result<(), ConfigError> {
    sec.strategy("strategy", &mut st.strategy)?;
    sec.num("lambda", &mut st.lambda)?;
    sec.num("iters", &mut st.iters)?;
    sec.num("lr", &mut st.lr)?;
    sec.num("decay_every", &mut st.decay_every)?;
    sec.num("decay_factor", &mut st.decay_factor)
}

fn parse_pair<T: FromStr>(s: &str) -> Option<(T, T)> {
    let (a, b) = s.trim().split_once('x')?;
    Some((a.trim().parse().ok()?, b.trim().parse().ok()?))
}

fn parse_pairs<T: FromStr>(s: &str) -> Option<Vec<(T, T)>> {
    s.split(',').map(parse_pair).collect()
}

/// `lo-hi` ranges separated by commas; `inf` for an open upper end.
fn parse_bins(s: &str) -> Option<Vec<HeightBin>> {
    s.split(',')
        .map(|r| {
            let (lo, hi) = r.trim().split_once('-')?;
            let hi = if hi.trim() == "inf" { f64::INFINITY } else { hi.trim().parse().ok()? };
            Some(HeightBin { lo: lo.trim().parse().ok()?, hi })
        })
        .collect()
}

fn format_bins(bins: &[HeightBin]) -> String {
    bins.iter()
        .map(|b| if b.hi.is_infinite() { format!("{}-inf", b.lo) } else { format!("{}-{}", b.lo, b.hi) })
        .collect::<Vec<_>>()
        .join(",")
}

struct Section {
    name: String,
    line: usize,
    entries: Vec<(String, String, usize, bool)>,
}

impl Section {
    fn take(&mut self, key: &str) -> Option<(&str, usize)> {
        let e = self.entries.iter_mut().find(|e| e.0 == key)?;
        e.3 = true;
        Some((e.1.as_str(), e.2))
    }

    fn num<T: FromStr>(&mut self, key: &str, slot: &mut T) -> Result<(), ConfigError> {
        if let Some((v, l)) = self.take(key) {
            *slot = v.parse().or_else(|_| err(l, format!("bad value for {key}: {v:?}")))?;
        }
        Ok(())
    }

    fn list<T: FromStr>(&mut self, key: &str, slot: &mut Vec<T>) -> Result<(), ConfigError> {
        if let Some((v, l)) = self.take(key) {
            *slot = v
                .split(',')
                .map(|x| x.trim().parse())
                .collect::<Result<_, _>>()
                .or_else(|_| err(l, format!("bad list for {key}: {v:?}")))?;
        }
        Ok(())
    }

    fn strategy(&mut self, key: &str, slot: &mut SamplingStrategy) -> Result<(), ConfigError> {
        if let Some((v, l)) = self.take(key) {
            *slot = SamplingStrategy::parse(v).or_else(|e| err(l, e.to_string()))?;
        }
        Ok(())
    }

    fn finish(self) -> Result<(), ConfigError> {
        match self.entries.iter().find(|e| !e.3) {
            Some(e) => err(e.2, format!("unknown key {:?} in [{}]", e.0, self.name)),
            None => Ok(()),
        }
    }
}

fn split_sections(text: &str) -> Result<Vec<Section>, ConfigError> {
    let mut out: Vec<Section> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let n = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            let name = name.split_whitespace().collect::<Vec<_>>().join(" ");
            if out.iter().any(|s| s.name == name) {
                return err(n, format!("duplicate section [{name}]"));
            }
            out.push(Section { name, line: n, entries: Vec::new() });
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return err(n, format!("expected key = value, got {line:?}"));
        };
        let Some(sec) = out.last_mut() else {
            return err(n, "key outside any section");
        };
        let k = k.trim().to_string();
        if sec.entries.iter().any(|e| e.0 == k) {
            return err(n, format!("duplicate key {k:?}"));
        }
        sec.entries.push((k, v.trim().to_string(), n, false));
    }
    Ok(out)
}
