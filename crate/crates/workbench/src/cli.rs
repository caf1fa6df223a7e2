//! The `mscnn` command line.
//!
//! Exit status: 0 success, 1 usage error, 2 data error (I/O, parsing,
//! invalid config or checkpoint), 3 numeric failure (non-finite values,
//! divergence, failed gradient checks).

use crate::config::RunConfig;
use crate::dataset::{from_synthetic, load_dataset, save_synthetic, Dataset};
use crate::experiment::{dataset_proposals, detect, evaluate_ap, init_head, init_network, recall_report, RecallReport};
use crate::report::{chart_csv, config_hash, curve_csv, fmt_f, recall_table_csv, Csv};
use crate::synth::generate_synthetic;
use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand};
use mscnn_core::anchors::Profile;
use mscnn_core::eval::ImageProposals;
use mscnn_core::geometry::BBox;
use mscnn_core::gradsuite::run_suite;
use mscnn_core::network::MsCnn;
use mscnn_core::train::{train_joint, train_proposal, LogRow, TrainConfig};
use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "mscnn", version, about = "Multi-scale CNN proposal and detection workbench")]
pub struct Cli {
    /// Run configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Network checkpoint to load.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides the configured model profile (car, ped-cyc, caltech).
    #[arg(long, global = true)]
    pub profile: Option<String>,
    /// Dataset directory (`image_2/`, `label_2/`); overrides the configured split.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the synthetic training and validation sets to disk.
    GenData,
    /// Two-stage proposal-network training.
    TrainProposal,
    /// Joint proposal + detection training from a proposal checkpoint.
    TrainJoint,
    /// Ranked proposals for the validation split.
    Propose,
    /// Class detections for the validation split.
    Detect,
    /// Per-scale recall table and recall curves.
    EvalRecall {
        /// Evaluate a proposals CSV (as written by `propose`) instead of a checkpoint.
        #[arg(long)]
        proposals: Option<PathBuf>,
    },
    /// Per-class average precision of the detection head.
    EvalAp,
    /// SVG line chart of a CSV (every numeric column against the first).
    Plot {
        input: PathBuf,
        #[arg(long)]
        log_x: bool,
        #[arg(long)]
        title: Option<String>,
    },
    /// Finite-difference checks of every layer, loss and the unified objective.
    GradCheck,
}

/// A failure with its exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

fn numeric(error: anyhow::Error) -> Failure {
    Failure { code: EXIT_NUMERIC, error }
}

/// Non-finite values and divergence are numeric failures; everything else is a data error.
fn classify(error: anyhow::Error) -> Failure {
    let code = match error.downcast_ref::<mscnn_core::Error>() {
        Some(mscnn_core::Error::NonFinite(_) | mscnn_core::Error::Diverged { .. }) => EXIT_NUMERIC,
        _ => EXIT_DATA,
    };
    Failure { code, error }
}

/// Parses `args` (program name first), runs the command and returns the exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            f.code
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    hash: String,
    out: PathBuf,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Ctx> {
        let mut cfg = match &cli.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading config {}", p.display()))?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            cfg.train.seed = s;
        }
        if let Some(p) = &cli.profile {
            cfg.profile = Profile::parse(p)?;
            cfg.head.roi = cfg.profile.roi_size();
        }
        cfg.validate().map_err(|e| anyhow!("invalid config: {e}"))?;
        std::fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
        Ok(Ctx { hash: config_hash(&cfg.to_text()), cfg, out: cli.out.clone() })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn seed(&self) -> u64 {
        self.cfg.train.seed
    }

    /// Training split: `--data`, else the configured directory, else synthetic.
    fn train_set(&self, data: Option<&Path>) -> Result<Dataset> {
        self.split(data.or(self.cfg.data.train_dir.as_deref()), &self.cfg.synthetic)
    }

    fn val_set(&self, data: Option<&Path>) -> Result<Dataset> {
        self.split(data.or(self.cfg.data.val_dir.as_deref()), &self.cfg.synthetic_val())
    }

    fn split(&self, dir: Option<&Path>, spec: &crate::synth::SynthSpec) -> Result<Dataset> {
        let mean = Some(self.cfg.data.mean.as_slice());
        match dir {
            Some(d) => load_dataset(d, &self.cfg.classes, mean, self.cfg.data.source),
            None => Ok(from_synthetic(&generate_synthetic(spec), &self.cfg.classes, mean)),
        }
    }
}

fn load_net(path: Option<&Path>) -> Result<MsCnn> {
    let path = path.context("--checkpoint is required")?;
    let mut f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    MsCnn::load(&mut std::io::BufReader::new(&mut f)).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn save_net(net: &MsCnn, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    net.save(&mut buf)?;
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

pub fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    if let Command::Plot { input, log_x, title } = &cli.command {
        return plot(input, &cli.out, *log_x, title.as_deref()).map_err(classify);
    }
    let ctx = Ctx::new(cli).map_err(classify)?;
    let data = cli.data.as_deref();
    let ckpt = cli.checkpoint.as_deref();
    match &cli.command {
        Command::GenData => gen_data(&ctx).map_err(classify),
        Command::TrainProposal => train(&ctx, data, None),
        Command::TrainJoint => train(&ctx, data, Some(ckpt)),
        Command::Propose => propose(&ctx, data, ckpt).map_err(classify),
        Command::Detect => detections(&ctx, data, ckpt).map_err(classify),
        Command::EvalRecall { proposals } => eval_recall(&ctx, data, ckpt, proposals.as_deref()).map_err(classify),
        Command::EvalAp => eval_ap(&ctx, data, ckpt).map_err(classify),
        Command::GradCheck => grad_check(&ctx),
        Command::Plot { .. } => unreachable!(),
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let mut manifest = Csv::new(&ctx.hash, &["split", "image", "class", "x1", "y1", "x2", "y2", "height"]);
    for (split, spec) in [("train", ctx.cfg.synthetic.clone()), ("val", ctx.cfg.synthetic_val())] {
        let scenes = generate_synthetic(&spec);
        save_synthetic(&ctx.path(split), &scenes)?;
        for (i, s) in scenes.iter().enumerate() {
            for o in &s.objects {
                let (x1, y1, x2, y2) = o.bbox.corners();
                manifest.push(vec![
                    split.into(),
                    format!("{i:06}"),
                    o.class.clone(),
                    fmt_f(x1),
                    fmt_f(y1),
                    fmt_f(x2),
                    fmt_f(y2),
                    fmt_f(o.height()),
                ]);
            }
        }
        eprintln!("{split}: {} images written to {}", scenes.len(), ctx.path(split).display());
    }
    manifest.save(&ctx.path("dataset.csv"))
}

/// `joint` carries the `--checkpoint` argument for joint training.
fn train(ctx: &Ctx, data: Option<&Path>, joint: Option<Option<&Path>>) -> std::result::Result<(), Failure> {
    let ds = ctx.train_set(data).map_err(classify)?;
    let stage = if joint.is_some() { "joint" } else { "proposal" };
    let mut net = match joint {
        None => init_network(&ctx.cfg).map_err(|e| classify(e.into()))?,
        Some(ckpt) => {
            let mut net = load_net(ckpt).map_err(classify)?;
            if net.head.is_none() {
                init_head(&mut net, &ctx.cfg).map_err(|e| classify(e.into()))?;
            }
            net
        }
    };
    let tc: &TrainConfig = &ctx.cfg.train;
    let names: Vec<String> = net.config.branches.iter().map(|b| b.name.clone()).collect();
    let detection = joint.is_some();
    let header = LogRow::csv_header(&names, detection);
    let mut log = Csv::new(&ctx.hash, &header.split(',').collect::<Vec<_>>()).meta("seed", ctx.seed()).meta("images", ds.scenes.len());
    let every = ctx.cfg.checkpoint_every;
    let total_iters = if detection { tc.joint.iters } else { tc.stage1.iters + tc.stage2.iters };
    let start = std::time::Instant::now();
    let mut observer = |row: &LogRow, net: &MsCnn| -> mscnn_core::Result<()> {
        log.push(row.csv_line(detection).split(',').map(str::to_string).collect());
        let it = row.iteration + 1;
        if it.is_multiple_of(50) || it == total_iters {
            eprintln!("{stage} {it}/{total_iters} loss {:.4} ({:.0?})", row.report.total, start.elapsed());
        }
        if every > 0 && it.is_multiple_of(every) && it < total_iters {
            save_net(net, &ctx.path(&format!("{stage}_seed{}_iter{it}.ckpt", ctx.seed())))
                .map_err(|e| mscnn_core::Error::Io(std::io::Error::other(format!("{e:#}"))))?;
        }
        Ok(())
    };
    let result = if detection {
        train_joint(&mut net, &ds.scenes, tc, &mut observer)
    } else {
        train_proposal(&mut net, &ds.scenes, tc, &mut observer)
    };
    // The log is written even when training stops early.
    log.save(&ctx.path(&format!("loss_{stage}_seed{}.csv", ctx.seed()))).map_err(classify)?;
    result.map_err(|e| classify(e.into()))?;
    let path = ctx.path(&format!("{stage}_seed{}.ckpt", ctx.seed()));
    save_net(&net, &path).map_err(classify)?;
    eprintln!("checkpoint written to {}", path.display());
    Ok(())
}

const BOX_COLUMNS: [&str; 4] = ["x1", "y1", "x2", "y2"];

fn box_fields(b: &BBox) -> [String; 4] {
    let (x1, y1, x2, y2) = b.corners();
    [fmt_f(x1), fmt_f(y1), fmt_f(x2), fmt_f(y2)]
}

fn propose(ctx: &Ctx, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let net = load_net(ckpt)?;
    let ds = ctx.val_set(data)?;
    let s = &ctx.cfg.proposals;
    let mut csv = Csv::new(&ctx.hash, &[&["image", "source", "rank", "score"][..], &BOX_COLUMNS].concat())
        .meta("top_n", s.top_n)
        .meta("nms_iou", s.nms_iou);
    for (name, scene) in ds.names.iter().zip(&ds.scenes) {
        let fwd = net.proposal_forward(&scene.image)?;
        let anchors = net.anchors(scene.width(), scene.height());
        let (w, h) = (scene.width() as f64, scene.height() as f64);
        use mscnn_core::network::proposals::{decode_predictions, raw_predictions, select_proposals};
        let mut all = Vec::new();
        let mut emit = |source: &str, props: &[mscnn_core::network::Proposal]| {
            for (r, p) in props.iter().enumerate() {
                let mut row = vec![name.clone(), source.to_string(), r.to_string(), format!("{:.9}", p.score)];
                row.extend(box_fields(&p.bbox));
                csv.push(row);
            }
        };
        for (m, grid) in anchors.iter().enumerate() {
            let decoded = decode_predictions(&raw_predictions(&fwd, std::slice::from_ref(grid)), w, h);
            emit(&net.config.branches[m].name, &select_proposals(decoded.clone(), s.top_n, s.nms_iou, s.pre_nms));
            all.extend(decoded);
        }
        emit("combined", &select_proposals(all, s.top_n, s.nms_iou, s.pre_nms));
    }
    csv.save(&ctx.path(&format!("proposals_n{}_nms{}.csv", s.top_n, s.nms_iou)))
}

fn detections(ctx: &Ctx, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let net = load_net(ckpt)?;
    let ds = ctx.val_set(data)?;
    let e = &ctx.cfg.eval;
    let mut csv = Csv::new(&ctx.hash, &[&["image", "class", "score"][..], &BOX_COLUMNS].concat())
        .meta("min_score", e.min_score)
        .meta("nms_iou", e.detect_nms);
    for (name, scene) in ds.names.iter().zip(&ds.scenes) {
        for d in detect(&net, scene, &ctx.cfg.proposals, e.min_score, e.detect_nms)? {
            let class = net_class_name(ctx, d.class);
            let mut row = vec![name.clone(), class, format!("{:.9}", d.score)];
            row.extend(box_fields(&d.bbox));
            csv.push(row);
        }
    }
    csv.save(&ctx.path(&format!("detections_score{}_nms{}.csv", e.min_score, e.detect_nms)))
}

fn net_class_name(ctx: &Ctx, class: usize) -> String {
    ctx.cfg.classes.get(class - 1).cloned().unwrap_or_else(|| format!("class{class}"))
}

/// Reads a proposals CSV into per-image rankings aligned with `ds`. The
/// merged ranking is the `combined` source when present, otherwise all
/// branch proposals by descending score.
pub fn proposals_from_csv(csv: &Csv, ds: &Dataset) -> Result<(Vec<String>, Vec<ImageProposals>)> {
    let col = |n: &str| csv.header.iter().position(|h| h == n).with_context(|| format!("proposals CSV lacks column {n:?}"));
    let (ci, cs, cr, csc) = (col("image")?, col("source")?, col("rank")?, col("score")?);
    let cb: Vec<usize> = BOX_COLUMNS.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let mut branches: Vec<String> = Vec::new();
    let mut entries: BTreeMap<(String, String), Vec<(usize, f64, BBox)>> = BTreeMap::new();
    for (line, r) in csv.rows.iter().enumerate() {
        let num = |i: usize| r[i].parse::<f64>().with_context(|| format!("proposals row {}: bad number {:?}", line + 1, r[i]));
        let b = BBox::from_corners(num(cb[0])?, num(cb[1])?, num(cb[2])?, num(cb[3])?);
        let rank: usize = r[cr].parse().with_context(|| format!("proposals row {}: bad rank {:?}", line + 1, r[cr]))?;
        if r[cs] != "combined" && !branches.contains(&r[cs]) {
            branches.push(r[cs].clone());
        }
        entries.entry((r[ci].clone(), r[cs].clone())).or_default().push((rank, num(csc)?, b));
    }
    let mut ranked = |image: &str, source: &str| -> Vec<(f64, BBox)> {
        let mut v = entries.remove(&(image.to_string(), source.to_string())).unwrap_or_default();
        v.sort_by_key(|e| e.0);
        v.into_iter().map(|(_, s, b)| (s, b)).collect()
    };
    let mut images = Vec::with_capacity(ds.scenes.len());
    for (name, scene) in ds.names.iter().zip(&ds.scenes) {
        let per: Vec<Vec<(f64, BBox)>> = branches.iter().map(|b| ranked(name, b)).collect();
        let mut combined = ranked(name, "combined");
        if combined.is_empty() {
            combined = per.iter().flatten().copied().collect();
            combined.sort_by(|a, b| b.0.total_cmp(&a.0));
        }
        images.push(ImageProposals {
            gts: scene.objects.iter().map(|g| g.bbox).collect(),
            per_branch: per.into_iter().map(|v| v.into_iter().map(|e| e.1).collect()).collect(),
            combined: combined.into_iter().map(|e| e.1).collect(),
        });
    }
    if let Some(((image, _), _)) = entries.into_iter().next() {
        bail!("proposals for image {image:?}, which is not in the dataset");
    }
    Ok((branches, images))
}

/// Writes the recall table, both curves and their charts; returns the file names.
pub fn write_recall_outputs(hash: &str, out: &Path, rep: &RecallReport) -> Result<Vec<PathBuf>> {
    let t = &rep.table;
    let mut files = Vec::new();
    let table = out.join(format!("recall_table_iou{}_n{}.csv", t.iou_threshold, t.budget));
    recall_table_csv(hash, t).save(&table)?;
    files.push(table);

    let budget_csv = curve_csv(hash, "proposals", &rep.by_budget).meta("iou", t.iou_threshold);
    let by_iou: Vec<(String, _)> = rep.by_iou.iter().map(|(x, r)| (format!("{x:.3}"), *r)).collect();
    let iou_csv = curve_csv(hash, "iou", &by_iou).meta("budget", t.budget);
    for (csv, stem, title, log_x) in [
        (budget_csv, format!("recall_vs_budget_iou{}", t.iou_threshold), format!("Recall vs proposals (IoU {})", t.iou_threshold), true),
        (iou_csv, format!("recall_vs_iou_n{}", t.budget), format!("Recall vs IoU ({} proposals)", t.budget), false),
    ] {
        let path = out.join(format!("{stem}.csv"));
        csv.save(&path)?;
        let svg = out.join(format!("{stem}.svg"));
        std::fs::write(&svg, chart_csv(&csv, &title, log_x)?)?;
        files.extend([path, svg]);
    }
    Ok(files)
}

fn eval_recall(ctx: &Ctx, data: Option<&Path>, ckpt: Option<&Path>, proposals: Option<&Path>) -> Result<()> {
    let ds = ctx.val_set(data)?;
    let (names, images) = match proposals {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            proposals_from_csv(&Csv::parse(&text)?, &ds)?
        }
        None => {
            let net = load_net(ckpt)?;
            let names = net.config.branches.iter().map(|b| b.name.clone()).collect();
            (names, dataset_proposals(&net, &ds.scenes, &ctx.cfg.proposals)?)
        }
    };
    let e = &ctx.cfg.eval;
    let rep = recall_report(&images, &names, &e.bins, &e.budgets, e.budget, e.iou)?;
    for row in &rep.table.rows {
        let cells: Vec<String> = row.per_branch.iter().map(|r| format!("{:.3}", r.value)).collect();
        eprintln!("{:<16} {}  combined {:.3}", row.label, cells.join(" "), row.combined.value);
    }
    eprintln!("recall@{} (merged) {:.4}", e.budget, rep.at_budget.value);
    write_recall_outputs(&ctx.hash, &ctx.out, &rep)?;
    Ok(())
}

fn eval_ap(ctx: &Ctx, data: Option<&Path>, ckpt: Option<&Path>) -> Result<()> {
    let net = load_net(ckpt)?;
    net.head()?;
    let ds = ctx.val_set(data)?;
    let e = &ctx.cfg.eval;
    let (aps, mean) = evaluate_ap(&net, &ds.scenes, &ctx.cfg.proposals, e.min_score, e.detect_nms, e.ap_iou)?;
    let mut csv = Csv::new(&ctx.hash, &["class", "ap"]).meta("iou", e.ap_iou).meta("images", ds.scenes.len());
    for (c, ap) in aps.iter().enumerate() {
        csv.push(vec![net_class_name(ctx, c + 1), fmt_f(*ap)]);
        eprintln!("{:<12} AP {:.4}", net_class_name(ctx, c + 1), ap);
    }
    csv.push(vec!["mean".into(), fmt_f(mean)]);
    eprintln!("mean AP {mean:.4}");
    csv.save(&ctx.path(&format!("ap_iou{}.csv", e.ap_iou)))
}

fn grad_check(ctx: &Ctx) -> std::result::Result<(), Failure> {
    let results = run_suite(ctx.seed()).map_err(|e| classify(e.into()))?;
    let mut csv = Csv::new(&ctx.hash, &["check", "max_error", "tolerance", "probes", "passed"]).meta("seed", ctx.seed());
    for r in &results {
        println!("{} {:<40} max error {:.3e} (tolerance {:.0e}, {} probes)", if r.passed() { "ok  " } else { "FAIL" }, r.name, r.max_error, r.tolerance, r.probes);
        csv.push(vec![r.name.clone(), format!("{:e}", r.max_error), format!("{:e}", r.tolerance), r.probes.to_string(), r.passed().to_string()]);
    }
    csv.save(&ctx.path(&format!("grad_check_seed{}.csv", ctx.seed()))).map_err(classify)?;
    let failed = results.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(numeric(anyhow!("{failed} of {} gradient checks failed", results.len())));
    }
    Ok(())
}

fn plot(input: &Path, out: &Path, log_x: bool, title: Option<&str>) -> Result<()> {
    let text = std::fs::read_to_string(input).with_context(|| format!("reading {}", input.display()))?;
    let csv = Csv::parse(&text)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("plot");
    let svg = chart_csv(&csv, title.unwrap_or(stem), log_x)?;
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(format!("{stem}.svg"));
    std::fs::write(&path, svg).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("chart written to {}", path.display());
    Ok(())
}
