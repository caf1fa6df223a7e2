//! Annotated image sets on disk (`image_2/*.ppm|pgm` + `label_2/*.txt`) and in memory.

use crate::kitti::{emit_kitti_labels, parse_kitti_labels, LabeledObject};
use crate::pnm::{load_image, Image8};
use crate::synth::SynthScene;
use anyhow::{bail, Context, Result};
use mscnn_core::geometry::clip;
use mscnn_core::{GroundTruth, Scene};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    Kitti,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneAnnotation {
    pub image_path: PathBuf,
    /// Objects of known classes, clipped to the image.
    pub objects: Vec<LabeledObject>,
    pub source: Source,
}

/// Loaded scenes plus their annotations, aligned by index.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub names: Vec<String>,
    pub annotations: Vec<SceneAnnotation>,
    pub scenes: Vec<Scene>,
}

/// Class label in `1..=K`, or `None` for classes outside the list.
pub fn class_index(classes: &[String], name: &str) -> Option<usize> {
    classes.iter().position(|c| c == name).map(|i| i + 1)
}

/// Clips boxes to the image and drops unknown classes and boxes that vanish.
pub fn to_ground_truth(objects: &[LabeledObject], classes: &[String], width: usize, height: usize) -> (Vec<LabeledObject>, Vec<GroundTruth>) {
    let mut kept = Vec::new();
    let mut gts = Vec::new();
    for o in objects {
        let Some(class) = class_index(classes, &o.class) else { continue };
        let Ok(b) = clip(&o.bbox, width as f64, height as f64) else { continue };
        kept.push(LabeledObject { class: o.class.clone(), bbox: b });
        gts.push(GroundTruth { class, bbox: b });
    }
    (kept, gts)
}

fn scene_from(image: &Image8, objects: &[LabeledObject], classes: &[String], mean: Option<&[f64]>) -> (Vec<LabeledObject>, Scene) {
    let (kept, gts) = to_ground_truth(objects, classes, image.width, image.height);
    (kept, Scene { image: image.to_tensor(mean), objects: gts })
}

pub fn from_synthetic(scenes: &[SynthScene], classes: &[String], mean: Option<&[f64]>) -> Dataset {
    let mut ds = Dataset { names: Vec::new(), annotations: Vec::new(), scenes: Vec::new() };
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("{i:06}");
        let (kept, scene) = scene_from(&s.image, &s.objects, classes, mean);
        ds.annotations.push(SceneAnnotation {
            image_path: PathBuf::from(format!("image_2/{name}.ppm")),
            objects: kept,
            source: Source::Synthetic,
        });
        ds.names.push(name);
        ds.scenes.push(scene);
    }
    ds
}

/// Writes images and KITTI labels under `dir`.
pub fn save_synthetic(dir: &Path, scenes: &[SynthScene]) -> Result<()> {
    let (img_dir, lbl_dir) = (dir.join("image_2"), dir.join("label_2"));
    std::fs::create_dir_all(&img_dir).with_context(|| format!("creating {}", img_dir.display()))?;
    std::fs::create_dir_all(&lbl_dir).with_context(|| format!("creating {}", lbl_dir.display()))?;
    for (i, s) in scenes.iter().enumerate() {
        let name = format!("{i:06}");
        s.image.save(&img_dir.join(format!("{name}.ppm")))?;
        std::fs::write(lbl_dir.join(format!("{name}.txt")), emit_kitti_labels(&s.objects))?;
    }
    Ok(())
}

/// Loads every image in `dir/image_2` (sorted by name) with its label file.
/// A missing label file means no objects.
pub fn load_dataset(dir: &Path, classes: &[String], mean: Option<&[f64]>, source: Source) -> Result<Dataset> {
    let img_dir = dir.join("image_2");
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&img_dir)
        .with_context(|| format!("reading {}", img_dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("ppm" | "pgm")))
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("no .ppm/.pgm images in {}", img_dir.display());
    }
    let mut ds = Dataset { names: Vec::new(), annotations: Vec::new(), scenes: Vec::new() };
    for path in entries {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
        let image = load_image(&path).with_context(|| format!("loading {}", path.display()))?;
        let label_path = dir.join("label_2").join(format!("{name}.txt"));
        let objects = match std::fs::read_to_string(&label_path) {
            Ok(text) => parse_kitti_labels(&text).with_context(|| format!("parsing {}", label_path.display()))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(e).with_context(|| format!("reading {}", label_path.display())),
        };
        let (kept, scene) = scene_from(&image, &objects, classes, mean);
        ds.annotations.push(SceneAnnotation { image_path: path, objects: kept, source });
        ds.names.push(name);
        ds.scenes.push(scene);
    }
    Ok(ds)
}
