//! Synthetic multi-scale scenes: class-specific filled shapes on textured noise.

use crate::kitti::LabeledObject;
use crate::pnm::Image8;
use mscnn_core::geometry::BBox;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Class names of the synthetic set, in label order: a near-square
/// rectangle, a tall ellipse, and an intermediate diamond.
pub const SYNTH_CLASSES: [&str; 3] = ["Car", "Pedestrian", "Cyclist"];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub images: usize,
    pub size: usize,
    pub min_height: f64,
    pub max_height: f64,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec { images: 500, size: 256, min_height: 20.0, max_height: 224.0, max_objects: 4, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub image: Image8,
    pub objects: Vec<LabeledObject>,
}

/// Width / height range per class.
fn aspect_range(class: usize) -> (f64, f64) {
    match class {
        0 => (0.9, 1.15),
        1 => (0.45, 0.6),
        _ => (0.65, 0.8),
    }
}

fn class_color(class: usize) -> [f64; 3] {
    match class {
        0 => [0.85, 0.25, 0.2],
        1 => [0.2, 0.8, 0.3],
        _ => [0.25, 0.3, 0.85],
    }
}

/// Whether the pixel center `(u, v)` in box-normalized coordinates
/// (`[-1, 1]²`) is covered by the class shape.
fn covers(class: usize, u: f64, v: f64) -> bool {
    match class {
        0 => true,
        1 => u * u + v * v <= 1.0,
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn render_background<R: Rng>(size: usize, rng: &mut R) -> Vec<f64> {
    let base: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.35..0.65));
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|_| {
            let f = std::f64::consts::TAU / rng.gen_range(12.0..64.0);
            let theta: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            (f * theta.cos(), f * theta.sin(), rng.gen_range(0.0..std::f64::consts::TAU), rng.gen_range(0.02..0.07))
        })
        .collect();
    let mut px = vec![0.0; size * size * 3];
    for y in 0..size {
        for x in 0..size {
            let t: f64 = waves.iter().map(|&(fx, fy, ph, a)| a * (fx * x as f64 + fy * y as f64 + ph).sin()).sum();
            for c in 0..3 {
                px[(y * size + x) * 3 + c] = base[c] + t + rng.gen_range(-0.06..0.06);
            }
        }
    }
    px
}

/// Draws one scene. Object heights are log-uniform in
/// `[min_height, max_height]`; boxes never overlap.
fn generate_one<R: Rng>(spec: &SynthSpec, rng: &mut R) -> SynthScene {
    let s = spec.size;
    let mut px = render_background(s, rng);
    let n = rng.gen_range(1..=spec.max_objects.max(1));
    let (lmin, lmax) = (spec.min_height.ln(), spec.max_height.min(s as f64).ln());
    let mut wanted: Vec<(usize, usize, usize)> = (0..n)
        .map(|_| {
            let class = rng.gen_range(0..SYNTH_CLASSES.len());
            let h = rng.gen_range(lmin..=lmax).exp().round().clamp(4.0, s as f64) as usize;
            let (a0, a1) = aspect_range(class);
            let w = ((h as f64 * rng.gen_range(a0..a1)).round() as usize).clamp(4, s);
            (class, w, h)
        })
        .collect();
    wanted.sort_by(|a, b| (b.1 * b.2).cmp(&(a.1 * a.2)));
    let mut placed: Vec<(usize, BBox)> = Vec::new();
    for (class, w, h) in wanted {
        for _ in 0..30 {
            let x1 = rng.gen_range(0..=s - w) as f64;
            let y1 = rng.gen_range(0..=s - h) as f64;
            let b = BBox::from_corners(x1, y1, x1 + w as f64, y1 + h as f64);
            // One pixel of clearance keeps neighboring boxes separable.
            let margin = BBox::new(b.cx, b.cy, b.w + 2.0, b.h + 2.0);
            if placed.iter().all(|(_, p)| p.intersection(&margin) == 0.0) {
                placed.push((class, b));
                break;
            }
        }
    }
    for &(class, b) in &placed {
        let (x1, y1, x2, y2) = b.corners();
        let col = class_color(class);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.gen_range(-0.08..0.08));
        for y in y1 as usize..y2 as usize {
            for x in x1 as usize..x2 as usize {
                let u = (x as f64 + 0.5 - b.cx) / (b.w / 2.0);
                let v = (y as f64 + 0.5 - b.cy) / (b.h / 2.0);
                if covers(class, u, v) {
                    for c in 0..3 {
                        px[(y * s + x) * 3 + c] = col[c] + tint[c] + rng.gen_range(-0.05..0.05);
                    }
                }
            }
        }
    }
    let mut image = Image8::new(s, s, 3);
    for (d, v) in image.data.iter_mut().zip(&px) {
        *d = to_byte(*v);
    }
    let objects = placed
        .into_iter()
        .map(|(class, bbox)| LabeledObject { class: SYNTH_CLASSES[class].to_string(), bbox })
        .collect();
    SynthScene { image, objects }
}

/// Deterministic for a given spec (including its seed).
pub fn generate_synthetic(spec: &SynthSpec) -> Vec<SynthScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..spec.images).map(|_| generate_one(spec, &mut rng)).collect()
}
