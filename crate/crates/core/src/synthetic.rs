//! Seeded synthetic indoor scenes: a floor, four walls with inward normals, and
//! box-shaped objects, all labeled densely.

use rand::distr::weighted::WeightedIndex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::providers::derive_seed;
use crate::scene::{sample_sparse_annotations, Point, Scene, Vec3};

const NAMES: [&str; 10] = [
    "floor", "wall", "table", "chair", "cabinet", "sofa", "bed", "desk", "bookshelf", "door",
];

pub fn class_names(classes: usize) -> Vec<String> {
    (0..classes)
        .map(|k| NAMES.get(k).map_or_else(|| format!("object{k}"), |s| s.to_string()))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub points: usize,
    pub objects_per_class: usize,
    /// Labeled points per scene; 0 keeps the scene without sparse labels.
    pub sparse_labels: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            classes: 5,
            points: 4000,
            objects_per_class: 2,
            sparse_labels: 50,
            seed: 0,
        }
    }
}

struct Patch {
    class: usize,
    origin: Vec3,
    e1: Vec3,
    e2: Vec3,
    normal: Vec3,
}

impl Patch {
    fn area(&self) -> f64 {
        self.e1.cross(&self.e2).norm()
    }
}

fn box_patches(class: usize, lo: Vec3, size: Vec3, out: &mut Vec<Patch>) {
    let (x, y, z) = (Vec3::x() * size.x, Vec3::y() * size.y, Vec3::z() * size.z);
    let hi = lo + size;
    out.push(Patch { class, origin: lo + z, e1: x, e2: y, normal: Vec3::z() });
    out.push(Patch { class, origin: lo, e1: y, e2: z, normal: -Vec3::x() });
    out.push(Patch { class, origin: hi - y - z, e1: y, e2: z, normal: Vec3::x() });
    out.push(Patch { class, origin: lo, e1: x, e2: z, normal: -Vec3::y() });
    out.push(Patch { class, origin: hi - x - z, e1: x, e2: z, normal: Vec3::y() });
}

fn class_color(class: usize) -> Vec3 {
    let h = (class as f64 * 0.618_033_988_75).fract();
    Vec3::new(
        0.5 + 0.4 * (std::f64::consts::TAU * h).cos(),
        0.5 + 0.4 * (std::f64::consts::TAU * (h + 1.0 / 3.0)).cos(),
        0.5 + 0.4 * (std::f64::consts::TAU * (h + 2.0 / 3.0)).cos(),
    )
}

/// Scene number `index` of the set described by `cfg`.
pub fn synthetic_scene(cfg: &SyntheticConfig, index: usize) -> Result<Scene> {
    if cfg.classes < 2 || cfg.points == 0 {
        return Err(Error::arg(format!(
            "synthetic scenes need at least 2 classes and 1 point, got {} and {}",
            cfg.classes, cfg.points
        )));
    }
    let name = format!("synthetic_{index:04}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, name.as_bytes()));
    let w = rng.random_range(4.0..6.0);
    let d = rng.random_range(4.0..6.0);
    let h = rng.random_range(1.5..2.5);

    let mut patches = vec![
        Patch { class: 0, origin: Vec3::zeros(), e1: Vec3::x() * w, e2: Vec3::y() * d, normal: Vec3::z() },
        Patch { class: 1, origin: Vec3::zeros(), e1: Vec3::y() * d, e2: Vec3::z() * h, normal: Vec3::x() },
        Patch { class: 1, origin: Vec3::new(w, 0.0, 0.0), e1: Vec3::y() * d, e2: Vec3::z() * h, normal: -Vec3::x() },
        Patch { class: 1, origin: Vec3::zeros(), e1: Vec3::x() * w, e2: Vec3::z() * h, normal: Vec3::y() },
        Patch { class: 1, origin: Vec3::new(0.0, d, 0.0), e1: Vec3::x() * w, e2: Vec3::z() * h, normal: -Vec3::y() },
    ];
    for class in 2..cfg.classes {
        for _ in 0..cfg.objects_per_class {
            let size = Vec3::new(
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..(h * 0.6)),
            );
            let lo = Vec3::new(
                rng.random_range(0.2..(w - 0.2 - size.x)),
                rng.random_range(0.2..(d - 0.2 - size.y)),
                0.0,
            );
            box_patches(class, lo, size, &mut patches);
        }
    }

    let weights = WeightedIndex::new(patches.iter().map(Patch::area)).map_err(|e| Error::arg(e.to_string()))?;
    let mut points = Vec::with_capacity(cfg.points);
    let mut labels = Vec::with_capacity(cfg.points);
    for _ in 0..cfg.points {
        let p = &patches[rng.sample(&weights)];
        let (a, b): (f64, f64) = (rng.random(), rng.random());
        let tint = Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05));
        points.push(Point {
            position: p.origin + p.e1 * a + p.e2 * b,
            color: class_color(p.class) + tint,
            normal: p.normal,
        });
        labels.push(p.class as i32);
    }
    let scene = Scene::new(name, points, Some(labels), Vec::new(), class_names(cfg.classes))?;
    if cfg.sparse_labels == 0 {
        return Ok(scene);
    }
    sample_sparse_annotations(&scene, cfg.sparse_labels, derive_seed(cfg.seed ^ 0xa11, scene.name().as_bytes()))
}

pub fn synthetic_scenes(cfg: &SyntheticConfig, count: usize) -> Result<Vec<Scene>> {
    (0..count).map(|i| synthetic_scene(cfg, i)).collect()
}
