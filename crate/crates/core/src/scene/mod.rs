//! Point cloud scenes: representation, loading, sparse annotation and augmentation.

mod labels;
mod normals;
mod ply;

use std::collections::HashSet;
use std::f64::consts::TAU;
use std::path::Path;

use nalgebra::Vector3;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use labels::{parse_labels, write_labels, LabelFile, LabelContent};
pub use normals::estimate_normals;
pub use ply::{read_ply, write_ply, PlyCloud, PlyFormat};

pub type Vec3 = Vector3<f64>;

/// Label value marking an unlabeled point in dense label arrays.
pub const UNLABELED: i32 = -1;

#[derive(Debug, Clone, PartialEq)]
pub struct Point {
    pub position: Vec3,
    /// RGB in [0, 1].
    pub color: Vec3,
    /// Unit length.
    pub normal: Vec3,
}

/// An immutable 3D scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    name: String,
    points: Vec<Point>,
    dense_labels: Option<Vec<i32>>,
    sparse_labels: Vec<(usize, usize)>,
    class_names: Vec<String>,
}

impl Scene {
    /// Validates and normalizes a scene. Colors are clamped to [0,1] and normals
    /// renormalized; a zero-length normal or non-finite coordinate is rejected.
    pub fn new(
        name: impl Into<String>,
        mut points: Vec<Point>,
        dense_labels: Option<Vec<i32>>,
        sparse_labels: Vec<(usize, usize)>,
        class_names: Vec<String>,
    ) -> Result<Self> {
        for (i, p) in points.iter_mut().enumerate() {
            if !p.position.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("non-finite coordinate at point {i}")));
            }
            if !p.normal.iter().all(|v| v.is_finite()) {
                return Err(Error::Data(format!("non-finite normal at point {i}")));
            }
            let len = p.normal.norm();
            if len < 1e-12 {
                return Err(Error::Data(format!("zero-length normal at point {i}")));
            }
            p.normal /= len;
            for c in p.color.iter_mut() {
                *c = if c.is_finite() { c.clamp(0.0, 1.0) } else { 0.0 };
            }
        }
        let c = class_names.len();
        if let Some(dense) = &dense_labels {
            if dense.len() != points.len() {
                return Err(Error::Data(format!(
                    "dense label count {} does not match point count {}",
                    dense.len(),
                    points.len()
                )));
            }
            for (i, &l) in dense.iter().enumerate() {
                if l != UNLABELED && (l < 0 || l as usize >= c) {
                    return Err(Error::Range(format!(
                        "label {l} of point {i} outside [0, {c})"
                    )));
                }
            }
        }
        let mut seen = HashSet::with_capacity(sparse_labels.len());
        for &(i, l) in &sparse_labels {
            if i >= points.len() {
                return Err(Error::Range(format!(
                    "sparse annotation index {i} outside [0, {})",
                    points.len()
                )));
            }
            if l >= c {
                return Err(Error::Range(format!(
                    "label {l} of point {i} outside [0, {c})"
                )));
            }
            if !seen.insert(i) {
                return Err(Error::Data(format!("duplicate sparse annotation for point {i}")));
            }
        }
        Ok(Self {
            name: name.into(),
            points,
            dense_labels,
            sparse_labels,
            class_names,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dense_labels(&self) -> Option<&[i32]> {
        self.dense_labels.as_deref()
    }

    pub fn sparse_labels(&self) -> &[(usize, usize)] {
        &self.sparse_labels
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Dense ground-truth class of point `i`, if known.
    pub fn true_class(&self, i: usize) -> Option<usize> {
        self.dense_labels
            .as_ref()
            .and_then(|d| usize::try_from(d[i]).ok())
    }

    /// Per-class point counts over the dense labels.
    pub fn class_histogram(&self) -> Option<Vec<usize>> {
        let dense = self.dense_labels.as_ref()?;
        let mut hist = vec![0; self.class_names.len()];
        for &l in dense {
            if l >= 0 {
                hist[l as usize] += 1;
            }
        }
        Some(hist)
    }

    /// Axis-aligned bounding box `(min, max)`; `None` for an empty scene.
    pub fn bounds(&self) -> Option<(Vec3, Vec3)> {
        let first = self.points.first()?.position;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(&p.position), hi.sup(&p.position))
        }))
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_sparse_labels(self, sparse: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(self.name, self.points, self.dense_labels, sparse, self.class_names)
    }

    /// Packs each point into the 9-float row `x y z r g b nx ny nz`.
    pub fn packed_rows(&self) -> Vec<[f32; 9]> {
        self.points
            .iter()
            .map(|p| {
                [
                    p.position.x as f32,
                    p.position.y as f32,
                    p.position.z as f32,
                    p.color.x as f32,
                    p.color.y as f32,
                    p.color.z as f32,
                    p.normal.x as f32,
                    p.normal.y as f32,
                    p.normal.z as f32,
                ]
            })
            .collect()
    }
}

/// Loads a PLY point cloud and an optional label sidecar.
///
/// When the PLY has no normals they are estimated by local PCA and left unoriented.
pub fn load_scene(path: &Path, labels_path: Option<&Path>) -> Result<Scene> {
    let text_name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let cloud = read_ply(&std::fs::read(path)?)?;
    let normals = match cloud.normals {
        Some(n) => n,
        None => {
            log::warn!(
                "{}: no normals in file, estimating from 16 nearest neighbours (orientation not fixed)",
                path.display()
            );
            estimate_normals(&cloud.positions, 16)
        }
    };
    let points: Vec<Point> = cloud
        .positions
        .iter()
        .zip(&cloud.colors)
        .zip(&normals)
        .map(|((&position, &color), &normal)| Point {
            position,
            color,
            normal,
        })
        .collect();

    let (dense, sparse, class_names) = match labels_path {
        None => (None, Vec::new(), Vec::new()),
        Some(lp) => {
            let file = parse_labels(&std::fs::read_to_string(lp)?)?;
            let names = file.class_names_or_inferred();
            match file.content {
                LabelContent::Dense(d) => {
                    if d.len() != points.len() {
                        return Err(Error::Data(format!(
                            "{}: {} labels for {} points",
                            lp.display(),
                            d.len(),
                            points.len()
                        )));
                    }
                    (Some(d), Vec::new(), names)
                }
                LabelContent::Sparse(s) => (None, s, names),
            }
        }
    };
    Scene::new(text_name, points, dense, sparse, class_names)
}

/// Writes the scene's points as PLY (and nothing else).
pub fn save_scene(scene: &Scene, path: &Path, format: PlyFormat) -> Result<()> {
    let cloud = PlyCloud {
        positions: scene.points.iter().map(|p| p.position).collect(),
        colors: scene.points.iter().map(|p| p.color).collect(),
        normals: Some(scene.points.iter().map(|p| p.normal).collect()),
    };
    std::fs::write(path, write_ply(&cloud, format))?;
    Ok(())
}

/// Replaces the sparse annotation set with `k` labeled points drawn uniformly
/// without replacement.
pub fn sample_sparse_annotations(scene: &Scene, k: usize, seed: u64) -> Result<Scene> {
    let dense = scene
        .dense_labels
        .as_ref()
        .ok_or_else(|| Error::State("sparse sampling requires dense labels".into()))?;
    if k > scene.len() {
        return Err(Error::arg(format!(
            "cannot annotate {k} points in a scene of {}",
            scene.len()
        )));
    }
    let labeled: Vec<usize> = (0..dense.len()).filter(|&i| dense[i] >= 0).collect();
    if k > labeled.len() {
        return Err(Error::arg(format!(
            "cannot annotate {k} points: only {} carry a dense label",
            labeled.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = index::sample(&mut rng, labeled.len(), k)
        .into_iter()
        .map(|j| labeled[j])
        .collect();
    picked.sort_unstable();
    let sparse = picked.into_iter().map(|i| (i, dense[i] as usize)).collect();
    scene.clone().with_sparse_labels(sparse)
}

/// One concrete augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub rotation_z: f64,
    pub scale: f64,
    pub flip_x: bool,
    pub flip_y: bool,
    pub jitter_sigma: f64,
    /// Per-coordinate jitter is clipped to `±jitter_clip`.
    pub jitter_clip: f64,
}

impl AugmentParams {
    pub fn new(
        rotation_z: f64,
        scale: f64,
        flip_x: bool,
        flip_y: bool,
        jitter_sigma: f64,
        jitter_clip: f64,
    ) -> Result<Self> {
        if !(scale > 0.0) || !scale.is_finite() {
            return Err(Error::arg(format!("augmentation scale must be > 0, got {scale}")));
        }
        if !(jitter_sigma >= 0.0) || !(jitter_clip >= 0.0) {
            return Err(Error::arg("jitter sigma and clip must be >= 0"));
        }
        if !rotation_z.is_finite() {
            return Err(Error::arg("rotation must be finite"));
        }
        Ok(Self {
            rotation_z,
            scale,
            flip_x,
            flip_y,
            jitter_sigma,
            jitter_clip,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation_z: 0.0,
            scale: 1.0,
            flip_x: false,
            flip_y: false,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
        }
    }
}

/// Sampling ranges for random augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_prob: f64,
    pub jitter_sigma: f64,
    pub jitter_clip: f64,
    pub rotate: bool,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        Self {
            scale_min: 0.9,
            scale_max: 1.1,
            flip_prob: 0.5,
            jitter_sigma: 0.005,
            jitter_clip: 0.02,
            rotate: true,
        }
    }
}

impl AugmentRanges {
    pub fn disabled() -> Self {
        Self {
            scale_min: 1.0,
            scale_max: 1.0,
            flip_prob: 0.0,
            jitter_sigma: 0.0,
            jitter_clip: 0.0,
            rotate: false,
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<AugmentParams> {
        let rotation_z = if self.rotate { rng.random_range(0.0..TAU) } else { 0.0 };
        let scale = if self.scale_max > self.scale_min {
            rng.random_range(self.scale_min..self.scale_max)
        } else {
            self.scale_min
        };
        let flip_x = rng.random_bool(self.flip_prob.clamp(0.0, 1.0));
        let flip_y = rng.random_bool(self.flip_prob.clamp(0.0, 1.0));
        AugmentParams::new(rotation_z, scale, flip_x, flip_y, self.jitter_sigma, self.jitter_clip)
    }
}

/// Applies flip, rotation about +z, uniform scale and clipped Gaussian jitter to
/// positions. Normals receive the flip and rotation only.
pub fn augment_scene<R: Rng + ?Sized>(scene: &Scene, params: &AugmentParams, rng: &mut R) -> Scene {
    let (sin, cos) = params.rotation_z.sin_cos();
    let rotate = |v: &mut Vec3| {
        if params.flip_x {
            v.x = -v.x;
        }
        if params.flip_y {
            v.y = -v.y;
        }
        if params.rotation_z != 0.0 {
            let (x, y) = (v.x, v.y);
            v.x = cos * x - sin * y;
            v.y = sin * x + cos * y;
        }
    };
    let jitter = (params.jitter_sigma > 0.0)
        .then(|| Normal::new(0.0, params.jitter_sigma).expect("sigma validated"));

    let mut out = scene.clone();
    for p in &mut out.points {
        rotate(&mut p.position);
        if params.scale != 1.0 {
            p.position *= params.scale;
        }
        if let Some(n) = &jitter {
            for c in p.position.iter_mut() {
                *c += n.sample(rng).clamp(-params.jitter_clip, params.jitter_clip);
            }
        }
        rotate(&mut p.normal);
        p.normal.normalize_mut();
    }
    out
}
