//! Synthetic providers driven by the scene's dense ground truth.
//!
//! Features are a fixed per-class anchor plus Gaussian noise. Segmentation logits
//! are the log of a Dirichlet-like draw peaked at the true class, or, with
//! probability `flip_prob`, at a uniformly chosen wrong class with a flatter
//! concentration.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{FeatureExtractor, FeatureSet, ImageSegmenter, LogitMap, SegmentAux};
use crate::error::{Error, Result};
use crate::render::Image;
use crate::scene::Scene;

pub fn derive_seed(seed: u64, tag: &[u8]) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag);
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleFeatureConfig {
    pub dim: usize,
    /// Standard deviation of the per-coordinate noise added to the anchor.
    pub noise: f64,
    /// Standard deviation of anchor coordinates.
    pub anchor_scale: f64,
    pub seed: u64,
}

impl Default for OracleFeatureConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            noise: 0.5,
            anchor_scale: 1.0,
            seed: 0,
        }
    }
}

/// Anchor-plus-noise features. Noise is keyed by (seed, scene name, point index)
/// so a scene yields the same features regardless of augmentation.
#[derive(Debug, Clone)]
pub struct OracleFeatures {
    cfg: OracleFeatureConfig,
    anchors: Vec<Vec<f32>>,
}

impl OracleFeatures {
    pub fn new(cfg: OracleFeatureConfig) -> Result<Self> {
        if cfg.dim == 0 {
            return Err(Error::arg("feature dimension must be positive"));
        }
        if !(cfg.noise >= 0.0) || !(cfg.anchor_scale >= 0.0) {
            return Err(Error::arg("oracle noise and anchor scale must be >= 0"));
        }
        Ok(Self {
            cfg,
            anchors: Vec::new(),
        })
    }

    pub fn config(&self) -> &OracleFeatureConfig {
        &self.cfg
    }

    /// Anchor vector of class `c`.
    pub fn anchor(&mut self, c: usize) -> &[f32] {
        while self.anchors.len() <= c {
            let k = self.anchors.len() as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, &k.to_le_bytes()));
            let a = (0..self.cfg.dim)
                .map(|_| (self.cfg.anchor_scale * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            self.anchors.push(a);
        }
        &self.anchors[c]
    }
}

impl FeatureExtractor for OracleFeatures {
    fn extract_features(&mut self, scene: &Scene) -> Result<FeatureSet> {
        let dense = scene
            .dense_labels()
            .ok_or_else(|| Error::Provider(format!("oracle features need dense labels for scene '{}'", scene.name())))?;
        let dim = self.cfg.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed ^ 0x5eed, scene.name().as_bytes()));
        let mut data = Vec::with_capacity(scene.len() * dim);
        for &label in dense {
            let anchor: Option<Vec<f32>> = usize::try_from(label).ok().map(|c| self.anchor(c).to_vec());
            for j in 0..dim {
                let base = anchor.as_ref().map_or(0.0, |a| a[j] as f64);
                let noise = if self.cfg.noise > 0.0 {
                    self.cfg.noise * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                data.push((base + noise) as f32);
            }
        }
        FeatureSet::new(dim, data)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleNoiseModel {
    /// Probability that a pixel's peak class is replaced by a random wrong class.
    pub flip_prob: f64,
    pub sharpness_correct: f64,
    pub sharpness_flipped: f64,
    pub seed: u64,
}

impl Default for OracleNoiseModel {
    fn default() -> Self {
        Self {
            flip_prob: 0.3,
            sharpness_correct: 40.0,
            sharpness_flipped: 8.0,
            seed: 0,
        }
    }
}

impl OracleNoiseModel {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::arg(format!("flip probability {} outside [0, 1]", self.flip_prob)));
        }
        if !(self.sharpness_correct > 0.0) || !(self.sharpness_flipped > 0.0) {
            return Err(Error::arg("oracle concentrations must be positive"));
        }
        Ok(())
    }
}

/// Segmenter that reads the true class of each owned pixel from [`SegmentAux`].
#[derive(Debug, Clone)]
pub struct OracleSegmenter {
    model: OracleNoiseModel,
    rng: ChaCha8Rng,
    correct: Gamma<f64>,
    flipped: Gamma<f64>,
    scratch: Vec<f64>,
}

impl OracleSegmenter {
    pub fn new(model: OracleNoiseModel) -> Result<Self> {
        model.validate()?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(model.seed),
            correct: Gamma::new(model.sharpness_correct, 1.0).map_err(|e| Error::arg(e.to_string()))?,
            flipped: Gamma::new(model.sharpness_flipped, 1.0).map_err(|e| Error::arg(e.to_string()))?,
            scratch: Vec::new(),
            model,
        })
    }

    pub fn model(&self) -> &OracleNoiseModel {
        &self.model
    }

    /// Logits for one pixel whose true class is `truth`.
    fn pixel_logits(&mut self, truth: usize, classes: usize, out: &mut [f32]) {
        let flip = classes > 1 && self.rng.random_bool(self.model.flip_prob);
        let (peak, gamma) = if flip {
            let mut wrong = self.rng.random_range(0..classes - 1);
            if wrong >= truth {
                wrong += 1;
            }
            (wrong, self.flipped)
        } else {
            (truth, self.correct)
        };
        self.scratch.clear();
        for k in 0..classes {
            let d = if k == peak {
                gamma.sample(&mut self.rng)
            } else {
                Exp1.sample(&mut self.rng)
            };
            self.scratch.push(d);
        }
        finish_logits(&mut self.scratch, peak, out);
    }
}

/// Moves the largest draw to `peak`, normalizes, and writes log-probabilities.
fn finish_logits(draws: &mut [f64], peak: usize, out: &mut [f32]) {
    let top = crate::numerics::argmax(draws);
    draws.swap(top, peak);
    let sum: f64 = draws.iter().sum();
    for (o, d) in out.iter_mut().zip(draws.iter()) {
        *o = (d / sum).max(1e-300).ln() as f32;
    }
}

impl ImageSegmenter for OracleSegmenter {
    fn segment_image(&mut self, image: &Image, prompts: &[String], aux: Option<SegmentAux<'_>>) -> Result<LogitMap> {
        let aux = aux.ok_or_else(|| Error::Provider("oracle segmenter needs the owner map and scene truth".into()))?;
        let classes = prompts.len();
        if classes == 0 {
            return Err(Error::arg("no prompts"));
        }
        let npix = image.width as usize * image.height as usize;
        if aux.owner.len() != npix {
            return Err(Error::arg(format!("owner map has {} pixels, image {npix}", aux.owner.len())));
        }
        let mut data = vec![0f32; npix * classes];
        for (k, owner) in aux.owner.iter().enumerate() {
            let Some(i) = owner else { continue };
            let Some(truth) = aux.scene.true_class(*i as usize) else { continue };
            if truth >= classes {
                return Err(Error::Range(format!("true class {truth} has no prompt")));
            }
            self.pixel_logits(truth, classes, &mut data[k * classes..(k + 1) * classes]);
        }
        LogitMap::new(image.width, image.height, prompts.to_vec(), data)
    }
}
