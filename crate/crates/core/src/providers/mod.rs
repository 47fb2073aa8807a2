//! Model providers: the pointwise feature extractor and the open-vocabulary image
//! segmenter, behind two small traits.
//!
//! Three implementations exist for each: a synthetic oracle driven by scene ground
//! truth, a record/replay cache, and a client for an external inference sidecar
//! speaking the framed protocol in [`frame`].

pub mod frame;
mod oracle;
mod replay;
mod sidecar;

use crate::error::{Error, Result};
use crate::render::Image;
use crate::scene::Scene;

pub use oracle::derive_seed;
pub use oracle::{OracleFeatureConfig, OracleFeatures, OracleNoiseModel, OracleSegmenter};
pub use replay::{Recorder, ReplayProvider, ReplayStore};
pub use sidecar::{SidecarClient, SidecarTransport};

/// Feature dimensionality of the reference point cloud encoder.
pub const DEFAULT_FEATURE_DIM: usize = 1232;

pub const PROMPT_TEMPLATE: &str = "a photo of a";

/// Row-major `rows x dim` matrix of pointwise features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureSet {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::arg(format!(
                "{} values do not form rows of width {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite feature in row {}", i / dim)));
        }
        Ok(Self { dim, data })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

/// Pixel-wise logits, laid out `height x width x classes` from the top-left pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub width: u32,
    pub height: u32,
    pub classes: usize,
    pub data: Vec<f32>,
    pub prompts: Vec<String>,
}

impl LogitMap {
    pub fn new(width: u32, height: u32, prompts: Vec<String>, data: Vec<f32>) -> Result<Self> {
        let classes = prompts.len();
        let want = width as usize * height as usize * classes;
        if data.len() != want {
            return Err(Error::arg(format!(
                "logit map of {width}x{height}x{classes} needs {want} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite logit at flat index {i}")));
        }
        Ok(Self {
            width,
            height,
            classes,
            data,
            prompts,
        })
    }

    pub fn at(&self, u: u32, v: u32) -> &[f32] {
        let k = (v as usize * self.width as usize + u as usize) * self.classes;
        &self.data[k..k + self.classes]
    }
}

/// Ground truth handed to segmenters that need it (the oracle). Real models ignore it.
#[derive(Debug, Clone, Copy)]
pub struct SegmentAux<'a> {
    pub owner: &'a [Option<u32>],
    pub scene: &'a Scene,
}

pub trait FeatureExtractor {
    fn extract_features(&mut self, scene: &Scene) -> Result<FeatureSet>;
}

pub trait ImageSegmenter {
    fn segment_image(&mut self, image: &Image, prompts: &[String], aux: Option<SegmentAux<'_>>) -> Result<LogitMap>;
}

impl<T: FeatureExtractor + ?Sized> FeatureExtractor for Box<T> {
    fn extract_features(&mut self, scene: &Scene) -> Result<FeatureSet> {
        (**self).extract_features(scene)
    }
}

impl<T: ImageSegmenter + ?Sized> ImageSegmenter for Box<T> {
    fn segment_image(&mut self, image: &Image, prompts: &[String], aux: Option<SegmentAux<'_>>) -> Result<LogitMap> {
        (**self).segment_image(image, prompts, aux)
    }
}

impl<T: FeatureExtractor + ?Sized> FeatureExtractor for std::rc::Rc<std::cell::RefCell<T>> {
    fn extract_features(&mut self, scene: &Scene) -> Result<FeatureSet> {
        self.borrow_mut().extract_features(scene)
    }
}

impl<T: ImageSegmenter + ?Sized> ImageSegmenter for std::rc::Rc<std::cell::RefCell<T>> {
    fn segment_image(&mut self, image: &Image, prompts: &[String], aux: Option<SegmentAux<'_>>) -> Result<LogitMap> {
        self.borrow_mut().segment_image(image, prompts, aux)
    }
}

/// `"a photo of a <name>"` per class, in order.
pub fn build_prompts(class_names: &[String]) -> Result<Vec<String>> {
    if class_names.is_empty() {
        return Err(Error::arg("no class names to build prompts from"));
    }
    class_names
        .iter()
        .enumerate()
        .map(|(i, name)| {
            if name.trim().is_empty() {
                Err(Error::arg(format!("class name {i} is empty")))
            } else {
                Ok(format!("{PROMPT_TEMPLATE} {name}"))
            }
        })
        .collect()
}

/// Like [`build_prompts`], with per-class replacement prompts taking precedence.
pub fn build_prompts_with_overrides(
    class_names: &[String],
    overrides: &std::collections::BTreeMap<String, String>,
) -> Result<Vec<String>> {
    let mut prompts = build_prompts(class_names)?;
    for (p, name) in prompts.iter_mut().zip(class_names) {
        if let Some(o) = overrides.get(name) {
            *p = o.clone();
        }
    }
    Ok(prompts)
}
