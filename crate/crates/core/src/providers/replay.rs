//! Record/replay cache for provider responses.
//!
//! Requests are keyed by a SHA-256 of their wire-level content plus an occurrence
//! counter, so replaying a session in the same order reproduces every response
//! even when identical requests repeat.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use super::frame::{f32s_to_le, le_to_f32s};
use super::{FeatureExtractor, FeatureSet, ImageSegmenter, LogitMap, SegmentAux};
use crate::error::{Error, Result};
use crate::render::Image;
use crate::scene::Scene;

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn features_digest(scene: &Scene) -> String {
    let mut h = Sha256::new();
    h.update(b"features");
    for row in scene.packed_rows() {
        for v in row {
            h.update(v.to_le_bytes());
        }
    }
    hex(&h.finalize())
}

fn segment_digest(image: &Image, prompts: &[String]) -> String {
    let mut h = Sha256::new();
    h.update(b"segment");
    h.update(image.width.to_le_bytes());
    h.update(image.height.to_le_bytes());
    h.update(image.to_rgb8());
    for p in prompts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex(&h.finalize())
}

/// A directory of recorded responses.
#[derive(Debug)]
pub struct ReplayStore {
    dir: PathBuf,
    seen: HashMap<String, usize>,
}

impl ReplayStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir,
            seen: HashMap::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Path for the next occurrence of `digest`.
    fn next_path(&mut self, op: &str, digest: &str) -> PathBuf {
        let n = self.seen.entry(digest.to_string()).or_insert(0);
        let path = self.dir.join(format!("{op}-{digest}-{n}.bin"));
        *n += 1;
        path
    }

    fn read(&mut self, op: &str, digest: &str) -> Result<Vec<u8>> {
        let path = self.next_path(op, digest);
        fs::read(&path).map_err(|_| Error::CacheMiss(format!("no recorded {op} response at {}", path.display())))
    }
}

fn encode_features(fs: &FeatureSet) -> Vec<u8> {
    let mut out = (fs.rows() as u64).to_le_bytes().to_vec();
    out.extend_from_slice(&(fs.dim as u64).to_le_bytes());
    out.extend(f32s_to_le(&fs.data));
    out
}

fn decode_features(bytes: &[u8]) -> Result<FeatureSet> {
    if bytes.len() < 16 {
        return Err(Error::Data("truncated feature record".into()));
    }
    let dim = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    FeatureSet::new(dim, le_to_f32s(&bytes[16..])?)
}

fn encode_logits(m: &LogitMap) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&m.width.to_le_bytes());
    out.extend_from_slice(&m.height.to_le_bytes());
    out.extend_from_slice(&(m.classes as u32).to_le_bytes());
    out.extend(f32s_to_le(&m.data));
    out
}

fn decode_logits(bytes: &[u8], prompts: &[String]) -> Result<LogitMap> {
    if bytes.len() < 12 {
        return Err(Error::Data("truncated logit record".into()));
    }
    let w = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    LogitMap::new(w, h, prompts.to_vec(), le_to_f32s(&bytes[12..])?)
}

/// Wraps a live provider and writes every response into a [`ReplayStore`].
pub struct Recorder<P> {
    inner: P,
    store: ReplayStore,
}

impl<P> Recorder<P> {
    pub fn new(inner: P, store: ReplayStore) -> Self {
        Self { inner, store }
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: FeatureExtractor> FeatureExtractor for Recorder<P> {
    fn extract_features(&mut self, scene: &Scene) -> Result<FeatureSet> {
        let fs = self.inner.extract_features(scene)?;
        let path = self.store.next_path("features", &features_digest(scene));
        fs::write(path, encode_features(&fs))?;
        Ok(fs)
    }
}

impl<P: ImageSegmenter> ImageSegmenter for Recorder<P> {
    fn segment_image(&mut self, image: &Image, prompts: &[String], aux: Option<SegmentAux<'_>>) -> Result<LogitMap> {
        let m = self.inner.segment_image(image, prompts, aux)?;
        let path = self.store.next_path("segment", &segment_digest(image, prompts));
        fs::write(path, encode_logits(&m))?;
        Ok(m)
    }
}

/// Serves responses previously captured by a [`Recorder`].
pub struct ReplayProvider {
    store: ReplayStore,
}

impl ReplayProvider {
    pub fn new(store: ReplayStore) -> Self {
        Self { store }
    }
}

impl FeatureExtractor for ReplayProvider {
    fn extract_features(&mut self, scene: &Scene) -> Result<FeatureSet> {
        let fs = decode_features(&self.store.read("features", &features_digest(scene))?)?;
        if fs.rows() != scene.len() {
            return Err(Error::Data(format!(
                "recorded features have {} rows, scene has {} points",
                fs.rows(),
                scene.len()
            )));
        }
        Ok(fs)
    }
}

impl ImageSegmenter for ReplayProvider {
    fn segment_image(&mut self, image: &Image, prompts: &[String], _aux: Option<SegmentAux<'_>>) -> Result<LogitMap> {
        decode_logits(&self.store.read("segment", &segment_digest(image, prompts))?, prompts)
    }
}
