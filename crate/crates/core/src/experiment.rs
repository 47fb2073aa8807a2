//! Synthetic benchmark runs: train with oracle providers, evaluate on held-out scenes.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::head::HeadState;
use crate::metrics::{iou_acc, ConfusionMatrix, SegmentationMetrics};
use crate::providers::{FeatureExtractor, OracleFeatureConfig, OracleFeatures, OracleNoiseModel, OracleSegmenter};
use crate::scene::Scene;
use crate::synthetic::{synthetic_scene, SyntheticConfig};
use crate::train::{train, NoObserver, QualityAcc, TrainConfig, TrainReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Benchmark {
    pub scenes: SyntheticConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub features: OracleFeatureConfig,
    pub noise: OracleNoiseModel,
}

impl Default for Benchmark {
    fn default() -> Self {
        Self {
            scenes: SyntheticConfig::default(),
            train_scenes: 20,
            eval_scenes: 5,
            features: OracleFeatureConfig::default(),
            noise: OracleNoiseModel::default(),
        }
    }
}

impl Benchmark {
    pub fn train_set(&self) -> Result<Vec<Scene>> {
        (0..self.train_scenes).map(|i| synthetic_scene(&self.scenes, i)).collect()
    }

    /// Scenes with indices after the training set.
    pub fn eval_set(&self) -> Result<Vec<Scene>> {
        (0..self.eval_scenes)
            .map(|i| synthetic_scene(&self.scenes, self.train_scenes + i))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct BenchmarkResult {
    pub metrics: SegmentationMetrics,
    pub report: TrainReport,
    pub head: HeadState,
}

impl BenchmarkResult {
    /// Label quality pooled over the last half of training.
    pub fn late_quality(&self) -> [QualityAcc; 3] {
        let last = self.report.steps.last().map_or(0, |s| s.epoch);
        self.report.quality_since(last / 2)
    }
}

pub fn evaluate(head: &HeadState, scenes: &[Scene], features: &mut dyn FeatureExtractor) -> Result<SegmentationMetrics> {
    let mut cm = ConfusionMatrix::new(head.config.classes);
    for s in scenes {
        let preds = crate::train::predict_scene(head, s, features)?;
        let truth = s
            .dense_labels()
            .ok_or_else(|| crate::Error::Data("evaluation requires dense labels".into()))?;
        cm.accumulate(&preds, truth)?;
    }
    iou_acc(&cm)
}

pub fn run(bench: &Benchmark, cfg: &TrainConfig) -> Result<BenchmarkResult> {
    let scenes = bench.train_set()?;
    let mut features = OracleFeatures::new(bench.features)?;
    let mut segmenter = OracleSegmenter::new(OracleNoiseModel { seed: bench.noise.seed ^ cfg.seed, ..bench.noise })?;
    let (state, report) = train(cfg, &scenes, &mut features, &mut segmenter, &mut NoObserver)?;
    let metrics = evaluate(&state.head, &bench.eval_set()?, &mut features)?;
    Ok(BenchmarkResult {
        metrics,
        report,
        head: state.head,
    })
}
