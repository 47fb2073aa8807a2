//! The training loop: render, pseudo-label, filter, bank, sample, and update.

use std::fmt::Write as _;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::filter::{
    build_pairs, filter_confidence, filter_loss, first_quartile, ClasswiseMemoryBank, FeatureLabelPair, LossFilter,
    DEFAULT_CAP_PER_CLASS, DEFAULT_MIN_CLASS_SIZE, DEFAULT_N_CAP,
};
use crate::head::{adamw_step, loss_and_grads, predict_classes, AdamWConfig, AdamWState, HeadConfig, HeadState, TargetSet};
use crate::providers::{build_prompts, derive_seed, FeatureExtractor, ImageSegmenter, SegmentAux};
use crate::render::{make_camera, render, Camera, RenderConfig, RenderResult};
use crate::scene::{augment_scene, AugmentRanges, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrSchedule {
    #[default]
    Constant,
    Cosine,
}

/// The five filtering configurations compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterCase {
    /// Neither filter.
    None,
    ConfidenceOnly,
    LossOnly,
    Both,
    /// Confidence filter, then keep the large-loss component.
    KeepLarge,
}

impl FilterCase {
    pub const NAMES: [&'static str; 5] = ["off+off", "conf-only", "loss-only", "both", "keep-large"];

    pub fn settings(self) -> (bool, LossFilter) {
        match self {
            FilterCase::None => (false, LossFilter::Off),
            FilterCase::ConfidenceOnly => (true, LossFilter::Off),
            FilterCase::LossOnly => (false, LossFilter::KeepSmall),
            FilterCase::Both => (true, LossFilter::KeepSmall),
            FilterCase::KeepLarge => (true, LossFilter::KeepLarge),
        }
    }

    pub fn apply(self, cfg: &mut TrainConfig) {
        (cfg.confidence_filter, cfg.loss_filter) = self.settings();
    }
}

impl std::str::FromStr for FilterCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off+off" | "none" => Ok(Self::None),
            "conf-only" => Ok(Self::ConfidenceOnly),
            "loss-only" => Ok(Self::LossOnly),
            "both" => Ok(Self::Both),
            "keep-large" => Ok(Self::KeepLarge),
            _ => Err(Error::arg(format!("unknown filter case '{s}' (expected one of {:?})", Self::NAMES))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub w: f64,
    pub tau: f64,
    pub r: f64,
    pub confidence_filter: bool,
    pub loss_filter: LossFilter,
    pub min_class_size: usize,
    /// Steps before the loss filter starts acting.
    pub warmup_steps: u64,
    pub cap_per_class: usize,
    pub n_cap: usize,
    pub epochs: usize,
    pub batch_scenes: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub optimizer: AdamWConfig,
    pub lr_schedule: LrSchedule,
    pub augment: AugmentRanges,
    pub resolution: u32,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            w: 0.5,
            tau: 0.2,
            r: 50.0,
            confidence_filter: true,
            loss_filter: LossFilter::KeepSmall,
            min_class_size: DEFAULT_MIN_CLASS_SIZE,
            warmup_steps: 0,
            cap_per_class: DEFAULT_CAP_PER_CLASS,
            n_cap: DEFAULT_N_CAP,
            epochs: 200,
            batch_scenes: 6,
            seed: 0,
            hidden: vec![512, 256],
            optimizer: AdamWConfig::default(),
            lr_schedule: LrSchedule::Constant,
            augment: AugmentRanges::default(),
            resolution: crate::render::DEFAULT_RESOLUTION,
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.w) {
            return Err(Error::arg(format!("w = {} outside [0, 1]", self.w)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::arg(format!("tau = {} must be positive", self.tau)));
        }
        if !(self.r > 0.0 && self.r <= 100.0) {
            return Err(Error::arg(format!("r = {} outside (0, 100]", self.r)));
        }
        if self.epochs == 0 || self.batch_scenes == 0 {
            return Err(Error::arg("epochs and batch_scenes must be at least 1"));
        }
        if self.cap_per_class == 0 || self.resolution == 0 {
            return Err(Error::arg("cap_per_class and resolution must be positive"));
        }
        if self.hidden.contains(&0) {
            return Err(Error::arg("hidden widths must be positive"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::arg("learning rate must be positive"));
        }
        Ok(())
    }

    /// Short digest of the serialized configuration.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().take(8).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    pub fn steps_per_epoch(&self, scenes: usize) -> usize {
        scenes.div_ceil(self.batch_scenes)
    }

    fn lr_at(&self, step: u64, total: u64) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.optimizer.lr,
            LrSchedule::Cosine => {
                let t = step as f64 / total.max(1) as f64;
                0.5 * self.optimizer.lr * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Running label-quality sums for one filtering stage.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QualityAcc {
    pub n: usize,
    pub hits: usize,
    pub li_sum: f64,
}

impl QualityAcc {
    pub fn add(&mut self, pairs: &[FeatureLabelPair]) {
        for p in pairs {
            let Some(t) = p.true_class else { continue };
            self.n += 1;
            self.hits += usize::from(p.class() == t);
            self.li_sum -= p.pseudo_label[t].max(crate::numerics::PROB_EPS).ln();
        }
    }

    pub fn merge(&mut self, o: &QualityAcc) {
        self.n += o.n;
        self.hits += o.hits;
        self.li_sum += o.li_sum;
    }

    /// Label accuracy in percent, NaN with no labeled pairs.
    pub fn la(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            100.0 * self.hits as f64 / self.n as f64
        }
    }

    pub fn li(&self) -> f64 {
        if self.n == 0 {
            f64::NAN
        } else {
            self.li_sum / self.n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    /// NaN when the step was skipped for lack of rows.
    pub loss: f64,
    pub loss_true: f64,
    pub loss_pseudo: f64,
    pub quality: [QualityAcc; 3],
    pub cmb_min: usize,
    pub cmb_q1: usize,
    pub cmb_max: usize,
    pub n: usize,
}

pub const REPORT_COLUMNS: &str =
    "epoch,step,loss,loss_true,loss_pseudo,la_d0,la_d1,la_d2,li_d0,li_d1,li_d2,cmb_min,cmb_q1,cmb_max,n";

impl StepRecord {
    pub fn csv_row(&self) -> String {
        let [q0, q1, q2] = &self.quality;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.step,
            self.loss,
            self.loss_true,
            self.loss_pseudo,
            q0.la(),
            q1.la(),
            q2.la(),
            q0.li(),
            q1.li(),
            q2.li(),
            self.cmb_min,
            self.cmb_q1,
            self.cmb_max,
            self.n
        )
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_COLUMNS}\n");
        for s in &self.steps {
            out.push_str(&s.csv_row());
            out.push('\n');
        }
        out
    }

    /// Per-epoch records: mean loss over non-skipped steps, pooled label quality,
    /// bank statistics from the epoch's last step.
    pub fn epochs(&self) -> Vec<StepRecord> {
        let mut out: Vec<StepRecord> = Vec::new();
        let mut losses: Vec<(f64, f64, f64, usize)> = Vec::new();
        for s in &self.steps {
            if out.last().is_none_or(|e| e.epoch != s.epoch) {
                out.push(StepRecord { quality: Default::default(), ..s.clone() });
                losses.push((0.0, 0.0, 0.0, 0));
            }
            let e = out.last_mut().unwrap();
            let l = losses.last_mut().unwrap();
            for (a, b) in e.quality.iter_mut().zip(&s.quality) {
                a.merge(b);
            }
            (e.step, e.cmb_min, e.cmb_q1, e.cmb_max, e.n) = (s.step, s.cmb_min, s.cmb_q1, s.cmb_max, s.n);
            if s.loss.is_finite() {
                *l = (l.0 + s.loss, l.1 + s.loss_true, l.2 + s.loss_pseudo, l.3 + 1);
            }
        }
        for (e, l) in out.iter_mut().zip(losses) {
            let k = l.3 as f64;
            (e.loss, e.loss_true, e.loss_pseudo) = if l.3 > 0 {
                (l.0 / k, l.1 / k, l.2 / k)
            } else {
                (f64::NAN, f64::NAN, f64::NAN)
            };
        }
        out
    }

    /// Pooled label quality of the three stages over all steps of epochs `from..`.
    pub fn quality_since(&self, from: usize) -> [QualityAcc; 3] {
        let mut q = [QualityAcc::default(); 3];
        for s in self.steps.iter().filter(|s| s.epoch >= from) {
            for (a, b) in q.iter_mut().zip(&s.quality) {
                a.merge(b);
            }
        }
        q
    }
}

/// Everything a training run produces besides the report.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub head: HeadState,
    pub opt: AdamWState,
    pub bank: ClasswiseMemoryBank,
    pub step: u64,
}

/// Hooks for artifacts written while training.
pub trait TrainObserver {
    /// Called for the first scene of the first step of every epoch.
    fn on_render(&mut self, _epoch: usize, _step: u64, _scene: &Scene, _camera: &Camera, _render: &RenderResult) -> Result<()> {
        Ok(())
    }

    fn on_step(&mut self, _record: &StepRecord, _state: &TrainState, _cfg: &TrainConfig) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl TrainObserver for NoObserver {}

fn check_scenes(cfg: &TrainConfig, scenes: &[Scene]) -> Result<usize> {
    let first = scenes.first().ok_or_else(|| Error::arg("training needs at least one scene"))?;
    let classes = first.num_classes();
    if classes == 0 {
        return Err(Error::Data(format!("scene '{}' has no class names", first.name())));
    }
    for s in scenes {
        if s.class_names() != first.class_names() {
            return Err(Error::Data(format!("scene '{}' uses a different class list", s.name())));
        }
        if cfg.w > 0.0 && s.sparse_labels().is_empty() {
            return Err(Error::Data(format!("scene '{}' has no sparse labels and w > 0", s.name())));
        }
    }
    Ok(classes)
}

/// Per-scene output of the pseudo-labeling half of a step.
struct ScenePass {
    d2: Vec<FeatureLabelPair>,
    true_rows: Vec<(Vec<f32>, usize)>,
    quality: [QualityAcc; 3],
}

#[allow(clippy::too_many_arguments)]
fn scene_pass(
    cfg: &TrainConfig,
    scene: &Scene,
    scene_id: u32,
    prompts: &[String],
    head: &HeadState,
    loss_filter_on: bool,
    rng: &mut ChaCha8Rng,
    features: &mut dyn FeatureExtractor,
    segmenter: &mut dyn ImageSegmenter,
    dump: Option<(&mut dyn TrainObserver, usize, u64)>,
) -> Result<ScenePass> {
    let params = cfg.augment.sample(rng)?;
    let aug = augment_scene(scene, &params, rng);
    let feats = features.extract_features(&aug).map_err(|e| e.context("extracting features"))?;
    if feats.rows() != aug.len() || feats.dim != head.config.input_dim {
        return Err(Error::Provider(format!(
            "feature extractor returned {}x{} for {} points, head expects width {}",
            feats.rows(),
            feats.dim,
            aug.len(),
            head.config.input_dim
        )));
    }
    let camera = make_camera(&aug, rng, cfg.resolution, cfg.resolution)?;
    let rr = render(&aug, &camera, &cfg.render);
    if let Some((obs, epoch, step)) = dump {
        obs.on_render(epoch, step, &aug, &camera, &rr)?;
    }
    let aux = SegmentAux { owner: &rr.owner, scene: &aug };
    let logits = segmenter
        .segment_image(&rr.image, prompts, Some(aux))
        .map_err(|e| e.context("segmenting render"))?;
    let d0 = build_pairs(&rr, &logits, &feats, cfg.tau, scene_id, aug.dense_labels())?;
    let mut quality = [QualityAcc::default(); 3];
    quality[0].add(&d0);
    let d1 = if cfg.confidence_filter { filter_confidence(d0, cfg.r)? } else { d0 };
    quality[1].add(&d1);
    let variant = if loss_filter_on { cfg.loss_filter } else { LossFilter::Off };
    let d2 = filter_loss(d1, head, variant, cfg.min_class_size)?;
    quality[2].add(&d2);
    let true_rows = aug.sparse_labels().iter().map(|&(i, c)| (feats.row(i).to_vec(), c)).collect();
    Ok(ScenePass { d2, true_rows, quality })
}

/// Fresh head, optimizer, and bank for `classes` classes at feature width `dim`.
pub fn init_state(cfg: &TrainConfig, dim: usize, classes: usize) -> Result<TrainState> {
    let head_cfg = HeadConfig::new(dim, cfg.hidden.clone(), classes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, b"head-init"));
    let head = HeadState::init(head_cfg, &mut rng);
    let opt = AdamWState::new(cfg.optimizer, &head);
    Ok(TrainState {
        head,
        opt,
        bank: ClasswiseMemoryBank::new(classes, cfg.cap_per_class)?,
        step: 0,
    })
}

/// Runs `cfg.epochs` epochs over `scenes`. The feature width is taken from the
/// first extraction.
pub fn train(
    cfg: &TrainConfig,
    scenes: &[Scene],
    features: &mut dyn FeatureExtractor,
    segmenter: &mut dyn ImageSegmenter,
    observer: &mut dyn TrainObserver,
) -> Result<(TrainState, TrainReport)> {
    cfg.validate()?;
    let classes = check_scenes(cfg, scenes)?;
    let dim = features
        .extract_features(&scenes[0])
        .map_err(|e| e.context(format!("probing features of scene '{}'", scenes[0].name())))?
        .dim;
    let mut state = init_state(cfg, dim, classes)?;
    let report = train_from(cfg, scenes, features, segmenter, observer, &mut state)?;
    Ok((state, report))
}

/// Continues training an existing state for `cfg.epochs` epochs.
pub fn train_from(
    cfg: &TrainConfig,
    scenes: &[Scene],
    features: &mut dyn FeatureExtractor,
    segmenter: &mut dyn ImageSegmenter,
    observer: &mut dyn TrainObserver,
    state: &mut TrainState,
) -> Result<TrainReport> {
    cfg.validate()?;
    let classes = check_scenes(cfg, scenes)?;
    if classes != state.head.config.classes {
        return Err(Error::arg(format!(
            "scenes have {classes} classes, head predicts {}",
            state.head.config.classes
        )));
    }
    let prompts = build_prompts(scenes[0].class_names())?;
    let dim = state.head.config.input_dim;
    let mut order_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, b"order"));
    let mut scene_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, b"scene"));
    let mut sample_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, b"sample"));
    let total_steps = (cfg.epochs * cfg.steps_per_epoch(scenes.len())) as u64;
    let first_step = state.step;
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut order_rng);
        for (k, chunk) in order.chunks(cfg.batch_scenes).enumerate() {
            let step = state.step;
            let ctx = |e: Error| e.context(format!("epoch {epoch} step {step}"));
            let loss_filter_on = step >= cfg.warmup_steps;
            let mut quality = [QualityAcc::default(); 3];
            let mut true_rows = Vec::new();
            for (j, &s) in chunk.iter().enumerate() {
                let dump = (k == 0 && j == 0).then_some((&mut *observer as &mut dyn TrainObserver, epoch, step));
                let pass = scene_pass(
                    cfg,
                    &scenes[s],
                    s as u32,
                    &prompts,
                    &state.head,
                    loss_filter_on,
                    &mut scene_rng,
                    features,
                    segmenter,
                    dump,
                )
                .map_err(|e| ctx(e.context(format!("scene '{}'", scenes[s].name()))))?;
                for (a, b) in quality.iter_mut().zip(&pass.quality) {
                    a.merge(b);
                }
                true_rows.extend(pass.true_rows);
                state.bank.append(pass.d2).map_err(ctx)?;
            }

            let (pseudo, n) = state.bank.sample(cfg.n_cap, &mut sample_rng);
            let d_true = if cfg.w > 0.0 {
                TargetSet::from_hard(true_rows.iter().map(|(f, c)| (f.as_slice(), *c)), dim, classes)?
            } else {
                TargetSet::empty(dim, classes)
            };
            let d_pseudo = if cfg.w < 1.0 {
                TargetSet::from_soft(pseudo.iter().map(|p| (p.feature.as_slice(), p.pseudo_label.as_slice())), dim, classes)?
            } else {
                TargetSet::empty(dim, classes)
            };
            drop(pseudo);

            let counts = state.bank.counts();
            let mut record = StepRecord {
                epoch,
                step,
                loss: f64::NAN,
                loss_true: f64::NAN,
                loss_pseudo: f64::NAN,
                quality,
                cmb_min: counts.iter().copied().min().unwrap_or(0),
                cmb_q1: first_quartile(&counts),
                cmb_max: counts.iter().copied().max().unwrap_or(0),
                n,
            };
            if d_true.len() + d_pseudo.len() >= 2 {
                let out = loss_and_grads(&state.head, &d_true, &d_pseudo, cfg.w).map_err(|e| {
                    ctx(e.context(format!("{} true rows, {} pseudo rows, bank {counts:?}", d_true.len(), d_pseudo.len())))
                })?;
                state.opt.config.lr = cfg.lr_at(step - first_step, total_steps);
                adamw_step(&mut state.opt, &mut state.head, &out.grads).map_err(ctx)?;
                state.head.update_running_stats(&out.stats);
                (record.loss, record.loss_true, record.loss_pseudo) = (out.loss, out.loss_true, out.loss_pseudo);
            } else {
                log::warn!("epoch {epoch} step {step}: skipped, fewer than 2 training rows");
            }
            state.step += 1;
            observer.on_step(&record, state, cfg).map_err(ctx)?;
            report.steps.push(record);
        }
    }
    Ok(report)
}

/// Per-point class predictions for one scene.
pub fn predict_scene(head: &HeadState, scene: &Scene, features: &mut dyn FeatureExtractor) -> Result<Vec<usize>> {
    if scene.is_empty() {
        return Ok(Vec::new());
    }
    let feats = features.extract_features(scene)?;
    let x = Array2::from_shape_vec((feats.rows(), feats.dim), feats.data.iter().map(|&v| v as f64).collect())
        .map_err(|e| Error::arg(e.to_string()))?;
    predict_classes(head, x.view())
}
