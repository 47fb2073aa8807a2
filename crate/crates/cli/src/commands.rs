use std::cell::RefCell;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::rc::Rc;

use anyhow::{bail, Context, Result};
use log::info;
use plovis_core::checkpoint::Checkpoint;
use plovis_core::experiment::evaluate;
use plovis_core::head::HeadState;
use plovis_core::metrics::SegmentationMetrics;
use plovis_core::providers::{
    FeatureExtractor, ImageSegmenter, OracleFeatures, OracleNoiseModel, OracleSegmenter, Recorder, ReplayProvider,
    ReplayStore, SidecarClient,
};
use plovis_core::render::{make_camera, render, Camera, RenderResult};
use plovis_core::scene::{load_scene, sample_sparse_annotations, save_scene, write_labels, PlyFormat, Scene};
use plovis_core::synthetic::{synthetic_scene, SyntheticConfig};
use plovis_core::train::{train, StepRecord, TrainConfig, TrainObserver, TrainReport, TrainState, REPORT_COLUMNS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ProviderKind, RunConfig, SWEEPABLE};
use crate::Usage;

pub struct Providers {
    pub features: Box<dyn FeatureExtractor>,
    pub segmenter: Box<dyn ImageSegmenter>,
}

pub fn providers(cfg: &RunConfig) -> Result<Providers> {
    let (features, segmenter): (Box<dyn FeatureExtractor>, Box<dyn ImageSegmenter>) = match cfg.provider {
        ProviderKind::Oracle => (
            Box::new(OracleFeatures::new(cfg.oracle_features)?),
            Box::new(OracleSegmenter::new(OracleNoiseModel {
                seed: cfg.oracle_noise.seed ^ cfg.train.seed,
                ..cfg.oracle_noise
            })?),
        ),
        ProviderKind::Replay => {
            let dir = cfg.replay_dir.as_ref().expect("checked");
            (
                Box::new(ReplayProvider::new(ReplayStore::open(dir)?)),
                Box::new(ReplayProvider::new(ReplayStore::open(dir)?)),
            )
        }
        ProviderKind::Sidecar => {
            let client = match (&cfg.sidecar_cmd, &cfg.sidecar_addr) {
                (Some(cmd), _) => SidecarClient::spawn(cmd)?,
                (_, Some(addr)) => SidecarClient::connect(addr)?,
                _ => unreachable!("checked"),
            };
            let shared = Rc::new(RefCell::new(client));
            (Box::new(shared.clone()), Box::new(shared))
        }
    };
    let Some(dir) = &cfg.record_dir else {
        return Ok(Providers { features, segmenter });
    };
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(Providers {
        features: Box::new(Recorder::new(features, ReplayStore::open(dir)?)),
        segmenter: Box::new(Recorder::new(segmenter, ReplayStore::open(dir)?)),
    })
}

fn scene_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ply")))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Usage(format!("no .ply scenes in {}", dir.display())).into());
    }
    Ok(files)
}

fn load_dir(cfg: &RunConfig, dir: &Path) -> Result<Vec<Scene>> {
    let label_dir = cfg.label_dir.as_deref().unwrap_or(dir);
    let mut scenes = Vec::new();
    for path in scene_files(dir)? {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let labels = label_dir.join(format!("{stem}.labels"));
        let labels = labels.is_file().then_some(labels);
        let mut scene = load_scene(&path, labels.as_deref()).with_context(|| format!("loading {}", path.display()))?;
        if scene.class_names().is_empty() {
            bail!("{}: no label file found at {}", path.display(), label_dir.join(format!("{stem}.labels")).display());
        }
        if cfg.sparse_per_scene > 0 {
            let seed = plovis_core::providers::derive_seed(cfg.train.seed, stem.as_bytes());
            scene = sample_sparse_annotations(&scene, cfg.sparse_per_scene, seed)?;
        }
        scenes.push(scene);
    }
    Ok(scenes)
}

fn synthetic(cfg: &RunConfig) -> SyntheticConfig {
    SyntheticConfig {
        sparse_labels: if cfg.sparse_per_scene > 0 { cfg.sparse_per_scene } else { cfg.synthetic.sparse_labels },
        ..cfg.synthetic
    }
}

pub fn train_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    match &cfg.scene_dir {
        Some(dir) => load_dir(cfg, dir),
        None => {
            let syn = synthetic(cfg);
            Ok((0..cfg.train_scenes).map(|i| synthetic_scene(&syn, i)).collect::<Result<_, _>>()?)
        }
    }
}

pub fn eval_scenes(cfg: &RunConfig) -> Result<Vec<Scene>> {
    match cfg.eval_scene_dir.as_ref().or(cfg.scene_dir.as_ref()) {
        Some(dir) => load_dir(cfg, dir),
        None => {
            let syn = synthetic(cfg);
            Ok((0..cfg.eval_scenes)
                .map(|i| synthetic_scene(&syn, cfg.train_scenes + i))
                .collect::<Result<_, _>>()?)
        }
    }
}

pub fn write_render(dir: &Path, stem: &str, camera: &Camera, result: &RenderResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut ppm = Vec::new();
    result.image.write_ppm(&mut ppm)?;
    fs::write(dir.join(format!("{stem}.ppm")), ppm)?;
    fs::write(dir.join(format!("{stem}.owner.bin")), result.owner_map_bytes())?;
    fs::write(dir.join(format!("{stem}.camera.json")), serde_json::to_string_pretty(camera)?)?;
    Ok(())
}

struct Artifacts<'a> {
    out: &'a Path,
    class_names: Vec<String>,
    render_every: usize,
    checkpoint_every: u64,
}

impl TrainObserver for Artifacts<'_> {
    fn on_render(
        &mut self,
        epoch: usize,
        _step: u64,
        scene: &Scene,
        camera: &Camera,
        render: &RenderResult,
    ) -> plovis_core::Result<()> {
        if self.render_every == 0 || !epoch.is_multiple_of(self.render_every) {
            return Ok(());
        }
        write_render(&self.out.join("renders"), &format!("epoch{epoch:04}_{}", scene.name()), camera, render)
            .map_err(|e| plovis_core::Error::Data(format!("{e:#}")))
    }

    fn on_step(&mut self, record: &StepRecord, state: &TrainState, cfg: &TrainConfig) -> plovis_core::Result<()> {
        if self.checkpoint_every == 0 || !state.step.is_multiple_of(self.checkpoint_every) {
            return Ok(());
        }
        let dir = self.out.join("checkpoints");
        fs::create_dir_all(&dir)?;
        Checkpoint::new(&state.head, &state.opt, &self.class_names, state.step, record.epoch, &cfg.hash())
            .save(&dir.join(format!("step{:06}.ckpt", state.step)))
    }
}

fn epochs_csv(report: &TrainReport) -> String {
    let mut out = format!("{REPORT_COLUMNS}\n");
    for e in report.epochs() {
        out.push_str(&e.csv_row());
        out.push('\n');
    }
    out
}

fn prepare_out(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("resolved_config.json"), cfg.to_json()?)?;
    Ok(())
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub report: TrainReport,
    pub providers: Providers,
}

pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    prepare_out(out, cfg)?;
    let scenes = train_scenes(cfg)?;
    let class_names = scenes[0].class_names().to_vec();
    let mut providers = providers(cfg)?;
    let mut artifacts = Artifacts {
        out,
        class_names: class_names.clone(),
        render_every: cfg.render_every,
        checkpoint_every: cfg.checkpoint_every,
    };
    info!("training on {} scenes for {} epochs", scenes.len(), cfg.train.epochs);
    let (state, report) = train(
        &cfg.train,
        &scenes,
        providers.features.as_mut(),
        providers.segmenter.as_mut(),
        &mut artifacts,
    )?;

    let last_epoch = report.steps.last().map_or(0, |s| s.epoch);
    Checkpoint::new(&state.head, &state.opt, &class_names, state.step, last_epoch, &cfg.train.hash())
        .save(&out.join("checkpoint_final.ckpt"))?;
    let mut bank = Vec::new();
    state.bank.write_to(&mut bank)?;
    fs::write(out.join("bank_final.bin"), bank)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    fs::write(out.join("epochs.csv"), epochs_csv(&report))?;

    let window = cfg.metric_window.max(1);
    let q = report.quality_since((last_epoch + 1).saturating_sub(window));
    let summary = serde_json::json!({
        "steps": state.step,
        "epochs": last_epoch + 1,
        "window_epochs": window,
        "la": [q[0].la(), q[1].la(), q[2].la()],
        "li": [q[0].li(), q[1].li(), q[2].li()],
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(TrainOutcome { state, report, providers })
}

pub fn metrics_csv(m: &SegmentationMetrics, class_names: &[String]) -> String {
    let fmt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("metric");
    for n in class_names {
        let _ = write!(out, ",{n}");
    }
    out.push_str(",mean\n");
    for (name, vals, mean) in [("iou", &m.iou, m.miou), ("acc", &m.acc, m.macc)] {
        out.push_str(name);
        for v in vals {
            let _ = write!(out, ",{}", fmt(*v));
        }
        let _ = writeln!(out, ",{mean:.6}");
    }
    out
}

fn check_architecture(head: &HeadState, scenes: &[Scene], features: &mut dyn FeatureExtractor) -> Result<()> {
    let cfg = &head.config;
    let classes = scenes[0].num_classes();
    let dim = features.extract_features(&scenes[0])?.dim;
    if dim != cfg.input_dim || classes != cfg.classes {
        return Err(Usage(format!(
            "architecture mismatch: checkpoint expects {} features and {} classes, data has {dim} features and {classes} classes",
            cfg.input_dim, cfg.classes
        ))
        .into());
    }
    Ok(())
}

pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<SegmentationMetrics> {
    prepare_out(out, cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let scenes = eval_scenes(cfg)?;
    if let Some(s) = scenes.iter().find(|s| s.dense_labels().is_none()) {
        bail!("scene '{}': evaluation requires dense labels", s.name());
    }
    let mut providers = providers(cfg)?;
    check_architecture(&ck.head, &scenes, providers.features.as_mut())?;
    let m = evaluate(&ck.head, &scenes, providers.features.as_mut())?;
    fs::write(out.join("metrics.csv"), metrics_csv(&m, &ck.header.class_names))?;
    Ok(m)
}

pub fn run_render(cfg: &RunConfig, scene: Option<&Path>, index: usize, out: &Path) -> Result<RenderResult> {
    prepare_out(out, cfg)?;
    let scene = match scene {
        Some(p) => load_scene(p, None).with_context(|| format!("loading {}", p.display()))?,
        None => synthetic_scene(&synthetic(cfg), index)?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let res = cfg.train.resolution;
    let camera = make_camera(&scene, &mut rng, res, res)?;
    let result = render(&scene, &camera, &cfg.train.render);
    write_render(out, "render", &camera, &result)?;
    Ok(result)
}

pub fn run_sweep(cfg: &RunConfig, param: &str, values: &[String], out: &Path) -> Result<String> {
    if !SWEEPABLE.contains(&param) {
        return Err(Usage(format!("cannot sweep '{param}'; sweepable parameters: {}", SWEEPABLE.join(", "))).into());
    }
    if values.is_empty() {
        return Err(Usage("sweep needs at least one value".into()).into());
    }
    let mut runs = Vec::new();
    for v in values {
        let mut root = serde_json::to_value(cfg)?;
        crate::config::apply_set(&mut root, &format!("{param}={v}")).map_err(|e| Usage(format!("{e:#}")))?;
        let run: RunConfig = serde_json::from_value(root).map_err(|e| Usage(format!("{param}={v}: {e}")))?;
        run.train.validate().map_err(|e| Usage(format!("{param}={v}: {e}")))?;
        runs.push((v, run));
    }
    prepare_out(out, cfg)?;
    let mut summary = String::from("value,miou,macc,la_d2,li_d2\n");
    for (v, run) in runs {
        let dir = out.join(format!("{param}={v}"));
        info!("sweep {param}={v}");
        let mut outcome = run_train(&run, &dir)?;
        let scenes = eval_scenes(&run)?;
        let m = evaluate(&outcome.state.head, &scenes, outcome.providers.features.as_mut())?;
        fs::write(dir.join("metrics.csv"), metrics_csv(&m, scenes[0].class_names()))?;
        let last = outcome.report.steps.last().map_or(0, |s| s.epoch);
        let q = outcome.report.quality_since((last + 1).saturating_sub(run.metric_window.max(1)));
        let _ = writeln!(summary, "{v},{:.6},{:.6},{:.6},{:.6}", m.miou, m.macc, q[2].la(), q[2].li());
    }
    fs::write(out.join("summary.csv"), &summary)?;
    Ok(summary)
}

pub fn run_gen_synthetic(cfg: &RunConfig, count: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let syn = SyntheticConfig { sparse_labels: 0, ..cfg.synthetic };
    for i in 0..count {
        let scene = synthetic_scene(&syn, i)?;
        save_scene(&scene, &out.join(format!("{}.ply", scene.name())), PlyFormat::BinaryLittleEndian)?;
        fs::write(out.join(format!("{}.labels", scene.name())), write_labels(&scene))?;
    }
    Ok(())
}
