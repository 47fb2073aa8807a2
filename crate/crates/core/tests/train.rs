use plovis_core::checkpoint::Checkpoint;
use plovis_core::experiment::evaluate;
use plovis_core::providers::{
    OracleFeatureConfig, OracleFeatures, OracleNoiseModel, OracleSegmenter, Recorder, ReplayProvider, ReplayStore,
};
use plovis_core::scene::Scene;
use plovis_core::synthetic::{synthetic_scenes, SyntheticConfig};
use plovis_core::train::{init_state, train, train_from, FilterCase, NoObserver, TrainConfig, TrainReport, TrainState};

fn scenes(sparse: usize) -> Vec<Scene> {
    synthetic_scenes(&SyntheticConfig { points: 800, sparse_labels: sparse, ..Default::default() }, 4).unwrap()
}

fn cfg() -> TrainConfig {
    let mut c = TrainConfig { epochs: 3, batch_scenes: 2, resolution: 64, hidden: vec![16], n_cap: 500, seed: 5, ..Default::default() };
    c.optimizer.lr = 1e-3;
    c
}

fn oracle() -> (OracleFeatures, OracleSegmenter) {
    (
        OracleFeatures::new(OracleFeatureConfig { dim: 8, ..Default::default() }).unwrap(),
        OracleSegmenter::new(OracleNoiseModel::default()).unwrap(),
    )
}

fn run(cfg: &TrainConfig, scenes: &[Scene]) -> (TrainState, TrainReport) {
    let (mut f, mut s) = oracle();
    train(cfg, scenes, &mut f, &mut s, &mut NoObserver).unwrap()
}

fn param_bits(state: &TrainState) -> Vec<u64> {
    state.head.param_slices().iter().flat_map(|t| t.iter().map(|v| v.to_bits())).collect()
}

#[test]
fn same_seed_same_bits() {
    let sc = scenes(30);
    let (a, ra) = run(&cfg(), &sc);
    let (b, rb) = run(&cfg(), &sc);
    assert_eq!(ra.to_csv(), rb.to_csv());
    assert_eq!(param_bits(&a), param_bits(&b));
    assert_eq!(a.step, 6);

    let (c, _) = run(&TrainConfig { seed: 6, ..cfg() }, &sc);
    assert_ne!(param_bits(&a), param_bits(&c));
}

#[test]
fn replayed_providers_train_identically() {
    let dir = tempfile::tempdir().unwrap();
    let sc = scenes(30);
    let (f, s) = oracle();
    let mut f = Recorder::new(f, ReplayStore::open(dir.path()).unwrap());
    let mut s = Recorder::new(s, ReplayStore::open(dir.path()).unwrap());
    let (live, live_report) = train(&cfg(), &sc, &mut f, &mut s, &mut NoObserver).unwrap();

    let mut f = ReplayProvider::new(ReplayStore::open(dir.path()).unwrap());
    let mut s = ReplayProvider::new(ReplayStore::open(dir.path()).unwrap());
    let (replayed, replay_report) = train(&cfg(), &sc, &mut f, &mut s, &mut NoObserver).unwrap();
    assert_eq!(live_report.to_csv(), replay_report.to_csv());
    assert_eq!(param_bits(&live), param_bits(&replayed));
}

#[test]
fn zero_shot_and_probing_modes() {
    // w = 0 needs no sparse labels at all
    let (_, r0) = run(&TrainConfig { w: 0.0, ..cfg() }, &scenes(0));
    assert!(r0.steps.iter().all(|s| s.loss_true == 0.0 && s.loss == s.loss_pseudo));

    // w = 1 trains on the sparse labels alone and ignores the bank
    let (_, r1) = run(&TrainConfig { w: 1.0, ..cfg() }, &scenes(30));
    assert!(r1.steps.iter().all(|s| s.loss_pseudo == 0.0 && s.loss == s.loss_true));

    let (mut f, mut s) = oracle();
    assert!(train(&TrainConfig { w: 0.5, ..cfg() }, &scenes(0), &mut f, &mut s, &mut NoObserver).is_err());
}

#[test]
fn filter_cases_shape_the_stages() {
    let sc = scenes(30);
    let (_, off) = run(&{ let mut c = cfg(); FilterCase::None.apply(&mut c); c }, &sc);
    let q = off.quality_since(0);
    assert_eq!(q[0].n, q[2].n);

    let (_, both) = run(&cfg(), &sc);
    let q = both.quality_since(0);
    assert!(q[1].n < q[0].n && q[2].n <= q[1].n);
    assert!(q[1].la() > q[0].la());
}

#[test]
fn resumed_training_continues_from_checkpoint() {
    let sc = scenes(30);
    let (state, _) = run(&cfg(), &sc);
    let mut buf = Vec::new();
    Checkpoint::new(&state.head, &state.opt, sc[0].class_names(), state.step, 2, &cfg().hash()).write_to(&mut buf).unwrap();
    let ck = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
    assert_eq!(ck.header.step, 6);

    let mut resumed = init_state(&cfg(), 8, 5).unwrap();
    resumed.head = ck.head;
    resumed.opt = ck.opt;
    resumed.step = ck.header.step;
    let (mut f, mut s) = oracle();
    let report = train_from(&TrainConfig { epochs: 1, ..cfg() }, &sc, &mut f, &mut s, &mut NoObserver, &mut resumed).unwrap();
    assert_eq!(report.steps.first().unwrap().step, 6);
    assert_eq!(resumed.step, 8);
    assert_eq!(resumed.opt.t, 8);

    let (mut f, _) = oracle();
    let m = evaluate(&resumed.head, &sc, &mut f).unwrap();
    assert!(m.miou.is_finite());
}
