//! Checks shared by the integration tests and the acceptance report.
#![allow(dead_code)]

use std::collections::VecDeque;

use plovis_core::filter::{ClasswiseMemoryBank, FeatureLabelPair};
use plovis_core::head::{loss_and_grads, HeadConfig, HeadState, TargetSet};
use plovis_core::metrics::{confusion, iou_acc};
use plovis_core::render::{render, Camera, RenderConfig, RenderResult};
use plovis_core::scene::{Point, Scene, Vec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub type Check = Result<String, String>;

pub fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- gradients

pub struct GradCase {
    pub dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub n_true: usize,
    pub n_pseudo: usize,
    pub w: f64,
    pub seed: u64,
}

pub fn grad_cases() -> Vec<GradCase> {
    let mk = |dim, hidden: &[usize], classes, n_true, n_pseudo, w, seed| GradCase {
        dim,
        hidden: hidden.to_vec(),
        classes,
        n_true,
        n_pseudo,
        w,
        seed,
    };
    vec![
        mk(3, &[], 2, 4, 5, 0.5, 1),
        mk(4, &[5], 3, 6, 6, 0.5, 2),
        mk(5, &[6, 4], 4, 3, 9, 0.3, 3),
        mk(6, &[8, 8, 5], 3, 8, 0, 1.0, 4),
        mk(4, &[7], 5, 0, 10, 0.0, 5),
        mk(8, &[10, 6], 6, 12, 12, 0.8, 6),
        mk(2, &[3], 2, 2, 2, 0.5, 7),
        mk(7, &[12, 9], 4, 5, 15, 0.1, 8),
        mk(5, &[16, 8], 10, 10, 10, 0.5, 9),
    ]
}

fn random_sets(c: &GradCase, rng: &mut ChaCha8Rng) -> (TargetSet, TargetSet) {
    let rows = |n: usize, rng: &mut ChaCha8Rng| -> Vec<Vec<f32>> {
        (0..n).map(|_| (0..c.dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect()
    };
    let xt = rows(c.n_true, rng);
    let xp = rows(c.n_pseudo, rng);
    let labels: Vec<usize> = (0..c.n_true).map(|_| rng.random_range(0..c.classes)).collect();
    let soft: Vec<Vec<f64>> = (0..c.n_pseudo)
        .map(|_| {
            let v: Vec<f64> = (0..c.classes).map(|_| rng.random_range(0.01..1.0)).collect();
            let s: f64 = v.iter().sum();
            v.into_iter().map(|x| x / s).collect()
        })
        .collect();
    let dt = TargetSet::from_hard(xt.iter().map(Vec::as_slice).zip(labels), c.dim, c.classes).unwrap();
    let dp = TargetSet::from_soft(xp.iter().map(Vec::as_slice).zip(soft.iter().map(Vec::as_slice)), c.dim, c.classes)
        .unwrap();
    (dt, dp)
}

/// Largest relative deviation between analytic and central-difference gradients
/// over every parameter.
pub fn grad_check(c: &GradCase) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let mut head = HeadState::init(HeadConfig::new(c.dim, c.hidden.clone(), c.classes).unwrap(), &mut rng);
    // non-trivial affine BN parameters
    for (_, bn) in head.hidden.iter_mut() {
        bn.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
        bn.beta.mapv_inplace(|_| rng.random_range(-0.3..0.3));
    }
    let (dt, dp) = random_sets(c, &mut rng);
    let analytic = loss_and_grads(&head, &dt, &dp, c.w).unwrap().grads;
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (t, tensor) in analytic.tensors.iter().enumerate() {
        for (i, &a) in tensor.iter().enumerate() {
            let mut plus = head.clone();
            plus.params_mut()[t].0[i] += h;
            let mut minus = head.clone();
            minus.params_mut()[t].0[i] -= h;
            let lp = loss_and_grads(&plus, &dt, &dp, c.w).unwrap().loss;
            let lm = loss_and_grads(&minus, &dt, &dp, c.w).unwrap().loss;
            let numeric = (lp - lm) / (2.0 * h);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-4);
            worst = worst.max(rel);
        }
    }
    worst
}

// ---------------------------------------------------------------- renderer

pub fn random_scene(rng: &mut ChaCha8Rng, n: usize) -> Scene {
    let points = (0..n)
        .map(|_| {
            let normal = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            Point {
                position: Vec3::new(rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)),
                color: Vec3::new(rng.random(), rng.random(), rng.random()),
                normal: normal.normalize(),
            }
        })
        .collect();
    Scene::new("random", points, None, Vec::new(), Vec::new()).unwrap()
}

pub fn random_camera(rng: &mut ChaCha8Rng, size: u32) -> Camera {
    let dir = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)).normalize();
    let eye = Vec3::new(0.5, 0.5, 0.5) + dir * rng.random_range(1.5..3.0);
    let target = Vec3::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
    Camera::new(eye, target, Vec3::z(), rng.random_range(30.0..60.0), size, size).unwrap()
}

/// Owner and depth maps computed pixel by pixel against every point.
pub fn brute_force_render(scene: &Scene, cam: &Camera, cfg: &RenderConfig) -> (Vec<Option<u32>>, Vec<f64>) {
    let eye = Vec3::from(cam.eye);
    let forward = (Vec3::from(cam.look_at) - eye).normalize();
    let right = forward.cross(&Vec3::from(cam.up)).normalize();
    let up = right.cross(&forward);
    let f = (cam.height as f64 / 2.0) / (cam.fov_deg.to_radians() / 2.0).tan();

    // (pixel x, pixel y, distance) of each point that faces the camera and lands in the image
    let placed: Vec<Option<(i64, i64, f64)>> = scene
        .points()
        .iter()
        .map(|p| {
            let v = p.position - eye;
            if p.normal.dot(&v) >= 0.0 {
                return None;
            }
            let z = v.dot(&forward);
            if z <= cfg.near {
                return None;
            }
            let x = (cam.width as f64 / 2.0 + f * v.dot(&right) / z).floor();
            let y = (cam.height as f64 / 2.0 - f * v.dot(&up) / z).floor();
            let inside = x >= 0.0 && y >= 0.0 && x < cam.width as f64 && y < cam.height as f64;
            inside.then(|| (x as i64, y as i64, v.norm()))
        })
        .collect();
    let ds: Vec<f64> = placed.iter().flatten().map(|p| p.2).collect();
    let dmin = ds.iter().copied().fold(f64::INFINITY, f64::min);
    let dmax = ds.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let side = |d: f64| -> i64 {
        let t = if dmax > dmin { (d - dmin) / (dmax - dmin) } else { 0.0 };
        (6.0 - 4.0 * t).round().clamp(2.0, 6.0) as i64
    };

    let mut owner = Vec::new();
    let mut depth = Vec::new();
    for v in 0..cam.height as i64 {
        for u in 0..cam.width as i64 {
            let mut best: Option<(u32, f64)> = None;
            for (i, p) in placed.iter().enumerate() {
                let Some((x, y, d)) = *p else { continue };
                let s = side(d);
                let covers = |c: i64, q: i64| q >= c - s / 2 && q < c + (s + 1) / 2;
                if covers(x, u) && covers(y, v) && best.is_none_or(|(_, bd)| d < bd) {
                    best = Some((i as u32, d));
                }
            }
            owner.push(best.map(|b| b.0));
            depth.push(best.map_or(f64::INFINITY, |b| b.1));
        }
    }
    (owner, depth)
}

pub fn renderer_matches_oracle(scenes: usize, points: usize, size: u32, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RenderConfig::default();
    let mut owned = 0;
    for k in 0..scenes {
        let scene = random_scene(&mut rng, points);
        let cam = random_camera(&mut rng, size);
        let r = render(&scene, &cam, &cfg);
        let (owner, depth) = brute_force_render(&scene, &cam, &cfg);
        if let Some(px) = (0..owner.len()).find(|&i| owner[i] != r.owner[i] || depth[i] != r.depth[i]) {
            return Err(format!(
                "scene {k} pixel {px}: oracle {:?}@{} vs renderer {:?}@{}",
                owner[px], depth[px], r.owner[px], r.depth[px]
            ));
        }
        owned += owner.iter().flatten().count();
        let again = render(&scene, &cam, &cfg);
        ensure(again == r && again.image.to_rgb8() == r.image.to_rgb8(), || format!("scene {k}: rerender differs"))?;
    }
    Ok(format!("{scenes} scenes, {owned} owned pixels identical"))
}

/// Renders one point whose normal makes `angle_deg` with the eye-to-point direction.
pub fn render_at_angle(angle_deg: f64) -> RenderResult {
    let eye = Vec3::new(0.0, 0.0, 5.0);
    let pos = Vec3::zeros();
    let view = (pos - eye).normalize();
    let a = angle_deg.to_radians();
    let normal = view * a.cos() + Vec3::x() * a.sin();
    let scene = Scene::new(
        "one",
        vec![Point { position: pos, color: Vec3::new(1.0, 0.0, 0.0), normal }],
        None,
        Vec::new(),
        Vec::new(),
    )
    .unwrap();
    let cam = Camera::new(eye, pos, Vec3::y(), 40.0, 16, 16).unwrap();
    render(&scene, &cam, &RenderConfig::default())
}

// ---------------------------------------------------------------- memory bank

fn pair(id: u32, class: usize, classes: usize) -> FeatureLabelPair {
    let mut label = vec![0.0; classes];
    label[class] = 1.0;
    FeatureLabelPair { feature: vec![id as f32], pseudo_label: label, point_index: id, scene_id: 0, true_class: None }
}

/// Interpolated first quartile, floored.
pub fn q1_floor(counts: &[usize]) -> usize {
    let mut s = counts.to_vec();
    s.sort_unstable();
    let pos = 0.25 * (s.len() - 1) as f64;
    let (lo, frac) = (pos.floor() as usize, pos.fract());
    let hi = (lo + 1).min(s.len() - 1);
    (s[lo] as f64 + frac * (s[hi] as f64 - s[lo] as f64)).floor() as usize
}

/// Random interleavings of appends and samples checked against a plain FIFO model.
pub fn bank_contract(ops: usize, classes: usize, cap: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bank = ClasswiseMemoryBank::new(classes, cap).unwrap();
    let mut model: Vec<VecDeque<u32>> = vec![VecDeque::new(); classes];
    let mut next_id = 0u32;
    let (mut appended, mut sampled) = (0usize, 0usize);
    for op in 0..ops {
        if rng.random_bool(0.7) {
            let k = rng.random_range(0..12);
            let batch: Vec<FeatureLabelPair> = (0..k)
                .map(|_| {
                    // skewed class frequencies so queues fill at different rates
                    let c = (rng.random::<f64>().powi(2) * classes as f64) as usize;
                    next_id += 1;
                    pair(next_id, c.min(classes - 1), classes)
                })
                .collect();
            for p in &batch {
                let q = &mut model[p.class()];
                if q.len() == cap {
                    q.pop_front();
                }
                q.push_back(p.point_index);
            }
            appended += batch.len();
            bank.append(batch).unwrap();
            for (j, q) in model.iter().enumerate() {
                let got: Vec<u32> = bank.queue(j).map(|(_, p)| p.point_index).collect();
                ensure(got.len() <= cap, || format!("op {op}: class {j} holds {} > cap {cap}", got.len()))?;
                ensure(got.iter().eq(q.iter()), || format!("op {op}: class {j} order differs from FIFO"))?;
                let seqs: Vec<u64> = bank.queue(j).map(|(s, _)| s).collect();
                ensure(seqs.windows(2).all(|w| w[0] < w[1]), || format!("op {op}: class {j} sequence not increasing"))?;
            }
        } else {
            let n_cap = rng.random_range(1..2 * cap);
            let counts: Vec<usize> = model.iter().map(VecDeque::len).collect();
            let want = q1_floor(&counts).min(n_cap);
            let (pairs, n) = bank.sample(n_cap, &mut rng);
            ensure(n == want, || format!("op {op}: sampled n={n}, expected {want} from {counts:?} cap {n_cap}"))?;
            let mut per_class = vec![Vec::new(); classes];
            for p in pairs {
                per_class[p.class()].push(p.point_index);
            }
            for (j, ids) in per_class.iter_mut().enumerate() {
                ensure(ids.len() == n.min(counts[j]), || format!("op {op}: class {j} drew {} pairs", ids.len()))?;
                ensure(ids.iter().all(|id| model[j].contains(id)), || format!("op {op}: class {j} drew an evicted pair"))?;
                ids.sort_unstable();
                ensure(ids.windows(2).all(|w| w[0] != w[1]), || format!("op {op}: class {j} drew a pair twice"))?;
            }
            sampled += 1;
        }
    }
    Ok(format!("{ops} ops ({appended} pairs appended, {sampled} samples)"))
}

// ---------------------------------------------------------------- metrics

pub fn metrics_match_brute_force(instances: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..instances {
        let classes = rng.random_range(2..8);
        let n = rng.random_range(1..400);
        let truth: Vec<i32> = (0..n).map(|_| rng.random_range(-1..classes as i32)).collect();
        let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
        let Ok(m) = confusion(&preds, &truth, classes).and_then(|cm| iou_acc(&cm)) else {
            ensure(truth.iter().all(|&t| t < 0), || format!("instance {k}: metric error on labeled data"))?;
            continue;
        };
        let (mut ious, mut accs) = (Vec::new(), Vec::new());
        for c in 0..classes {
            let labeled = |i: &usize| truth[*i] >= 0;
            let tp = (0..n).filter(labeled).filter(|&i| truth[i] == c as i32 && preds[i] == c).count();
            let gt = (0..n).filter(labeled).filter(|&i| truth[i] == c as i32).count();
            let pr = (0..n).filter(labeled).filter(|&i| preds[i] == c).count();
            let union = gt + pr - tp;
            let iou = (union > 0).then(|| tp as f64 / union as f64);
            let acc = (gt > 0).then(|| tp as f64 / gt as f64);
            ensure(m.iou[c].is_some() == iou.is_some(), || format!("instance {k}: class {c} iou definedness"))?;
            ensure(m.acc[c].is_some() == acc.is_some(), || format!("instance {k}: class {c} acc definedness"))?;
            if let (Some(a), Some(b)) = (m.iou[c], iou) {
                ensure((a - b).abs() < 1e-12, || format!("instance {k}: class {c} iou {a} vs {b}"))?;
            }
            if let (Some(a), Some(b)) = (m.acc[c], acc) {
                ensure((a - b).abs() < 1e-12, || format!("instance {k}: class {c} acc {a} vs {b}"))?;
            }
            ious.extend(iou);
            accs.extend(acc);
        }
        let miou = ious.iter().sum::<f64>() / ious.len() as f64;
        let macc = accs.iter().sum::<f64>() / accs.len() as f64;
        ensure((m.miou - miou).abs() < 1e-12, || format!("instance {k}: miou {} vs {miou}", m.miou))?;
        ensure((m.macc - macc).abs() < 1e-12, || format!("instance {k}: macc {} vs {macc}", m.macc))?;
    }
    Ok(format!("{instances} random instances"))
}

// ---------------------------------------------------------------- fixtures

/// 50 draws around 0.1 and 50 around 3.0, both with spread 0.02.
pub fn bimodal_losses(seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = Normal::new(0.1, 0.02).unwrap();
    let b = Normal::new(3.0, 0.02).unwrap();
    let mut v: Vec<f64> = (0..50).map(|_| a.sample(&mut rng)).collect();
    v.extend((0..50).map(|_| b.sample(&mut rng)));
    v
}
