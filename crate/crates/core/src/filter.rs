//! Feature-label pairs, the confidence and loss filters, and the class-wise memory bank.

use std::collections::VecDeque;
use std::io::{Read, Write};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::HeadState;
use crate::numerics::{
    argmax, bottom_percentile_indices, cross_entropy_unchecked, entropy_unchecked, fit_gmm2, posterior_small,
    softmax_unchecked, sorted_quantile, temperature_softmax, DEFAULT_GMM_MAX_ITER, DEFAULT_GMM_TOL,
};
use crate::providers::{FeatureSet, LogitMap};
use crate::render::{visible_points, RenderResult};

pub const DEFAULT_CAP_PER_CLASS: usize = 100_000;
pub const DEFAULT_N_CAP: usize = 40_000;
pub const DEFAULT_MIN_CLASS_SIZE: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureLabelPair {
    pub feature: Vec<f32>,
    pub pseudo_label: Vec<f64>,
    pub point_index: u32,
    pub scene_id: u32,
    /// Ground truth, kept only for label-quality reporting.
    pub true_class: Option<usize>,
}

impl FeatureLabelPair {
    pub fn class(&self) -> usize {
        argmax(&self.pseudo_label)
    }
}

/// One pair per visible point, labeled with the tempered softmax of the logits at
/// the point's representative pixel.
pub fn build_pairs(
    render: &RenderResult,
    logits: &LogitMap,
    feats: &FeatureSet,
    tau: f64,
    scene_id: u32,
    truth: Option<&[i32]>,
) -> Result<Vec<FeatureLabelPair>> {
    if logits.width != render.width || logits.height != render.height {
        return Err(Error::arg(format!(
            "logits are {}x{} but the render is {}x{}",
            logits.width, logits.height, render.width, render.height
        )));
    }
    let n = render.center_pixel.len();
    if feats.rows() != n {
        return Err(Error::arg(format!("{} feature rows for {n} rendered points", feats.rows())));
    }
    if let Some(t) = truth {
        if t.len() != n {
            return Err(Error::arg(format!("{} truth labels for {n} points", t.len())));
        }
    }
    let mut out = Vec::new();
    for (i, (u, v)) in visible_points(render) {
        let z: Vec<f64> = logits.at(u, v).iter().map(|&x| x as f64).collect();
        out.push(FeatureLabelPair {
            feature: feats.row(i).to_vec(),
            pseudo_label: temperature_softmax(&z, tau)?,
            point_index: i as u32,
            scene_id,
            true_class: truth.and_then(|t| usize::try_from(t[i]).ok()),
        });
    }
    Ok(out)
}

/// Keeps the pairs whose pseudo-label entropy is in the bottom `r` percent.
pub fn filter_confidence(d0: Vec<FeatureLabelPair>, r: f64) -> Result<Vec<FeatureLabelPair>> {
    if d0.is_empty() {
        return Ok(d0);
    }
    let h: Vec<f64> = d0.iter().map(|p| entropy_unchecked(&p.pseudo_label)).collect();
    let keep = bottom_percentile_indices(&h, r)?;
    let mut mask = vec![false; d0.len()];
    for i in keep {
        mask[i] = true;
    }
    Ok(d0.into_iter().zip(mask).filter_map(|(p, k)| k.then_some(p)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossFilter {
    #[default]
    KeepSmall,
    KeepLarge,
    Off,
}

impl std::str::FromStr for LossFilter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep-small" => Ok(Self::KeepSmall),
            "keep-large" => Ok(Self::KeepLarge),
            "off" => Ok(Self::Off),
            _ => Err(Error::arg(format!("unknown loss filter '{s}' (keep-small, keep-large, off)"))),
        }
    }
}

/// Per-pair cross-entropy between the pseudo label and the head's prediction,
/// computed with inference-mode batch normalization.
pub fn pair_losses(pairs: &[&FeatureLabelPair], head: &HeadState) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Ok(Vec::new());
    }
    let dim = head.config.input_dim;
    let mut x = Array2::<f64>::zeros((pairs.len(), dim));
    for (mut row, p) in x.rows_mut().into_iter().zip(pairs) {
        if p.feature.len() != dim {
            return Err(Error::arg(format!("pair feature width {} vs head input {dim}", p.feature.len())));
        }
        row.iter_mut().zip(&p.feature).for_each(|(d, &s)| *d = s as f64);
    }
    let z = head.infer(x.view())?;
    Ok(z.rows()
        .into_iter()
        .zip(pairs)
        .map(|(zr, p)| cross_entropy_unchecked(&p.pseudo_label, &softmax_unchecked(zr.as_slice().unwrap())))
        .collect())
}

/// Per-class small-loss selection with a two-component GMM over the losses.
pub fn filter_loss(
    d1: Vec<FeatureLabelPair>,
    head: &HeadState,
    variant: LossFilter,
    min_class_size: usize,
) -> Result<Vec<FeatureLabelPair>> {
    if variant == LossFilter::Off || d1.is_empty() {
        return Ok(d1);
    }
    let classes = head.config.classes;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, p) in d1.iter().enumerate() {
        let c = p.class();
        if c >= classes {
            return Err(Error::arg(format!("pseudo label has class {c}, head has {classes}")));
        }
        by_class[c].push(i);
    }
    let mut keep = vec![true; d1.len()];
    for members in by_class.iter().filter(|m| !m.is_empty() && m.len() >= min_class_size) {
        let refs: Vec<&FeatureLabelPair> = members.iter().map(|&i| &d1[i]).collect();
        let losses = pair_losses(&refs, head)?;
        let gmm = fit_gmm2(&losses, DEFAULT_GMM_TOL, DEFAULT_GMM_MAX_ITER)?;
        for (&i, &l) in members.iter().zip(&losses) {
            let small = posterior_small(&gmm, l) >= 0.5;
            keep[i] = match variant {
                LossFilter::KeepSmall => small,
                LossFilter::KeepLarge => !small,
                LossFilter::Off => true,
            };
        }
    }
    Ok(d1.into_iter().zip(keep).filter_map(|(p, k)| k.then_some(p)).collect())
}

/// Interpolated first quartile of the counts, floored.
pub fn first_quartile(counts: &[usize]) -> usize {
    if counts.is_empty() {
        return 0;
    }
    let mut sorted: Vec<f64> = counts.iter().map(|&c| c as f64).collect();
    sorted.sort_by(f64::total_cmp);
    sorted_quantile(&sorted, 0.25).floor() as usize
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    dim: usize,
    #[serde(rename = "C")]
    classes: usize,
    cap: usize,
    counts: Vec<usize>,
}

/// C bounded FIFO queues of pairs, one per pseudo-label class.
#[derive(Debug, Clone)]
pub struct ClasswiseMemoryBank {
    queues: Vec<VecDeque<(u64, FeatureLabelPair)>>,
    counters: Vec<u64>,
    cap: usize,
}

impl ClasswiseMemoryBank {
    pub fn new(classes: usize, cap: usize) -> Result<Self> {
        if classes == 0 || cap == 0 {
            return Err(Error::arg(format!("memory bank needs classes and cap > 0, got {classes}, {cap}")));
        }
        Ok(Self {
            queues: vec![VecDeque::new(); classes],
            counters: vec![0; classes],
            cap,
        })
    }

    pub fn classes(&self) -> usize {
        self.queues.len()
    }

    pub fn cap(&self) -> usize {
        self.cap
    }

    pub fn counts(&self) -> Vec<usize> {
        self.queues.iter().map(VecDeque::len).collect()
    }

    pub fn total(&self) -> usize {
        self.queues.iter().map(VecDeque::len).sum()
    }

    /// Queue `j` oldest-first together with insertion sequence numbers.
    pub fn queue(&self, j: usize) -> impl Iterator<Item = (u64, &FeatureLabelPair)> {
        self.queues[j].iter().map(|(s, p)| (*s, p))
    }

    pub fn append(&mut self, pairs: impl IntoIterator<Item = FeatureLabelPair>) -> Result<()> {
        for p in pairs {
            let j = p.class();
            if j >= self.queues.len() {
                return Err(Error::arg(format!("pair of class {j} in a {}-class bank", self.queues.len())));
            }
            let q = &mut self.queues[j];
            if q.len() == self.cap {
                q.pop_front();
            }
            q.push_back((self.counters[j], p));
            self.counters[j] += 1;
        }
        Ok(())
    }

    pub fn sample_size(&self, n_cap: usize) -> usize {
        first_quartile(&self.counts()).min(n_cap)
    }

    /// Draws up to `n` pairs per class uniformly without replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n_cap: usize, rng: &mut R) -> (Vec<&FeatureLabelPair>, usize) {
        let n = self.sample_size(n_cap);
        let mut out = Vec::new();
        if n == 0 {
            return (out, 0);
        }
        for q in &self.queues {
            let k = n.min(q.len());
            for i in rand::seq::index::sample(rng, q.len(), k) {
                out.push(&q[i].1);
            }
        }
        (out, n)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        let dim = self
            .queues
            .iter()
            .flat_map(|q| q.front())
            .map(|(_, p)| p.feature.len())
            .next()
            .unwrap_or(0);
        let header = BankHeader {
            dim,
            classes: self.classes(),
            cap: self.cap,
            counts: self.counts(),
        };
        let head = serde_json::to_vec(&header)?;
        w.write_all(&(head.len() as u32).to_le_bytes())?;
        w.write_all(&head)?;
        for q in &self.queues {
            w.write_all(&(q.len() as u64).to_le_bytes())?;
            for (_, p) in q {
                if p.feature.len() != dim {
                    return Err(Error::Data("memory bank holds features of mixed width".into()));
                }
                for v in &p.feature {
                    w.write_all(&v.to_le_bytes())?;
                }
                for &v in &p.pseudo_label {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    /// Restores a bank written by [`ClasswiseMemoryBank::write_to`]. Pseudo labels
    /// come back at single precision and renormalized; provenance fields are reset.
    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut len = [0u8; 4];
        r.read_exact(&mut len)?;
        let mut head = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut head)?;
        let header: BankHeader =
            serde_json::from_slice(&head).map_err(|e| Error::Data(format!("bad memory bank header: {e}")))?;
        let mut bank = Self::new(header.classes, header.cap)?;
        let width = header.dim + header.classes;
        let mut row = vec![0u8; width * 4];
        for j in 0..header.classes {
            let mut cnt = [0u8; 8];
            r.read_exact(&mut cnt)?;
            let count = u64::from_le_bytes(cnt) as usize;
            if header.counts.get(j) != Some(&count) || count > header.cap {
                return Err(Error::Data(format!("memory bank class {j} count {count} disagrees with header")));
            }
            for _ in 0..count {
                r.read_exact(&mut row)?;
                let vals: Vec<f32> = row.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
                let mut label: Vec<f64> = vals[header.dim..].iter().map(|&v| v as f64).collect();
                let s: f64 = label.iter().sum();
                label.iter_mut().for_each(|v| *v /= s);
                let q = &mut bank.queues[j];
                q.push_back((bank.counters[j], FeatureLabelPair {
                    feature: vals[..header.dim].to_vec(),
                    pseudo_label: label,
                    point_index: 0,
                    scene_id: 0,
                    true_class: None,
                }));
                bank.counters[j] += 1;
            }
        }
        Ok(bank)
    }
}
