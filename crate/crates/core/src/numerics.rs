//! Small numerical kernels shared by the filtering, training and metric code.
//!
//! Everything here is a pure function over `f64` slices. Logarithms are natural.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Lower clamp applied to predicted probabilities before taking a logarithm.
pub const PROB_EPS: f64 = 1e-12;

pub const DEFAULT_GMM_TOL: f64 = 1e-6;
pub const DEFAULT_GMM_MAX_ITER: usize = 100;
pub const GMM_VARIANCE_FLOOR: f64 = 1e-8;

fn check_finite(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::arg("softmax of an empty vector"));
    }
    if let Some(i) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite logit at index {i}")));
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    check_finite(logits)?;
    Ok(softmax_unchecked(logits))
}

pub(crate) fn softmax_unchecked(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    out
}

/// `softmax(logits / tau)`.
pub fn temperature_softmax(logits: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::arg(format!("temperature must be positive, got {tau}")));
    }
    check_finite(logits)?;
    let scaled: Vec<f64> = logits.iter().map(|&z| z / tau).collect();
    Ok(softmax_unchecked(&scaled))
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if let Some(i) = p.iter().position(|&x| x < 0.0 || !x.is_finite()) {
        return Err(Error::arg(format!("invalid probability {} at index {i}", p[i])));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::arg(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(entropy_unchecked(p))
}

pub(crate) fn entropy_unchecked(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|&x| -x * x.ln())
        .sum();
    h.max(0.0)
}

/// `-sum_j target_j * ln(max(pred_j, PROB_EPS))`.
pub fn cross_entropy(target: &[f64], pred: &[f64]) -> Result<f64> {
    if target.len() != pred.len() {
        return Err(Error::arg(format!(
            "cross-entropy shape mismatch: target {} vs prediction {}",
            target.len(),
            pred.len()
        )));
    }
    Ok(cross_entropy_unchecked(target, pred))
}

pub(crate) fn cross_entropy_unchecked(target: &[f64], pred: &[f64]) -> f64 {
    target
        .iter()
        .zip(pred)
        .filter(|(&t, _)| t != 0.0)
        .map(|(&t, &p)| -t * p.max(PROB_EPS).ln())
        .sum()
}

/// Index of the largest entry; ties resolve to the smallest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Number of entries kept by [`bottom_percentile_indices`] for `m` values.
pub fn percentile_keep_count(m: usize, r: f64) -> usize {
    if m == 0 {
        return 0;
    }
    (((r * m as f64) / 100.0).floor() as usize).clamp(1, m)
}

/// Indices of the `max(1, floor(r*M/100))` smallest values, returned in ascending
/// index order. Ties are broken by the smaller index.
pub fn bottom_percentile_indices(values: &[f64], r: f64) -> Result<Vec<usize>> {
    if !(r > 0.0 && r <= 100.0) {
        return Err(Error::arg(format!("retention percent must be in (0, 100], got {r}")));
    }
    let keep = percentile_keep_count(values.len(), r);
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Linear-interpolated percentile (`q` in [0,1]) of an already sorted slice.
pub(crate) fn sorted_quantile(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// A two-component 1D Gaussian mixture, components ordered by mean.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmm2 {
    /// `[small, large]`
    pub means: [f64; 2],
    pub variances: [f64; 2],
    pub weights: [f64; 2],
    pub converged: bool,
    pub iterations: usize,
    /// Set when every input value was identical; all values then belong to the small cluster.
    pub degenerate: bool,
    /// Log-likelihood evaluated at the start of every EM iteration.
    pub log_likelihoods: Vec<f64>,
}

fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * PI * var).ln() + (x - mean) * (x - mean) / var)
}

fn log_add_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Fit a two-component mixture to `values` by expectation-maximization.
///
/// Means start at the 10th and 90th percentiles, both variances at the sample
/// variance, weights at one half. Iteration stops once the log-likelihood improves
/// by less than `tol`, or after `max_iter` iterations.
pub fn fit_gmm2(values: &[f64], tol: f64, max_iter: usize) -> Result<Gmm2> {
    if values.len() < 2 {
        return Err(Error::arg(format!(
            "GMM fitting needs at least 2 values, got {}",
            values.len()
        )));
    }
    if let Some(i) = values.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numeric(format!("non-finite GMM input at index {i}")));
    }
    let n = values.len() as f64;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;

    if min == max {
        return Ok(Gmm2 {
            means: [min, min],
            variances: [GMM_VARIANCE_FLOOR; 2],
            weights: [0.5, 0.5],
            converged: true,
            iterations: 0,
            degenerate: true,
            log_likelihoods: Vec::new(),
        });
    }

    let mut means = [sorted_quantile(&sorted, 0.1), sorted_quantile(&sorted, 0.9)];
    if means[0] == means[1] {
        // Heavy ties at both percentiles; start from the extremes instead.
        means = [min, max];
    }
    let mut variances = [var.max(GMM_VARIANCE_FLOOR); 2];
    let mut weights: [f64; 2] = [0.5, 0.5];
    let mut resp_small = vec![0.0; values.len()];
    let mut log_likelihoods = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..max_iter {
        // E-step
        let mut ll = 0.0;
        for (r, &x) in resp_small.iter_mut().zip(values) {
            let a = weights[0].ln() + log_normal_pdf(x, means[0], variances[0]);
            let b = weights[1].ln() + log_normal_pdf(x, means[1], variances[1]);
            let total = log_add_exp(a, b);
            ll += total;
            *r = (a - total).exp();
        }
        if let Some(&prev) = log_likelihoods.last() {
            if ll - prev < tol {
                log_likelihoods.push(ll);
                converged = true;
                break;
            }
        }
        log_likelihoods.push(ll);
        iterations += 1;

        // M-step
        let n_small: f64 = resp_small.iter().sum();
        let n_large = n - n_small;
        if n_small <= 0.0 || n_large <= 0.0 {
            // One component absorbed everything; nothing further to separate.
            converged = true;
            break;
        }
        let mut sums = [0.0; 2];
        for (&r, &x) in resp_small.iter().zip(values) {
            sums[0] += r * x;
            sums[1] += (1.0 - r) * x;
        }
        means = [sums[0] / n_small, sums[1] / n_large];
        let mut sq = [0.0; 2];
        for (&r, &x) in resp_small.iter().zip(values) {
            sq[0] += r * (x - means[0]) * (x - means[0]);
            sq[1] += (1.0 - r) * (x - means[1]) * (x - means[1]);
        }
        variances = [
            (sq[0] / n_small).max(GMM_VARIANCE_FLOOR),
            (sq[1] / n_large).max(GMM_VARIANCE_FLOOR),
        ];
        weights = [n_small / n, n_large / n];
    }

    if means[0] > means[1] {
        means.swap(0, 1);
        variances.swap(0, 1);
        weights.swap(0, 1);
    }
    Ok(Gmm2 {
        means,
        variances,
        weights: [weights[0], 1.0 - weights[0]],
        converged,
        iterations,
        degenerate: false,
        log_likelihoods,
    })
}

/// Posterior probability that `x` was drawn from the small-mean component.
pub fn posterior_small(gmm: &Gmm2, x: f64) -> f64 {
    if gmm.degenerate {
        return 1.0;
    }
    let a = gmm.weights[0].ln() + log_normal_pdf(x, gmm.means[0], gmm.variances[0]);
    let b = gmm.weights[1].ln() + log_normal_pdf(x, gmm.means[1], gmm.variances[1]);
    if a == f64::NEG_INFINITY && b == f64::NEG_INFINITY {
        return 0.5;
    }
    1.0 / (1.0 + (b - a).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        assert!(p.iter().all(|&x| close(x, 1.0 / 3.0, 1e-15)));
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!(close(p[0], 1.0, 1e-15) && p[1] >= 0.0 && p[1] < 1e-300);
    }

    #[test]
    fn softmax_matches_high_precision_values() {
        // 50-digit evaluations of exp(i) / sum exp(j)
        let expected = [
            9.003_057_317_038_046e-2,
            2.447_284_710_547_976_4e-1,
            6.652_409_557_748_219e-1,
        ];
        let p = softmax(&[1.0, 2.0, 3.0]).unwrap();
        assert!(close(p.iter().sum(), 1.0, 1e-12));
        for (a, b) in p.iter().zip(expected) {
            assert!(close(*a, b, 1e-12), "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(softmax(&[1.0, f64::NAN]), Err(Error::Numeric(_))));
        assert!(matches!(softmax(&[f64::INFINITY]), Err(Error::Numeric(_))));
    }

    #[test]
    fn temperature_softmax_cases() {
        let v = [0.3, -1.2, 2.5];
        assert_eq!(temperature_softmax(&v, 1.0).unwrap(), softmax(&v).unwrap());
        let p = temperature_softmax(&[1.0, 0.0], 0.2).unwrap();
        assert!(close(p[0], 9.933_071_490_757_152e-1, 1e-12));
        assert!(close(p[1], 6.692_850_924_284_855_4e-3, 1e-12));
        let p = temperature_softmax(&[1.0, 0.0], 1e6).unwrap();
        assert!(close(p[0], 0.5, 1e-6) && close(p[1], 0.5, 1e-6));
        assert!(matches!(temperature_softmax(&v, 0.0), Err(Error::Argument(_))));
        assert!(matches!(temperature_softmax(&v, -1.0), Err(Error::Argument(_))));
    }

    #[test]
    fn entropy_values() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]).unwrap(), 0.0);
        assert!(close(entropy(&[0.25; 4]).unwrap(), 4f64.ln(), 1e-12));
        assert!(close(entropy(&[0.5, 0.5, 0.0, 0.0]).unwrap(), 2f64.ln(), 1e-12));
        assert!(entropy(&[1.5, -0.5]).is_err());
        assert!(entropy(&[0.2, 0.2]).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(&[0.0, 1.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(close(cross_entropy(&[1.0, 0.0, 0.0, 0.0], &[0.25; 4]).unwrap(), 4f64.ln(), 1e-12));
        let ce = cross_entropy(&[0.5, 0.5], &[0.25, 0.75]).unwrap();
        assert!(close(ce, 8.369_882_167_858_358e-1, 1e-12));
        assert!(matches!(cross_entropy(&[1.0], &[0.5, 0.5]), Err(Error::Argument(_))));
        // clamp keeps the log finite
        let ce = cross_entropy(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!(close(ce, -(PROB_EPS.ln()), 1e-9));
    }

    #[test]
    fn percentile_examples() {
        let v: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(bottom_percentile_indices(&v, 50.0).unwrap(), vec![0, 1, 2, 3, 4]);
        assert_eq!(bottom_percentile_indices(&v, 100.0).unwrap(), (0..10).collect::<Vec<_>>());
        assert_eq!(bottom_percentile_indices(&[3.0, 1.0, 2.0], 34.0).unwrap(), vec![1]);
        assert_eq!(bottom_percentile_indices(&[3.0, 1.0, 2.0], 1.0).unwrap(), vec![1]);
        assert!(bottom_percentile_indices(&v, 0.0).is_err());
        assert!(bottom_percentile_indices(&v, 100.5).is_err());
        // ties keep the smaller index
        assert_eq!(bottom_percentile_indices(&[1.0, 1.0, 1.0, 0.0], 50.0).unwrap(), vec![0, 3]);
    }

    pub(crate) fn bimodal_fixture(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(0.1, 0.02).unwrap();
        let b = Normal::new(3.0, 0.02).unwrap();
        let mut v: Vec<f64> = (0..500).map(|_| a.sample(&mut rng)).collect();
        v.extend((0..500).map(|_| b.sample(&mut rng)));
        v
    }

    #[test]
    fn gmm_recovers_bimodal_means() {
        let v = bimodal_fixture(7);
        let g = fit_gmm2(&v, DEFAULT_GMM_TOL, DEFAULT_GMM_MAX_ITER).unwrap();
        assert!((g.means[0] - 0.1).abs() < 0.05, "{g:?}");
        assert!((g.means[1] - 3.0).abs() < 0.05, "{g:?}");
        assert!(g.converged && !g.degenerate);
        assert!(close(g.weights[0] + g.weights[1], 1.0, 1e-12));
        assert!(posterior_small(&g, g.means[0]) > 0.99);
        assert!(posterior_small(&g, g.means[1]) < 0.01);
    }

    #[test]
    fn gmm_degenerate_and_small_inputs() {
        let g = fit_gmm2(&[0.7; 10], DEFAULT_GMM_TOL, DEFAULT_GMM_MAX_ITER).unwrap();
        assert!(g.degenerate && g.converged);
        assert_eq!(g.means, [0.7, 0.7]);
        assert_eq!(posterior_small(&g, 123.0), 1.0);
        assert!(fit_gmm2(&[1.0], 1e-6, 100).is_err());
    }

    #[test]
    fn posterior_symmetric_midpoint() {
        let g = Gmm2 {
            means: [0.0, 2.0],
            variances: [0.5, 0.5],
            weights: [0.5, 0.5],
            converged: true,
            iterations: 1,
            degenerate: false,
            log_likelihoods: vec![],
        };
        assert!(close(posterior_small(&g, 1.0), 0.5, 1e-9));
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_equivariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), rot in 0usize..12) {
            let p = softmax(&v).unwrap();
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let k = rot % v.len();
            let mut rv = v.clone();
            rv.rotate_left(k);
            let mut rp = p.clone();
            rp.rotate_left(k);
            let q = softmax(&rv).unwrap();
            for (a, b) in q.iter().zip(&rp) {
                prop_assert!((a - b).abs() <= 1e-15);
            }
            let t = temperature_softmax(&v, 0.2).unwrap();
            prop_assert!((t.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn entropy_shrinks_with_temperature(v in prop::collection::vec(-5.0f64..5.0, 2..10)) {
            let spread = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
                - v.iter().cloned().fold(f64::INFINITY, f64::min);
            prop_assume!(spread > 1e-6);
            let h: Vec<f64> = [1.0, 0.5, 0.2]
                .iter()
                .map(|&t| entropy(&temperature_softmax(&v, t).unwrap()).unwrap())
                .collect();
            prop_assert!(h[1] <= h[0] + 1e-12 && h[2] <= h[1] + 1e-12);
            prop_assert!(h[0] <= (v.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn percentile_partition(v in prop::collection::vec(-10.0f64..10.0, 1..60), r in 0.5f64..=100.0) {
            let kept = bottom_percentile_indices(&v, r).unwrap();
            let expect = ((r * v.len() as f64 / 100.0).floor() as usize).max(1);
            prop_assert_eq!(kept.len(), expect);
            let max_kept = kept.iter().map(|&i| v[i]).fold(f64::NEG_INFINITY, f64::max);
            for (i, &x) in v.iter().enumerate() {
                if !kept.contains(&i) {
                    prop_assert!(x >= max_kept);
                }
            }
        }

        #[test]
        fn gmm_monotone_and_ordered(v in prop::collection::vec(0.0f64..10.0, 2..200)) {
            let g = fit_gmm2(&v, DEFAULT_GMM_TOL, DEFAULT_GMM_MAX_ITER).unwrap();
            prop_assert!(g.means[0] <= g.means[1]);
            for w in g.log_likelihoods.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-9, "{:?}", g.log_likelihoods);
            }
            for x in &v {
                let p = posterior_small(&g, *x);
                prop_assert!((0.0..=1.0).contains(&p));
            }
        }
    }
}
