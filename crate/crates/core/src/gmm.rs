//! Diagonal-covariance Gaussian mixtures fitted by expectation maximization.

use alloc::vec;
use alloc::vec::Vec;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{diag_logpdf_unchecked, log_sum_exp, sample_diag_gaussian, Matrix, RngStream};

/// Components whose effective count drops below this fraction of the data
/// are reseeded.
pub const EMPTY_COMPONENT_FRACTION: f64 = 1e-6;

/// One diagonal Gaussian with its mixture weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianComponent {
    pub mean: Vec<f64>,
    /// Per-dimension standard deviation.
    pub std: Vec<f64>,
    pub weight: f64,
}

impl GaussianComponent {
    pub fn new(mean: Vec<f64>, std: Vec<f64>, weight: f64) -> Result<Self> {
        if mean.len() != std.len() {
            return Err(Error::DimensionMismatch {
                what: "component std",
                expected: mean.len(),
                found: std.len(),
            });
        }
        if let Some((index, &value)) = std.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
            return Err(Error::NonPositiveStd { index, value });
        }
        if mean.iter().chain(&std).any(|v| !v.is_finite()) || !weight.is_finite() {
            return Err(Error::NonFinite("gaussian component"));
        }
        Ok(Self { mean, std, weight })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: &[f64]) -> f64 {
        diag_logpdf_unchecked(x, &self.mean, &self.std)
    }

    pub fn variance(&self) -> impl Iterator<Item = f64> + '_ {
        self.std.iter().map(|s| s * s)
    }
}

/// A class's feature distribution on one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmPrototype {
    pub class_id: usize,
    pub components: Vec<GaussianComponent>,
    /// Number of features the mixture was fitted on.
    pub sample_count: usize,
}

impl GmmPrototype {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, GaussianComponent::dim)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Mean per-sample log-likelihood of `features` under the mixture.
    pub fn mean_log_likelihood<V: AsRef<[f64]>>(&self, features: &[V]) -> f64 {
        let mut buf = vec![0.0; self.len()];
        let total: f64 = features
            .iter()
            .map(|x| {
                for (b, c) in buf.iter_mut().zip(&self.components) {
                    *b = libm::log(c.weight) + c.log_density(x.as_ref());
                }
                log_sum_exp(&buf)
            })
            .sum();
        total / features.len().max(1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::Empty("prototype components"));
        }
        let d = self.dim();
        for c in &self.components {
            if c.dim() != d || c.std.len() != d {
                return Err(Error::DimensionMismatch {
                    what: "prototype component",
                    expected: d,
                    found: c.dim(),
                });
            }
            if let Some((index, &value)) = c.std.iter().enumerate().find(|(_, s)| !(**s > 0.0)) {
                return Err(Error::NonPositiveStd { index, value });
            }
            if !(0.0..=1.0).contains(&c.weight) {
                return Err(Error::invalid("component weight", "outside [0, 1]"));
            }
        }
        if (self.weight_sum() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("component weights", "do not sum to 1"));
        }
        Ok(())
    }
}

/// EM settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    /// Mixture components per class, `n`.
    pub components: usize,
    pub max_iters: usize,
    /// Stop once the mean per-sample log-likelihood improves by less.
    pub ll_tol: f64,
    pub std_floor: f64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            components: 4,
            max_iters: 200,
            ll_tol: 1e-6,
            std_floor: 1e-3,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.components == 0 {
            return Err(Error::invalid("components", "must be at least 1"));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("max_iters", "must be at least 1"));
        }
        if !(self.ll_tol > 0.0) {
            return Err(Error::invalid("ll_tol", "must be positive"));
        }
        if !(self.std_floor > 0.0) {
            return Err(Error::invalid("std_floor", "must be positive"));
        }
        Ok(())
    }
}

/// Per-iteration record of an EM run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EmTrace {
    /// Mean log-likelihood after initialization, then after each M step.
    pub log_likelihoods: Vec<f64>,
    /// Iterations (1-based, aligned with `log_likelihoods`) whose M step
    /// reseeded an empty component.
    pub reseeded: Vec<usize>,
    pub converged: bool,
}

impl EmTrace {
    pub fn iterations(&self) -> usize {
        self.log_likelihoods.len().saturating_sub(1)
    }
}

pub fn fit_gmm<V: AsRef<[f64]>>(
    class_id: usize,
    features: &[V],
    cfg: &EmConfig,
    rng: &mut RngStream,
) -> Result<GmmPrototype> {
    fit_gmm_traced(class_id, features, cfg, rng).map(|(p, _)| p)
}

/// Fits an `n`-component diagonal mixture; `n` is capped at the number of
/// features.
pub fn fit_gmm_traced<V: AsRef<[f64]>>(
    class_id: usize,
    features: &[V],
    cfg: &EmConfig,
    rng: &mut RngStream,
) -> Result<(GmmPrototype, EmTrace)> {
    cfg.validate()?;
    let first = features.first().ok_or(Error::Empty("feature list"))?;
    let d = first.as_ref().len();
    for x in features {
        let x = x.as_ref();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: d,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("features"));
        }
    }
    let n_samples = features.len();
    let n = cfg.components.min(n_samples);

    let global_std = floored_std(features, d, cfg.std_floor);
    let seeds = kmeans_pp_seeds(features, n, rng);
    let mut components: Vec<GaussianComponent> = seeds
        .into_iter()
        .map(|i| GaussianComponent {
            mean: features[i].as_ref().to_vec(),
            std: global_std.clone(),
            weight: 1.0 / n as f64,
        })
        .collect();

    let mut resp = Matrix::zeros(n, n_samples);
    let mut point_ll = vec![0.0; n_samples];
    let mut trace = EmTrace::default();
    let mut ll = e_step(features, &components, &mut resp, &mut point_ll);
    trace.log_likelihoods.push(ll);

    for iter in 1..=cfg.max_iters {
        let reseeded = m_step(features, &resp, &point_ll, &global_std, cfg.std_floor, &mut components);
        if reseeded {
            trace.reseeded.push(iter);
        }
        let next = e_step(features, &components, &mut resp, &mut point_ll);
        trace.log_likelihoods.push(next);
        let improvement = next - ll;
        ll = next;
        if !reseeded && improvement < cfg.ll_tol {
            trace.converged = true;
            break;
        }
    }

    Ok((
        GmmPrototype {
            class_id,
            components,
            sample_count: n_samples,
        },
        trace,
    ))
}

/// Per-dimension population standard deviation, floored.
fn floored_std<V: AsRef<[f64]>>(features: &[V], d: usize, floor: f64) -> Vec<f64> {
    let n = features.len() as f64;
    let mut mean = vec![0.0; d];
    for x in features {
        for (m, v) in mean.iter_mut().zip(x.as_ref()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for x in features {
        for ((s, v), m) in var.iter_mut().zip(x.as_ref()).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.into_iter().map(|s| libm::sqrt(s / n).max(floor)).collect()
}

/// k-means++ seeding: indices of `n` distinct-as-possible seed points.
fn kmeans_pp_seeds<V: AsRef<[f64]>>(features: &[V], n: usize, rng: &mut RngStream) -> Vec<usize> {
    let len = features.len();
    let mut seeds = Vec::with_capacity(n);
    seeds.push(rng.random_range(0..len));
    let mut dist2: Vec<f64> = features
        .iter()
        .map(|x| sq_dist(x.as_ref(), features[seeds[0]].as_ref()))
        .collect();
    while seeds.len() < n {
        let total: f64 = dist2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = len - 1;
            for (i, w) in dist2.iter().enumerate() {
                acc += w;
                if acc > target && *w > 0.0 {
                    pick = i;
                    break;
                }
            }
            pick
        } else {
            rng.random_range(0..len)
        };
        seeds.push(next);
        for (dd, x) in dist2.iter_mut().zip(features) {
            *dd = dd.min(sq_dist(x.as_ref(), features[next].as_ref()));
        }
    }
    seeds
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Fills `resp` (n × N) and per-point log-likelihoods; returns the mean.
fn e_step<V: AsRef<[f64]>>(
    features: &[V],
    components: &[GaussianComponent],
    resp: &mut Matrix,
    point_ll: &mut [f64],
) -> f64 {
    let n = components.len();
    let mut log_terms = vec![0.0; n];
    let mut total = 0.0;
    for (j, x) in features.iter().enumerate() {
        for (t, c) in log_terms.iter_mut().zip(components) {
            *t = libm::log(c.weight) + c.log_density(x.as_ref());
        }
        let lse = log_sum_exp(&log_terms);
        point_ll[j] = lse;
        total += lse;
        for (i, t) in log_terms.iter().enumerate() {
            resp.set(i, j, libm::exp(t - lse));
        }
    }
    total / features.len() as f64
}

/// Closed-form M step. Returns whether any component was reseeded.
fn m_step<V: AsRef<[f64]>>(
    features: &[V],
    resp: &Matrix,
    point_ll: &[f64],
    global_std: &[f64],
    std_floor: f64,
    components: &mut [GaussianComponent],
) -> bool {
    let n_samples = features.len();
    let d = global_std.len();
    let mut effective = vec![0.0; components.len()];
    let mut reseed_order: Option<Vec<usize>> = None;
    let mut reseeded = 0usize;

    for (i, comp) in components.iter_mut().enumerate() {
        let gamma = resp.row(i);
        let n_i: f64 = gamma.iter().sum();
        if n_i < EMPTY_COMPONENT_FRACTION * n_samples as f64 {
            // worst-explained points first, each used at most once
            let order = reseed_order.get_or_insert_with(|| {
                let mut idx: Vec<usize> = (0..n_samples).collect();
                idx.sort_by(|&a, &b| point_ll[a].total_cmp(&point_ll[b]).then(a.cmp(&b)));
                idx
            });
            let point = order[reseeded.min(n_samples - 1)];
            reseeded += 1;
            comp.mean = features[point].as_ref().to_vec();
            comp.std = global_std.to_vec();
            effective[i] = 1.0;
            continue;
        }
        let mut mean = vec![0.0; d];
        for (g, x) in gamma.iter().zip(features) {
            for (m, v) in mean.iter_mut().zip(x.as_ref()) {
                *m += g * v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n_i);
        let mut var = vec![0.0; d];
        for (g, x) in gamma.iter().zip(features) {
            for ((s, v), m) in var.iter_mut().zip(x.as_ref()).zip(&mean) {
                *s += g * (v - m) * (v - m);
            }
        }
        comp.std = var.into_iter().map(|s| libm::sqrt(s / n_i).max(std_floor)).collect();
        comp.mean = mean;
        effective[i] = n_i;
    }
    let total: f64 = effective.iter().sum();
    for (comp, n_i) in components.iter_mut().zip(&effective) {
        comp.weight = n_i / total;
    }
    reseeded > 0
}

/// Posterior component probabilities, one column per feature.
pub fn responsibilities<V: AsRef<[f64]>>(features: &[V], proto: &GmmPrototype) -> Result<Matrix> {
    let d = proto.dim();
    for x in features {
        if x.as_ref().len() != d {
            return Err(Error::DimensionMismatch {
                what: "feature vector",
                expected: d,
                found: x.as_ref().len(),
            });
        }
    }
    let mut resp = Matrix::zeros(proto.len(), features.len());
    let mut point_ll = vec![0.0; features.len()];
    e_step(features, &proto.components, &mut resp, &mut point_ll);
    Ok(resp)
}

/// Draws `count` samples: a component by weight, then its diagonal Gaussian.
pub fn sample_gmm(proto: &GmmPrototype, count: usize, rng: &mut RngStream) -> Result<Vec<Vec<f64>>> {
    let index = WeightedIndex::new(proto.components.iter().map(|c| c.weight))
        .map_err(|_| Error::invalid("component weights", "not a valid distribution"))?;
    Ok((0..count)
        .map(|_| {
            let c = &proto.components[index.sample(rng)];
            sample_diag_gaussian(&c.mean, &c.std, rng)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Purpose, StreamKey};

    fn rng(i: usize) -> RngStream {
        RngStream::keyed(42, StreamKey::new(Purpose::Test).index(i))
    }

    fn two_clusters(per: usize, d: usize, rng: &mut RngStream) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for sign in [-1.0, 1.0] {
            let mut mean = vec![0.0; d];
            mean[0] = 5.0 * sign;
            for _ in 0..per {
                out.push(sample_diag_gaussian(&mean, &vec![0.5; d], rng));
            }
        }
        out
    }

    #[test]
    fn single_component_is_sample_moments() {
        let mut r = rng(0);
        let xs: Vec<Vec<f64>> = (0..50).map(|_| sample_diag_gaussian(&[1.0, -2.0, 0.0], &[0.3, 2.0, 1e-5], &mut r)).collect();
        let cfg = EmConfig { components: 1, ..EmConfig::default() };
        let p = fit_gmm(7, &xs, &cfg, &mut rng(1)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.class_id, 7);
        for k in 0..3 {
            let mean: f64 = xs.iter().map(|x| x[k]).sum::<f64>() / 50.0;
            let var: f64 = xs.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / 50.0;
            assert!((p.components[0].mean[k] - mean).abs() < 1e-12);
            assert!((p.components[0].std[k] - var.sqrt().max(1e-3)).abs() < 1e-12);
        }
        // third dimension is below the floor
        assert_eq!(p.components[0].std[2], 1e-3);
        assert_eq!(p.components[0].weight, 1.0);
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let xs = two_clusters(500, 8, &mut rng(2));
        let cfg = EmConfig { components: 2, ..EmConfig::default() };
        let (p, trace) = fit_gmm_traced(0, &xs, &cfg, &mut rng(3)).unwrap();
        let mut comps = p.components.clone();
        comps.sort_by(|a, b| a.mean[0].total_cmp(&b.mean[0]));
        for (c, sign) in comps.iter().zip([-1.0, 1.0]) {
            let mut target = vec![0.0; 8];
            target[0] = 5.0 * sign;
            let dist = sq_dist(&c.mean, &target).sqrt();
            assert!(dist < 0.2, "mean off by {dist}");
            assert!((c.weight - 0.5).abs() < 0.05);
        }
        for w in trace.log_likelihoods.windows(2) {
            assert!(w[1] >= w[0] - 1e-12, "log-likelihood decreased: {w:?}");
        }
        assert!(trace.converged);
    }

    #[test]
    fn caps_components_at_sample_count() {
        let xs = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
        let p = fit_gmm(1, &xs, &EmConfig::default(), &mut rng(4)).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.sample_count, 2);
        p.validate().unwrap();
    }

    #[test]
    fn rejects_empty_and_nan() {
        let empty: Vec<Vec<f64>> = Vec::new();
        assert_eq!(fit_gmm(0, &empty, &EmConfig::default(), &mut rng(5)), Err(Error::Empty("feature list")));
        let bad = vec![vec![0.0, f64::NAN]];
        assert_eq!(fit_gmm(0, &bad, &EmConfig::default(), &mut rng(5)), Err(Error::NonFinite("features")));
        let ragged = vec![vec![0.0, 1.0], vec![0.0]];
        assert!(fit_gmm(0, &ragged, &EmConfig::default(), &mut rng(5)).is_err());
    }

    #[test]
    fn duplicate_points_stay_finite() {
        let xs = vec![vec![1.0, 1.0]; 20];
        let p = fit_gmm(0, &xs, &EmConfig::default(), &mut rng(6)).unwrap();
        p.validate().unwrap();
        for c in &p.components {
            assert_eq!(c.std, vec![1e-3, 1e-3]);
            assert_eq!(c.mean, vec![1.0, 1.0]);
        }
    }

    #[test]
    fn weights_sum_to_one_every_fit() {
        for seed in 0..10 {
            let xs = two_clusters(30, 3, &mut rng(100 + seed));
            let p = fit_gmm(0, &xs, &EmConfig::default(), &mut rng(200 + seed)).unwrap();
            assert!((p.weight_sum() - 1.0).abs() < 1e-9);
        }
    }

    fn proto(components: Vec<GaussianComponent>) -> GmmPrototype {
        GmmPrototype { class_id: 0, components, sample_count: 10 }
    }

    #[test]
    fn responsibilities_single_component_are_one() {
        let p = proto(vec![GaussianComponent::new(vec![0.0], vec![1.0], 1.0).unwrap()]);
        let r = responsibilities(&[vec![0.5], vec![-3.0]], &p).unwrap();
        assert_eq!(r.as_slice(), &[1.0, 1.0]);
    }

    #[test]
    fn responsibilities_pick_nearby_component() {
        let p = proto(vec![
            GaussianComponent::new(vec![0.0, 0.0], vec![1.0, 1.0], 0.5).unwrap(),
            GaussianComponent::new(vec![10.0, 10.0], vec![1.0, 1.0], 0.5).unwrap(),
        ]);
        let r = responsibilities(&[vec![0.0, 0.0]], &p).unwrap();
        // direct evaluation: ratio exp(-½·200) between the two densities
        assert!(r.get(0, 0) >= 0.999);
        assert!((r.get(0, 0) + r.get(1, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_components_split_evenly() {
        let c = GaussianComponent::new(vec![1.0, 2.0], vec![0.5, 0.5], 0.25).unwrap();
        let p = proto(vec![c.clone(), c.clone(), c.clone(), c]);
        let r = responsibilities(&[vec![0.0, 0.0], vec![5.0, -1.0]], &p).unwrap();
        for v in r.as_slice() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn responsibilities_columns_sum_to_one() {
        let xs = two_clusters(40, 4, &mut rng(7));
        let p = fit_gmm(0, &xs, &EmConfig::default(), &mut rng(8)).unwrap();
        let r = responsibilities(&xs, &p).unwrap();
        for j in 0..xs.len() {
            let s: f64 = (0..p.len()).map(|i| r.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn degenerate_weight_samples_first_component() {
        let p = proto(vec![
            GaussianComponent::new(vec![3.0, -3.0], vec![1e-3, 1e-3], 1.0).unwrap(),
            GaussianComponent::new(vec![-30.0, 30.0], vec![1.0, 1.0], 0.0).unwrap(),
        ]);
        for s in sample_gmm(&p, 200, &mut rng(9)).unwrap() {
            assert!((s[0] - 3.0).abs() < 0.01 && (s[1] + 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn large_sample_mean_matches_component() {
        let p = proto(vec![GaussianComponent::new(vec![1.0, -4.0], vec![2.0, 0.5], 1.0).unwrap()]);
        let samples = sample_gmm(&p, 100_000, &mut rng(10)).unwrap();
        assert_eq!(samples.len(), 100_000);
        for (k, (mu, sigma)) in [(1.0, 2.0), (-4.0, 0.5)].into_iter().enumerate() {
            let mean = samples.iter().map(|s| s[k]).sum::<f64>() / 100_000.0;
            assert!((mean - mu).abs() < 0.02 * sigma);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let xs = two_clusters(20, 2, &mut rng(11));
        let p = fit_gmm(0, &xs, &EmConfig::default(), &mut rng(12)).unwrap();
        assert_eq!(sample_gmm(&p, 16, &mut rng(13)), sample_gmm(&p, 16, &mut rng(13)));
    }

    #[test]
    fn fit_then_sample_preserves_moments() {
        // generator: equal mixture at x0 = ±2, std 1
        let mut r = rng(14);
        let xs: Vec<Vec<f64>> = (0..4000)
            .map(|i| {
                let m = if i % 2 == 0 { 2.0 } else { -2.0 };
                sample_diag_gaussian(&[m, 0.5], &[1.0, 0.3], &mut r)
            })
            .collect();
        let cfg = EmConfig { components: 2, ..EmConfig::default() };
        let p = fit_gmm(0, &xs, &cfg, &mut rng(15)).unwrap();
        let ys = sample_gmm(&p, 20_000, &mut rng(16)).unwrap();
        // generator moments: E[x0]=0, Var[x0]=1+4=5; E[x1]=0.5, Var[x1]=0.09
        let moments = |k: usize| {
            let m = ys.iter().map(|y| y[k]).sum::<f64>() / ys.len() as f64;
            let v = ys.iter().map(|y| (y[k] - m).powi(2)).sum::<f64>() / ys.len() as f64;
            (m, v)
        };
        let (m0, v0) = moments(0);
        let (m1, v1) = moments(1);
        assert!(m0.abs() < 0.1, "{m0}");
        assert!((v0 - 5.0).abs() < 0.3, "{v0}");
        assert!((m1 - 0.5).abs() < 0.02, "{m1}");
        assert!((v1 - 0.09).abs() < 0.01, "{v1}");
    }
}
