//! Server-side prototype fusion.
//!
//! All mixture components of a class, pooled across clients, are clustered
//! greedily: a seed component grows a cluster by absorbing every remaining
//! component whose Bhattacharyya distance to the cluster is below the
//! threshold, and each cluster is collapsed to one Gaussian by weighted
//! moment matching.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gmm::{GaussianComponent, GmmPrototype};

/// Bhattacharyya distance between `N(μ1, σ1²)` and `N(μ2, σ2²)`.
pub fn bhattacharyya_uni(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    for (index, value) in [(0, sigma1), (1, sigma2)] {
        if !(value > 0.0) {
            return Err(Error::NonPositiveStd { index, value });
        }
    }
    Ok(uni_unchecked(mu1, sigma1, mu2, sigma2))
}

#[inline]
fn uni_unchecked(mu1: f64, sigma1: f64, mu2: f64, sigma2: f64) -> f64 {
    let pooled = sigma1 * sigma1 + sigma2 * sigma2;
    let diff = mu1 - mu2;
    0.25 * diff * diff / pooled + 0.5 * libm::log(pooled / (2.0 * sigma1 * sigma2))
}

/// Bhattacharyya distance between two diagonal Gaussians. With diagonal
/// covariances the multivariate closed form factorizes into a sum of
/// per-dimension univariate distances.
pub fn bhattacharyya_diag(a: &GaussianComponent, b: &GaussianComponent) -> Result<f64> {
    if a.dim() != b.dim() || a.std.len() != a.dim() || b.std.len() != b.dim() {
        return Err(Error::DimensionMismatch {
            what: "bhattacharyya operands",
            expected: a.dim(),
            found: b.dim(),
        });
    }
    let mut total = 0.0;
    for k in 0..a.dim() {
        total += bhattacharyya_uni(a.mean[k], a.std[k], b.mean[k], b.std[k])?;
    }
    Ok(total)
}

/// Cluster growth rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    /// A candidate joins only if it is within the threshold of every member.
    #[default]
    Complete,
    /// A candidate joins if it is within the threshold of any member.
    Single,
}

/// A mixture component as seen by the server.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaggedComponent {
    pub component: GaussianComponent,
    pub class_id: usize,
    pub client_id: usize,
    /// Position of the component within its client prototype.
    pub index: usize,
    /// `π × sample count` of the originating prototype.
    pub weight: f64,
}

/// Splits a client prototype into weighted components.
pub fn tag_prototype(client_id: usize, proto: &GmmPrototype) -> Vec<TaggedComponent> {
    proto
        .components
        .iter()
        .enumerate()
        .map(|(index, c)| TaggedComponent {
            component: c.clone(),
            class_id: proto.class_id,
            client_id,
            index,
            weight: c.weight * proto.sample_count as f64,
        })
        .collect()
}

/// The fused mixture for one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalPrototype {
    pub class_id: usize,
    /// Component weights sum to one.
    pub components: Vec<GaussianComponent>,
    /// Sum of the input component weights.
    pub total_weight: f64,
}

impl GlobalPrototype {
    pub fn dim(&self) -> usize {
        self.components.first().map_or(0, GaussianComponent::dim)
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// View as a mixture for sampling.
    pub fn as_gmm(&self) -> GmmPrototype {
        GmmPrototype {
            class_id: self.class_id,
            components: self.components.clone(),
            sample_count: libm::round(self.total_weight) as usize,
        }
    }
}

/// Order in which seeds are taken: heaviest first, then client id, then
/// component index.
fn seed_order(components: &[TaggedComponent]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..components.len()).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&components[a], &components[b]);
        cb.weight
            .total_cmp(&ca.weight)
            .then(ca.client_id.cmp(&cb.client_id))
            .then(ca.index.cmp(&cb.index))
            .then(a.cmp(&b))
    });
    order
}

/// Greedy threshold clustering. Returns clusters as indices into
/// `components`, seed first, in formation order.
pub fn cluster_components(components: &[TaggedComponent], threshold: f64, linkage: Linkage) -> Result<Vec<Vec<usize>>> {
    let n = components.len();
    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = bhattacharyya_diag(&components[i].component, &components[j].component)?;
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }

    let mut remaining = seed_order(components);
    let mut clusters = Vec::new();
    while !remaining.is_empty() {
        let seed = remaining.remove(0);
        let mut cluster = vec![seed];
        loop {
            let joins = |p: usize| {
                let mut within = cluster.iter().map(|&q| dist[p * n + q] < threshold);
                match linkage {
                    Linkage::Complete => within.all(|b| b),
                    Linkage::Single => within.any(|b| b),
                }
            };
            let (added, kept): (Vec<usize>, Vec<usize>) = remaining.iter().partition(|&&p| joins(p));
            if added.is_empty() {
                break;
            }
            cluster.extend(added);
            remaining = kept;
        }
        clusters.push(cluster);
    }
    Ok(clusters)
}

/// Moment-matched merge of weighted components. The returned component
/// carries the summed weight, not a normalized one.
pub fn merge_components<'a>(members: impl IntoIterator<Item = &'a TaggedComponent>) -> Result<GaussianComponent> {
    let members: Vec<&TaggedComponent> = members.into_iter().collect();
    let first = members.first().ok_or(Error::Empty("cluster"))?;
    let d = first.component.dim();
    let w_fused: f64 = members.iter().map(|m| m.weight).sum();
    let mut mean = vec![0.0; d];
    for m in &members {
        for (acc, v) in mean.iter_mut().zip(&m.component.mean) {
            *acc += m.weight * v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= w_fused);
    let mut var = vec![0.0; d];
    for m in &members {
        for k in 0..d {
            let s = m.component.std[k];
            let delta = m.component.mean[k] - mean[k];
            var[k] += m.weight * (s * s + delta * delta);
        }
    }
    let std = var.into_iter().map(|v| libm::sqrt(v / w_fused)).collect();
    Ok(GaussianComponent {
        mean,
        std,
        weight: w_fused,
    })
}

/// Fuses all components of one class into a global prototype.
pub fn fuse_class(components: &[TaggedComponent], threshold: f64, linkage: Linkage) -> Result<GlobalPrototype> {
    let first = components.first().ok_or(Error::Empty("class components"))?;
    if !(threshold > 0.0) {
        return Err(Error::invalid("fusion_threshold", "must be positive"));
    }
    let class_id = first.class_id;
    for c in components {
        if c.class_id != class_id {
            return Err(Error::invalid("class components", "mixed class ids"));
        }
        if !(c.weight > 0.0) {
            return Err(Error::invalid("component weight", "must be positive"));
        }
    }
    let clusters = cluster_components(components, threshold, linkage)?;
    let mut fused = clusters
        .iter()
        .map(|cluster| merge_components(cluster.iter().map(|&i| &components[i])))
        .collect::<Result<Vec<_>>>()?;
    let total_weight: f64 = components.iter().map(|c| c.weight).sum();
    let cluster_total: f64 = fused.iter().map(|c| c.weight).sum();
    for c in &mut fused {
        c.weight /= cluster_total;
    }
    Ok(GlobalPrototype {
        class_id,
        components: fused,
        total_weight,
    })
}

/// Groups client prototypes by class and fuses each class. Output is keyed
/// (and therefore ordered) by class id.
pub fn fuse_all<'a>(
    prototypes: impl IntoIterator<Item = (usize, &'a GmmPrototype)>,
    threshold: f64,
    linkage: Linkage,
) -> Result<BTreeMap<usize, GlobalPrototype>> {
    let mut by_class: BTreeMap<usize, Vec<TaggedComponent>> = BTreeMap::new();
    for (client_id, proto) in prototypes {
        by_class
            .entry(proto.class_id)
            .or_default()
            .extend(tag_prototype(client_id, proto));
    }
    by_class
        .into_iter()
        .map(|(class, comps)| Ok((class, fuse_class(&comps, threshold, linkage)?)))
        .collect()
}
