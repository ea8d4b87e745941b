//! Datasets and the imbalanced client partitioner.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm2, Purpose, RngStream, StreamKey};

/// One labelled example.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub label: usize,
}

impl Sample {
    pub fn new(x: Vec<f64>, label: usize) -> Self {
        Self { x, label }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    /// Validates labels, input dimensions and that every class has samples.
    pub fn new(name: impl Into<String>, classes: usize, samples: Vec<Sample>) -> Result<Self> {
        let dim = samples.first().ok_or(Error::Empty("dataset"))?.x.len();
        let mut seen = vec![false; classes];
        for s in &samples {
            if s.label >= classes {
                return Err(Error::LabelOutOfRange {
                    label: s.label,
                    classes,
                });
            }
            if s.x.len() != dim {
                return Err(Error::DimensionMismatch {
                    what: "dataset sample",
                    expected: dim,
                    found: s.x.len(),
                });
            }
            seen[s.label] = true;
        }
        if seen.contains(&false) {
            return Err(Error::invalid("dataset", "every class needs at least one sample"));
        }
        Ok(Self {
            name: name.into(),
            classes,
            samples,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices per class, in dataset order.
    pub fn class_pools(&self) -> Vec<Vec<usize>> {
        let mut pools = vec![Vec::new(); self.classes];
        for (i, s) in self.samples.iter().enumerate() {
            pools[s.label].push(i);
        }
        pools
    }
}

/// Parameters of the Gaussian-blob stand-in dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub per_class: usize,
    /// Isotropic noise standard deviation around each class center.
    pub spread: f64,
    /// Distance of every class center from the origin.
    #[serde(default = "default_radius")]
    pub radius: f64,
}

fn default_radius() -> f64 {
    1.0
}

/// Class `c` is centred at a random unit direction scaled by `radius`;
/// its samples add isotropic Gaussian noise of standard deviation `spread`.
pub fn gen_synthetic(spec: &SyntheticSpec, rng: &mut RngStream) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::invalid("synthetic.classes", "need at least 2 classes"));
    }
    if spec.input_dim < 2 {
        return Err(Error::invalid("synthetic.input_dim", "need at least 2 dimensions"));
    }
    if spec.per_class == 0 {
        return Err(Error::invalid("synthetic.per_class", "must be at least 1"));
    }
    if !(spec.spread >= 0.0) || !(spec.radius > 0.0) {
        return Err(Error::invalid("synthetic.spread", "spread must be >= 0 and radius > 0"));
    }
    let centers: Vec<Vec<f64>> = (0..spec.classes)
        .map(|_| {
            let dir: Vec<f64> = (0..spec.input_dim).map(|_| rng.standard_normal()).collect();
            let n = norm2(&dir);
            dir.into_iter().map(|v| spec.radius * v / n).collect()
        })
        .collect();
    let mut samples = Vec::with_capacity(spec.classes * spec.per_class);
    for (label, center) in centers.iter().enumerate() {
        for _ in 0..spec.per_class {
            let x = center.iter().map(|c| c + spec.spread * rng.standard_normal()).collect();
            samples.push(Sample { x, label });
        }
    }
    Dataset::new("synthetic", spec.classes, samples)
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn be_u32(bytes: &[u8], offset: usize, what: &'static str) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Truncated {
            what,
            needed: offset + 4,
            available: bytes.len(),
        })
}

/// Decoded IDX image file: `count` images of `rows × cols` unsigned bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    let magic = be_u32(bytes, 0, "IDX image header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_IMAGES_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "IDX image header")? as usize;
    let rows = be_u32(bytes, 8, "IDX image header")? as usize;
    let cols = be_u32(bytes, 12, "IDX image header")? as usize;
    let needed = 16 + count * rows * cols;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what: "IDX image data",
            needed,
            available: bytes.len(),
        });
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: bytes[16..needed].to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    let magic = be_u32(bytes, 0, "IDX label header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            expected: IDX_LABELS_MAGIC,
            found: magic,
        });
    }
    let count = be_u32(bytes, 4, "IDX label header")? as usize;
    let needed = 8 + count;
    if bytes.len() < needed {
        return Err(Error::Truncated {
            what: "IDX label data",
            needed,
            available: bytes.len(),
        });
    }
    Ok(bytes[8..needed].to_vec())
}

/// Builds a dataset from IDX image and label file contents; pixels are
/// scaled to `[0, 1]` and the class count is `max label + 1`.
pub fn idx_dataset(name: impl Into<String>, images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let images = parse_idx_images(images)?;
    let labels = parse_idx_labels(labels)?;
    if images.count != labels.len() {
        return Err(Error::CountMismatch {
            images: images.count,
            labels: labels.len(),
        });
    }
    let dim = images.rows * images.cols;
    let classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
    let samples = labels
        .iter()
        .enumerate()
        .map(|(i, &label)| Sample {
            x: images.pixels[i * dim..(i + 1) * dim].iter().map(|&p| p as f64 / 255.0).collect(),
            label: label as usize,
        })
        .collect();
    Dataset::new(name, classes, samples)
}

/// `w`-way `s`-shot partition parameters. Way and shot counts are drawn
/// per client (per class for shots) from rounded normals with the given
/// means and standard deviations, clamped to the feasible range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSpec {
    pub clients: usize,
    pub way_mean: f64,
    #[serde(default)]
    pub way_std: f64,
    pub shot_mean: f64,
    #[serde(default)]
    pub shot_std: f64,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Overwritten by the experiment seed when loaded from a config file.
    #[serde(default, skip_serializing)]
    pub seed: u64,
}

fn default_test_fraction() -> f64 {
    0.2
}

impl PartitionSpec {
    pub fn validate(&self, classes: usize) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::invalid("partition.clients", "must be at least 1"));
        }
        if !(self.way_mean >= 1.0 && self.way_mean <= classes as f64) {
            return Err(Error::invalid("partition.way_mean", "must lie in [1, classes]"));
        }
        if !(self.shot_mean >= 1.0) {
            return Err(Error::invalid("partition.shot_mean", "must be at least 1"));
        }
        if !(self.way_std >= 0.0) || !(self.shot_std >= 0.0) {
            return Err(Error::invalid("partition", "standard deviations must be non-negative"));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::invalid("partition.test_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientData {
    pub client_id: usize,
    /// Local class set, ascending.
    pub classes: Vec<usize>,
    /// Drawn shot count per local class (before the test carve-out),
    /// aligned with `classes`.
    pub shots: Vec<usize>,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl ClientData {
    pub fn train_count(&self, class: usize) -> usize {
        self.train.iter().filter(|s| s.label == class).count()
    }
}

fn clamped_normal(mean: f64, std: f64, lo: usize, hi: usize, rng: &mut RngStream) -> usize {
    let draw = libm::round(mean + std * rng.standard_normal());
    (draw.max(lo as f64).min(hi as f64)) as usize
}

/// Test samples carved from `shots` drawn samples; at least one sample
/// always stays in training.
pub fn test_count(shots: usize, test_fraction: f64) -> usize {
    (libm::round(shots as f64 * test_fraction) as usize).min(shots.saturating_sub(1))
}

/// Partitions `ds` across clients. Each client draws from its own random
/// stream, and class pools are shared, so clients may hold the same samples.
pub fn partition(ds: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientData>> {
    spec.validate(ds.classes)?;
    let pools = ds.class_pools();
    let largest = pools.iter().map(Vec::len).max().unwrap_or(0);
    if spec.shot_mean > largest as f64 {
        return Err(Error::ShotsExceedPool {
            mean: spec.shot_mean,
            largest,
        });
    }
    (0..spec.clients)
        .map(|client_id| {
            let mut rng = RngStream::keyed(spec.seed, StreamKey::new(Purpose::Partition).client(client_id));
            let ways = clamped_normal(spec.way_mean, spec.way_std, 1, ds.classes, &mut rng);
            let mut classes = index::sample(&mut rng, ds.classes, ways).into_vec();
            classes.sort_unstable();
            let mut shots = Vec::with_capacity(ways);
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for &class in &classes {
                let pool = &pools[class];
                let s = clamped_normal(spec.shot_mean, spec.shot_std, 1, pool.len(), &mut rng);
                shots.push(s);
                let picks = index::sample(&mut rng, pool.len(), s).into_vec();
                let n_test = test_count(s, spec.test_fraction);
                for (k, &p) in picks.iter().enumerate() {
                    let sample = ds.samples[pool[p]].clone();
                    if k < n_test {
                        test.push(sample);
                    } else {
                        train.push(sample);
                    }
                }
            }
            Ok(ClientData {
                client_id,
                classes,
                shots,
                train,
                test,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeSet;

    fn synth(spread: f64, seed: u64) -> Dataset {
        let spec = SyntheticSpec {
            classes: 10,
            input_dim: 8,
            per_class: 200,
            spread,
            radius: 1.0,
        };
        gen_synthetic(&spec, &mut RngStream::new(seed, 0)).unwrap()
    }

    fn spec(way_std: f64, shot_std: f64) -> PartitionSpec {
        PartitionSpec {
            clients: 6,
            way_mean: 4.0,
            way_std,
            shot_mean: 100.0,
            shot_std,
            test_fraction: 0.2,
            seed: 3,
        }
    }

    #[test]
    fn zero_spread_collapses_classes() {
        let ds = synth(0.0, 1);
        for pool in ds.class_pools() {
            let first = &ds.samples[pool[0]].x;
            assert!(pool.iter().all(|&i| &ds.samples[i].x == first));
        }
    }

    #[test]
    fn synthetic_is_deterministic() {
        assert_eq!(synth(0.3, 5), synth(0.3, 5));
        assert_ne!(synth(0.3, 5), synth(0.3, 6));
    }

    #[test]
    fn perceptron_separates_two_tight_classes() {
        let spec = SyntheticSpec {
            classes: 2,
            input_dim: 5,
            per_class: 100,
            spread: 0.05,
            radius: 1.0,
        };
        let ds = gen_synthetic(&spec, &mut RngStream::new(2, 0)).unwrap();
        let mut w = vec![0.0; 6];
        for _ in 0..100 {
            for s in &ds.samples {
                let y = if s.label == 1 { 1.0 } else { -1.0 };
                let act: f64 = w[5] + s.x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                if y * act <= 0.0 {
                    for k in 0..5 {
                        w[k] += y * s.x[k];
                    }
                    w[5] += y;
                }
            }
        }
        let correct = ds
            .samples
            .iter()
            .filter(|s| {
                let act: f64 = w[5] + s.x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                (act > 0.0) == (s.label == 1)
            })
            .count();
        assert_eq!(correct, ds.len());
    }

    #[test]
    fn zero_variance_partition_is_exact() {
        let ds = synth(0.5, 1);
        let clients = partition(&ds, &spec(0.0, 0.0)).unwrap();
        assert_eq!(clients.len(), 6);
        for c in &clients {
            assert_eq!(c.classes.len(), 4);
            assert_eq!(c.shots, vec![100; 4]);
            assert_eq!(c.train.len() + c.test.len(), 400);
            for &class in &c.classes {
                assert_eq!(c.train_count(class), 80);
            }
        }
    }

    #[test]
    fn partition_is_deterministic() {
        let ds = synth(0.5, 1);
        let s = PartitionSpec { way_std: 1.0, shot_std: 10.0, ..spec(0.0, 0.0) };
        assert_eq!(partition(&ds, &s).unwrap(), partition(&ds, &s).unwrap());
    }

    #[test]
    fn clients_do_not_depend_on_client_count() {
        let ds = synth(0.5, 1);
        let small = partition(&ds, &PartitionSpec { clients: 2, ..spec(1.0, 10.0) }).unwrap();
        let large = partition(&ds, &spec(1.0, 10.0)).unwrap();
        assert_eq!(small[..], large[..2]);
    }

    #[test]
    fn client_invariants_hold() {
        let ds = synth(0.5, 1);
        let clients = partition(&ds, &spec(1.5, 30.0)).unwrap();
        for c in &clients {
            let set: BTreeSet<usize> = c.classes.iter().copied().collect();
            assert_eq!(set.len(), c.classes.len());
            assert!(c.train.iter().chain(&c.test).all(|s| set.contains(&s.label)));
            for (&class, &s) in c.classes.iter().zip(&c.shots) {
                assert_eq!(c.train_count(class), s - test_count(s, 0.2));
            }
            // samples are drawn without replacement within a client, so the
            // split is disjoint at the sample level
            for t in &c.test {
                assert!(!c.train.contains(t));
            }
        }
    }

    #[test]
    fn mean_way_count_matches_target() {
        let ds = synth(0.5, 1);
        let s = PartitionSpec {
            clients: 1000,
            way_std: 1.0,
            shot_mean: 2.0,
            ..spec(0.0, 0.0)
        };
        let clients = partition(&ds, &s).unwrap();
        let mean = clients.iter().map(|c| c.classes.len() as f64).sum::<f64>() / 1000.0;
        assert!((mean - 4.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn shot_mean_above_pool_is_error() {
        let ds = synth(0.5, 1);
        let s = PartitionSpec { shot_mean: 201.0, ..spec(0.0, 0.0) };
        assert!(matches!(partition(&ds, &s), Err(Error::ShotsExceedPool { largest: 200, .. })));
    }

    #[test]
    fn invalid_specs_rejected() {
        let ds = synth(0.5, 1);
        for bad in [
            PartitionSpec { clients: 0, ..spec(0.0, 0.0) },
            PartitionSpec { way_mean: 11.0, ..spec(0.0, 0.0) },
            PartitionSpec { test_fraction: 1.0, ..spec(0.0, 0.0) },
            PartitionSpec { shot_std: -1.0, ..spec(0.0, 0.0) },
        ] {
            assert!(partition(&ds, &bad).is_err());
        }
    }

    fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [IDX_IMAGES_MAGIC, count, rows, cols] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(pixels);
        out
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        out.extend_from_slice(labels);
        out
    }

    #[test]
    fn idx_roundtrip_small() {
        let pixels: Vec<u8> = (0..18).map(|i| (i * 15) as u8).collect();
        let ds = idx_dataset("fixture", &idx_images(2, 3, 3, &pixels), &idx_labels(&[1, 0])).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.input_dim(), 9);
        assert_eq!(ds.classes, 2);
        assert_eq!(ds.samples[0].label, 1);
        assert_eq!(ds.samples[1].x[8], 255.0 / 255.0);
        assert_eq!(ds.samples[0].x[1], 15.0 / 255.0);
    }

    #[test]
    fn idx_errors_are_distinct() {
        let images = idx_images(2, 3, 3, &[0; 18]);
        assert_eq!(
            idx_dataset("x", &images, &images),
            Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: IDX_IMAGES_MAGIC })
        );
        assert!(matches!(idx_dataset("x", &images[..20], &idx_labels(&[0, 1])), Err(Error::Truncated { .. })));
        let three = idx_images(3, 3, 3, &[0; 27]);
        assert_eq!(
            idx_dataset("x", &three, &idx_labels(&[0, 1])),
            Err(Error::CountMismatch { images: 3, labels: 2 })
        );
        assert!(matches!(parse_idx_labels(&[0, 0]), Err(Error::Truncated { .. })));
    }
}
