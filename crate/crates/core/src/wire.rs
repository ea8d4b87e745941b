//! Binary layouts for everything a client or the server writes out.
//!
//! All layouts are sequences of little-endian 64-bit words, so a payload's
//! scalar count is its byte length divided by eight. The communication
//! ledger counts these words.
//!
//! Prototype record: one header word (class id in the high 32 bits,
//! component count `n` in the low 32 bits), then per component its weight,
//! mean and standard deviation as `f64`, i.e. `1 + n·(1 + 2d)` words. The
//! weight word carries the absolute weight (`π × sample count`), so the
//! receiver recovers both `π` and the sample count.
//!
//! A global prototype set is prefixed by one class-count word.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::etf::EtfMatrix;
use crate::fusion::GlobalPrototype;
use crate::gmm::{GaussianComponent, GmmPrototype};
use crate::model::{DualClassifierModel, ModelShape};
use crate::numerics::Matrix;

/// Words in one prototype record with `n` components of dimension `d`.
pub const fn prototype_scalars(n: usize, d: usize) -> usize {
    1 + n * (1 + 2 * d)
}

/// Words a client uploads for its local prototypes.
pub fn upload_scalars(protos: &[GmmPrototype]) -> usize {
    protos.iter().map(|p| prototype_scalars(p.len(), p.dim())).sum()
}

/// Words in a serialized global prototype set.
pub fn download_scalars(global: &BTreeMap<usize, GlobalPrototype>) -> usize {
    1 + global.values().map(|g| prototype_scalars(g.len(), g.dim())).sum::<usize>()
}

/// Words per class for a mean-feature prototype: class id and the mean.
pub const fn centroid_scalars(d: usize) -> usize {
    1 + d
}

struct Writer(Vec<u8>);

impl Writer {
    fn word(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, vs: &[f64]) {
        vs.iter().for_each(|v| self.f64(*v));
    }

    fn header(&mut self, class_id: usize, n: usize) {
        self.word(((class_id as u64) << 32) | n as u64);
    }

    fn component(&mut self, c: &GaussianComponent, weight: f64) {
        self.f64(weight);
        self.f64s(&c.mean);
        self.f64s(&c.std);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Result<Self> {
        if !bytes.len().is_multiple_of(8) {
            return Err(Error::Malformed("length is not a multiple of 8 bytes"));
        }
        Ok(Self { bytes, pos: 0 })
    }

    fn word(&mut self) -> Result<u64> {
        let chunk = self
            .bytes
            .get(self.pos..self.pos + 8)
            .ok_or(Error::Malformed("unexpected end of payload"))?;
        self.pos += 8;
        let mut buf = [0u8; 8];
        buf.copy_from_slice(chunk);
        Ok(u64::from_le_bytes(buf))
    }

    fn f64(&mut self) -> Result<f64> {
        self.word().map(f64::from_bits)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn header(&mut self) -> Result<(usize, usize)> {
        let w = self.word()?;
        Ok(((w >> 32) as usize, (w & 0xFFFF_FFFF) as usize))
    }

    fn components(&mut self, n: usize, dim: usize) -> Result<Vec<GaussianComponent>> {
        (0..n)
            .map(|_| {
                let weight = self.f64()?;
                let mean = self.f64s(dim)?;
                let std = self.f64s(dim)?;
                GaussianComponent::new(mean, std, weight)
            })
            .collect()
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Malformed("trailing bytes"))
        }
    }
}

/// Splits absolute weights back into normalized weights and their total.
fn normalize_weights(components: &mut [GaussianComponent]) -> Result<f64> {
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if !(total > 0.0) {
        return Err(Error::Malformed("non-positive total weight"));
    }
    components.iter_mut().for_each(|c| c.weight /= total);
    Ok(total)
}

pub fn encode_prototypes(protos: &[GmmPrototype]) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(8 * upload_scalars(protos)));
    for p in protos {
        w.header(p.class_id, p.len());
        for c in &p.components {
            w.component(c, c.weight * p.sample_count as f64);
        }
    }
    w.0
}

pub fn decode_prototypes(bytes: &[u8], dim: usize) -> Result<Vec<GmmPrototype>> {
    let mut r = Reader::new(bytes)?;
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let (class_id, n) = r.header()?;
        let mut components = r.components(n, dim)?;
        let total = normalize_weights(&mut components)?;
        out.push(GmmPrototype {
            class_id,
            components,
            sample_count: libm::round(total) as usize,
        });
    }
    r.finish()?;
    Ok(out)
}

pub fn encode_global(global: &BTreeMap<usize, GlobalPrototype>) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(8 * download_scalars(global)));
    w.word(global.len() as u64);
    for g in global.values() {
        w.header(g.class_id, g.len());
        for c in &g.components {
            w.component(c, c.weight * g.total_weight);
        }
    }
    w.0
}

pub fn decode_global(bytes: &[u8], dim: usize) -> Result<BTreeMap<usize, GlobalPrototype>> {
    let mut r = Reader::new(bytes)?;
    let classes = r.word()? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..classes {
        let (class_id, n) = r.header()?;
        let mut components = r.components(n, dim)?;
        let total_weight = normalize_weights(&mut components)?;
        out.insert(
            class_id,
            GlobalPrototype {
                class_id,
                components,
                total_weight,
            },
        );
    }
    r.finish()?;
    Ok(out)
}

/// `d`, `K`, then `Z` row-major.
pub fn encode_etf(etf: &EtfMatrix) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.word(etf.dim() as u64);
    w.word(etf.classes() as u64);
    w.f64s(etf.matrix().as_slice());
    w.0
}

pub fn decode_etf(bytes: &[u8]) -> Result<EtfMatrix> {
    let mut r = Reader::new(bytes)?;
    let d = r.word()? as usize;
    let k = r.word()? as usize;
    let data = r.f64s(d * k)?;
    r.finish()?;
    EtfMatrix::from_matrix(Matrix::new(d, k, data)?)
}

/// Layer-size header (`count`, then `input, hidden.., feature, classes,
/// projection`), then every parameter as `f64`: extractor layers, classifier,
/// projection, each weight before its bias.
pub fn encode_checkpoint(model: &DualClassifierModel) -> Vec<u8> {
    let shape = model.shape();
    let mut sizes = shape.extractor_sizes();
    sizes.push(shape.classes);
    sizes.push(shape.projection_dim());
    let mut w = Writer(Vec::new());
    w.word(sizes.len() as u64);
    sizes.iter().for_each(|s| w.word(*s as u64));
    w.f64s(&model.params_flat());
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<DualClassifierModel> {
    let mut r = Reader::new(bytes)?;
    let count = r.word()? as usize;
    if count < 4 {
        return Err(Error::Malformed("checkpoint needs at least 4 layer sizes"));
    }
    let sizes = (0..count).map(|_| r.word().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let shape = ModelShape {
        input_dim: sizes[0],
        hidden: sizes[1..count - 3].to_vec(),
        feature_dim: sizes[count - 3],
        classes: sizes[count - 2],
        projection_dim: Some(sizes[count - 1]),
    };
    let mut model = DualClassifierModel::zeros(&shape);
    let params = r.f64s(model.param_count())?;
    r.finish()?;
    model.set_params_flat(&params)?;
    Ok(model)
}
