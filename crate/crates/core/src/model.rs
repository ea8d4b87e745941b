//! Dual-classifier network.
//!
//! A ReLU MLP extractor `f(ω₁, x)` feeds two heads: a learnable linear
//! classifier `g = ω₂ f` trained with cross-entropy, and a linear projection
//! `ĥ = ω₃ f` whose normalization `h = ĥ/‖ĥ‖` is pulled onto the fixed ETF
//! vector of its class by the dot-regression loss `½(hᵀz_c − 1)²`.
//! Gradients are computed by hand.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::etf::EtfMatrix;
use crate::numerics::{dot, norm2, RngStream};

/// Below this norm the projection is divided by the guard instead.
pub const NORM_EPS: f64 = 1e-12;

/// Layer sizes of a [`DualClassifierModel`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelShape {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    /// Projection (and ETF) dimension; defaults to `feature_dim`.
    #[serde(default)]
    pub projection_dim: Option<usize>,
    pub classes: usize,
}

impl ModelShape {
    pub fn projection_dim(&self) -> usize {
        self.projection_dim.unwrap_or(self.feature_dim)
    }

    /// `[input, hidden.., feature]`.
    pub fn extractor_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.hidden.len() + 2);
        sizes.push(self.input_dim);
        sizes.extend(&self.hidden);
        sizes.push(self.feature_dim);
        sizes
    }

    pub fn validate(&self) -> Result<()> {
        if self.extractor_sizes().contains(&0) {
            return Err(Error::invalid("model", "layer sizes must be positive"));
        }
        if self.classes < 2 {
            return Err(Error::invalid("model.classes", "need at least 2 classes"));
        }
        if self.projection_dim() <= self.classes {
            return Err(Error::EtfCondition {
                dim: self.projection_dim(),
                classes: self.classes,
            });
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major `outputs × inputs`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
        }
    }

    /// Gaussian weights with standard deviation `gain / sqrt(inputs)`, zero bias.
    fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut RngStream) -> Self {
        let std = gain / libm::sqrt(inputs as f64);
        let weight = (0..inputs * outputs).map(|_| std * rng.standard_normal()).collect();
        Self {
            inputs,
            outputs,
            weight,
            bias: vec![0.0; outputs],
        }
    }

    fn forward_into(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.extend(self.bias.iter().enumerate().map(|(o, b)| {
            b + dot(&self.weight[o * self.inputs..(o + 1) * self.inputs], x)
        }));
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.outputs);
        self.forward_into(x, &mut out);
        out
    }

    /// Accumulates `Wᵀ delta` into `out`.
    fn backward_input(&self, delta: &[f64], out: &mut [f64]) {
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let row = &self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (acc, w) in out.iter_mut().zip(row) {
                *acc += d * w;
            }
        }
    }

    /// Accumulates `scale · delta ⊗ x` into the weight and `scale · delta`
    /// into the bias.
    fn accumulate(&mut self, delta: &[f64], x: &[f64], scale: f64) {
        for (o, d) in delta.iter().enumerate() {
            if *d == 0.0 {
                continue;
            }
            let sd = scale * d;
            let row = &mut self.weight[o * self.inputs..(o + 1) * self.inputs];
            for (acc, xi) in row.iter_mut().zip(x) {
                *acc += sd * xi;
            }
            self.bias[o] += sd;
        }
    }

    fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

/// Extractor `ω₁`, classifier `ω₂` and projection `ω₃`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualClassifierModel {
    pub extractor: Vec<Dense>,
    pub classifier: Dense,
    pub projection: Dense,
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Extractor,
    Classifier,
    Projection,
}

/// Activations of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Extractor output `f`.
    pub feature: Vec<f64>,
    /// Classifier logits `g`.
    pub logits: Vec<f64>,
    /// Normalized projection `h`.
    pub projection: Vec<f64>,
    /// Projection before normalization, `ĥ`.
    pub pre_norm: Vec<f64>,
}

/// Which head produces class predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionHead {
    /// `argmax g`.
    Classifier,
    /// `argmax_c hᵀz_c`.
    Etf,
    /// `argmax softmax(g)_c + hᵀz_c`.
    #[default]
    Combined,
}

impl DualClassifierModel {
    /// He-initialized extractor, `1/sqrt(fan_in)` heads, zero biases.
    pub fn new(shape: &ModelShape, rng: &mut RngStream) -> Result<Self> {
        shape.validate()?;
        let sizes = shape.extractor_sizes();
        let extractor = sizes
            .windows(2)
            .map(|w| Dense::init(w[0], w[1], core::f64::consts::SQRT_2, rng))
            .collect();
        let classifier = Dense::init(shape.feature_dim, shape.classes, 1.0, rng);
        let projection = Dense::init(shape.feature_dim, shape.projection_dim(), 1.0, rng);
        Ok(Self {
            extractor,
            classifier,
            projection,
        })
    }

    pub fn zeros(shape: &ModelShape) -> Self {
        let sizes = shape.extractor_sizes();
        Self {
            extractor: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
            classifier: Dense::zeros(shape.feature_dim, shape.classes),
            projection: Dense::zeros(shape.feature_dim, shape.projection_dim()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(&self.shape())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            input_dim: self.extractor[0].inputs,
            hidden: self.extractor[..self.extractor.len() - 1].iter().map(|l| l.outputs).collect(),
            feature_dim: self.classifier.inputs,
            projection_dim: Some(self.projection.outputs),
            classes: self.classifier.outputs,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.extractor[0].inputs
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.inputs
    }

    pub fn classes(&self) -> usize {
        self.classifier.outputs
    }

    /// Visits every parameter tensor in checkpoint order: extractor layers
    /// (weight, bias), classifier, projection.
    pub fn for_each_param(&self, mut f: impl FnMut(ParamGroup, &str, &[f64])) {
        for (i, layer) in self.extractor.iter().enumerate() {
            f(ParamGroup::Extractor, &format!("extractor.{i}.weight"), &layer.weight);
            f(ParamGroup::Extractor, &format!("extractor.{i}.bias"), &layer.bias);
        }
        f(ParamGroup::Classifier, "classifier.weight", &self.classifier.weight);
        f(ParamGroup::Classifier, "classifier.bias", &self.classifier.bias);
        f(ParamGroup::Projection, "projection.weight", &self.projection.weight);
        f(ParamGroup::Projection, "projection.bias", &self.projection.bias);
    }

    pub fn for_each_param_mut(&mut self, mut f: impl FnMut(ParamGroup, &mut [f64])) {
        for layer in &mut self.extractor {
            f(ParamGroup::Extractor, &mut layer.weight);
            f(ParamGroup::Extractor, &mut layer.bias);
        }
        f(ParamGroup::Classifier, &mut self.classifier.weight);
        f(ParamGroup::Classifier, &mut self.classifier.bias);
        f(ParamGroup::Projection, &mut self.projection.weight);
        f(ParamGroup::Projection, &mut self.projection.bias);
    }

    pub fn param_count(&self) -> usize {
        self.extractor_param_count() + self.classifier.param_count() + self.projection.param_count()
    }

    pub fn extractor_param_count(&self) -> usize {
        self.extractor.iter().map(Dense::param_count).sum()
    }

    /// Parameters of `ω₁` and `ω₂`, the network a FedAvg client exchanges.
    pub fn backbone_param_count(&self) -> usize {
        self.extractor_param_count() + self.classifier.param_count()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.for_each_param(|_, _, p| out.extend_from_slice(p));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.param_count(),
                found: flat.len(),
            });
        }
        let mut offset = 0;
        self.for_each_param_mut(|_, p| {
            p.copy_from_slice(&flat[offset..offset + p.len()]);
            offset += p.len();
        });
        Ok(())
    }

    /// Flattened `ω₁`, for freeze checks.
    pub fn extractor_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.extractor_param_count());
        self.for_each_param(|g, _, p| {
            if g == ParamGroup::Extractor {
                out.extend_from_slice(p);
            }
        });
        out
    }

    /// Extractor output `f(ω₁, x)`.
    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                what: "model input",
                expected: self.input_dim(),
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for layer in &self.extractor {
            layer.forward_into(&cur, &mut next);
            next.iter_mut().for_each(|v| *v = v.max(0.0));
            core::mem::swap(&mut cur, &mut next);
        }
        Ok(cur)
    }

    /// Both heads applied to an extractor-level feature.
    pub fn heads(&self, feature: Vec<f64>) -> ForwardOutput {
        let logits = self.classifier.forward(&feature);
        let pre_norm = self.projection.forward(&feature);
        let projection = normalize(&pre_norm);
        ForwardOutput {
            feature,
            logits,
            projection,
            pre_norm,
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardOutput> {
        Ok(self.heads(self.features(x)?))
    }

    pub fn predict(&self, x: &[f64], etf: &EtfMatrix, head: PredictionHead) -> Result<usize> {
        let out = self.forward(x)?;
        let score = |c: usize| match head {
            PredictionHead::Classifier => out.logits[c],
            PredictionHead::Etf => dot(&out.projection, etf.vector(c)),
            PredictionHead::Combined => softmax_at(&out.logits, c) + dot(&out.projection, etf.vector(c)),
        };
        Ok((0..self.classes())
            .map(|c| (c, score(c)))
            .fold((0, f64::NEG_INFINITY), |best, cur| if cur.1 > best.1 { cur } else { best })
            .0)
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = norm2(v).max(NORM_EPS);
    v.iter().map(|x| x / n).collect()
}

fn softmax_at(logits: &[f64], c: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|g| libm::exp(g - max)).sum();
    libm::exp(logits[c] - max) / sum
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label < classes {
        Ok(())
    } else {
        Err(Error::LabelOutOfRange { label, classes })
    }
}

/// Dot-regression loss `½(hᵀz_c − 1)²`.
pub fn loss_dr(h: &[f64], etf: &EtfMatrix, class: usize) -> Result<f64> {
    check_label(class, etf.classes())?;
    if h.len() != etf.dim() {
        return Err(Error::DimensionMismatch {
            what: "projection vs ETF",
            expected: etf.dim(),
            found: h.len(),
        });
    }
    let d = dot(h, etf.vector(class)) - 1.0;
    Ok(0.5 * d * d)
}

/// Cross-entropy `−log softmax(g)_c`.
pub fn loss_ce(logits: &[f64], class: usize) -> Result<f64> {
    check_label(class, logits.len())?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|g| libm::exp(g - max)).sum();
    Ok(libm::log(sum) + max - logits[class])
}

/// Hybrid loss `λ·L_DR + L_CE`.
pub fn loss_train(out: &ForwardOutput, etf: &EtfMatrix, class: usize, lambda: f64) -> Result<f64> {
    Ok(lambda * loss_dr(&out.projection, etf, class)? + loss_ce(&out.logits, class)?)
}

/// Per-sample training objective.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// `λ·L_DR(h) + L_CE(g)`.
    Hybrid { lambda: f64 },
    /// `L_CE(g)` only; the projection head receives no gradient.
    CrossEntropy,
    /// `L_CE(g) + weight·‖f − anchor_y‖²` for labels that have an anchor.
    Anchored {
        weight: f64,
        anchors: &'a BTreeMap<usize, Vec<f64>>,
    },
}

/// Where batch inputs enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputLevel {
    /// Raw inputs pass through the extractor.
    Raw,
    /// Extractor-level features feed the heads directly; `ω₁` gets no gradient.
    Feature,
}

/// Mean loss and parameter gradient over a batch.
pub fn batch_gradient(
    model: &DualClassifierModel,
    batch: &[(&[f64], usize)],
    etf: &EtfMatrix,
    objective: Objective<'_>,
    level: InputLevel,
) -> Result<(f64, DualClassifierModel)> {
    if batch.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let classes = model.classes();
    let n_layers = model.extractor.len();
    let mut grad = model.zeros_like();
    let scale = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut acts: Vec<Vec<f64>> = vec![Vec::new(); n_layers + 1];

    for (x, label) in batch {
        check_label(*label, classes)?;
        let label = *label;
        let expected = match level {
            InputLevel::Raw => model.input_dim(),
            InputLevel::Feature => model.feature_dim(),
        };
        if x.len() != expected {
            return Err(Error::DimensionMismatch {
                what: "batch input",
                expected,
                found: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("batch input"));
        }

        let feature: &[f64] = match level {
            InputLevel::Raw => {
                acts[0].clear();
                acts[0].extend_from_slice(x);
                for l in 0..n_layers {
                    let (head, tail) = acts.split_at_mut(l + 1);
                    model.extractor[l].forward_into(&head[l], &mut tail[0]);
                    tail[0].iter_mut().for_each(|v| *v = v.max(0.0));
                }
                &acts[n_layers]
            }
            InputLevel::Feature => x,
        };

        // classifier head: dL/dg = softmax(g) - onehot
        let logits = model.classifier.forward(feature);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|g| libm::exp(g - max)).collect();
        let sum: f64 = exps.iter().sum();
        let mut d_logits: Vec<f64> = exps.iter().map(|e| e / sum).collect();
        d_logits[label] -= 1.0;
        total += libm::log(sum) + max - logits[label];

        let mut d_feature = vec![0.0; feature.len()];
        grad.classifier.accumulate(&d_logits, feature, scale);
        model.classifier.backward_input(&d_logits, &mut d_feature);

        match objective {
            Objective::Hybrid { lambda } if lambda != 0.0 => {
                let pre = model.projection.forward(feature);
                let norm = norm2(&pre);
                let denom = norm.max(NORM_EPS);
                let h: Vec<f64> = pre.iter().map(|v| v / denom).collect();
                let z = etf.vector(label);
                let residual = dot(&h, z) - 1.0;
                total += lambda * 0.5 * residual * residual;
                // dL/dh = λ r z; through h = ĥ/‖ĥ‖: (I - hhᵀ)/‖ĥ‖
                let d_h: Vec<f64> = z.iter().map(|zk| lambda * residual * zk).collect();
                let d_pre: Vec<f64> = if norm > NORM_EPS {
                    let along = dot(&h, &d_h);
                    d_h.iter().zip(&h).map(|(g, hk)| (g - hk * along) / norm).collect()
                } else {
                    d_h.iter().map(|g| g / NORM_EPS).collect()
                };
                grad.projection.accumulate(&d_pre, feature, scale);
                model.projection.backward_input(&d_pre, &mut d_feature);
            }
            Objective::Anchored { weight, anchors } => {
                if let Some(anchor) = anchors.get(&label) {
                    let mut sq = 0.0;
                    for ((d, f), a) in d_feature.iter_mut().zip(feature).zip(anchor) {
                        let diff = f - a;
                        sq += diff * diff;
                        *d += 2.0 * weight * diff;
                    }
                    total += weight * sq;
                }
            }
            _ => {}
        }

        if level == InputLevel::Raw {
            let mut delta: Vec<f64> = d_feature
                .iter()
                .zip(&acts[n_layers])
                .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
                .collect();
            for l in (0..n_layers).rev() {
                grad.extractor[l].accumulate(&delta, &acts[l], scale);
                if l > 0 {
                    let mut prev = vec![0.0; acts[l].len()];
                    model.extractor[l].backward_input(&delta, &mut prev);
                    for (p, a) in prev.iter_mut().zip(&acts[l]) {
                        if *a <= 0.0 {
                            *p = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }
    }

    let mut bad = None;
    grad.for_each_param(|_, path, p| {
        if bad.is_none() && p.iter().any(|v| !v.is_finite()) {
            bad = Some(path.into());
        }
    });
    if let Some(path) = bad {
        return Err(Error::NonFiniteGradient(path));
    }
    Ok((total * scale, grad))
}

/// Local training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the dot-regression term.
    pub lambda: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub local_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 2.0,
            learning_rate: 0.01,
            momentum: 0.5,
            batch_size: 4,
            local_epochs: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid("lambda", "must be non-negative"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum", "must be in [0, 1)"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be at least 1"));
        }
        if self.local_epochs == 0 {
            return Err(Error::invalid("local_epochs", "must be at least 1"));
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `v ← μv + ∇`, `θ ← θ − ηv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: DualClassifierModel,
}

impl Sgd {
    pub fn new(model: &DualClassifierModel, learning_rate: f64, momentum: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            velocity: model.zeros_like(),
        }
    }

    pub fn from_config(model: &DualClassifierModel, cfg: &TrainConfig) -> Self {
        Self::new(model, cfg.learning_rate, cfg.momentum)
    }

    pub fn step(&mut self, model: &mut DualClassifierModel, grad: &DualClassifierModel, freeze_extractor: bool) {
        let (lr, mu) = (self.learning_rate, self.momentum);
        let update = |p: &mut Dense, v: &mut Dense, g: &Dense| {
            for ((pw, vw), gw) in p.weight.iter_mut().zip(&mut v.weight).zip(&g.weight) {
                *vw = mu * *vw + gw;
                *pw -= lr * *vw;
            }
            for ((pb, vb), gb) in p.bias.iter_mut().zip(&mut v.bias).zip(&g.bias) {
                *vb = mu * *vb + gb;
                *pb -= lr * *vb;
            }
        };
        if !freeze_extractor {
            for ((p, v), g) in model.extractor.iter_mut().zip(&mut self.velocity.extractor).zip(&grad.extractor) {
                update(p, v, g);
            }
        }
        update(&mut model.classifier, &mut self.velocity.classifier, &grad.classifier);
        update(&mut model.projection, &mut self.velocity.projection, &grad.projection);
    }
}

/// One optimizer step on the mean batch loss. Returns the loss before the
/// update.
pub fn backward_step(
    model: &mut DualClassifierModel,
    opt: &mut Sgd,
    batch: &[(&[f64], usize)],
    etf: &EtfMatrix,
    objective: Objective<'_>,
    freeze_extractor: bool,
) -> Result<f64> {
    let (loss, grad) = batch_gradient(model, batch, etf, objective, InputLevel::Raw)?;
    opt.step(model, &grad, freeze_extractor);
    Ok(loss)
}

/// Shuffles `len` indices and yields them in batches of `batch_size`.
pub fn shuffled_batches(len: usize, batch_size: usize, rng: &mut RngStream) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Retrains `ω₂` and `ω₃` on extractor-level pseudo-features with the
/// hybrid loss; `ω₁` is not touched. Uses a fresh momentum buffer. Returns
/// the mean pre-update batch loss, or `None` for an empty pseudo set.
pub fn retrain_projection(
    model: &mut DualClassifierModel,
    pseudo: &[(Vec<f64>, usize)],
    etf: &EtfMatrix,
    cfg: &TrainConfig,
    epochs: usize,
    rng: &mut RngStream,
) -> Result<Option<f64>> {
    if pseudo.is_empty() || epochs == 0 {
        return Ok(None);
    }
    for (f, _) in pseudo {
        if f.len() != model.feature_dim() {
            return Err(Error::DimensionMismatch {
                what: "pseudo-feature",
                expected: model.feature_dim(),
                found: f.len(),
            });
        }
    }
    let mut opt = Sgd::from_config(model, cfg);
    let objective = Objective::Hybrid { lambda: cfg.lambda };
    let (mut sum, mut steps) = (0.0, 0usize);
    for _ in 0..epochs {
        for batch_idx in shuffled_batches(pseudo.len(), cfg.batch_size, rng) {
            let batch: Vec<(&[f64], usize)> = batch_idx.iter().map(|&i| (pseudo[i].0.as_slice(), pseudo[i].1)).collect();
            let (loss, grad) = batch_gradient(model, &batch, etf, objective, InputLevel::Feature)?;
            opt.step(model, &grad, true);
            sum += loss;
            steps += 1;
        }
    }
    Ok(Some(sum / steps as f64))
}
