//! Finite-difference checks of `batch_gradient` on a deeper extractor.

use std::collections::BTreeMap;

use gfpl_core::etf::{build_etf, EtfMatrix};
use gfpl_core::model::{batch_gradient, loss_ce, loss_train, DualClassifierModel, InputLevel, ModelShape, Objective};
use gfpl_core::numerics::{Purpose, RngStream, StreamKey};

fn rng(i: usize) -> RngStream {
    RngStream::keyed(7, StreamKey::new(Purpose::Test).index(i))
}

fn setup() -> (DualClassifierModel, EtfMatrix, Vec<(Vec<f64>, usize)>) {
    let shape = ModelShape {
        input_dim: 6,
        hidden: vec![9, 7],
        feature_dim: 5,
        projection_dim: Some(4),
        classes: 3,
    };
    let model = DualClassifierModel::new(&shape, &mut rng(0)).unwrap();
    let etf = build_etf(4, 3, &mut rng(1)).unwrap();
    let mut r = rng(2);
    let batch = (0..5).map(|i| ((0..6).map(|_| r.standard_normal()).collect(), i % 3)).collect();
    (model, etf, batch)
}

/// Largest relative error between `batch_gradient` and a central difference
/// of `loss` over every parameter.
fn max_error(
    model: &DualClassifierModel,
    batch: &[(Vec<f64>, usize)],
    etf: &EtfMatrix,
    objective: Objective<'_>,
    loss: impl Fn(&DualClassifierModel) -> f64,
) -> f64 {
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (value, grad) = batch_gradient(model, &refs, etf, objective, InputLevel::Raw).unwrap();
    assert!((value - loss(model)).abs() < 1e-12 * value.abs().max(1.0));

    let theta = model.params_flat();
    let analytic = grad.params_flat();
    let h = 1e-5;
    let mut probe = model.clone();
    let mut at = |i: usize, delta: f64| {
        let mut p = theta.clone();
        p[i] += delta;
        probe.set_params_flat(&p).unwrap();
        loss(&probe)
    };
    (0..theta.len())
        .map(|i| {
            let fd = (at(i, h) - at(i, -h)) / (2.0 * h);
            (analytic[i] - fd).abs() / (fd.abs() + 1e-6)
        })
        .fold(0.0, f64::max)
}

#[test]
fn hybrid_gradient_through_two_hidden_layers() {
    let (model, etf, batch) = setup();
    let loss = |m: &DualClassifierModel| {
        batch.iter().map(|(x, y)| loss_train(&m.forward(x).unwrap(), &etf, *y, 1.5).unwrap()).sum::<f64>() / batch.len() as f64
    };
    let err = max_error(&model, &batch, &etf, Objective::Hybrid { lambda: 1.5 }, loss);
    assert!(err < 1e-5, "relative error {err:e}");
}

#[test]
fn anchored_gradient_matches_penalized_cross_entropy() {
    let (model, etf, batch) = setup();
    // class 2 has no anchor and contributes cross-entropy only
    let anchors: BTreeMap<usize, Vec<f64>> = [(0, vec![0.5, -0.2, 0.1, 0.0, 0.3]), (1, vec![-0.4, 0.2, 0.6, 0.1, -0.1])].into();
    let loss = |m: &DualClassifierModel| {
        batch
            .iter()
            .map(|(x, y)| {
                let out = m.forward(x).unwrap();
                let penalty = anchors
                    .get(y)
                    .map_or(0.0, |a| 0.7 * out.feature.iter().zip(a).map(|(f, a)| (f - a).powi(2)).sum::<f64>());
                loss_ce(&out.logits, *y).unwrap() + penalty
            })
            .sum::<f64>()
            / batch.len() as f64
    };
    let objective = Objective::Anchored {
        weight: 0.7,
        anchors: &anchors,
    };
    let err = max_error(&model, &batch, &etf, objective, loss);
    assert!(err < 1e-5, "relative error {err:e}");
}

#[test]
fn cross_entropy_leaves_projection_head_untouched() {
    let (model, etf, batch) = setup();
    let refs: Vec<(&[f64], usize)> = batch.iter().map(|(x, y)| (x.as_slice(), *y)).collect();
    let (_, grad) = batch_gradient(&model, &refs, &etf, Objective::CrossEntropy, InputLevel::Raw).unwrap();
    let mut projection_norm = 0.0;
    grad.for_each_param(|group, _, values| {
        if group == gfpl_core::model::ParamGroup::Projection {
            projection_norm += values.iter().map(|v| v * v).sum::<f64>();
        }
    });
    assert_eq!(projection_norm, 0.0);

    let loss = |m: &DualClassifierModel| {
        batch.iter().map(|(x, y)| loss_ce(&m.forward(x).unwrap().logits, *y).unwrap()).sum::<f64>() / batch.len() as f64
    };
    let err = max_error(&model, &batch, &etf, Objective::CrossEntropy, loss);
    assert!(err < 1e-5, "relative error {err:e}");
}
