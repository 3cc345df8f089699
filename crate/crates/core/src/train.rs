//! Deterministic maximum-likelihood fitting with an adaptive-moment optimizer,
//! plus a finite-difference gradient check.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::ChoiceEvent;
use crate::error::{Error, Result};
use crate::models::{loss_and_gradient, randomize, Evaluator, LossContext, ModelKind, ModelParams, NestStructure, ParamsDocument};
use crate::rng::{purpose, RngHandle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "size")]
pub enum BatchMode {
    Full,
    Minibatch(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub reg: f64,
    pub batch: BatchMode,
    pub n_negatives: usize,
    pub adam: AdamConfig,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            dim: 8,
            learning_rate: 0.05,
            epochs: 300,
            reg: 1e-4,
            batch: BatchMode::Full,
            n_negatives: 4,
            adam: AdamConfig::default(),
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::config("hyper.dim must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config(format!("hyper.learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::config("hyper.epochs must be at least 1"));
        }
        if !(self.reg.is_finite() && self.reg >= 0.0) {
            return Err(Error::config(format!("hyper.reg must be >= 0, got {}", self.reg)));
        }
        if self.batch == BatchMode::Minibatch(0) {
            return Err(Error::config("minibatch size must be at least 1"));
        }
        if self.n_negatives == 0 {
            return Err(Error::config("hyper.n_negatives must be at least 1"));
        }
        let a = self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return Err(Error::config("adam moments need beta1, beta2 in [0, 1) and eps > 0"));
        }
        Ok(())
    }
}

/// Sizes of the user and item index spaces a model covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub n_users: usize,
    pub n_items: usize,
}

/// The two random streams a fit consumes. `init` seeds the starting point;
/// `sampling` drives negatives, minibatch order and the random scorer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FitStreams {
    pub init: RngHandle,
    pub sampling: RngHandle,
}

impl From<RngHandle> for FitStreams {
    fn from(rng: RngHandle) -> Self {
        FitStreams {
            init: rng.child(purpose::INIT),
            sampling: rng.child(purpose::SAMPLING),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub kind: ModelKind,
    pub params: ModelParams,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainedModelDocument {
    pub kind: ModelKind,
    pub final_loss: f64,
    pub loss_trace: Vec<f64>,
    pub params: ParamsDocument,
}

impl TrainedModel {
    pub fn to_document(&self) -> TrainedModelDocument {
        TrainedModelDocument {
            kind: self.kind,
            final_loss: self.final_loss,
            loss_trace: self.loss_trace.clone(),
            params: self.params.to_document(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.to_document())?)
    }

    pub fn score(&self, user: usize, item: usize) -> f64 {
        self.params.score(user, item)
    }
}

pub fn fit(
    kind: ModelKind,
    events: &[ChoiceEvent],
    shape: ModelShape,
    hyper: &HyperParams,
    nests: &NestStructure,
    rng: RngHandle,
) -> Result<TrainedModel> {
    fit_with_streams(kind, events, shape, hyper, nests, rng.into())
}

pub fn fit_with_streams(
    kind: ModelKind,
    events: &[ChoiceEvent],
    shape: ModelShape,
    hyper: &HyperParams,
    nests: &NestStructure,
    streams: FitStreams,
) -> Result<TrainedModel> {
    hyper.validate()?;
    let ModelShape { n_users, n_items } = shape;
    let mut params = ModelParams::zeros(n_users, n_items, hyper.dim, nests.n_nests);
    let zero_trace = vec![0.0; hyper.epochs];
    match kind {
        ModelKind::Popularity => {
            let counts = params.intercepts_mut();
            for e in events {
                let i = e.chosen_item();
                if i >= n_items {
                    return Err(Error::contract(format!("chosen item {i} outside the model")));
                }
                counts[i] += 1.0;
            }
            return Ok(TrainedModel {
                kind,
                params,
                final_loss: 0.0,
                loss_trace: zero_trace,
            });
        }
        ModelKind::Random => {
            let mut rng = streams.sampling.rng();
            params.intercepts_mut().iter_mut().for_each(|v| *v = rng.random());
            return Ok(TrainedModel {
                kind,
                params,
                final_loss: 0.0,
                loss_trace: zero_trace,
            });
        }
        _ => {}
    }
    if events.is_empty() {
        return Err(Error::contract(format!("cannot fit {kind} on an empty event list")));
    }
    let ctx = LossContext::new(kind, events, n_users, n_items, hyper.reg, nests.clone(), hyper.n_negatives)?;

    let normal = Normal::new(0.0, 0.01).expect("constant sd");
    let mut init = streams.init.rng();
    for v in params.user_factors_mut() {
        *v = normal.sample(&mut init);
    }
    for v in params.item_factors_mut() {
        *v = normal.sample(&mut init);
    }

    let mut grad = ModelParams::zeros_like(&params);
    let mut m = vec![0.0; params.values().len()];
    let mut v = vec![0.0; params.values().len()];
    let AdamConfig { beta1, beta2, eps } = hyper.adam;
    let lr = hyper.learning_rate;
    let mut evaluator = Evaluator::new();
    let mut trace = Vec::with_capacity(hyper.epochs);
    let mut order: Vec<usize> = (0..events.len()).collect();
    let mut batch_buf: Vec<ChoiceEvent> = Vec::new();
    let mut step = 0i32;

    let mut adam_step = |params: &mut ModelParams, grad: &ModelParams, step: i32| {
        let c1 = 1.0 - beta1.powi(step);
        let c2 = 1.0 - beta2.powi(step);
        for (((p, g), m), v) in params.values_mut().iter_mut().zip(grad.values()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        }
    };
    let with_epoch = |err: Error, epoch: usize| match err {
        Error::Training { event, detail, .. } => Error::Training {
            epoch: Some(epoch),
            event,
            detail,
        },
        other => other,
    };

    for epoch in 0..hyper.epochs {
        let epoch_rng = streams.sampling.child(epoch as u64);
        let loss = match hyper.batch {
            BatchMode::Full => {
                let loss = evaluator
                    .evaluate(&ctx, &params, events, epoch_rng, Some(&mut grad))
                    .map_err(|e| with_epoch(e, epoch))?;
                step += 1;
                adam_step(&mut params, &grad, step);
                loss
            }
            BatchMode::Minibatch(size) => {
                order.shuffle(&mut epoch_rng.child(u64::MAX).rng());
                let mut total = 0.0;
                let mut n_batches = 0;
                for (b, chunk) in order.chunks(size).enumerate() {
                    batch_buf.clear();
                    batch_buf.extend(chunk.iter().map(|&k| events[k].clone()));
                    let loss = evaluator
                        .evaluate(&ctx, &params, &batch_buf, epoch_rng.child(b as u64), Some(&mut grad))
                        .map_err(|e| with_epoch(e, epoch))?;
                    step += 1;
                    adam_step(&mut params, &grad, step);
                    total += loss;
                    n_batches += 1;
                }
                total / n_batches as f64
            }
        };
        trace.push(loss);
    }
    if !params.is_finite() {
        return Err(Error::Training {
            epoch: Some(hyper.epochs - 1),
            event: None,
            detail: "parameters became non-finite".into(),
        });
    }
    Ok(TrainedModel {
        kind,
        params,
        final_loss: *trace.last().expect("epochs >= 1"),
        loss_trace: trace,
    })
}

/// Central differences of `f` at `x`, one coordinate at a time.
pub fn central_differences<F>(mut f: F, x: &[f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            probe[k] = x[k] + step;
            let plus = f(&probe);
            probe[k] = x[k] - step;
            let minus = f(&probe);
            probe[k] = x[k];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Largest relative disagreement between two gradients, over coordinates
/// where `|a| + |b| > 1e-10`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .filter(|(a, n)| a.abs() + n.abs() > 1e-10)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()))
        .fold(0.0, f64::max)
}

pub const GRADIENT_CHECK_STEP: f64 = 1e-5;

/// Compares the analytic gradient with central differences at a randomized
/// parameter point and returns the maximum relative error.
pub fn gradient_check(
    kind: ModelKind,
    events: &[ChoiceEvent],
    shape: ModelShape,
    hyper: &HyperParams,
    nests: &NestStructure,
    rng: RngHandle,
) -> Result<f64> {
    hyper.validate()?;
    if !kind.is_parameterized() {
        return Ok(0.0);
    }
    let ctx = LossContext::new(kind, events, shape.n_users, shape.n_items, hyper.reg, nests.clone(), hyper.n_negatives)?;
    let mut params = ModelParams::zeros(shape.n_users, shape.n_items, hyper.dim, nests.n_nests);
    randomize(&mut params, 0.5, rng.child(purpose::GRADCHECK));
    let negatives = rng.child(purpose::SAMPLING);
    let (_, grad) = loss_and_gradient(&ctx, &params, events, negatives)?;
    let mut probe = params.clone();
    let mut evaluator = Evaluator::new();
    let mut failure = None;
    let numeric = central_differences(
        |x| {
            probe.values_mut().copy_from_slice(x);
            match evaluator.evaluate(&ctx, &probe, events, negatives, None) {
                Ok(l) => l,
                Err(e) => {
                    failure.get_or_insert(e);
                    f64::NAN
                }
            }
        },
        params.values(),
        GRADIENT_CHECK_STEP,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(max_relative_error(grad.values(), &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{PolicyKind, Slate};

    fn small_events(n: usize, n_users: usize, n_items: usize, k: usize, seed: u64) -> Vec<ChoiceEvent> {
        let mut rng = RngHandle::new(seed, 0).rng();
        (0..n)
            .map(|_| {
                let items = rand::seq::index::sample(&mut rng, n_items, k).into_vec();
                let user = rng.random_range(0..n_users);
                let chosen = rng.random_range(0..k);
                ChoiceEvent::new(user, Slate::new(items, PolicyKind::UniformB), chosen).unwrap()
            })
            .collect()
    }

    fn hyper(dim: usize) -> HyperParams {
        HyperParams {
            dim,
            reg: 1e-3,
            ..HyperParams::default()
        }
    }

    #[test]
    fn finite_differences_of_a_quadratic() {
        let g = central_differences(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0], 1e-5);
        assert!((g[0] - 8.0).abs() < 1e-8 && (g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let shape = ModelShape { n_users: 4, n_items: 12 };
        let nests = NestStructure::random(12, 3, RngHandle::new(1, 1)).unwrap();
        let events = small_events(10, 4, 12, 4, 3);
        for kind in ModelKind::TRAINABLE {
            let err = gradient_check(kind, &events, shape, &hyper(3), &nests, RngHandle::new(2, 2)).unwrap();
            assert!(err < 1e-4, "{kind}: {err}");
        }
    }

    #[test]
    fn bl_single_event() {
        let shape = ModelShape { n_users: 2, n_items: 6 };
        let events = small_events(1, 2, 6, 4, 9);
        let err = gradient_check(ModelKind::Bl, &events, shape, &hyper(2), &NestStructure::single(6), RngHandle::new(4, 4)).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn pinned_gev_check_equals_mnl_check() {
        let shape = ModelShape { n_users: 4, n_items: 12 };
        let nests = NestStructure::random(12, 3, RngHandle::new(1, 1)).unwrap().with_unit_scales();
        let events = small_events(10, 4, 12, 4, 5);
        let h = hyper(3);
        let mnl = gradient_check(ModelKind::Mnl, &events, shape, &h, &nests, RngHandle::new(6, 6)).unwrap();
        let gev = gradient_check(ModelKind::Gev, &events, shape, &h, &nests, RngHandle::new(6, 6)).unwrap();
        assert!((mnl - gev).abs() < 1e-6, "{mnl} vs {gev}");
    }

    #[test]
    fn popularity_counts_choices() {
        let events = small_events(200, 3, 10, 4, 11);
        let model = fit(ModelKind::Popularity, &events, ModelShape { n_users: 3, n_items: 10 }, &hyper(2), &NestStructure::single(10), RngHandle::new(0, 0)).unwrap();
        assert!(model.loss_trace.iter().all(|&l| l == 0.0));
        assert_eq!(model.loss_trace.len(), 300);
        for i in 0..10 {
            let count = events.iter().filter(|e| e.chosen_item() == i).count();
            assert_eq!(model.score(1, i), count as f64);
        }
    }

    #[test]
    fn fit_is_bit_identical() {
        let events = small_events(100, 5, 20, 4, 13);
        let shape = ModelShape { n_users: 5, n_items: 20 };
        let h = HyperParams { epochs: 30, ..hyper(3) };
        let nests = NestStructure::random(20, 4, RngHandle::new(1, 3)).unwrap();
        for kind in ModelKind::ALL {
            let a = fit(kind, &events, shape, &h, &nests, RngHandle::new(8, 1)).unwrap();
            let b = fit(kind, &events, shape, &h, &nests, RngHandle::new(8, 1)).unwrap();
            assert_eq!(a.to_json().unwrap(), b.to_json().unwrap(), "{kind}");
            assert_eq!(a.loss_trace.len(), 30);
        }
    }

    #[test]
    fn negative_stream_only_affects_pairwise_kinds() {
        let events = small_events(100, 5, 20, 4, 17);
        let shape = ModelShape { n_users: 5, n_items: 20 };
        let h = HyperParams { epochs: 20, ..hyper(3) };
        let nests = NestStructure::random(20, 4, RngHandle::new(1, 3)).unwrap();
        let init = RngHandle::new(3, 0);
        let a = FitStreams { init, sampling: RngHandle::new(3, 1) };
        let b = FitStreams { init, sampling: RngHandle::new(3, 2) };
        for kind in [ModelKind::Mnl, ModelKind::Gev, ModelKind::Bl] {
            let x = fit_with_streams(kind, &events, shape, &h, &nests, a).unwrap();
            let y = fit_with_streams(kind, &events, shape, &h, &nests, b).unwrap();
            assert_eq!(x, y, "{kind}");
        }
        let x = fit_with_streams(ModelKind::Bpr, &events, shape, &h, &nests, a).unwrap();
        let y = fit_with_streams(ModelKind::Bpr, &events, shape, &h, &nests, b).unwrap();
        assert_ne!(x.params, y.params);
    }

    #[test]
    fn empty_events_are_a_contract_error() {
        let err = fit(ModelKind::Mnl, &[], ModelShape { n_users: 1, n_items: 4 }, &hyper(2), &NestStructure::single(4), RngHandle::new(0, 0)).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn nan_regularization_reports_epoch() {
        let events = small_events(10, 2, 8, 4, 1);
        let h = HyperParams { reg: 0.0, ..hyper(2) };
        let mut bad = h;
        bad.reg = f64::NAN;
        let shape = ModelShape { n_users: 2, n_items: 8 };
        assert!(fit(ModelKind::Mnl, &events, shape, &bad, &NestStructure::single(8), RngHandle::new(0, 0)).is_err());
        // bypass validation to reach the training loop
        let ctx = LossContext::new(ModelKind::Mnl, &events, 2, 8, f64::NAN, NestStructure::single(8), 4).unwrap();
        let params = ModelParams::zeros(2, 8, 2, 1);
        let err = Evaluator::new().evaluate(&ctx, &params, &events, RngHandle::new(0, 0), None).unwrap_err();
        assert!(matches!(err, Error::Training { .. }));
    }

    #[test]
    fn minibatch_training_runs() {
        let events = small_events(64, 4, 16, 4, 21);
        let h = HyperParams {
            epochs: 5,
            batch: BatchMode::Minibatch(16),
            ..hyper(2)
        };
        let m = fit(ModelKind::Mnl, &events, ModelShape { n_users: 4, n_items: 16 }, &h, &NestStructure::single(16), RngHandle::new(1, 1)).unwrap();
        assert_eq!(m.loss_trace.len(), 5);
        assert!(m.final_loss.is_finite());
    }
}
