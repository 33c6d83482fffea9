//! Server-side supervised training and client-side pseudo-label training.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::data::{augment_strong, augment_weak, FeatureLayout, Sample};
use crate::error::{Error, Result};
use crate::model::{self, Example, OptimizerState, ParamVector};

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            epochs: 5,
            batch_size: 32,
            learning_rate: 0.001,
            momentum: model::DEFAULT_MOMENTUM,
        }
    }
}

impl TrainParams {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Supervised training on the server's labeled set with weak augmentation.
pub fn server_train(
    omega: &ParamVector,
    server_set: &[Sample],
    params: &TrainParams,
    layout: FeatureLayout,
    rng: &mut impl Rng,
) -> Result<ParamVector> {
    if server_set.is_empty() {
        return Err(Error::config("server labeled set is empty"));
    }
    params.validate()?;
    let labels = server_set
        .iter()
        .map(|s| {
            s.label
                .ok_or_else(|| Error::config(format!("server sample {} is unlabeled", s.id)))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut omega = omega.clone();
    let mut opt = OptimizerState::new(&omega, params.learning_rate, params.momentum);
    let mut order: Vec<usize> = (0..server_set.len()).collect();
    for _ in 0..params.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(params.batch_size) {
            let views: Vec<Vec<f64>> = chunk
                .iter()
                .map(|&i| augment_weak(&server_set[i].features, layout, rng))
                .collect();
            let batch: Vec<Example<'_>> = chunk
                .iter()
                .zip(&views)
                .map(|(&i, x)| Example {
                    features: x,
                    label: labels[i],
                    weight: 1.0,
                })
                .collect();
            let (_, grad) = model::loss_and_grad(&omega, &batch)?;
            model::sgd_step(&mut omega, &grad, &mut opt)?;
        }
    }
    Ok(omega)
}

/// Strongly augmented features labeled by the model's weak-view predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoBatch {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub mask: Vec<bool>,
    pub confidence: Vec<f64>,
}

impl PseudoBatch {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn unmasked(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn examples(&self) -> Vec<Example<'_>> {
        self.features
            .iter()
            .zip(&self.labels)
            .zip(&self.mask)
            .map(|((x, &label), &keep)| Example {
                features: x,
                label,
                weight: if keep { 1.0 } else { 0.0 },
            })
            .collect()
    }
}

/// `(argmax, max probability, max probability >= threshold)`.
pub fn pseudo_label(probs: &[f64], threshold: f64) -> (usize, f64, bool) {
    let label = model::argmax(probs);
    let confidence = probs[label];
    (label, confidence, confidence >= threshold)
}

/// Labels each raw sample by the model's prediction on a weak view and pairs
/// that label with a strong view. Per sample, the weak view is drawn before
/// the strong view.
pub fn make_pseudo_batch(
    omega: &ParamVector,
    raw: &[&[f64]],
    threshold: f64,
    layout: FeatureLayout,
    rng: &mut impl Rng,
) -> Result<PseudoBatch> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::config("confidence threshold must lie in [0, 1]"));
    }
    let mut batch = PseudoBatch {
        features: Vec::with_capacity(raw.len()),
        labels: Vec::with_capacity(raw.len()),
        mask: Vec::with_capacity(raw.len()),
        confidence: Vec::with_capacity(raw.len()),
    };
    for x in raw {
        let weak = augment_weak(x, layout, rng);
        let strong = augment_strong(x, layout, rng);
        let probs = model::forward(omega, &weak)?;
        let (label, confidence, keep) = pseudo_label(&probs, threshold);
        batch.features.push(strong);
        batch.labels.push(label);
        batch.mask.push(keep);
        batch.confidence.push(confidence);
    }
    Ok(batch)
}

/// Result of one client's local round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `omega_local - omega0`.
    pub update: ParamVector,
    /// Pseudo-labeled samples that passed the confidence threshold, summed
    /// over all epochs.
    pub unmasked: usize,
    pub seen: usize,
}

/// Pseudo-label training on an unlabeled shard. At the start of every epoch
/// the whole shard is relabeled by the current local model.
pub fn client_train(
    omega0: &ParamVector,
    shard: &[Sample],
    params: &TrainParams,
    threshold: f64,
    layout: FeatureLayout,
    rng: &mut impl Rng,
) -> Result<LocalUpdate> {
    client_train_with(omega0, shard, params, threshold, layout, rng, |_| {})
}

/// As [`client_train`], with `corrupt` applied to each epoch's pseudo labels
/// before any gradient step.
pub fn client_train_with(
    omega0: &ParamVector,
    shard: &[Sample],
    params: &TrainParams,
    threshold: f64,
    layout: FeatureLayout,
    rng: &mut impl Rng,
    mut corrupt: impl FnMut(&mut PseudoBatch),
) -> Result<LocalUpdate> {
    if shard.is_empty() {
        return Err(Error::config("client shard is empty"));
    }
    params.validate()?;
    let mut omega = omega0.clone();
    let mut opt = OptimizerState::new(&omega, params.learning_rate, params.momentum);
    let mut order: Vec<usize> = (0..shard.len()).collect();
    let mut unmasked = 0;
    let mut seen = 0;
    for _ in 0..params.epochs {
        order.shuffle(rng);
        let raw: Vec<&[f64]> = order.iter().map(|&i| shard[i].features.as_slice()).collect();
        let mut labeled = make_pseudo_batch(&omega, &raw, threshold, layout, rng)?;
        corrupt(&mut labeled);
        unmasked += labeled.unmasked();
        seen += labeled.len();
        let examples = labeled.examples();
        for batch in examples.chunks(params.batch_size) {
            if batch.iter().all(|e| e.weight == 0.0) {
                continue;
            }
            let (_, grad) = model::loss_and_grad(&omega, batch)?;
            model::sgd_step(&mut omega, &grad, &mut opt)?;
        }
    }
    Ok(LocalUpdate {
        update: omega.sub(omega0)?,
        unmasked,
        seen,
    })
}
