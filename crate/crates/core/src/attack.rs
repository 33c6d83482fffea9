//! Poisoning attacks and the attacker's objective.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::aggregate;
use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::sstrain::PseudoBatch;

pub const DEFAULT_GAUSSIAN_VARIANCE: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackKind {
    None,
    /// Malicious clients relabel pseudo label `from` as `to`.
    LabelFlip { from: usize, to: usize },
    /// Malicious clients upload a draw from `N(honest mean, variance)`.
    Gaussian { variance: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Number of malicious clients, always the first ids.
    pub malicious: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            kind: AttackKind::None,
            malicious: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self, clients: usize, classes: usize) -> Result<()> {
        if self.malicious > clients {
            return Err(Error::config(format!(
                "malicious: {} exceeds the {clients} clients",
                self.malicious
            )));
        }
        match self.kind {
            AttackKind::LabelFlip { from, to } => {
                if from == to {
                    return Err(Error::config("attack: flip source and target must differ"));
                }
                if from >= classes || to >= classes {
                    return Err(Error::config(format!(
                        "attack: flip classes must be below {classes}"
                    )));
                }
            }
            AttackKind::Gaussian { variance } => {
                if !(variance.is_finite() && variance >= 0.0) {
                    return Err(Error::config("attack: variance must be non-negative"));
                }
            }
            AttackKind::None => {}
        }
        Ok(())
    }

    pub fn is_active(&self) -> bool {
        self.malicious > 0 && self.kind != AttackKind::None
    }
}

/// Relabels every unmasked pseudo label `from` as `to`.
pub fn flip_pseudo_labels(batch: &mut PseudoBatch, from: usize, to: usize) {
    for (label, &keep) in batch.labels.iter_mut().zip(&batch.mask) {
        if keep && *label == from {
            *label = to;
        }
    }
}

/// One draw per coordinate from `N(mean of honest updates, variance)`.
pub fn gaussian_update(honest: &[ParamVector], variance: f64, rng: &mut impl Rng) -> Result<ParamVector> {
    if honest.is_empty() {
        return Err(Error::Attack("Gaussian attack needs at least one honest update".into()));
    }
    if !(variance.is_finite() && variance >= 0.0) {
        return Err(Error::Attack(format!("invalid variance {variance}")));
    }
    let mean = aggregate::mean(honest)?;
    if variance == 0.0 {
        return Ok(mean);
    }
    let noise = Normal::new(0.0, variance.sqrt()).map_err(|e| Error::Attack(e.to_string()))?;
    let values = mean.as_slice().iter().map(|m| m + noise.sample(rng)).collect();
    mean.with_values(values)
}

/// Sign pattern of the last global change; `+1` on ties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DirectionVector(Vec<i8>);

impl DirectionVector {
    pub fn all_positive(d: usize) -> Self {
        DirectionVector(vec![1; d])
    }

    pub fn signs(&self) -> &[i8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn direction_vector(current: &ParamVector, previous: &ParamVector) -> Result<DirectionVector> {
    let diff = current.sub(previous)?;
    Ok(DirectionVector(
        diff.as_slice()
            .iter()
            .map(|&d| if d >= 0.0 { 1 } else { -1 })
            .collect(),
    ))
}

/// `s . (honest - malicious)`.
pub fn attack_objective(s: &DirectionVector, honest: &ParamVector, malicious: &ParamVector) -> Result<f64> {
    if s.len() != honest.len() || honest.len() != malicious.len() {
        return Err(Error::Shape {
            expected: s.len(),
            actual: honest.len().max(malicious.len()),
        });
    }
    Ok(s.0
        .iter()
        .zip(honest.as_slice().iter().zip(malicious.as_slice()))
        .map(|(&sj, (h, m))| f64::from(sj) * (h - m))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn batch(labels: &[usize], mask: &[bool]) -> PseudoBatch {
        PseudoBatch {
            features: labels.iter().map(|&l| vec![l as f64, 0.5]).collect(),
            labels: labels.to_vec(),
            mask: mask.to_vec(),
            confidence: vec![0.99; labels.len()],
        }
    }

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(&[1, v.len() / 2], v.to_vec()).unwrap()
    }

    #[test]
    fn flip_one_to_seven() {
        let mut b = batch(&[1, 1, 7, 3], &[true; 4]);
        let before = b.clone();
        flip_pseudo_labels(&mut b, 1, 7);
        assert_eq!(b.labels, vec![7, 7, 7, 3]);
        assert_eq!(b.features, before.features);
        assert_eq!(b.mask, before.mask);
    }

    #[test]
    fn flip_absent_class_and_masked_labels() {
        let mut b = batch(&[0, 2, 3], &[true; 3]);
        let before = b.clone();
        flip_pseudo_labels(&mut b, 1, 7);
        assert_eq!(b, before);

        let mut b = batch(&[1, 1], &[true, false]);
        flip_pseudo_labels(&mut b, 1, 7);
        assert_eq!(b.labels, vec![7, 1]);
    }

    #[test]
    fn double_flip_merges_classes() {
        let mut b = batch(&[1, 7, 3, 1], &[true; 4]);
        flip_pseudo_labels(&mut b, 1, 7);
        flip_pseudo_labels(&mut b, 7, 1);
        assert_eq!(b.labels, vec![1, 1, 3, 1]);
    }

    #[test]
    fn zero_variance_is_the_honest_mean() {
        let honest = [pv(&[0.0, 0.0]), pv(&[2.0, 4.0])];
        let mut r = rng::stream(1, &[]);
        assert_eq!(gaussian_update(&honest, 0.0, &mut r).unwrap().as_slice(), &[1.0, 2.0]);
        assert!(matches!(gaussian_update(&[], 1.0, &mut r), Err(Error::Attack(_))));
    }

    #[test]
    fn direction_signs() {
        let prev = pv(&[0.1, 0.2]);
        let cur = pv(&[0.15, 0.1]);
        assert_eq!(direction_vector(&cur, &prev).unwrap().signs(), &[1, -1]);
        assert_eq!(direction_vector(&cur, &cur).unwrap().signs(), &[1, 1]);
        assert_eq!(direction_vector(&prev, &cur).unwrap().signs(), &[-1, 1]);
    }

    #[test]
    fn objective_is_a_signed_dot_product() {
        let s = DirectionVector::all_positive(2);
        let w = pv(&[3.0, 5.0]);
        assert_eq!(attack_objective(&s, &w, &w).unwrap(), 0.0);
        assert_eq!(attack_objective(&s, &w, &pv(&[2.0, 3.0])).unwrap(), 3.0);
    }

    #[test]
    fn config_validation() {
        let ok = AttackConfig { kind: AttackKind::LabelFlip { from: 1, to: 7 }, malicious: 3 };
        assert!(ok.validate(10, 10).is_ok());
        let same = AttackConfig { kind: AttackKind::LabelFlip { from: 2, to: 2 }, malicious: 1 };
        assert!(same.validate(10, 10).is_err());
        let many = AttackConfig { kind: AttackKind::Gaussian { variance: 10.0 }, malicious: 11 };
        assert!(many.validate(10, 10).is_err());
    }
}
