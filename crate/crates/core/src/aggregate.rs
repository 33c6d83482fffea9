//! Aggregation rules: mean of updates and geometric median of updates.

use crate::error::{Error, Result};
use crate::model::ParamVector;

pub const DEFAULT_TOLERANCE: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;
/// Added to every distance in the Weiszfeld weights.
pub const DISTANCE_SMOOTHING: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AggregationRule {
    FedAvg,
    /// Mean of single-step full-batch updates; the aggregation itself is the
    /// same as `FedAvg`, the difference is in how clients train.
    FedSgd,
    Gma { max_iter: usize, tolerance: f64 },
}

impl AggregationRule {
    pub fn gma() -> Self {
        AggregationRule::Gma {
            max_iter: DEFAULT_MAX_ITER,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn apply(&self, prev: &ParamVector, updates: &[ParamVector]) -> Result<ParamVector> {
        match *self {
            AggregationRule::FedAvg | AggregationRule::FedSgd => fedavg(prev, updates),
            AggregationRule::Gma {
                max_iter,
                tolerance,
            } => gma_aggregate(prev, updates, tolerance, max_iter),
        }
    }
}

fn check_points(points: &[ParamVector]) -> Result<usize> {
    let first = points
        .first()
        .ok_or_else(|| Error::Aggregation("no updates to aggregate".into()))?;
    for p in &points[1..] {
        if p.len() != first.len() {
            return Err(Error::Shape {
                expected: first.len(),
                actual: p.len(),
            });
        }
    }
    Ok(first.len())
}

/// Coordinate-wise mean.
pub fn mean(points: &[ParamVector]) -> Result<ParamVector> {
    check_points(points)?;
    let mut acc = points[0].zeros_like();
    for p in points {
        acc.axpy(1.0, p)?;
    }
    Ok(acc.scaled(1.0 / points.len() as f64))
}

/// `prev + mean(updates)`.
pub fn fedavg(prev: &ParamVector, updates: &[ParamVector]) -> Result<ParamVector> {
    prev.add(&mean(updates)?)
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `sum_z ||y - z||`.
pub fn median_objective(y: &[f64], points: &[&[f64]]) -> f64 {
    points.iter().map(|z| distance(y, z)).sum()
}

/// Weiszfeld iterates starting from the coordinate-wise mean, stopping on a
/// step shorter than `tolerance` or one that fails to lower the objective.
/// Returns the final point and the objective at every accepted iterate,
/// starting point included.
pub fn weiszfeld(points: &[&[f64]], tolerance: f64, max_iter: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let d = points
        .first()
        .ok_or_else(|| Error::Aggregation("no points".into()))?
        .len();
    if points.iter().any(|p| p.len() != d) {
        return Err(Error::Aggregation("points differ in dimension".into()));
    }
    if !(tolerance > 0.0) || max_iter == 0 {
        return Err(Error::config("geometric median needs tolerance > 0 and max_iter >= 1"));
    }
    let n = points.len() as f64;
    let mut y: Vec<f64> = (0..d)
        .map(|j| points.iter().map(|p| p[j]).sum::<f64>() / n)
        .collect();
    let mut objectives = vec![median_objective(&y, points)];
    for _ in 0..max_iter {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        for z in points {
            let w = 1.0 / (distance(&y, z) + DISTANCE_SMOOTHING);
            den += w;
            for (acc, v) in num.iter_mut().zip(z.iter()) {
                *acc += w * v;
            }
        }
        let next: Vec<f64> = num.into_iter().map(|v| v / den).collect();
        let obj = median_objective(&next, points);
        // at the fixed point rounding can push the objective up by an ulp
        if obj > objectives[objectives.len() - 1] {
            break;
        }
        let step = distance(&next, &y);
        y = next;
        objectives.push(obj);
        if step < tolerance {
            break;
        }
    }
    Ok((y, objectives))
}

pub fn geometric_median(points: &[ParamVector], tolerance: f64, max_iter: usize) -> Result<ParamVector> {
    check_points(points)?;
    let views: Vec<&[f64]> = points.iter().map(ParamVector::as_slice).collect();
    let (y, _) = weiszfeld(&views, tolerance, max_iter)?;
    points[0].with_values(y)
}

/// `prev + geomed(updates)`.
pub fn gma_aggregate(
    prev: &ParamVector,
    updates: &[ParamVector],
    tolerance: f64,
    max_iter: usize,
) -> Result<ParamVector> {
    prev.add(&geometric_median(updates, tolerance, max_iter)?)
}
