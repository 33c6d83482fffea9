//! Client selection by agreement with the server's own update.
//!
//! Each client keeps the running sum of every update it has uploaded. A
//! client is scored by the cosine between the server's update and that sum,
//! and by the squared 2-Wasserstein distance between univariate Gaussians
//! fitted to the entries of both vectors.

use crate::error::{Error, Result};
use crate::model::ParamVector;

pub const DEFAULT_DELTA: f64 = 0.90;
pub const CIFAR_DELTA: f64 = 0.85;
pub const DEFAULT_CAP_MULTIPLE: f64 = 3.0;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    /// Ground truth for evaluation; selection never reads it.
    pub malicious: bool,
    pub historical_sum: ParamVector,
    pub uploads: usize,
}

impl ClientState {
    pub fn new(id: usize, malicious: bool, like: &ParamVector) -> Self {
        ClientState {
            id,
            malicious,
            historical_sum: like.zeros_like(),
            uploads: 0,
        }
    }

    pub fn record(&mut self, update: &ParamVector) -> Result<()> {
        self.historical_sum.axpy(1.0, update)?;
        self.uploads += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionScore {
    pub client: usize,
    pub cosine: f64,
    pub wasserstein: f64,
    pub admitted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectionMode {
    /// Admit everyone (scores are still computed for logging).
    Off,
    Cosine,
    Wasserstein,
    Both,
}

/// Upper bound on the Wasserstein score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum WassersteinCap {
    /// A multiple of the median score among the clients being scored.
    MedianMultiple(f64),
    Fixed(f64),
}

impl Default for WassersteinCap {
    fn default() -> Self {
        WassersteinCap::MedianMultiple(DEFAULT_CAP_MULTIPLE)
    }
}

/// Cosine similarity; 0 when either vector is (numerically) zero.
pub fn cosine_score(server_update: &ParamVector, historical_sum: &ParamVector) -> Result<f64> {
    let dot = server_update.dot(historical_sum)?;
    let (a, b) = (server_update.norm(), historical_sum.norm());
    if a < NORM_FLOOR || b < NORM_FLOOR {
        return Ok(0.0);
    }
    Ok((dot / (a * b)).clamp(-1.0, 1.0))
}

/// Mean and population variance of the entries.
pub fn fit_gaussian(v: &[f64]) -> Result<(f64, f64)> {
    if v.len() < 2 {
        return Err(Error::config("fitting a Gaussian needs at least two entries"));
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok((mean, var.max(0.0)))
}

/// Squared 2-Wasserstein distance between `N(mu1, var1)` and `N(mu2, var2)`.
pub fn wasserstein2_gaussian(mu1: f64, var1: f64, mu2: f64, var2: f64) -> Result<f64> {
    if var1 < 0.0 || var2 < 0.0 {
        return Err(Error::Domain("variances must be non-negative".into()));
    }
    let ds = var1.sqrt() - var2.sqrt();
    Ok((mu1 - mu2) * (mu1 - mu2) + ds * ds)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A client to be scored, with its historical sum already including the
/// current round's upload.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub client: usize,
    pub historical_sum: &'a ParamVector,
}

/// Scores every candidate and marks the admitted ones. If nobody passes,
/// the best candidate by the mode's primary score is admitted alone.
pub fn select_clients(
    server_update: &ParamVector,
    candidates: &[Candidate<'_>],
    delta: f64,
    cap: WassersteinCap,
    mode: SelectionMode,
) -> Result<Vec<SelectionScore>> {
    if candidates.is_empty() {
        return Err(Error::config("no clients to select from"));
    }
    let (mu_s, var_s) = fit_gaussian(server_update.as_slice())?;
    let mut scores = candidates
        .iter()
        .map(|c| {
            let (mu, var) = fit_gaussian(c.historical_sum.as_slice())?;
            Ok(SelectionScore {
                client: c.client,
                cosine: cosine_score(server_update, c.historical_sum)?,
                wasserstein: wasserstein2_gaussian(mu_s, var_s, mu, var)?,
                admitted: false,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let cap = match cap {
        WassersteinCap::Fixed(v) => v,
        WassersteinCap::MedianMultiple(k) => {
            k * median(&scores.iter().map(|s| s.wasserstein).collect::<Vec<_>>())
        }
    };
    for s in scores.iter_mut() {
        let close_direction = s.cosine >= delta;
        let close_distribution = s.wasserstein <= cap;
        s.admitted = match mode {
            SelectionMode::Off => true,
            SelectionMode::Cosine => close_direction,
            SelectionMode::Wasserstein => close_distribution,
            SelectionMode::Both => close_direction && close_distribution,
        };
    }
    if !scores.iter().any(|s| s.admitted) {
        let best = match mode {
            SelectionMode::Wasserstein => scores
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.wasserstein.total_cmp(&b.1.wasserstein))
                .map(|(i, _)| i),
            _ => scores
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.cosine.total_cmp(&b.1.cosine).then(b.0.cmp(&a.0)))
                .map(|(i, _)| i),
        };
        if let Some(i) = best {
            scores[i].admitted = true;
        }
    }
    Ok(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn pv(v: &[f64]) -> ParamVector {
        ParamVector::from_values(&[1, v.len() / 2], v.to_vec()).unwrap()
    }

    #[test]
    fn cosine_basics() {
        let a = pv(&[1.0, 2.0]);
        assert_relative_eq!(cosine_score(&a, &a).unwrap(), 1.0, epsilon = 1e-15);
        assert_eq!(cosine_score(&pv(&[1.0, 0.0]), &pv(&[0.0, 1.0])).unwrap(), 0.0);
        assert_eq!(cosine_score(&a, &pv(&[0.0, 0.0])).unwrap(), 0.0);
        assert_relative_eq!(cosine_score(&a, &a.scaled(7.5)).unwrap(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn gaussian_fit_cases() {
        assert_eq!(fit_gaussian(&[2.5; 6]).unwrap(), (2.5, 0.0));
        assert_eq!(fit_gaussian(&[0.0, 2.0]).unwrap(), (1.0, 1.0));
        assert!(fit_gaussian(&[1.0]).is_err());
    }

    #[test]
    fn wasserstein_cases() {
        assert_eq!(wasserstein2_gaussian(1.0, 2.0, 1.0, 2.0).unwrap(), 0.0);
        assert_relative_eq!(wasserstein2_gaussian(0.0, 1.0, 3.0, 1.0).unwrap(), 9.0);
        assert_relative_eq!(wasserstein2_gaussian(0.0, 1.0, 0.0, 4.0).unwrap(), 1.0);
        assert!(matches!(
            wasserstein2_gaussian(0.0, -1.0, 0.0, 1.0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn negated_attacker_is_rejected() {
        let w = pv(&[0.3, -0.1, 0.2, 0.05]);
        let honest = w.clone();
        let attacker = w.scaled(-1.0);
        let scores = select_clients(
            &w,
            &[
                Candidate { client: 0, historical_sum: &honest },
                Candidate { client: 1, historical_sum: &attacker },
            ],
            0.5,
            WassersteinCap::default(),
            SelectionMode::Both,
        )
        .unwrap();
        assert!(scores[0].admitted);
        assert!(!scores[1].admitted);
        assert_relative_eq!(scores[1].cosine, -1.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_admission_falls_back_to_best_cosine() {
        let w = pv(&[1.0, 0.0, 0.0, 0.0]);
        let a = pv(&[0.2, 1.0, 0.0, 0.0]);
        let b = pv(&[0.5, 1.0, 0.0, 0.0]);
        let scores = select_clients(
            &w,
            &[
                Candidate { client: 4, historical_sum: &a },
                Candidate { client: 9, historical_sum: &b },
            ],
            0.99,
            WassersteinCap::default(),
            SelectionMode::Cosine,
        )
        .unwrap();
        assert_eq!(scores.iter().filter(|s| s.admitted).count(), 1);
        assert!(scores[1].admitted);
    }

    #[test]
    fn off_admits_everyone_and_empty_list_errors() {
        let w = pv(&[1.0, 0.0]);
        let a = pv(&[-1.0, 0.0]);
        let scores = select_clients(
            &w,
            &[Candidate { client: 0, historical_sum: &a }],
            0.9,
            WassersteinCap::default(),
            SelectionMode::Off,
        )
        .unwrap();
        assert!(scores[0].admitted);
        assert!(select_clients(&w, &[], 0.9, WassersteinCap::default(), SelectionMode::Both).is_err());
    }

    #[test]
    fn record_accumulates() {
        let like = pv(&[0.0, 0.0]);
        let mut s = ClientState::new(3, false, &like);
        s.record(&pv(&[1.0, 2.0])).unwrap();
        s.record(&pv(&[0.5, -1.0])).unwrap();
        assert_eq!(s.historical_sum.as_slice(), &[1.5, 1.0]);
        assert_eq!(s.uploads, 2);
    }
}
