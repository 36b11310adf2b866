//! Budgeted on-line dataset: a point enters while the set is under budget;
//! at budget it replaces the retained point that carries the least
//! information, if the newcomer carries more.

use nalgebra::DVector;

use super::{GpModel, GpStack};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    Appended,
    Swapped { removed: usize },
    Rejected,
}

/// Differential-entropy gain `½ log(1 + σ²(x)/σ_w²)` of observing `x`.
pub fn information_score(model: &GpModel, x: &DVector<f64>) -> f64 {
    let (_, var) = model.predict(x);
    0.5 * (1.0 + var / model.hyper().noise_var).ln()
}

impl GpModel {
    /// Leave-one-out information score of every retained point: the score
    /// it would have if offered to the model holding all the others.
    pub fn retained_scores(&mut self) -> &[f64] {
        if self.loo_scores.is_none() {
            let scores = match &self.chol {
                Some(chol) => {
                    let inv = chol.inverse();
                    let obs_noise = self.hyper.noise_var + self.jitter;
                    (0..self.len())
                        .map(|i| {
                            // 1/[(K+σ²I)⁻¹]_ii is the LOO predictive variance of y_i
                            let latent = (1.0 / inv[(i, i)] - obs_noise).max(0.0);
                            0.5 * (1.0 + latent / self.hyper.noise_var).ln()
                        })
                        .collect()
                }
                None => Vec::new(),
            };
            self.loo_scores = Some(scores);
        }
        self.loo_scores.as_deref().unwrap_or(&[])
    }

    pub fn reduced_insert(&mut self, x: DVector<f64>, y: f64, budget: usize) -> Result<InsertOutcome> {
        if budget == 0 {
            return Err(Error::InvalidParams("reduced-set budget must be >= 1".into()));
        }
        if self.len() < budget {
            self.push(x, y)?;
            return Ok(InsertOutcome::Appended);
        }
        let candidate = information_score(self, &x);
        let (worst, worst_score) = argmin(self.retained_scores());
        if candidate > worst_score {
            self.remove(worst)?;
            self.push(x, y)?;
            Ok(InsertOutcome::Swapped { removed: worst })
        } else {
            Ok(InsertOutcome::Rejected)
        }
    }
}

fn argmin(v: &[f64]) -> (usize, f64) {
    v.iter()
        .copied()
        .enumerate()
        .fold((0, f64::INFINITY), |best, (i, s)| if s < best.1 { (i, s) } else { best })
}

impl GpStack {
    /// Shared-input version of [`GpModel::reduced_insert`]; scores are
    /// summed over members, which is the joint gain of independent outputs.
    pub fn reduced_insert(&mut self, x: DVector<f64>, y: &DVector<f64>, budget: usize) -> Result<InsertOutcome> {
        if budget == 0 {
            return Err(Error::InvalidParams("reduced-set budget must be >= 1".into()));
        }
        if y.len() != self.outputs() {
            return Err(Error::Dimension(format!("{} targets for {} outputs", y.len(), self.outputs())));
        }
        if self.len() < budget {
            for (j, m) in self.members_mut().iter_mut().enumerate() {
                m.push(x.clone(), y[j])?;
            }
            return Ok(InsertOutcome::Appended);
        }
        let candidate: f64 = self.members().iter().map(|m| information_score(m, &x)).sum();
        let mut totals = vec![0.0; self.len()];
        for m in self.members_mut() {
            for (t, s) in totals.iter_mut().zip(m.retained_scores()) {
                *t += s;
            }
        }
        let (worst, worst_score) = argmin(&totals);
        if candidate > worst_score {
            for (j, m) in self.members_mut().iter_mut().enumerate() {
                m.remove(worst)?;
                m.push(x.clone(), y[j])?;
            }
            Ok(InsertOutcome::Swapped { removed: worst })
        } else {
            Ok(InsertOutcome::Rejected)
        }
    }
}
