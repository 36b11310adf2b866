//! Gaussian-process regression with a squared-exponential kernel.
//!
//! Inputs are standardized per dimension before the isotropic kernel is
//! applied. The scaling is part of the model and only changes on a full
//! refit, so on-line insertions keep the cached factorization valid.

mod hyper;
mod reduced;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use hyper::{log_marginal_likelihood, optimize_hyperparams, HyperOptOptions};
pub use reduced::{information_score, InsertOutcome};

/// Lower bound on the observation noise variance.
pub const NOISE_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hyperparams {
    pub amplitude: f64,
    pub length_scale: f64,
    pub noise_var: f64,
}

impl Hyperparams {
    pub fn new(amplitude: f64, length_scale: f64, noise_var: f64) -> Self {
        Hyperparams {
            amplitude,
            length_scale,
            noise_var: noise_var.max(NOISE_FLOOR),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude > 0.0 && self.length_scale > 0.0 && self.noise_var >= NOISE_FLOOR)
            || !(self.amplitude.is_finite() && self.length_scale.is_finite() && self.noise_var.is_finite())
        {
            return Err(Error::InvalidParams(format!("bad GP hyperparameters {self:?}")));
        }
        Ok(())
    }

    fn signal_var(&self) -> f64 {
        self.amplitude * self.amplitude
    }
}

/// Squared-exponential kernel `a² exp(−‖x1 − x2‖² / (2 l²))`.
pub fn kernel(x1: &DVector<f64>, x2: &DVector<f64>, hyper: &Hyperparams) -> f64 {
    hyper.signal_var() * (-(x1 - x2).norm_squared() / (2.0 * hyper.length_scale.powi(2))).exp()
}

/// Per-dimension z-score applied before kernel evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub mean: DVector<f64>,
    pub std: DVector<f64>,
}

impl InputScaling {
    pub fn identity(dim: usize) -> Self {
        InputScaling {
            mean: DVector::zeros(dim),
            std: DVector::from_element(dim, 1.0),
        }
    }

    /// Z-score statistics of `points`; dimensions with no spread keep unit scale.
    pub fn from_data(dim: usize, points: &[DVector<f64>]) -> Self {
        if points.is_empty() {
            return Self::identity(dim);
        }
        let n = points.len() as f64;
        let mean = points.iter().fold(DVector::zeros(dim), |acc, p| acc + p) / n;
        let var = points
            .iter()
            .fold(DVector::zeros(dim), |acc: DVector<f64>, p| {
                acc + (p - &mean).map(|v| v * v)
            })
            / n;
        let std = var.map(|v| if v.sqrt() > 1e-9 { v.sqrt() } else { 1.0 });
        InputScaling { mean, std }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        (x - &self.mean).component_div(&self.std)
    }
}

/// Exact GP posterior for one scalar output.
#[derive(Debug, Clone)]
pub struct GpModel {
    dim: usize,
    inputs: Vec<DVector<f64>>,
    targets: Vec<f64>,
    hyper: Hyperparams,
    scaling: InputScaling,
    /// Standardized inputs, one column per point.
    scaled: DMatrix<f64>,
    /// Extra diagonal added after a failed factorization.
    jitter: f64,
    chol: Option<Cholesky<f64, Dyn>>,
    alpha: DVector<f64>,
    loo_scores: Option<Vec<f64>>,
}

impl GpModel {
    /// Model with no data; predicts the prior `(0, a²)`.
    pub fn empty(dim: usize, hyper: Hyperparams, scaling: InputScaling) -> Self {
        GpModel {
            dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            hyper,
            scaling,
            scaled: DMatrix::zeros(dim, 0),
            jitter: 0.0,
            chol: None,
            alpha: DVector::zeros(0),
            loo_scores: None,
        }
    }

    /// Fits on `(x, y)` with the z-score scaling of `x`.
    pub fn fit(x: &[DVector<f64>], y: &[f64], hyper: Hyperparams) -> Result<Self> {
        let dim = x.first().map(|p| p.len()).unwrap_or(0);
        Self::fit_with_scaling(dim, x, y, hyper, InputScaling::from_data(dim, x))
    }

    pub fn fit_with_scaling(
        dim: usize,
        x: &[DVector<f64>],
        y: &[f64],
        hyper: Hyperparams,
        scaling: InputScaling,
    ) -> Result<Self> {
        hyper.validate()?;
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        if let Some(p) = x.iter().find(|p| p.len() != dim) {
            return Err(Error::Dimension(format!("input of length {} in a {dim}-d model", p.len())));
        }
        let mut model = GpModel::empty(dim, hyper, scaling);
        model.inputs = x.to_vec();
        model.targets = y.to_vec();
        model.refactor()?;
        Ok(model)
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        &self.inputs
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn hyper(&self) -> &Hyperparams {
        &self.hyper
    }

    pub fn scaling(&self) -> &InputScaling {
        &self.scaling
    }

    /// Lower-triangular factor of `K + σ_w² I` (plus any retry jitter).
    pub fn cholesky_factor(&self) -> Option<DMatrix<f64>> {
        self.chol.as_ref().map(|c| c.l())
    }

    /// Cached `(K + σ_w² I)⁻¹ Y`.
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Rebuilds scaling from the current data, then refactors.
    pub fn refit(&mut self, hyper: Hyperparams) -> Result<()> {
        hyper.validate()?;
        self.hyper = hyper;
        self.scaling = InputScaling::from_data(self.dim, &self.inputs);
        self.refactor()
    }

    /// Replaces the scaling without touching the data.
    pub fn set_scaling(&mut self, scaling: InputScaling) -> Result<()> {
        self.scaling = scaling;
        self.refactor()
    }

    fn kern_scaled(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.hyper.signal_var() * (-d2 / (2.0 * self.hyper.length_scale.powi(2))).exp()
    }

    fn gram(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut k = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j..n {
                let v = self.kern_scaled(
                    self.scaled.column(i).as_slice(),
                    self.scaled.column(j).as_slice(),
                );
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }

    fn refactor(&mut self) -> Result<()> {
        let n = self.len();
        self.loo_scores = None;
        self.scaled = DMatrix::from_fn(self.dim, n, |r, c| {
            (self.inputs[c][r] - self.scaling.mean[r]) / self.scaling.std[r]
        });
        if n == 0 {
            self.chol = None;
            self.alpha = DVector::zeros(0);
            self.jitter = 0.0;
            return Ok(());
        }
        let gram = self.gram();
        let with_diag = |extra: f64| {
            let mut m = gram.clone();
            for i in 0..n {
                m[(i, i)] += self.hyper.noise_var + extra;
            }
            m
        };
        let mut jitter = 0.0;
        let chol = match with_diag(0.0).cholesky() {
            Some(c) => c,
            None => {
                jitter = 1e-6 * self.hyper.signal_var().max(self.hyper.noise_var);
                with_diag(jitter).cholesky().ok_or(Error::Factorization(n))?
            }
        };
        self.jitter = jitter;
        self.alpha = chol.solve(&DVector::from_column_slice(&self.targets));
        self.chol = Some(chol);
        Ok(())
    }

    fn k_vector(&self, z: &DVector<f64>) -> DVector<f64> {
        DVector::from_fn(self.len(), |i, _| self.kern_scaled(self.scaled.column(i).as_slice(), z.as_slice()))
    }

    /// Posterior mean only; `O(n_d)` per query.
    pub fn predict_mean(&self, x: &DVector<f64>) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let z = self.scaling.apply(x);
        let inv2l2 = 1.0 / (2.0 * self.hyper.length_scale.powi(2));
        let a2 = self.hyper.signal_var();
        let mut mean = 0.0;
        for (i, col) in self.scaled.column_iter().enumerate() {
            let d2: f64 = col.iter().zip(z.iter()).map(|(p, q)| (p - q) * (p - q)).sum();
            mean += self.alpha[i] * a2 * (-d2 * inv2l2).exp();
        }
        mean
    }

    /// Posterior mean and its gradient with respect to the raw input.
    pub fn predict_mean_gradient(&self, x: &DVector<f64>) -> (f64, DVector<f64>) {
        let mut grad = DVector::zeros(self.dim);
        if self.is_empty() {
            return (0.0, grad);
        }
        let z = self.scaling.apply(x);
        let l2 = self.hyper.length_scale.powi(2);
        let a2 = self.hyper.signal_var();
        let mut mean = 0.0;
        let mut diff = vec![0.0; self.dim];
        for (i, col) in self.scaled.column_iter().enumerate() {
            let mut d2 = 0.0;
            for r in 0..self.dim {
                diff[r] = z[r] - col[r];
                d2 += diff[r] * diff[r];
            }
            let w = self.alpha[i] * a2 * (-d2 / (2.0 * l2)).exp();
            mean += w;
            for r in 0..self.dim {
                grad[r] -= w * diff[r] / l2;
            }
        }
        (mean, grad.component_div(&self.scaling.std))
    }

    /// Posterior mean and variance; variance is clamped to `[0, a²]`.
    pub fn predict(&self, x: &DVector<f64>) -> (f64, f64) {
        let a2 = self.hyper.signal_var();
        let Some(chol) = &self.chol else {
            return (0.0, a2);
        };
        let z = self.scaling.apply(x);
        let k = self.k_vector(&z);
        let mean = k.dot(&self.alpha);
        let v = chol.l_dirty().solve_lower_triangular(&k).unwrap_or_else(|| k.clone());
        let var = (a2 - v.norm_squared()).clamp(0.0, a2);
        (mean, var)
    }

    /// Appends a point with an `O(n_d²)` factor update.
    pub fn push(&mut self, x: DVector<f64>, y: f64) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::Dimension(format!("input of length {} in a {}-d model", x.len(), self.dim)));
        }
        let z = self.scaling.apply(&x);
        let n = self.len();
        let mut col = self.k_vector(&z);
        col = col.insert_row(n, self.hyper.signal_var() + self.hyper.noise_var + self.jitter);
        self.inputs.push(x);
        self.targets.push(y);
        self.scaled = std::mem::replace(&mut self.scaled, DMatrix::zeros(0, 0)).insert_column(n, 0.0);
        self.scaled.set_column(n, &z);
        self.loo_scores = None;
        let updated = match &self.chol {
            Some(c) => {
                let c = c.insert_column(n, col);
                // insert_column does not detect a lost positive definiteness
                if c.l_dirty()[(n, n)].is_finite() && c.l_dirty()[(n, n)] > 0.0 {
                    Some(c)
                } else {
                    None
                }
            }
            None => col.clone().reshape_generic(Dyn(1), Dyn(1)).cholesky(),
        };
        match updated {
            Some(c) => {
                self.alpha = c.solve(&DVector::from_column_slice(&self.targets));
                self.chol = Some(c);
                Ok(())
            }
            None => self.refactor(),
        }
    }

    /// Removes the point at `index` and refreshes the factor.
    pub fn remove(&mut self, index: usize) -> Result<()> {
        self.inputs.remove(index);
        self.targets.remove(index);
        self.scaled = std::mem::replace(&mut self.scaled, DMatrix::zeros(0, 0)).remove_column(index);
        self.loo_scores = None;
        match &self.chol {
            Some(c) if self.len() > 0 => {
                let c = c.remove_column(index);
                self.alpha = c.solve(&DVector::from_column_slice(&self.targets));
                self.chol = Some(c);
                Ok(())
            }
            _ => self.refactor(),
        }
    }

    /// Log marginal likelihood of the current data under the current hyperparameters.
    pub fn log_marginal_likelihood(&self) -> f64 {
        let Some(chol) = &self.chol else {
            return 0.0;
        };
        let y = DVector::from_column_slice(&self.targets);
        let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
        -0.5 * y.dot(&self.alpha) - logdet - 0.5 * self.len() as f64 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Independent scalar GPs sharing one set of inputs.
#[derive(Debug, Clone)]
pub struct GpStack {
    members: Vec<GpModel>,
}

impl GpStack {
    pub fn empty(dim: usize, hypers: &[Hyperparams]) -> Self {
        GpStack {
            members: hypers
                .iter()
                .map(|h| GpModel::empty(dim, *h, InputScaling::identity(dim)))
                .collect(),
        }
    }

    /// Fits one member per output column of `y` (`y[i][j]`: point i, output j).
    pub fn fit(x: &[DVector<f64>], y: &[DVector<f64>], hypers: &[Hyperparams]) -> Result<Self> {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        let dim = x.first().map(|p| p.len()).unwrap_or(0);
        let scaling = InputScaling::from_data(dim, x);
        let members = hypers
            .iter()
            .enumerate()
            .map(|(j, h)| {
                let yj: Vec<f64> = y.iter().map(|v| v[j]).collect();
                GpModel::fit_with_scaling(dim, x, &yj, *h, scaling.clone())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GpStack { members })
    }

    pub fn outputs(&self) -> usize {
        self.members.len()
    }

    pub fn len(&self) -> usize {
        self.members.first().map(|m| m.len()).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.members.first().map(|m| m.dim()).unwrap_or(0)
    }

    pub fn members(&self) -> &[GpModel] {
        &self.members
    }

    pub fn inputs(&self) -> &[DVector<f64>] {
        self.members.first().map(|m| m.inputs()).unwrap_or(&[])
    }

    /// Output rows, one vector per point.
    pub fn targets(&self) -> Vec<DVector<f64>> {
        (0..self.len())
            .map(|i| DVector::from_iterator(self.outputs(), self.members.iter().map(|m| m.targets()[i])))
            .collect()
    }

    pub fn hypers(&self) -> Vec<Hyperparams> {
        self.members.iter().map(|m| *m.hyper()).collect()
    }

    pub fn predict_mean(&self, x: &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(self.outputs(), self.members.iter().map(|m| m.predict_mean(x)))
    }

    /// Means and the Jacobian of the means (`outputs × dim`).
    pub fn predict_mean_jacobian(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let mut mean = DVector::zeros(self.outputs());
        let mut jac = DMatrix::zeros(self.outputs(), x.len());
        for (j, m) in self.members.iter().enumerate() {
            let (mu, g) = m.predict_mean_gradient(x);
            mean[j] = mu;
            jac.set_row(j, &g.transpose());
        }
        (mean, jac)
    }

    pub fn predict(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let (mut mean, mut var) = (DVector::zeros(self.outputs()), DVector::zeros(self.outputs()));
        for (j, m) in self.members.iter().enumerate() {
            let (mu, v) = m.predict(x);
            mean[j] = mu;
            var[j] = v;
        }
        (mean, var)
    }

    /// Appends points to every member (exact, unbudgeted growth).
    pub fn extend(&mut self, x: &[DVector<f64>], y: &[DVector<f64>]) -> Result<()> {
        if x.len() != y.len() {
            return Err(Error::Dimension(format!("{} inputs but {} targets", x.len(), y.len())));
        }
        let mut all_x = self.inputs().to_vec();
        all_x.extend_from_slice(x);
        let mut all_y = self.targets();
        all_y.extend_from_slice(y);
        *self = GpStack::fit(&all_x, &all_y, &self.hypers())?;
        Ok(())
    }

    /// Re-optimizes each member's hyperparameters on its data and refits
    /// with fresh input scaling.
    pub fn optimize(&mut self, opts: &HyperOptOptions) -> Result<()> {
        if self.is_empty() {
            return Ok(());
        }
        let x = self.inputs().to_vec();
        let y = self.targets();
        let hypers: Vec<Hyperparams> = self
            .members
            .iter()
            .enumerate()
            .map(|(j, m)| {
                let yj: Vec<f64> = y.iter().map(|v| v[j]).collect();
                optimize_hyperparams(&x, &yj, *m.hyper(), opts)
            })
            .collect();
        *self = GpStack::fit(&x, &y, &hypers)?;
        Ok(())
    }

    /// Sets the same scaling on every member.
    pub fn set_scaling(&mut self, scaling: InputScaling) -> Result<()> {
        for m in &mut self.members {
            m.set_scaling(scaling.clone())?;
        }
        Ok(())
    }

    pub(crate) fn members_mut(&mut self) -> &mut [GpModel] {
        &mut self.members
    }
}

#[cfg(test)]
mod tests;
