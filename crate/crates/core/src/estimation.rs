//! Velocity and acceleration reconstruction from sampled joint positions
//! with Savitzky-Golay least-squares polynomial fits.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Weights `w` such that `Σ w_k y_k` is the `deriv`-th derivative at `at`
/// of the degree-`degree` least-squares fit through samples at `offsets`.
/// Offsets and `at` are in sample units; scale by `Ts^deriv` afterwards.
pub fn sg_weights(offsets: &[f64], degree: usize, deriv: usize, at: f64) -> Result<Vec<f64>> {
    if degree + 1 > offsets.len() {
        return Err(Error::InvalidFilter(format!(
            "degree {degree} needs more than {} samples",
            offsets.len()
        )));
    }
    if deriv > degree {
        return Ok(vec![0.0; offsets.len()]);
    }
    // shift to `at` so the derivative is a single coefficient
    let vander = DMatrix::from_fn(offsets.len(), degree + 1, |i, k| (offsets[i] - at).powi(k as i32));
    let pinv = vander
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidFilter(e.to_string()))?;
    let factorial: f64 = (1..=deriv).map(|v| v as f64).product();
    Ok(pinv.row(deriv).iter().map(|w| w * factorial).collect())
}

/// Fixed-capacity window of uniformly spaced position samples.
#[derive(Debug, Clone)]
pub struct SignalWindow {
    capacity: usize,
    ts: f64,
    times: VecDeque<f64>,
    samples: VecDeque<DVector<f64>>,
    degree: usize,
    weights: [Vec<f64>; 3],
    center_weights: [Vec<f64>; 3],
}

/// Derivative estimate and how many samples behind the newest it refers to.
#[derive(Debug, Clone, PartialEq)]
pub struct LaggedEstimate {
    pub value: DVector<f64>,
    pub lag: usize,
}

impl SignalWindow {
    /// Window of `capacity` samples fitted with a quadratic.
    pub fn new(capacity: usize, ts: f64) -> Result<Self> {
        Self::with_degree(capacity, ts, 2)
    }

    pub fn with_degree(capacity: usize, ts: f64, degree: usize) -> Result<Self> {
        if !(ts > 0.0) {
            return Err(Error::InvalidFilter(format!("sampling interval {ts}")));
        }
        let offsets: Vec<f64> = (0..capacity).map(|k| k as f64 - (capacity as f64 - 1.0)).collect();
        let center = -((capacity as f64 - 1.0) / 2.0).floor();
        let mut weights: [Vec<f64>; 3] = Default::default();
        let mut center_weights: [Vec<f64>; 3] = Default::default();
        for d in 0..3 {
            weights[d] = sg_weights(&offsets, degree, d, 0.0)?;
            center_weights[d] = sg_weights(&offsets, degree, d, center)?;
        }
        Ok(SignalWindow {
            capacity,
            ts,
            times: VecDeque::with_capacity(capacity),
            samples: VecDeque::with_capacity(capacity),
            degree,
            weights,
            center_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.samples.len() == self.capacity
    }

    pub fn clear(&mut self) {
        self.times.clear();
        self.samples.clear();
    }

    /// Adds a sample; timestamps must advance by exactly one interval.
    pub fn push(&mut self, t: f64, q: DVector<f64>) -> Result<()> {
        if let Some(&last) = self.times.back() {
            let step = t - last;
            if !(step > 0.0) || (step - self.ts).abs() > 1e-9 * self.ts.max(1.0) {
                return Err(Error::InvalidFilter(format!(
                    "sample at t={t} does not follow t={last} by {}",
                    self.ts
                )));
            }
        }
        if self.samples.len() == self.capacity {
            self.times.pop_front();
            self.samples.pop_front();
        }
        self.times.push_back(t);
        self.samples.push_back(q);
        Ok(())
    }

    fn apply(&self, weights: &[f64], order: usize) -> DVector<f64> {
        let mut out = DVector::zeros(self.samples[0].len());
        for (w, s) in weights.iter().zip(&self.samples) {
            out.axpy(*w, s, 1.0);
        }
        out / self.ts.powi(order as i32)
    }

    fn check(&self, order: usize) -> Result<()> {
        if order > 2 {
            return Err(Error::InvalidFilter(format!("derivative order {order} not supported")));
        }
        if !self.is_full() {
            return Err(Error::InsufficientSamples {
                have: self.len(),
                need: self.capacity,
            });
        }
        Ok(())
    }

    /// Derivative of the fitted polynomial at the newest sample.
    pub fn causal_derivative(&self, order: usize) -> Result<DVector<f64>> {
        self.check(order)?;
        Ok(self.apply(&self.weights[order], order))
    }

    /// Derivative evaluated at the window center, where a low-degree fit is
    /// least biased; `lag` is the distance from the newest sample.
    pub fn lagged_derivative(&self, order: usize) -> Result<LaggedEstimate> {
        self.check(order)?;
        Ok(LaggedEstimate {
            value: self.apply(&self.center_weights[order], order),
            lag: (self.capacity - 1) / 2,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }
}

/// Non-causal Savitzky-Golay smoothing/differentiation of a uniformly
/// sampled signal. Interior samples use the centered window; the first and
/// last `window/2` samples use the one-sided fit of the boundary window.
pub fn smooth_offline(signal: &[f64], ts: f64, window: usize, order: usize, deriv: usize) -> Result<Vec<f64>> {
    if window % 2 == 0 || order >= window || window < 3 {
        return Err(Error::InvalidFilter(format!(
            "window {window} must be odd and larger than order {order}"
        )));
    }
    if signal.len() < window {
        return Err(Error::InvalidFilter(format!(
            "signal of length {} shorter than window {window}",
            signal.len()
        )));
    }
    if !(ts > 0.0) {
        return Err(Error::InvalidFilter(format!("sampling interval {ts}")));
    }
    let half = window / 2;
    let offsets: Vec<f64> = (0..window).map(|k| k as f64 - half as f64).collect();
    let scale = ts.powi(deriv as i32);
    let dot = |w: &[f64], start: usize| -> f64 {
        w.iter().zip(&signal[start..start + window]).map(|(a, b)| a * b).sum::<f64>() / scale
    };
    let n = signal.len();
    let mut out = vec![0.0; n];
    let centered = sg_weights(&offsets, order, deriv, 0.0)?;
    for i in half..n - half {
        out[i] = dot(&centered, i - half);
    }
    for i in 0..half {
        let at = i as f64 - half as f64;
        out[i] = dot(&sg_weights(&offsets, order, deriv, at)?, 0);
        let at = half as f64 - i as f64;
        out[n - 1 - i] = dot(&sg_weights(&offsets, order, deriv, at)?, n - window);
    }
    Ok(out)
}
