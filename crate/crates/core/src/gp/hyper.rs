use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Hyperparams, InputScaling, NOISE_FLOOR};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HyperOptOptions {
    pub starts: usize,
    pub evals_per_start: usize,
    /// Extra evaluations spent refining the best start.
    pub polish_evals: usize,
    pub optimize_noise: bool,
    /// Evenly spaced subsample used when the dataset is larger.
    pub max_points: usize,
}

impl Default for HyperOptOptions {
    fn default() -> Self {
        HyperOptOptions {
            starts: 3,
            evals_per_start: 50,
            polish_evals: 100,
            optimize_noise: false,
            max_points: 300,
        }
    }
}

const LOG_BOUNDS: [(f64, f64); 3] = [(-13.8, 13.8), (-6.9, 6.9), (-23.0, 9.2)];

/// Log marginal likelihood of `y` under the GP prior with the data's own
/// input standardization. Returns `-inf` when the kernel matrix cannot be
/// factorized.
pub fn log_marginal_likelihood(x: &[DVector<f64>], y: &[f64], hyper: &Hyperparams) -> f64 {
    let dim = x.first().map(|p| p.len()).unwrap_or(0);
    let dist = scaled_sq_distances(dim, x);
    lml_from_distances(&dist, &DVector::from_column_slice(y), hyper)
}

fn scaled_sq_distances(dim: usize, x: &[DVector<f64>]) -> DMatrix<f64> {
    let scaling = InputScaling::from_data(dim, x);
    let z: Vec<DVector<f64>> = x.iter().map(|p| scaling.apply(p)).collect();
    let n = z.len();
    DMatrix::from_fn(n, n, |i, j| (&z[i] - &z[j]).norm_squared())
}

fn lml_from_distances(dist: &DMatrix<f64>, y: &DVector<f64>, hyper: &Hyperparams) -> f64 {
    let n = y.len();
    if n == 0 {
        return 0.0;
    }
    let a2 = hyper.amplitude * hyper.amplitude;
    let inv2l2 = 1.0 / (2.0 * hyper.length_scale * hyper.length_scale);
    let mut k = dist.map(|d| a2 * (-d * inv2l2).exp());
    for i in 0..n {
        k[(i, i)] += hyper.noise_var;
    }
    let Some(chol) = k.cholesky() else {
        return f64::NEG_INFINITY;
    };
    let alpha = chol.solve(y);
    let logdet: f64 = chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum();
    let v = -0.5 * y.dot(&alpha) - logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    if v.is_finite() {
        v
    } else {
        f64::NEG_INFINITY
    }
}

fn to_log(h: &Hyperparams, with_noise: bool) -> Vec<f64> {
    let mut v = vec![h.amplitude.ln(), h.length_scale.ln()];
    if with_noise {
        v.push(h.noise_var.ln());
    }
    v
}

fn from_log(theta: &[f64], base: &Hyperparams) -> Hyperparams {
    Hyperparams {
        amplitude: theta[0].exp(),
        length_scale: theta[1].exp(),
        noise_var: theta.get(2).map(|v| v.exp()).unwrap_or(base.noise_var).max(NOISE_FLOOR),
    }
}

struct Search<'a> {
    objective: &'a dyn Fn(&[f64]) -> f64,
    theta: Vec<f64>,
    value: f64,
    steps: Vec<f64>,
    evals: usize,
}

impl Search<'_> {
    /// Coordinate pattern search: per-coordinate steps grow after a
    /// successful move and shrink after a failed sweep in both directions.
    fn run(&mut self, budget: usize) {
        let mut spent = 0;
        while spent < budget && self.steps.iter().any(|s| *s > 1e-7) {
            for i in 0..self.theta.len() {
                let mut moved = false;
                for dir in [1.0, -1.0] {
                    if spent >= budget {
                        return;
                    }
                    let mut cand = self.theta.clone();
                    cand[i] = (cand[i] + dir * self.steps[i]).clamp(LOG_BOUNDS[i].0, LOG_BOUNDS[i].1);
                    if cand[i] == self.theta[i] {
                        continue;
                    }
                    let v = (self.objective)(&cand);
                    spent += 1;
                    self.evals += 1;
                    if v > self.value {
                        self.theta = cand;
                        self.value = v;
                        self.steps[i] *= 2.0;
                        moved = true;
                        break;
                    }
                }
                if !moved {
                    self.steps[i] *= 0.5;
                }
            }
        }
    }
}

/// Maximizes the log marginal likelihood over log-amplitude and
/// log-length-scale (and log-noise when enabled) with a multi-start
/// coordinate search. The result never scores below `init`.
pub fn optimize_hyperparams(
    x: &[DVector<f64>],
    y: &[f64],
    init: Hyperparams,
    opts: &HyperOptOptions,
) -> Hyperparams {
    if x.len() < 5 || x.len() != y.len() {
        return init;
    }
    let (xs, ys): (Vec<DVector<f64>>, Vec<f64>) = if x.len() > opts.max_points.max(5) {
        let stride = x.len() as f64 / opts.max_points as f64;
        (0..opts.max_points)
            .map(|k| {
                let i = (k as f64 * stride) as usize;
                (x[i].clone(), y[i])
            })
            .unzip()
    } else {
        (x.to_vec(), y.to_vec())
    };
    let dim = xs[0].len();
    let dist = scaled_sq_distances(dim, &xs);
    let yv = DVector::from_column_slice(&ys);
    let objective = |theta: &[f64]| lml_from_distances(&dist, &yv, &from_log(theta, &init));

    let base = to_log(&init, opts.optimize_noise);
    let init_value = objective(&base);
    let mut best: Option<Search> = None;
    for s in 0..opts.starts.max(1) {
        let mut theta = base.clone();
        // starts fan out in length-scale: l, 3l, l/3, 9l, ...
        let k = s.div_ceil(2) as f64;
        theta[1] += if s % 2 == 1 { k * 3f64.ln() } else { -k * 3f64.ln() };
        if s == 0 {
            theta[1] = base[1];
        }
        let value = objective(&theta);
        let mut search = Search {
            objective: &objective,
            theta,
            value,
            steps: vec![1.0; base.len()],
            evals: 1,
        };
        search.run(opts.evals_per_start);
        if best.as_ref().map(|b| search.value > b.value).unwrap_or(true) {
            best = Some(search);
        }
    }
    let mut best = best.expect("at least one start");
    best.run(opts.polish_evals);
    if best.value.is_finite() && best.value >= init_value {
        from_log(&best.theta, &init)
    } else {
        init
    }
}
