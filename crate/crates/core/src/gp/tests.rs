use super::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_points(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Vec<DVector<f64>> {
    (0..n)
        .map(|_| DVector::from_fn(dim, |_, _| rng.random_range(-2.0..2.0)))
        .collect()
}

/// Dense-inverse oracle with its own standardization and kernel.
fn oracle_predict(x: &[DVector<f64>], y: &[f64], h: &Hyperparams, q: &DVector<f64>) -> (f64, f64) {
    let n = x.len();
    let dim = q.len();
    let mean: Vec<f64> = (0..dim).map(|d| x.iter().map(|p| p[d]).sum::<f64>() / n as f64).collect();
    let std: Vec<f64> = (0..dim)
        .map(|d| {
            let v = x.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n as f64;
            if v.sqrt() > 1e-9 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let z = |p: &DVector<f64>| DVector::from_fn(dim, |d, _| (p[d] - mean[d]) / std[d]);
    let k = |a: &DVector<f64>, b: &DVector<f64>| {
        h.amplitude.powi(2) * (-(a - b).norm_squared() / (2.0 * h.length_scale.powi(2))).exp()
    };
    let zs: Vec<_> = x.iter().map(z).collect();
    let zq = z(q);
    let big_k = DMatrix::from_fn(n, n, |i, j| k(&zs[i], &zs[j]) + if i == j { h.noise_var } else { 0.0 });
    let inv = big_k.try_inverse().unwrap();
    let kv = DVector::from_fn(n, |i, _| k(&zs[i], &zq));
    let yv = DVector::from_column_slice(y);
    let mu = (kv.transpose() * &inv * yv)[0];
    let var = k(&zq, &zq) - (kv.transpose() * &inv * &kv)[0];
    (mu, var)
}

#[test]
fn kernel_closed_forms() {
    let h = Hyperparams::new(1.0, 1.0, 0.1);
    let a = DVector::from_vec(vec![0.3, -0.2]);
    assert_eq!(kernel(&a, &a, &h), 1.0);
    let b = &a + DVector::from_vec(vec![1.0, 1.0]);
    assert!((kernel(&a, &b, &h) - (-1.0f64).exp()).abs() < 1e-15);
    assert_eq!(kernel(&a, &b, &h), kernel(&b, &a, &h));
    let h2 = Hyperparams::new(2.0, 1.0, 0.1);
    assert!((kernel(&a, &a, &h2) - 4.0).abs() < 1e-15);
}

#[test]
fn empty_model_is_the_prior() {
    let m = GpModel::fit(&[], &[], Hyperparams::new(1.5, 1.0, 0.1)).unwrap();
    let (mu, var) = m.predict(&DVector::zeros(0));
    assert_eq!((mu, var), (0.0, 2.25));
    let s = GpStack::empty(3, &[Hyperparams::new(0.5, 1.0, 0.1)]);
    let (mu, var) = s.predict(&DVector::zeros(3));
    assert_eq!((mu[0], var[0]), (0.0, 0.25));
}

#[test]
fn single_point_closed_form() {
    let x = vec![DVector::from_vec(vec![0.7, -1.0])];
    let m = GpModel::fit(&x, &[1.0], Hyperparams::new(1.0, 1.0, 0.1)).unwrap();
    let (mu, var) = m.predict(&x[0]);
    assert!((mu - 1.0 / 1.1).abs() < 1e-12);
    assert!((var - (1.0 - 1.0 / 1.1)).abs() < 1e-12);
}

#[test]
fn matches_dense_inverse_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in [20, 30] {
        let x = random_points(&mut rng, n, 3);
        let y: Vec<f64> = x.iter().map(|p| (p[0] * 1.3).sin() + p[1] * p[2]).collect();
        let h = Hyperparams::new(1.2, 0.8, 0.05);
        let m = GpModel::fit(&x, &y, h).unwrap();
        for q in random_points(&mut rng, 10, 3) {
            let (mu, var) = m.predict(&q);
            let (omu, ovar) = oracle_predict(&x, &y, &h, &q);
            assert!((mu - omu).abs() < 1e-8, "{mu} vs {omu}");
            assert!((var - ovar.max(0.0)).abs() < 1e-8, "{var} vs {ovar}");
            assert!((m.predict_mean(&q) - mu).abs() < 1e-12);
        }
    }
}

#[test]
fn cached_factor_reproduces_kernel_matrix() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random_points(&mut rng, 25, 2);
    let y: Vec<f64> = x.iter().map(|p| p[0]).collect();
    let h = Hyperparams::new(0.9, 0.6, 0.02);
    let mut m = GpModel::fit(&x, &y, h).unwrap();
    // grow through the incremental path as well
    for p in random_points(&mut rng, 5, 2) {
        m.push(p.clone(), p[1]).unwrap();
    }
    m.remove(4).unwrap();
    let l = m.cholesky_factor().unwrap();
    let zs: Vec<_> = m.inputs().iter().map(|p| m.scaling().apply(p)).collect();
    let k = DMatrix::from_fn(zs.len(), zs.len(), |i, j| {
        kernel(&zs[i], &zs[j], &h) + if i == j { h.noise_var } else { 0.0 }
    });
    assert!((&l * l.transpose() - &k).amax() < 1e-8);
    let alpha = k.try_inverse().unwrap() * DVector::from_column_slice(m.targets());
    assert!((alpha - m.alpha()).amax() < 1e-8);
}

#[test]
fn far_query_recovers_prior_and_near_query_interpolates() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random_points(&mut rng, 15, 2);
    let y: Vec<f64> = x.iter().map(|p| 3.0 + p[0]).collect();
    let m = GpModel::fit(&x, &y, Hyperparams::new(2.0, 0.5, 1e-8)).unwrap();
    let (mu, var) = m.predict(&DVector::from_vec(vec![1e3, -1e3]));
    assert!(mu.abs() < 1e-12 && (var - 4.0).abs() < 1e-12);
    let (mu, _) = m.predict(&x[4]);
    assert!((mu - y[4]).abs() < 1e-4);
}

#[test]
fn mean_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random_points(&mut rng, 30, 4);
    let y: Vec<f64> = x.iter().map(|p| p[0] * p[1] - p[3]).collect();
    let m = GpModel::fit(&x, &y, Hyperparams::new(1.0, 1.1, 1e-3)).unwrap();
    let q = DVector::from_vec(vec![0.2, -0.4, 0.9, 0.1]);
    let (mu, g) = m.predict_mean_gradient(&q);
    assert!((mu - m.predict_mean(&q)).abs() < 1e-12);
    for d in 0..4 {
        let mut qp = q.clone();
        let mut qm = q.clone();
        qp[d] += 1e-6;
        qm[d] -= 1e-6;
        let fd = (m.predict_mean(&qp) - m.predict_mean(&qm)) / 2e-6;
        assert!((fd - g[d]).abs() < 1e-6, "dim {d}: {fd} vs {}", g[d]);
    }
}

fn gp_draw(seed: u64, n: usize, length: f64) -> (Vec<DVector<f64>>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<DVector<f64>> = (0..n)
        .map(|i| DVector::from_vec(vec![10.0 * i as f64 / (n - 1) as f64]))
        .collect();
    let k = DMatrix::from_fn(n, n, |i, j| {
        (-(x[i][0] - x[j][0]).powi(2) / (2.0 * length * length)).exp() + if i == j { 1e-6 } else { 0.0 }
    });
    let l = k.cholesky().unwrap().l();
    let w = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let y = l * w;
    (x, y.iter().copied().collect())
}

#[test]
fn hyperparameter_search_recovers_length_scale() {
    let (x, y) = gp_draw(21, 150, 1.0);
    let std = InputScaling::from_data(1, &x).std[0];
    let init = Hyperparams::new(0.5, 3.0, 1e-4);
    let opts = HyperOptOptions::default();
    let out = optimize_hyperparams(&x, &y, init, &opts);
    let recovered_raw = out.length_scale * std;
    assert!(
        (0.5..=2.0).contains(&recovered_raw),
        "recovered length-scale {recovered_raw}"
    );
    let before = log_marginal_likelihood(&x, &y, &init);
    let after = log_marginal_likelihood(&x, &y, &out);
    assert!(after >= before);

    let again = optimize_hyperparams(&x, &y, out, &opts);
    let lml_again = log_marginal_likelihood(&x, &y, &again);
    assert!((lml_again - after).abs() < 1e-6, "{after} -> {lml_again}");
}

#[test]
fn zero_targets_shrink_amplitude() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random_points(&mut rng, 40, 2);
    let y = vec![0.0; 40];
    let init = Hyperparams::new(1.0, 1.0, 1e-2);
    let out = optimize_hyperparams(&x, &y, init, &HyperOptOptions::default());
    assert!(out.amplitude <= init.amplitude);
}

#[test]
fn too_few_points_keep_init() {
    let x = vec![DVector::from_vec(vec![0.0]); 4];
    let init = Hyperparams::new(1.0, 1.0, 1e-2);
    assert_eq!(optimize_hyperparams(&x, &[1.0; 4], init, &HyperOptOptions::default()), init);
}

#[test]
fn reduced_insert_under_budget_appends() {
    let mut m = GpModel::empty(2, Hyperparams::new(1.0, 1.0, 1e-4), InputScaling::identity(2));
    for i in 0..5 {
        let out = m.reduced_insert(DVector::from_vec(vec![i as f64, 0.0]), 1.0, 5).unwrap();
        assert_eq!(out, InsertOutcome::Appended);
    }
    assert_eq!(m.len(), 5);
    assert!(m.reduced_insert(DVector::zeros(2), 0.0, 0).is_err());
}

#[test]
fn duplicate_input_is_rejected_at_budget() {
    let mut m = GpModel::empty(2, Hyperparams::new(1.0, 1.0, 1e-6), InputScaling::identity(2));
    for i in 0..6 {
        m.reduced_insert(DVector::from_vec(vec![i as f64 * 0.8, (i % 2) as f64]), 1.0, 6).unwrap();
    }
    let dup = m.inputs()[3].clone();
    // posterior variance at a training input is at most σ_w², so the gain is at most ½ln2
    let score = information_score(&m, &dup);
    assert!(score <= 0.5 * 2f64.ln() + 1e-9);
    assert!(score < m.retained_scores().iter().cloned().fold(f64::INFINITY, f64::min));
    assert_eq!(m.reduced_insert(dup, 1.0, 6).unwrap(), InsertOutcome::Rejected);
    assert_eq!(m.len(), 6);
}

fn min_pairwise(points: &[DVector<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            best = best.min((&points[i] - &points[j]).norm());
        }
    }
    best
}

#[test]
fn information_selection_spreads_better_than_fifo() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let budget = 180;
    // trajectory-like stream: a slowly wandering point
    let mut p = DVector::from_vec(vec![0.0, 0.0, 0.0]);
    let stream: Vec<DVector<f64>> = (0..1000)
        .map(|k| {
            let t = k as f64 * 0.02;
            p = DVector::from_vec(vec![(1.3 * t).sin() * 2.0, (0.7 * t).cos() * 2.0, t.sin() * (2.1 * t).cos()])
                + DVector::from_fn(3, |_, _| rng.random_range(-0.05..0.05));
            p.clone()
        })
        .collect();
    let mut m = GpModel::empty(3, Hyperparams::new(1.0, 0.5, 1e-3), InputScaling::identity(3));
    for x in &stream {
        let y = x[0] * x[1];
        m.reduced_insert(x.clone(), y, budget).unwrap();
        assert!(m.len() <= budget);
    }
    let fifo = &stream[stream.len() - budget..];
    assert!(min_pairwise(m.inputs()) >= min_pairwise(fifo));

    // i.i.d. stream as well
    let iid = random_points(&mut rng, 1000, 3);
    let mut m = GpModel::empty(3, Hyperparams::new(1.0, 0.5, 1e-3), InputScaling::identity(3));
    for x in &iid {
        m.reduced_insert(x.clone(), x[2], budget).unwrap();
    }
    assert!(min_pairwise(m.inputs()) >= min_pairwise(&iid[iid.len() - budget..]));
}

#[test]
fn stack_insert_respects_budget() {
    let mut s = GpStack::empty(2, &[Hyperparams::new(1.0, 1.0, 1e-3), Hyperparams::new(2.0, 0.5, 1e-3)]);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for x in random_points(&mut rng, 60, 2) {
        let y = DVector::from_vec(vec![x[0], x[1]]);
        s.reduced_insert(x, &y, 20).unwrap();
        assert!(s.len() <= 20);
        assert_eq!(s.members()[0].inputs(), s.members()[1].inputs());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn variance_stays_within_prior(seed in 0u64..1000, n in 1usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_points(&mut rng, n, 3);
        let y: Vec<f64> = x.iter().map(|p| p.sum()).collect();
        let h = Hyperparams::new(rng.random_range(0.2..3.0), rng.random_range(0.2..2.0), 1e-3);
        let m = GpModel::fit(&x, &y, h).unwrap();
        for q in random_points(&mut rng, 25, 3) {
            let (_, var) = m.predict(&q);
            prop_assert!(var >= 0.0 && var <= h.amplitude.powi(2) + 1e-9);
        }
    }

    #[test]
    fn adding_data_never_increases_variance(seed in 0u64..1000, n in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_points(&mut rng, n + 1, 2);
        let y: Vec<f64> = x.iter().map(|p| p[0]).collect();
        let h = Hyperparams::new(1.0, 0.7, 1e-3);
        let scaling = InputScaling::identity(2);
        let small = GpModel::fit_with_scaling(2, &x[..n], &y[..n], h, scaling.clone()).unwrap();
        let big = GpModel::fit_with_scaling(2, &x, &y, h, scaling).unwrap();
        for q in random_points(&mut rng, 20, 2) {
            prop_assert!(big.predict(&q).1 <= small.predict(&q).1 + 1e-8);
        }
    }

    #[test]
    fn stack_outputs_permute_with_members(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random_points(&mut rng, 12, 2);
        let y: Vec<DVector<f64>> = x.iter().map(|p| DVector::from_vec(vec![p[0], p[1] * p[1], -p[0]])).collect();
        let h = [Hyperparams::new(1.0, 1.0, 1e-3), Hyperparams::new(0.5, 0.4, 1e-2), Hyperparams::new(2.0, 2.0, 1e-4)];
        let perm = [2usize, 0, 1];
        let yp: Vec<DVector<f64>> = y.iter().map(|v| DVector::from_fn(3, |j, _| v[perm[j]])).collect();
        let hp: Vec<Hyperparams> = perm.iter().map(|&j| h[j]).collect();
        let a = GpStack::fit(&x, &y, &h).unwrap();
        let b = GpStack::fit(&x, &yp, &hp).unwrap();
        for q in random_points(&mut rng, 5, 2) {
            let ma = a.predict_mean(&q);
            let mb = b.predict_mean(&q);
            for j in 0..3 {
                prop_assert_eq!(mb[j], ma[perm[j]]);
            }
        }
    }
}
