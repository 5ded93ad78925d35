mod common;

use longfair::baselines::{fit_baseline, penalty_ladder, pooled_accuracy, BaselineKind, BaselineSpec};
use longfair::datagen::{generate_synthetic, GenConfig};
use longfair::objective::{FrozenBatch, LossWeights, PerformativeObjective};
use longfair::sensitivity::estimate_curvature;
use longfair::trainer::{init_model, inner_minimize, observational_batch, rrm_fit, rrm_fit_from, InnerOptimizer, RrmConfig};
use longfair::{sigmoid, DecisionModel, PanelDataset};
use rand::Rng;

fn small_panel(n: usize, seed: u64) -> (longfair::TimeLaggedScm, PanelDataset) {
    let cfg = GenConfig { n_individuals: n, steps: 3, group_means: Some([vec![-0.25, -0.25], vec![0.25, 0.25]]), ..GenConfig::reference(seed) };
    let scm = cfg.scm(DecisionModel::new(vec![1.0, -0.5, 0.0, 0.0]).unwrap(), 3);
    let ds = generate_synthetic(&scm, &cfg).unwrap();
    (scm, ds)
}

/// Ridge-logistic fit by Newton's method on `sum_t mean_i phi(y h) + r |theta|^2`,
/// written without the library's objective code.
fn newton_logistic(ds: &PanelDataset, r: f64) -> Vec<f64> {
    let d = ds.x[0][0].len() + 2;
    let mut theta = vec![0.0; d];
    let feats = |x: &[f64], s: u8| -> Vec<f64> { x.iter().copied().chain([f64::from(s), 1.0]).collect() };
    for _ in 0..50 {
        let mut g: Vec<f64> = theta.iter().map(|t| 2.0 * r * t).collect();
        let mut h = vec![vec![0.0; d]; d];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = 2.0 * r;
        }
        for t in 0..ds.steps() {
            let n = ds.len() as f64;
            for i in 0..ds.len() {
                let f = feats(&ds.x[i][t], ds.s[i]);
                let y = f64::from(ds.y[i][t]);
                let z = y * f.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>();
                let p = sigmoid(-z);
                for a in 0..d {
                    g[a] -= y * p * f[a] / n;
                    for b in 0..d {
                        h[a][b] += p * (1.0 - p) * f[a] * f[b] / n;
                    }
                }
            }
        }
        let step = solve(h, g);
        for (t, s) in theta.iter_mut().zip(&step) {
            *t -= s;
        }
        if step.iter().map(|v| v.abs()).fold(0.0, f64::max) < 1e-13 {
            break;
        }
    }
    theta
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|i, j| a[*i][c].abs().total_cmp(&a[*j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        x[r] = (b[r] - (r + 1..n).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

#[test]
fn utility_only_initial_model_matches_newton_solver() {
    let (_, ds) = small_panel(400, 3);
    let r = 1e-3;
    let ours = init_model(&ds, &LossWeights::utility_only(r), &InnerOptimizer::default()).unwrap();
    let oracle = newton_logistic(&ds, r);
    for (a, b) in ours.weights.iter().zip(&oracle) {
        assert!((a - b).abs() <= 1e-4, "{:?} vs {oracle:?}", ours.weights);
    }
}

#[test]
fn all_positive_labels_push_the_bias_up() {
    let (_, mut ds) = small_panel(200, 4);
    for row in &mut ds.y {
        row.iter_mut().for_each(|y| *y = 1);
    }
    let inner = InnerOptimizer::default();
    let w = LossWeights::utility_only(1e-3);
    let m = init_model(&ds, &w, &inner).unwrap();
    assert!(m.bias() > 2.0, "bias {}", m.bias());
    let batch = observational_batch(&ds).unwrap();
    let obj = PerformativeObjective::new(&batch, &w, 2);
    let res = inner_minimize(&obj, &m.weights, &inner).unwrap();
    assert!(res.grad_norm <= inner.grad_tol, "gradient norm {}", res.grad_norm);
}

#[test]
fn separable_data_with_strong_ridge_stays_finite() {
    let (_, mut ds) = small_panel(200, 5);
    for i in 0..ds.len() {
        for t in 0..ds.steps() {
            ds.y[i][t] = if ds.x[i][t][0] >= 0.0 { 1 } else { -1 };
        }
    }
    let m = init_model(&ds, &LossWeights::utility_only(0.05), &InnerOptimizer::default()).unwrap();
    assert!(m.weights.iter().all(|w| w.is_finite() && w.abs() < 50.0));
    assert!(pooled_accuracy(&ds, &m).unwrap() >= 0.97);
}

#[test]
fn inner_descent_is_monotone_and_certifies_a_stationary_point() {
    let mut r = common::rng(21);
    let batch: FrozenBatch = common::random_batch(&mut r, 2, 3, 200);
    let w = LossWeights::default();
    let obj = PerformativeObjective::new(&batch, &w, 2);
    let res = inner_minimize(&obj, &[0.3, -0.2, 0.1, 0.0], &InnerOptimizer::default()).unwrap();
    assert!(res.values.windows(2).all(|v| v[1] <= v[0]));
    assert!(res.grad_norm <= 1e-5, "gradient norm {}", res.grad_norm);
}

#[test]
fn rrm_fixed_point_is_stable_under_resampling() {
    let (scm, ds) = small_panel(600, 6);
    let w = LossWeights { lambda_u: 0.35, lambda_l: 0.45, lambda_s: 0.2, ..LossWeights::default() };
    let cfg = RrmConfig { mc_samples: 2000, ..RrmConfig::default() };
    let (model, trace) = rrm_fit(&scm, &ds, &w, &cfg).unwrap();
    assert!(trace.converged);
    let again = RrmConfig { max_outer_iters: 1, ..cfg.clone() };
    let (_, step) = rrm_fit_from(&scm, &ds, &w, &again, model).unwrap();
    assert!(step.deltas()[0] <= cfg.delta, "re-minimizing moved {}", step.deltas()[0]);
    let d = trace.deltas();
    assert!(d.windows(2).all(|p| p[1] < p[0]), "{d:?}");
}

#[test]
fn rrm_traces_are_bit_reproducible() {
    let (scm, ds) = small_panel(300, 7);
    let w = LossWeights { lambda_u: 0.35, lambda_l: 0.45, lambda_s: 0.2, ..LossWeights::default() };
    let cfg = RrmConfig { mc_samples: 1000, max_outer_iters: 4, ..RrmConfig::default() };
    let (a, ta) = rrm_fit(&scm, &ds, &w, &cfg).unwrap();
    let (b, tb) = rrm_fit(&scm, &ds, &w, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(serde_json::to_string(&ta).unwrap(), serde_json::to_string(&tb).unwrap());
}

#[test]
fn logistic_curvature_respects_the_ridge_floor() {
    let (_, ds) = small_panel(200, 8);
    let batch = observational_batch(&ds).unwrap();
    let reg = 0.01;
    let w = LossWeights::utility_only(reg);
    let obj = PerformativeObjective::new(&batch, &w, 2);
    let mut r = common::rng(9);
    let thetas: Vec<Vec<f64>> = (0..8).map(|_| (0..4).map(|_| common::gauss(&mut r)).collect()).collect();
    let (g, b) = estimate_curvature(&obj, &thetas).unwrap();
    assert!(g >= 2.0 * reg * (1.0 - 1e-9), "gamma_hat {g}");
    assert!(b >= g);
}

#[test]
fn penalty_ladder_never_widens_the_gap() {
    let (_, ds) = small_panel(400, 10);
    for kind in [BaselineKind::Fmdp, BaselineKind::Fmeo] {
        let spec = BaselineSpec { fairness_budget: 0.0, ..BaselineSpec::new(kind) };
        let ladder = penalty_ladder(&ds, &spec, &[0.0, 0.5, 2.0, 8.0, 32.0]).unwrap();
        let gaps: Vec<f64> = ladder.iter().map(|(_, _, g)| *g).collect();
        assert!(gaps.windows(2).all(|p| p[1] <= p[0] + 1e-9), "{kind:?}: {gaps:?}");
    }
}

#[test]
fn protected_weight_vanishes_when_s_is_independent() {
    let mut r = common::rng(12);
    let n = 50_000;
    let mut ds = PanelDataset { s: vec![], x: vec![], y: vec![], decisions: vec![] };
    for _ in 0..n {
        let x = vec![common::gauss(&mut r), common::gauss(&mut r)];
        let y = if r.random::<f64>() < sigmoid(1.2 * x[0] - 0.7 * x[1]) { 1 } else { -1 };
        ds.s.push(u8::from(r.random::<bool>()));
        ds.x.push(vec![x]);
        ds.y.push(vec![y]);
        ds.decisions.push(vec![y]);
    }
    let m = fit_baseline(&ds, &BaselineSpec::new(BaselineKind::Lr)).unwrap();
    assert!(m.protected_weight().abs() <= 0.05, "w_s = {}", m.protected_weight());
}
