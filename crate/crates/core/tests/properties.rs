use arena_core::adapters::{effective_rank, init_adapter, AdapterMode};
use arena_core::linalg::{l0_norm, Matrix, Rng};
use arena_core::prox_optimizer::{cosine_lr, prox_step_v, soft_threshold, ProxConfig};
use arena_core::tasks::{planted_rank_task_with, PlantedSpec, Spectrum};
use proptest::prelude::*;

fn cfg(lambda: f64, rho: f64) -> ProxConfig {
    ProxConfig {
        lambda,
        rho,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn soft_threshold_shrinks_toward_zero(x in -10.0..10.0f64, tau in 0.0..5.0f64) {
        let y = soft_threshold(x, tau).unwrap();
        prop_assert!(y.abs() <= x.abs());
        prop_assert!((x - y).abs() <= tau + 1e-12);
        prop_assert!(y == 0.0 || y.signum() == x.signum());
        prop_assert_eq!(y == 0.0, x.abs() <= tau);
        prop_assert_eq!(soft_threshold(-x, tau).unwrap(), -y);
    }

    #[test]
    fn soft_threshold_is_nonexpansive(a in -5.0..5.0f64, b in -5.0..5.0f64, tau in 0.0..3.0f64) {
        let (ya, yb) = (soft_threshold(a, tau).unwrap(), soft_threshold(b, tau).unwrap());
        prop_assert!((ya - yb).abs() <= (a - b).abs() + 1e-12);
    }

    #[test]
    fn rho_zero_prox_ignores_gradient(
        v in prop::collection::vec(-2.0..2.0f64, 1..16),
        g in -5.0..5.0f64,
        lambda in 0.0..2.0f64,
        eta in 1e-4..1e-1f64,
    ) {
        let grad = vec![g; v.len()];
        let out = prox_step_v(&v, &grad, eta, &cfg(lambda, 0.0)).unwrap();
        for (o, x) in out.iter().zip(&v) {
            prop_assert_eq!(*o, soft_threshold(*x, eta * lambda).unwrap());
        }
    }

    #[test]
    fn dead_gates_stay_dead_without_gradient_feedback(
        v in prop::collection::vec(-1.0..1.0f64, 1..16),
        steps in 1usize..50,
        lambda in 0.0..2.0f64,
    ) {
        let c = cfg(lambda, 0.0);
        let mut cur = v;
        let mut prev_rank = l0_norm(&cur, 1e-3);
        let zeros = vec![0.0; cur.len()];
        for t in 0..steps {
            let was_zero: Vec<bool> = cur.iter().map(|x| *x == 0.0).collect();
            cur = prox_step_v(&cur, &zeros, cosine_lr(t, &c), &c).unwrap();
            for (z, x) in was_zero.iter().zip(&cur) {
                prop_assert!(!z || *x == 0.0);
            }
            let rank = l0_norm(&cur, 1e-3);
            prop_assert!(rank <= prev_rank);
            prev_rank = rank;
        }
    }

    #[test]
    fn prox_fixed_point_at_zero_gradient_and_lambda(v in prop::collection::vec(-3.0..3.0f64, 1..8), rho in 0.0..1.0f64) {
        let zeros = vec![0.0; v.len()];
        prop_assert_eq!(prox_step_v(&v, &zeros, 0.01, &cfg(0.0, rho)).unwrap(), v);
    }

    #[test]
    fn cosine_schedule_is_bounded_and_nonincreasing(epoch in 0usize..400) {
        let c = ProxConfig::default();
        let lr = cosine_lr(epoch, &c);
        prop_assert!((0.0..=c.base_lr).contains(&lr));
        prop_assert!(cosine_lr(epoch + 1, &c) <= lr);
    }

    #[test]
    fn fresh_adapter_rank_matches_gate_count(r in 1usize..12, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let s = init_adapter(&mut rng, AdapterMode::Gated, 7, 9, r, 1.0).unwrap();
        let gate = s.gate.as_ref().unwrap();
        prop_assert_eq!(effective_rank(&s, 1e-3), gate.iter().filter(|x| x.abs() > 1e-3).count());
        let s = init_adapter(&mut rng, AdapterMode::Vanilla, 7, 9, r, 1.0).unwrap();
        prop_assert_eq!(effective_rank(&s, 1e-3), r);
    }
}

fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut acc = 0.0;
            for k in 0..a.cols() {
                acc += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, acc);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive_product(m in 1usize..9, k in 1usize..9, n in 1usize..9, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let a = arena_core::linalg::random_gaussian(&mut rng, m, k, 1.0).unwrap();
        let b = arena_core::linalg::random_gaussian(&mut rng, k, n, 1.0).unwrap();
        prop_assert!(a.matmul(&b).unwrap().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        prop_assert!(a.t_matmul(&a).unwrap().max_abs_diff(&naive_matmul(&a.transpose(), &a)) < 1e-12);
        prop_assert!(a.matmul_t(&a).unwrap().max_abs_diff(&naive_matmul(&a, &a.transpose())) < 1e-12);
    }

    #[test]
    fn planted_delta_has_rank_r_star(r_star in 0usize..5, seed in 0u64..500, decaying in any::<bool>()) {
        let spec = PlantedSpec {
            m: 12,
            n: 10,
            r_star,
            noise_sigma: 0.1,
            spectrum: if decaying { Spectrum::Decaying } else { Spectrum::Flat },
        };
        let draw = planted_rank_task_with(&Rng::new(seed), &spec, 4).unwrap();
        let d = &draw.planted_delta;
        // Singular values are 1 (flat) or 2^-i (decaying); Frobenius² is their
        // square sum, and for the flat case D·Dᵀ·D = D.
        let expect: f64 = (0..r_star)
            .map(|i| if decaying { 0.25f64.powi(i as i32) } else { 1.0 })
            .sum();
        prop_assert!((d.frobenius_norm().powi(2) - expect).abs() < 1e-10);
        if !decaying {
            let ddd = d.matmul(&d.t_matmul(d).unwrap()).unwrap();
            prop_assert!(ddd.max_abs_diff(d) < 1e-10);
        }
    }
}

#[test]
fn planted_support_and_query_are_disjoint() {
    for seed in 0..5 {
        let draw = planted_rank_task_with(&Rng::new(seed), &PlantedSpec::default(), 10).unwrap();
        let task = &draw.task;
        let (qx, _) = task.query();
        for i in 0..task.support_x.cols() {
            let s = task.support_x.col(i);
            for j in 0..qx.cols() {
                assert_ne!(s, qx.col(j));
            }
        }
        assert_eq!(task.query_reads(), 1);
    }
}

#[test]
fn planted_labels_follow_generating_matrices() {
    let spec = PlantedSpec {
        noise_sigma: 0.0,
        ..Default::default()
    };
    let draw = planted_rank_task_with(&Rng::new(3), &spec, 10).unwrap();
    let target = draw.base_weight.add(&draw.planted_delta).unwrap();
    let pred = target.matmul(&draw.task.support_x).unwrap();
    assert!(pred.max_abs_diff(&draw.task.support_y) < 1e-12);
}

fn singular_values(m: &Matrix) -> Vec<f64> {
    let d = nalgebra::DMatrix::from_fn(m.rows(), m.cols(), |i, j| m.get(i, j));
    let mut s: Vec<f64> = d.singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

#[test]
fn planted_spectrum_matches_svd() {
    for (spectrum, expect) in [(Spectrum::Flat, [1.0, 1.0, 1.0]), (Spectrum::Decaying, [1.0, 0.5, 0.25])] {
        let spec = PlantedSpec {
            r_star: 3,
            spectrum,
            ..Default::default()
        };
        let draw = planted_rank_task_with(&Rng::new(9), &spec, 10).unwrap();
        let s = singular_values(&draw.planted_delta);
        for (got, want) in s.iter().zip(expect) {
            assert!((got - want).abs() < 1e-10, "{s:?}");
        }
        assert!(s[3..].iter().all(|x| *x < 1e-10));
    }
}

/// Query MSE of `W0 + D` for the best rank-`r` `D`: σ² plus the truncated
/// singular energy spread over the `m` outputs.
#[test]
fn truncated_delta_query_mse_follows_singular_tail() {
    let spec = PlantedSpec {
        m: 16,
        n: 12,
        r_star: 3,
        noise_sigma: 0.2,
        spectrum: Spectrum::Decaying,
    };
    let draw = planted_rank_task_with(&Rng::new(21), &spec, 4).unwrap();
    let d = &draw.planted_delta;
    let full = nalgebra::DMatrix::from_fn(d.rows(), d.cols(), |i, j| d.get(i, j));
    let svd = full.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let (qx, qy) = draw.task.query();
    let sigma2 = spec.noise_sigma * spec.noise_sigma;
    for r in 0..=4 {
        let mut trunc = Matrix::zeros(d.rows(), d.cols());
        let mut tail = 0.0;
        for (k, s) in svd.singular_values.iter().enumerate() {
            if k < r {
                for i in 0..d.rows() {
                    for j in 0..d.cols() {
                        trunc.set(i, j, trunc.get(i, j) + s * u[(i, k)] * vt[(k, j)]);
                    }
                }
            } else {
                tail += s * s;
            }
        }
        let w = draw.base_weight.add(&trunc).unwrap();
        let pred = w.matmul(qx).unwrap();
        let mse = arena_core::model_kit::mse_loss(&pred, qy).unwrap().0;
        let expect = sigma2 + tail / spec.m as f64;
        assert!((mse - expect).abs() < 0.1 * expect, "r={r}: {mse} vs {expect}");
    }
}
