//! Property-style coverage of the network and numerics invariants.

use proptest::prelude::*;

use l2flow::data::{Dataset, TargetMode};
use l2flow::linalg::{Mat, SymMatrix};
use l2flow::network::{Activation, GradientBundle, MLPModel, Parameterization};
use l2flow::numerics::{eig_sym, fit_power_law, integrate_ode};

fn finite_diff_grad(m: &MLPModel, x: &[f64]) -> GradientBundle {
    let h = 1e-5;
    let mut g = GradientBundle::zeros_like(m);
    for l in 0..m.weights.len() {
        for p in 0..m.weights[l].rows() * m.weights[l].cols() {
            let mut mp = m.clone();
            mp.weights[l].as_mut_slice()[p] += h;
            let mut mm = m.clone();
            mm.weights[l].as_mut_slice()[p] -= h;
            g.weights[l].as_mut_slice()[p] = (mp.forward(x)[0] - mm.forward(x)[0]) / (2.0 * h);
        }
    }
    g
}

/// Gradient correctness over 100 random (model, input) draws: backprop vs
/// central finite differences within 1e-6 absolute or 1e-4 relative.
#[test]
fn backprop_matches_finite_differences_over_many_draws() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
    for draw in 0..100u64 {
        let depth = 1 + (draw % 3) as usize;
        let mut widths = vec![4usize];
        widths.extend(std::iter::repeat(6).take(depth));
        widths.push(1);
        let act = if draw % 2 == 0 { Activation::Relu } else { Activation::Linear };
        let par = if draw % 3 == 0 { Parameterization::Standard } else { Parameterization::Ntk };
        let m = MLPModel::init(&widths, act, par, 1.3, 0.0, false, draw);
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.5..1.5)).collect();
        let bp = m.grad_param(&x, 0);
        let fd = finite_diff_grad(&m, &x);
        for (a, b) in bp.iter_flat().zip(fd.iter_flat()) {
            assert!(
                (a - b).abs() < 1e-6f64.max(1e-4 * a.abs()),
                "draw {draw}: backprop {a} vs finite difference {b}"
            );
        }
    }
}

/// The two parameterizations define the same function distribution at
/// initialization: spot-check the output variance over seeds (within 10%).
#[test]
fn parameterization_equivalence_at_init() {
    let widths = [6usize, 24, 1];
    let x = [0.9, -0.3, 0.5, 0.1, -0.7, 0.4];
    let sigma_w = 1.7;
    let var = |par: Parameterization| {
        let n = 4000;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for seed in 0..n {
            let m = MLPModel::init(&widths, Activation::Relu, par, sigma_w, 0.0, false, seed);
            let f = m.forward(&x)[0];
            sum += f;
            sumsq += f * f;
        }
        let mean = sum / n as f64;
        sumsq / n as f64 - mean * mean
    };
    let v_ntk = var(Parameterization::Ntk);
    let v_std = var(Parameterization::Standard);
    let ratio = v_ntk / v_std;
    assert!(
        (0.9..=1.1).contains(&ratio),
        "init output variance ratio ntk/standard = {ratio:.4}"
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Reconstruction invariant of the eigensolver on random symmetric
    /// matrices.
    #[test]
    fn eig_reconstructs_random_symmetric(n in 2usize..24, seed in 0u64..1000) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = rng.random_range(-2.0..2.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        let sym = SymMatrix::new(m.clone()).unwrap();
        let es = eig_sym(&sym).unwrap();
        let scale = m.max_abs().max(1e-12);
        let mut recon = Mat::zeros(n, n);
        for a in 0..n {
            let va = es.vectors.column(a);
            for i in 0..n {
                for j in 0..n {
                    recon[(i, j)] += es.values[a] * va[i] * va[j];
                }
            }
        }
        recon.add_scaled(&m, -1.0);
        prop_assert!(recon.max_abs() < 1e-8 * scale);
    }

    /// Exact power laws over up to six decades are fitted with zero
    /// residual.
    #[test]
    fn power_law_fit_is_exact_on_exact_laws(
        c in 0.01f64..100.0,
        p in -2.5f64..2.5,
        decades in 1usize..6,
    ) {
        let points: Vec<(f64, f64)> = (0..=decades * 2)
            .map(|i| {
                let x = 10f64.powf(-(i as f64) / 2.0);
                (x, c * x.powf(p))
            })
            .collect();
        let fit = fit_power_law(&points).unwrap();
        prop_assert!((fit.coefficient - c).abs() < 1e-9 * c);
        prop_assert!((fit.exponent - p).abs() < 1e-10);
        prop_assert!(fit.residual < 1e-12);
    }

    /// Homogeneity of bias-free nets across depths 1..4 and scales.
    #[test]
    fn homogeneity_of_random_nets(
        depth in 1usize..5,
        seed in 0u64..500,
        a in 0.2f64..3.0,
        relu in proptest::bool::ANY,
    ) {
        let mut widths = vec![3usize];
        widths.extend(std::iter::repeat(5).take(depth.saturating_sub(1)));
        widths.push(1);
        let act = if relu { Activation::Relu } else { Activation::Linear };
        let m = MLPModel::init(&widths, act, Parameterization::Ntk, 1.1, 0.0, false, seed);
        let x = [0.6, -0.4, 0.8];
        prop_assert!(m.homogeneity_residual(&x, a).unwrap() < 1e-8);
        prop_assert!(m.euler_residual(&x, 0).unwrap() < 1e-8);
    }

    /// One-hot encodings always have rows summing to exactly one.
    #[test]
    fn one_hot_rows_sum_to_one(n in 1usize..40, seed in 0u64..100) {
        let mut ds = Dataset::synthetic_classes(n, 4, 10, 0.5, seed, 1.0);
        ds.encode_targets(TargetMode::OneHot).unwrap();
        let t = ds.targets.as_ref().unwrap();
        for i in 0..n {
            prop_assert_eq!(t.row(i).iter().sum::<f64>(), 1.0);
        }
    }
}

/// RK4 is pure: same inputs give bit-identical trajectories.
#[test]
fn integrator_is_pure() {
    let run = || {
        integrate_ode(
            |t, x, dx| {
                dx[0] = -0.7 * x[0] + (t * 3.0).sin();
                dx[1] = x[0] - x[1];
            },
            &[1.0, -0.5],
            &[0.0, 0.7, 1.9],
            1e-3,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
