//! Oracle-backed checks of the loss geometry: independent re-evaluation of
//! the loss formula, finite differences for the gradient, a 1-D line-search
//! oracle for the distance, spectral checks for the Hessian, and large-sample
//! verification of the class-K lower bound.

use dissnet::linalg::symmetric_eigenvalues;
use dissnet::softce::{
    dist_to_minimizers, invariance_transform, lower_bound_alpha, soft_ce, soft_ce_gradient,
    soft_ce_hessian, soft_targets, MinimizerLine, SmoothingSpec,
};
use ndarray::Array1;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn spec2() -> SmoothingSpec {
    SmoothingSpec::new(2, 0.95).unwrap()
}

fn spec10() -> SmoothingSpec {
    SmoothingSpec::new(10, 0.91).unwrap()
}

/// Straight-line evaluation of the loss formula: softmax by direct
/// exponentiation, cross-entropy by the definition, offset by the target
/// entropy. Independent of the max-subtracted log-space path.
fn naive_soft_ce(x: &[f64], label: usize, spec: &SmoothingSpec) -> f64 {
    let c = spec.num_classes();
    let q = soft_targets(label, spec).unwrap();
    let sum: f64 = x[..c].iter().map(|v| v.exp()).sum();
    let mut ce = 0.0;
    for i in 0..c {
        let p = x[i].exp() / sum;
        ce -= q.entries()[i] * p.ln();
    }
    let entropy: f64 = -q.entries().iter().map(|&qi| qi * qi.ln()).sum::<f64>();
    ce - entropy
}

fn random_point(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

#[test]
fn value_matches_naive_formula_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        // The specified reference point.
        if c == 2 {
            let got = soft_ce(&[0.0, 0.0], 1, &spec).unwrap();
            let want = naive_soft_ce(&[0.0, 0.0], 1, &spec);
            assert!((got - want).abs() < 1e-12);
        }
        for _ in 0..200 {
            let x = random_point(&mut rng, c, 2.0);
            let label = rng.gen_range(1..=c);
            let got = soft_ce(&x, label, &spec).unwrap();
            let want = naive_soft_ce(&x, label, &spec);
            assert!(
                (got - want).abs() < 1e-10 * (1.0 + want.abs()),
                "{got} vs oracle {want}"
            );
        }
    }
}

#[test]
fn gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-6;
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        for _ in 0..500 {
            let x = random_point(&mut rng, c, 3.0);
            let label = rng.gen_range(1..=c);
            let grad = soft_ce_gradient(&x, label, &spec).unwrap();
            let mut fd = vec![0.0; c];
            for i in 0..c {
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                fd[i] = (soft_ce(&xp, label, &spec).unwrap()
                    - soft_ce(&xm, label, &spec).unwrap())
                    / (2.0 * h);
            }
            let diff: f64 =
                grad.iter().zip(&fd).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            assert!(diff / norm.max(1.0) < 1e-6, "relative error {}", diff / norm.max(1.0));
        }
    }
}

#[test]
fn gradient_norm_at_most_two() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        for _ in 0..2000 {
            let scale = [0.5, 5.0, 50.0][rng.gen_range(0..3)];
            let x = random_point(&mut rng, c, scale);
            let label = rng.gen_range(1..=c);
            let grad = soft_ce_gradient(&x, label, &spec).unwrap();
            let norm: f64 = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            assert!(norm <= 2.0 + 1e-12, "gradient norm {norm}");
        }
    }
}

#[test]
fn hessian_kernel_spectrum_and_target_independence() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        for _ in 0..1000 {
            let x = random_point(&mut rng, c, 3.0);
            let h = soft_ce_hessian(&x, &spec).unwrap();
            // All-ones vector is in the kernel.
            let ones = Array1::from(vec![1.0; c]);
            let hv = h.dot(&ones);
            for v in hv.iter() {
                assert!(v.abs() < 1e-12);
            }
            let eig = symmetric_eigenvalues(&h);
            assert!(eig[0] >= -1e-10, "min eigenvalue {}", eig[0]);
        }
        // Second differences of soft and hard losses agree: the Hessian does
        // not depend on the targets.
        let fd_hessian = |f: &dyn Fn(&[f64]) -> f64, x: &[f64]| {
            let h = 1e-4;
            let mut m = ndarray::Array2::zeros((c, c));
            for i in 0..c {
                for j in 0..c {
                    let mut xpp = x.to_vec();
                    xpp[i] += h;
                    xpp[j] += h;
                    let mut xpm = x.to_vec();
                    xpm[i] += h;
                    xpm[j] -= h;
                    let mut xmp = x.to_vec();
                    xmp[i] -= h;
                    xmp[j] += h;
                    let mut xmm = x.to_vec();
                    xmm[i] -= h;
                    xmm[j] -= h;
                    m[[i, j]] = (f(&xpp) - f(&xpm) - f(&xmp) + f(&xmm)) / (4.0 * h * h);
                }
            }
            m
        };
        for _ in 0..5 {
            let x = random_point(&mut rng, c, 1.5);
            let analytic = soft_ce_hessian(&x, &spec).unwrap();
            let soft = fd_hessian(&|p| soft_ce(p, 1, &spec).unwrap(), &x);
            let hard = fd_hessian(&|p| dissnet::softce::hard_ce(p, 2, c).unwrap(), &x);
            for i in 0..c {
                for j in 0..c {
                    assert!((soft[[i, j]] - analytic[[i, j]]).abs() < 1e-4);
                    assert!((hard[[i, j]] - analytic[[i, j]]).abs() < 1e-4);
                }
            }
        }
    }
}

#[test]
fn translation_and_permutation_invariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        for _ in 0..500 {
            let x = random_point(&mut rng, c, 4.0);
            let label = rng.gen_range(1..=c);
            let shift: f64 = rng.gen_range(-30.0..30.0);
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let a = soft_ce(&x, label, &spec).unwrap();
            let b = soft_ce(&shifted, label, &spec).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
            let da = dist_to_minimizers(&x, label, &spec).unwrap();
            let db = dist_to_minimizers(&shifted, label, &spec).unwrap();
            assert!((da - db).abs() < 1e-9 * (1.0 + da.abs()));

            // Transforming onto the zero-sum subspace changes nothing either.
            let t = invariance_transform(&x);
            let vt = soft_ce(&t, label, &spec).unwrap();
            assert!((a - vt).abs() < 1e-9 * (1.0 + a.abs()));

            // Swapping two class indices together with the label.
            let i = rng.gen_range(0..c);
            let j = rng.gen_range(0..c);
            let mut perm = x.clone();
            perm.swap(i, j);
            let permuted_label = if label == i + 1 {
                j + 1
            } else if label == j + 1 {
                i + 1
            } else {
                label
            };
            let p = soft_ce(&perm, permuted_label, &spec).unwrap();
            assert!((a - p).abs() < 1e-9 * (1.0 + a.abs()));
        }
    }
}

#[test]
fn strictly_convex_on_zero_sum_subspace() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        for _ in 0..500 {
            let x = invariance_transform(&random_point(&mut rng, c, 3.0));
            let d = invariance_transform(&random_point(&mut rng, c, 1.0));
            let norm: f64 = d.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-9 {
                continue;
            }
            let h = soft_ce_hessian(&x, &spec).unwrap();
            let hd = h.dot(&Array1::from(d.clone()));
            let quad: f64 = d.iter().zip(hd.iter()).map(|(a, b)| a * b).sum();
            assert!(quad > 0.0, "d^T H d = {quad}");
        }
    }
}

/// Golden-section minimization of `t -> ||x - (base + t 1)||` for the
/// distance oracle; independent of the projection identity used by the
/// implementation.
fn golden_section_distance(x: &[f64], line: &MinimizerLine) -> f64 {
    let f = |t: f64| {
        let p = line.point_at(t);
        x.iter().zip(&p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
    };
    let (mut a, mut b) = (-1000.0, 1000.0);
    let phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - phi * (b - a);
    let mut d = a + phi * (b - a);
    for _ in 0..200 {
        if f(c) < f(d) {
            b = d;
        } else {
            a = c;
        }
        c = b - phi * (b - a);
        d = a + phi * (b - a);
        if (b - a).abs() < 1e-12 {
            break;
        }
    }
    f(0.5 * (a + b))
}

#[test]
fn distance_matches_line_search_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        for _ in 0..100 {
            let x = random_point(&mut rng, c, 5.0);
            let label = rng.gen_range(1..=c);
            let line = MinimizerLine::new(label, &spec).unwrap();
            let got = dist_to_minimizers(&x, label, &spec).unwrap();
            let oracle = golden_section_distance(&x, &line);
            assert!((got - oracle).abs() < 1e-7, "{got} vs oracle {oracle}");
        }
    }
}

#[test]
fn nonnegative_with_zero_exactly_on_the_lines() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        for _ in 0..10_000 {
            let x = random_point(&mut rng, c, 3.0);
            let label = rng.gen_range(1..=c);
            let v = soft_ce(&x, label, &spec).unwrap();
            let dist = dist_to_minimizers(&x, label, &spec).unwrap();
            assert!(v >= 0.0);
            if dist >= 1e-8 {
                assert!(v > 0.0, "zero value at distance {dist}");
            }
        }
        for _ in 0..100 {
            let label = rng.gen_range(1..=c);
            let line = MinimizerLine::new(label, &spec).unwrap();
            let x = line.point_at(rng.gen_range(-50.0..50.0));
            let v = soft_ce(&x, label, &spec).unwrap();
            let dist = dist_to_minimizers(&x, label, &spec).unwrap();
            assert!(dist < 1e-8);
            assert!(v <= 1e-9, "on-line value {v}");
        }
    }
}

fn alpha_bound_sweep(samples: usize, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for spec in [spec2(), spec10()] {
        let c = spec.num_classes();
        let alpha = lower_bound_alpha(&spec);
        assert_eq!(alpha.eval(0.0), 0.0);
        let mut worst: f64 = f64::NEG_INFINITY;
        for _ in 0..samples {
            let dir = random_point(&mut rng, c, 1.0);
            let norm: f64 = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < 1e-12 {
                continue;
            }
            let radius: f64 = rng.gen_range(0.0..50.0);
            let x: Vec<f64> = dir.iter().map(|v| v / norm * radius).collect();
            let label = rng.gen_range(1..=c);
            let v = soft_ce(&x, label, &spec).unwrap();
            let dist = dist_to_minimizers(&x, label, &spec).unwrap();
            let bound = alpha.eval(dist);
            worst = worst.max(bound - v);
            assert!(
                v >= bound - 1e-9,
                "loss {v} below alpha({dist}) = {bound} for C = {c}"
            );
        }
        eprintln!("alpha margin sweep C={c}, {samples} samples: worst bound-minus-loss {worst:.3e}");
    }
}

#[test]
fn alpha_lower_bounds_the_loss_on_large_samples() {
    alpha_bound_sweep(10_000, 9);
}

/// Heavier sweep for local runs: `cargo test -- --ignored alpha_stress`.
#[test]
#[ignore]
fn alpha_stress_million_samples() {
    alpha_bound_sweep(1_000_000, 99);
}
