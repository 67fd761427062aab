//! Finite-difference verification of the adjoint parameter gradients on the
//! small instances pinned by the module contracts, plus sample-independence
//! checks of the ensemble forward pass.

use dissnet::gradcheck::{check_instance, run, GradCheckConfig, KINK_THRESHOLD};
use dissnet::resnet::{forward_ensemble, Activation, Arch, NetworkParams};
use dissnet::softce::SmoothingSpec;
use dissnet::train::{ObjectiveSpec, PenaltyMode, StageMode};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn plain_tanh_small_instance_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let arch = Arch::Plain { state_dim: 3, activation: Activation::Tanh };
    let smoothing = SmoothingSpec::new(3, 0.9).unwrap();
    for seed in 0..5u64 {
        let params = NetworkParams::random_init(arch.clone(), 2, seed);
        let features = Array2::from_shape_fn((4, 3), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=3)).collect();
        let spec =
            ObjectiveSpec::new(1.5, 0.02, StageMode::SoftCe, PenaltyMode::ObjectiveTerm).unwrap();
        let rel = check_instance(&params, &features, &labels, &spec, &smoothing, 1e-5).unwrap();
        assert!(rel < 1e-5, "relative error {rel}");
    }
}

#[test]
fn bottleneck_relu_small_instance_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let arch = Arch::Bottleneck {
        state_dim: 2,
        hidden_dim: 3,
        act_hidden: Activation::Relu,
        act_out: Activation::Identity,
    };
    let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
    let spec =
        ObjectiveSpec::new(1.0, 0.01, StageMode::SoftCe, PenaltyMode::ObjectiveTerm).unwrap();
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 5 {
        seed += 1;
        let params = NetworkParams::random_init(arch.clone(), 2, seed);
        let features = Array2::from_shape_fn((4, 2), |_| rng.gen_range(-1.0..1.0));
        let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(1..=2)).collect();
        // Resample instances whose pre-activations graze the ReLU kink.
        if dissnet::gradcheck::relu_kink_risk(&params, &features, KINK_THRESHOLD) {
            continue;
        }
        let rel = check_instance(&params, &features, &labels, &spec, &smoothing, 1e-5).unwrap();
        assert!(rel < 1e-5, "relative error {rel}");
        checked += 1;
    }
}

#[test]
fn twenty_instances_per_architecture_per_stage_mode() {
    let report = run(&GradCheckConfig { trials: 20, seed: 0xfd, fd_step: 1e-5 }).unwrap();
    assert_eq!(report.trials_run, 2 * 3 * 20);
    assert!(report.max_rel_error < 1e-5, "max relative error {}", report.max_rel_error);
    // Every architecture saw every activation.
    for arch in ["plain", "bottleneck"] {
        for act in ["tanh", "relu", "identity"] {
            assert!(report.cases.iter().any(|c| c.arch == arch && c.activation == act));
        }
    }
}

#[test]
fn permuting_samples_permutes_trajectories() {
    let arch = Arch::Bottleneck {
        state_dim: 3,
        hidden_dim: 4,
        act_hidden: Activation::Tanh,
        act_out: Activation::Identity,
    };
    let params = NetworkParams::random_init(arch, 4, 33);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let features = Array2::from_shape_fn((7, 3), |_| rng.gen_range(-2.0..2.0));
    let traj = forward_ensemble(&params, &features).unwrap();

    let perm: Vec<usize> = vec![6, 0, 3, 1, 5, 2, 4];
    let mut permuted = Array2::zeros((7, 3));
    for (r, &p) in perm.iter().enumerate() {
        permuted.row_mut(r).assign(&features.row(p));
    }
    let traj_p = forward_ensemble(&params, &permuted).unwrap();
    for k in 0..=4 {
        for (r, &p) in perm.iter().enumerate() {
            assert_eq!(traj_p.state(k).row(r), traj.state(k).row(p));
        }
    }
}
