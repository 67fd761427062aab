use dissnet::data::two_spirals;
use dissnet::resnet::{Activation, Arch, NetworkParams};
use dissnet::softce::{lower_bound_alpha, SmoothingSpec};
use dissnet::train::{accuracy, fit, ObjectiveSpec, PenaltyMode, StageMode, TrainRun};
use dissnet::turnpike::{default_epsilon, profile, turnpike_report};

fn main() {
    let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
    let alpha = lower_bound_alpha(&smoothing);
    let eps = default_epsilon(&smoothing);
    let ds = two_spirals(240, 0.02, 1.5, 7);
    for lr in [0.005, 0.01, 0.02, 0.05, 0.1] {
        for batch in [0usize, 64] {
            let arch = Arch::Bottleneck { state_dim: 2, hidden_dim: 8, act_hidden: Activation::Tanh, act_out: Activation::Identity };
            let p0 = NetworkParams::random_init(arch, 30, 42);
            let run = TrainRun {
                objective: ObjectiveSpec::new(3.0, 0.005, StageMode::SoftCe, PenaltyMode::ObjectiveTerm).unwrap(),
                learning_rate: lr, epochs: 2000, batch_size: batch, seed: 42,
            };
            let out = fit(p0, &ds, &smoothing, &run);
            if out.failure.is_some() { println!("lr {lr} batch {batch}: DIVERGED"); continue; }
            let acc = accuracy(&out.params, &ds, &smoothing).unwrap();
            let prof = profile(&out.params, &ds, &smoothing).unwrap();
            let rep = turnpike_report(&prof, eps, &alpha, 0.005).unwrap();
            let h = out.history.last().unwrap();
            println!("lr {lr:6} batch {batch:3}: acc {acc:.4} entry {:2} obj {:8.4} stage {:7.4} term {:7.4}",
                rep.entry_layer, h.objective, h.mean_stage_cost, h.terminal_loss);
        }
    }
}
