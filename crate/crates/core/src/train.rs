//! The training problem: objective assembly, Adam, and the fitting loop.
//!
//! The objective is the finite-horizon control cost
//!
//! ```text
//! J = sum_{k=0}^{N-1} [ stage(x_k) + r * ||u_k||^2 ] + gamma * loss(x_N)
//! ```
//!
//! where `stage` is the dataset-mean classification loss of the layer-k
//! states in the selected mode (none, soft or hard cross-entropy), `u_k` the
//! vectorized layer parameters and `loss` the terminal classification loss.
//! Stage and terminal losses are dataset means, so `gamma` and `r` do not
//! scale with the dataset size. The quadratic input penalty can live in the
//! objective (exact dissipation accounting) or be realized as decoupled decay
//! inside the optimizer step.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::linalg;
use crate::resnet::{
    backward_cached, forward_ensemble_cached, EnsembleTrajectory, NetError, NetworkParams,
    ParamGradient,
};
use crate::softce::{self, SmoothingSpec, SoftCeError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("{what} must be finite and nonnegative, got {value}")]
    BadValue { what: &'static str, value: f64 },
    #[error("non-finite objective term: {term}")]
    NonFinite { term: String },
    #[error("gradient tree does not match parameter tree: {0}")]
    GradientShape(String),
    #[error("smoothing spec has {spec_classes} classes but dataset has {data_classes}")]
    ClassMismatch { spec_classes: usize, data_classes: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    SoftCe(#[from] SoftCeError),
}

/// Per-layer classification loss applied to the hidden states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageMode {
    None,
    SoftCe,
    HardCe,
}

impl StageMode {
    pub fn name(self) -> &'static str {
        match self {
            StageMode::None => "none",
            StageMode::SoftCe => "soft-ce",
            StageMode::HardCe => "hard-ce",
        }
    }
}

/// How the quadratic input penalty `r ||u||^2` is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PenaltyMode {
    /// Inside the objective, differentiated like any other term.
    ObjectiveTerm,
    /// Decoupled weight decay applied after each Adam step.
    OptimizerDecay,
}

/// Loss family of the terminal (Mayer) term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalLoss {
    SoftCe,
    HardCe,
}

/// Objective configuration. Losses are dataset means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub gamma: f64,
    pub reg_r: f64,
    pub stage_mode: StageMode,
    pub penalty_mode: PenaltyMode,
    pub terminal_loss: TerminalLoss,
    /// In [`PenaltyMode::OptimizerDecay`] mode, whether decay also shrinks
    /// biases (the explicit objective penalty always includes them).
    pub decay_biases: bool,
}

impl ObjectiveSpec {
    pub fn new(
        gamma: f64,
        reg_r: f64,
        stage_mode: StageMode,
        penalty_mode: PenaltyMode,
    ) -> Result<Self, TrainError> {
        if !gamma.is_finite() || gamma < 0.0 {
            return Err(TrainError::BadValue { what: "gamma", value: gamma });
        }
        if !reg_r.is_finite() || reg_r < 0.0 {
            return Err(TrainError::BadValue { what: "reg_r", value: reg_r });
        }
        let terminal_loss = match stage_mode {
            StageMode::HardCe => TerminalLoss::HardCe,
            StageMode::None | StageMode::SoftCe => TerminalLoss::SoftCe,
        };
        Ok(ObjectiveSpec {
            gamma,
            reg_r,
            stage_mode,
            penalty_mode,
            terminal_loss,
            decay_biases: true,
        })
    }

    pub fn with_terminal_loss(mut self, terminal_loss: TerminalLoss) -> Self {
        self.terminal_loss = terminal_loss;
        self
    }
}

/// Value and all gradient pieces of the objective at one parameter point.
#[derive(Debug)]
pub struct ObjectiveEval {
    pub value: f64,
    /// Dataset-mean terminal loss, before scaling by gamma.
    pub terminal_loss: f64,
    /// Dataset-mean stage loss per layer (penalty not included).
    pub stage_costs: Vec<f64>,
    /// `||u_k||^2` per layer, reported in both penalty modes.
    pub penalties: Vec<f64>,
    /// d(objective)/d(x_k) per layer, evaluated at the recorded states.
    pub stage_grads: Vec<Array2<f64>>,
    /// d(objective)/d(x_N).
    pub terminal_grad: Array2<f64>,
    /// `2 r u_k` in objective-term mode with `r > 0`, otherwise `None`.
    pub penalty_grads: Option<ParamGradient>,
    pub trajectory: EnsembleTrajectory,
}

/// Loss value and class-slice gradient of one sample's state under `mode`.
fn sample_loss(
    slice: &[f64],
    label: usize,
    smoothing: &SmoothingSpec,
    soft: bool,
) -> (f64, Vec<f64>) {
    let lp = softce::log_probs(slice);
    let c = smoothing.num_classes();
    let q_wrong = smoothing.q_wrong();
    let mut value = 0.0;
    let mut grad = vec![0.0; c];
    for i in 0..c {
        let p = lp[i].exp();
        let q = if soft {
            if i + 1 == label {
                smoothing.p_d()
            } else {
                q_wrong
            }
        } else if i + 1 == label {
            1.0
        } else {
            0.0
        };
        value -= q * lp[i];
        grad[i] = p - q;
    }
    if soft {
        value = (value - smoothing.offset()).max(0.0);
    }
    (value, grad)
}

/// Dataset-mean loss of a state matrix plus the per-sample gradient matrix
/// scaled by `weight / D`.
fn mean_loss_and_grad(
    states: &Array2<f64>,
    labels: &[usize],
    smoothing: &SmoothingSpec,
    soft: bool,
    weight: f64,
) -> (f64, Array2<f64>) {
    let d = states.nrows();
    let n = states.ncols();
    let c = smoothing.num_classes();
    let scale = weight / d as f64;
    let mut grad = Array2::zeros((d, n));
    let mut total = 0.0;
    for (i, (row, &label)) in states.rows().into_iter().zip(labels).enumerate() {
        let slice = &row.as_slice().unwrap()[..c];
        let (v, g) = sample_loss(slice, label, smoothing, soft);
        total += v;
        for (j, gj) in g.iter().enumerate() {
            grad[[i, j]] = gj * scale;
        }
    }
    (total / d as f64, grad)
}

pub(crate) struct ObjectiveInternals {
    pub eval: ObjectiveEval,
    pub caches: Vec<crate::resnet::LayerCache>,
    pub correct: usize,
}

pub(crate) fn objective_internal(
    params: &NetworkParams,
    features: &Array2<f64>,
    labels: &[usize],
    spec: &ObjectiveSpec,
    smoothing: &SmoothingSpec,
) -> Result<ObjectiveInternals, TrainError> {
    let c = smoothing.num_classes();
    for &label in labels {
        if label < 1 || label > c {
            return Err(TrainError::SoftCe(SoftCeError::LabelOutOfRange {
                label,
                num_classes: c,
            }));
        }
    }
    if features.nrows() != labels.len() || features.nrows() == 0 {
        return Err(TrainError::EmptyDataset);
    }
    let (trajectory, caches) = forward_ensemble_cached(params, features)?;
    let depth = params.depth();
    let d = features.nrows();
    let n = features.ncols();

    let mut value = 0.0;
    let mut stage_costs = Vec::with_capacity(depth);
    let mut stage_grads = Vec::with_capacity(depth);
    let mut penalties = Vec::with_capacity(depth);
    for k in 0..depth {
        let (cost, grad) = match spec.stage_mode {
            StageMode::None => (0.0, Array2::zeros((d, n))),
            StageMode::SoftCe => mean_loss_and_grad(trajectory.state(k), labels, smoothing, true, 1.0),
            StageMode::HardCe => {
                mean_loss_and_grad(trajectory.state(k), labels, smoothing, false, 1.0)
            }
        };
        if !cost.is_finite() {
            return Err(TrainError::NonFinite { term: format!("stage cost at layer {k}") });
        }
        let pen = params.layers()[k].norm_sq();
        if !pen.is_finite() {
            return Err(TrainError::NonFinite { term: format!("input penalty at layer {k}") });
        }
        value += cost;
        if spec.penalty_mode == PenaltyMode::ObjectiveTerm {
            value += spec.reg_r * pen;
        }
        stage_costs.push(cost);
        stage_grads.push(grad);
        penalties.push(pen);
    }

    let soft_terminal = spec.terminal_loss == TerminalLoss::SoftCe;
    let (terminal_loss, terminal_grad) =
        mean_loss_and_grad(trajectory.terminal(), labels, smoothing, soft_terminal, spec.gamma);
    if !terminal_loss.is_finite() {
        return Err(TrainError::NonFinite { term: "terminal loss".to_string() });
    }
    value += spec.gamma * terminal_loss;
    if !value.is_finite() {
        return Err(TrainError::NonFinite { term: "objective total".to_string() });
    }

    let penalty_grads = if spec.penalty_mode == PenaltyMode::ObjectiveTerm && spec.reg_r > 0.0 {
        let mut pg = ParamGradient::zeros_like(params);
        for (gl, pl) in pg.layers_mut().iter_mut().zip(params.layers()) {
            for ((gs, _), (ps, _)) in gl.slices_mut().into_iter().zip(pl.slices()) {
                linalg::axpy(2.0 * spec.reg_r, ps, gs);
            }
        }
        Some(pg)
    } else {
        None
    };

    let correct = count_correct(trajectory.terminal(), labels, c);
    Ok(ObjectiveInternals {
        eval: ObjectiveEval {
            value,
            terminal_loss,
            stage_costs,
            penalties,
            stage_grads,
            terminal_grad,
            penalty_grads,
            trajectory,
        },
        caches,
        correct,
    })
}

/// Assembles the objective at `params` on the given data: the scalar value
/// plus the per-layer state gradients, terminal state gradient and parameter
/// penalty gradients needed by [`crate::resnet::backward`].
pub fn objective(
    params: &NetworkParams,
    features: &Array2<f64>,
    labels: &[usize],
    spec: &ObjectiveSpec,
    smoothing: &SmoothingSpec,
) -> Result<ObjectiveEval, TrainError> {
    objective_internal(params, features, labels, spec, smoothing).map(|i| i.eval)
}

/// Adam optimizer state: hyperparameters plus first/second moment trees.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    m: ParamGradient,
    v: ParamGradient,
}

impl OptimizerState {
    pub fn new(learning_rate: f64, params: &NetworkParams) -> Result<Self, TrainError> {
        if !learning_rate.is_finite() || learning_rate <= 0.0 {
            return Err(TrainError::BadValue { what: "learning_rate", value: learning_rate });
        }
        Ok(OptimizerState {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: ParamGradient::zeros_like(params),
            v: ParamGradient::zeros_like(params),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One Adam update with bias correction, applied in place. In decoupled decay
/// mode pass `decay_r > 0`: parameters are additionally scaled by
/// `1 - lr * decay_r` after the Adam step (biases only if `decay_biases`).
pub fn adam_step(
    opt: &mut OptimizerState,
    params: &mut NetworkParams,
    grads: &ParamGradient,
    decay_r: f64,
    decay_biases: bool,
) -> Result<(), TrainError> {
    if grads.layers().len() != params.depth() {
        return Err(TrainError::GradientShape(format!(
            "{} gradient layers for depth {}",
            grads.layers().len(),
            params.depth()
        )));
    }
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let lr = opt.learning_rate;
    let shrink = 1.0 - lr * decay_r;
    for (((pl, gl), ml), vl) in params
        .layers_mut()
        .iter_mut()
        .zip(grads.layers())
        .zip(opt.m.layers_mut())
        .zip(opt.v.layers_mut())
    {
        let g_slices = gl.slices();
        let mut m_slices = ml.slices_mut();
        let mut v_slices = vl.slices_mut();
        for (ai, (ps, is_weight)) in pl.slices_mut().into_iter().enumerate() {
            let (gs, _) = g_slices[ai];
            let (ms, _) = &mut m_slices[ai];
            let (vs, _) = &mut v_slices[ai];
            if gs.len() != ps.len() {
                return Err(TrainError::GradientShape(format!(
                    "gradient array length {} vs parameter length {}",
                    gs.len(),
                    ps.len()
                )));
            }
            for i in 0..ps.len() {
                let g = gs[i];
                ms[i] = opt.beta1 * ms[i] + (1.0 - opt.beta1) * g;
                vs[i] = opt.beta2 * vs[i] + (1.0 - opt.beta2) * g * g;
                let m_hat = ms[i] / bc1;
                let v_hat = vs[i] / bc2;
                ps[i] -= lr * m_hat / (v_hat.sqrt() + opt.epsilon);
                if decay_r > 0.0 && (is_weight || decay_biases) {
                    ps[i] *= shrink;
                }
            }
        }
    }
    Ok(())
}

/// Training configuration: objective, optimizer scalars, schedule and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub objective: ObjectiveSpec,
    pub learning_rate: f64,
    pub epochs: usize,
    /// 0 means full batch.
    pub batch_size: usize,
    pub seed: u64,
}

/// Per-epoch summary. With mini-batches each entry is the sample-weighted
/// mean over that epoch's batch evaluations.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub objective: f64,
    pub terminal_loss: f64,
    /// Mean over layers of the dataset-mean stage cost.
    pub mean_stage_cost: f64,
    pub accuracy: f64,
}

/// Outcome of [`fit`]: the (possibly partially) trained parameters, the
/// per-epoch history, and the failure that stopped training early, if any.
#[derive(Debug)]
pub struct FitResult {
    pub params: NetworkParams,
    pub history: Vec<EpochStats>,
    pub failure: Option<TrainError>,
}

const SHUFFLE_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Runs `epochs` of (mini-)batch Adam steps. Batch shuffling uses the seeded
/// generator, so identical inputs and seed give a bitwise-identical history.
/// A non-finite objective aborts training, returning the history of the
/// completed epochs together with the failure.
pub fn fit(
    params: NetworkParams,
    dataset: &Dataset,
    smoothing: &SmoothingSpec,
    run: &TrainRun,
) -> FitResult {
    let mut params = params;
    if dataset.num_classes() != smoothing.num_classes() {
        return FitResult {
            params,
            history: Vec::new(),
            failure: Some(TrainError::ClassMismatch {
                spec_classes: smoothing.num_classes(),
                data_classes: dataset.num_classes(),
            }),
        };
    }
    let d = dataset.len();
    let mut opt = match OptimizerState::new(run.learning_rate, &params) {
        Ok(o) => o,
        Err(e) => return FitResult { params, history: Vec::new(), failure: Some(e) },
    };
    let decay_r = match run.objective.penalty_mode {
        PenaltyMode::OptimizerDecay => run.objective.reg_r,
        PenaltyMode::ObjectiveTerm => 0.0,
    };
    let batch = if run.batch_size == 0 { d } else { run.batch_size.min(d) };
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ SHUFFLE_SALT);
    let mut order: Vec<usize> = (0..d).collect();
    let mut history = Vec::with_capacity(run.epochs);

    for epoch in 0..run.epochs {
        if batch < d {
            order.shuffle(&mut rng);
        }
        let mut obj_sum = 0.0;
        let mut term_sum = 0.0;
        let mut stage_sum = 0.0;
        let mut correct = 0usize;
        for idx in order.chunks(batch) {
            let (features, labels) = dataset.gather(idx);
            let internals =
                match objective_internal(&params, &features, &labels, &run.objective, smoothing) {
                    Ok(i) => i,
                    Err(e) => {
                        return FitResult { params, history, failure: Some(e) };
                    }
                };
            let grads = match backward_cached(
                &params,
                &internals.eval.trajectory,
                &internals.caches,
                &internals.eval.terminal_grad,
                &internals.eval.stage_grads,
                internals.eval.penalty_grads.as_ref(),
            ) {
                Ok(g) => g,
                Err(e) => {
                    return FitResult { params, history, failure: Some(e.into()) };
                }
            };
            if let Err(e) =
                adam_step(&mut opt, &mut params, &grads, decay_r, run.objective.decay_biases)
            {
                return FitResult { params, history, failure: Some(e) };
            }
            let w = idx.len() as f64;
            obj_sum += internals.eval.value * w;
            term_sum += internals.eval.terminal_loss * w;
            let layer_mean = if internals.eval.stage_costs.is_empty() {
                0.0
            } else {
                internals.eval.stage_costs.iter().sum::<f64>()
                    / internals.eval.stage_costs.len() as f64
            };
            stage_sum += layer_mean * w;
            correct += internals.correct;
        }
        history.push(EpochStats {
            epoch,
            objective: obj_sum / d as f64,
            terminal_loss: term_sum / d as f64,
            mean_stage_cost: stage_sum / d as f64,
            accuracy: correct as f64 / d as f64,
        });
    }
    FitResult { params, history, failure: None }
}

fn count_correct(terminal: &Array2<f64>, labels: &[usize], num_classes: usize) -> usize {
    let mut correct = 0;
    for (row, &label) in terminal.rows().into_iter().zip(labels) {
        let slice = &row.as_slice().unwrap()[..num_classes];
        let mut best = 0usize;
        for (j, &v) in slice.iter().enumerate() {
            if v > slice[best] {
                best = j;
            }
        }
        if best + 1 == label {
            correct += 1;
        }
    }
    correct
}

/// Fraction of samples whose terminal-state argmax over the class slice
/// matches the label; ties go to the lowest class index.
pub fn accuracy(
    params: &NetworkParams,
    dataset: &Dataset,
    smoothing: &SmoothingSpec,
) -> Result<f64, TrainError> {
    if dataset.num_classes() != smoothing.num_classes() {
        return Err(TrainError::ClassMismatch {
            spec_classes: smoothing.num_classes(),
            data_classes: dataset.num_classes(),
        });
    }
    let traj = crate::resnet::forward_ensemble(params, dataset.features())?;
    Ok(count_correct(traj.terminal(), dataset.labels(), dataset.num_classes()) as f64
        / dataset.len() as f64)
}

/// History CSV: one row per epoch.
pub fn write_history_csv(history: &[EpochStats], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("epoch,objective,terminal_loss,mean_stage_cost,accuracy\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch, h.objective, h.terminal_loss, h.mean_stage_cost, h.accuracy
        ));
    }
    fs::File::create(path)?.write_all(out.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resnet::{Activation, Arch};
    use crate::softce::MinimizerLine;

    fn plain(n: usize, act: Activation) -> Arch {
        Arch::Plain { state_dim: n, activation: act }
    }

    #[test]
    fn objective_zero_at_minimizers_with_zero_params() {
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let spec = ObjectiveSpec::new(1.0, 0.0, StageMode::None, PenaltyMode::ObjectiveTerm)
            .unwrap();
        let l1 = MinimizerLine::new(1, &smoothing).unwrap();
        let l2 = MinimizerLine::new(2, &smoothing).unwrap();
        let mut features = Array2::zeros((2, 2));
        features.row_mut(0).assign(&ndarray::Array1::from(l1.point_at(0.3)));
        features.row_mut(1).assign(&ndarray::Array1::from(l2.point_at(-1.0)));
        let params = NetworkParams::zeros(plain(2, Activation::Tanh), 3);
        let eval = objective(&params, &features, &[1, 2], &spec, &smoothing).unwrap();
        assert!(eval.value.abs() < 1e-9);
    }

    #[test]
    fn objective_pure_penalty() {
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let spec = ObjectiveSpec::new(0.0, 1.0, StageMode::None, PenaltyMode::ObjectiveTerm)
            .unwrap();
        let params = NetworkParams::random_init(plain(2, Activation::Identity), 4, 11);
        let features = Array2::zeros((3, 2));
        let eval = objective(&params, &features, &[1, 2, 1], &spec, &smoothing).unwrap();
        let expect: f64 = params.layers().iter().map(|l| l.norm_sq()).sum();
        assert!((eval.value - expect).abs() < 1e-12 * (1.0 + expect.abs()));
    }

    #[test]
    fn optimizer_decay_mode_excludes_penalty_from_value() {
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let spec = ObjectiveSpec::new(0.0, 1.0, StageMode::None, PenaltyMode::OptimizerDecay)
            .unwrap();
        let params = NetworkParams::random_init(plain(2, Activation::Identity), 4, 11);
        let features = Array2::zeros((3, 2));
        let eval = objective(&params, &features, &[1, 2, 1], &spec, &smoothing).unwrap();
        assert_eq!(eval.value, 0.0 + eval.terminal_loss * 0.0);
        assert!(eval.penalty_grads.is_none());
        assert!(eval.penalties.iter().all(|&p| p > 0.0));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let params0 = NetworkParams::random_init(plain(2, Activation::Tanh), 2, 5);
        let mut params = params0.clone();
        let mut opt = OptimizerState::new(0.1, &params).unwrap();
        let grads = ParamGradient::zeros_like(&params);
        adam_step(&mut opt, &mut params, &grads, 0.0, true).unwrap();
        assert_eq!(params, params0);
    }

    #[test]
    fn adam_steps_match_hand_evaluated_recurrences() {
        // Single scalar parameter, g = 1, lr = 0.1: bias-corrected first step
        // moves by lr * 1 / (1 + eps).
        let arch = plain(1, Activation::Identity);
        let mut params = NetworkParams::zeros(arch, 1);
        let mut opt = OptimizerState::new(0.1, &params).unwrap();
        let mut grads = ParamGradient::zeros_like(&params);
        grads.layers_mut()[0].slices_mut()[1].0[0] = 1.0; // bias entry
        adam_step(&mut opt, &mut params, &grads, 0.0, true).unwrap();
        let got = params.layers()[0].slices()[1].0[0];
        let expect = -0.1 * 1.0 / (1.0 + 1e-8);
        assert!((got - expect).abs() < 1e-15);

        // Second step, constant gradient: follow the recurrences by hand.
        adam_step(&mut opt, &mut params, &grads, 0.0, true).unwrap();
        let m2 = 0.9 * 0.1 + 0.1; // = 0.19
        let v2 = 0.999 * 0.001 + 0.001;
        let m_hat = m2 / (1.0 - 0.9f64.powi(2));
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let expect2 = expect - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        let got2 = params.layers()[0].slices()[1].0[0];
        assert!((got2 - expect2).abs() < 1e-12);
    }

    #[test]
    fn decoupled_decay_shrinks_params_under_zero_gradient() {
        let arch = plain(2, Activation::Identity);
        let mut params = NetworkParams::random_init(arch, 1, 3);
        let before = params.clone();
        let mut opt = OptimizerState::new(0.01, &params).unwrap();
        let grads = ParamGradient::zeros_like(&params);
        adam_step(&mut opt, &mut params, &grads, 0.5, true).unwrap();
        let shrink = 1.0 - 0.01 * 0.5;
        for (l0, l1) in before.layers().iter().zip(params.layers()) {
            for ((s0, _), (s1, _)) in l0.slices().into_iter().zip(l1.slices()) {
                for (a, b) in s0.iter().zip(s1) {
                    assert!((a * shrink - b).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn fit_zero_epochs_is_identity() {
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let ds = crate::data::two_spirals(8, 0.0, 1.0, 1);
        let params = NetworkParams::random_init(plain(2, Activation::Tanh), 2, 9);
        let run = TrainRun {
            objective: ObjectiveSpec::new(1.0, 0.0, StageMode::SoftCe, PenaltyMode::ObjectiveTerm)
                .unwrap(),
            learning_rate: 0.05,
            epochs: 0,
            batch_size: 0,
            seed: 0,
        };
        let out = fit(params.clone(), &ds, &smoothing, &run);
        assert!(out.failure.is_none());
        assert!(out.history.is_empty());
        assert_eq!(out.params, params);
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let ds = crate::data::two_spirals(12, 0.02, 1.5, 2);
        let arch = Arch::Bottleneck {
            state_dim: 2,
            hidden_dim: 4,
            act_hidden: Activation::Tanh,
            act_out: Activation::Identity,
        };
        let run = TrainRun {
            objective: ObjectiveSpec::new(2.0, 0.01, StageMode::SoftCe, PenaltyMode::ObjectiveTerm)
                .unwrap(),
            learning_rate: 0.05,
            epochs: 12,
            batch_size: 8,
            seed: 77,
        };
        let p0 = NetworkParams::random_init(arch, 4, 5);
        let a = fit(p0.clone(), &ds, &smoothing, &run);
        let b = fit(p0, &ds, &smoothing, &run);
        assert!(a.failure.is_none());
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn fit_reports_divergence_with_history() {
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let ds = crate::data::two_spirals(4, 0.0, 1.0, 1);
        // Identity activation with huge learning rate blows up quickly.
        let params = NetworkParams::random_init(plain(2, Activation::Identity), 3, 1);
        let run = TrainRun {
            objective: ObjectiveSpec::new(5.0, 0.0, StageMode::HardCe, PenaltyMode::ObjectiveTerm)
                .unwrap(),
            learning_rate: 1e150,
            epochs: 50,
            batch_size: 0,
            seed: 0,
        };
        let out = fit(params, &ds, &smoothing, &run);
        assert!(out.failure.is_some());
        assert!(out.history.len() < 50);
    }

    #[test]
    fn accuracy_on_minimizer_base_points_and_tie_break() {
        let smoothing = SmoothingSpec::new(3, 0.9).unwrap();
        let mut features = Array2::zeros((3, 3));
        for label in 1..=3usize {
            let line = MinimizerLine::new(label, &smoothing).unwrap();
            features
                .row_mut(label - 1)
                .assign(&ndarray::Array1::from(line.base_point().to_vec()));
        }
        let ds = crate::data::Dataset::new(features, vec![1, 2, 3], 3).unwrap();
        let params = NetworkParams::zeros(plain(3, Activation::Tanh), 2);
        assert_eq!(accuracy(&params, &ds, &smoothing).unwrap(), 1.0);

        // All-equal components predict class 1 by the tie-break.
        let flat = crate::data::Dataset::new(Array2::zeros((1, 3)), vec![1], 3).unwrap();
        assert_eq!(accuracy(&params, &flat, &smoothing).unwrap(), 1.0);
        let flat2 = crate::data::Dataset::new(Array2::zeros((1, 3)), vec![2], 3).unwrap();
        assert_eq!(accuracy(&params, &flat2, &smoothing).unwrap(), 0.0);
    }
}
