//! Residual architectures as controlled discrete-time dynamical systems.
//!
//! A depth-`N` network propagates a state through `N` residual layers,
//! `x_{k+1} = x_k + sigma(A_k x_k + b_k)` in the plain architecture or
//! `x_{k+1} = x_k + sigma2(A_{k,2} sigma1(A_{k,1} x_k + b_{k,1}) + b_{k,2})`
//! in the bottleneck variant that routes through a hidden dimension. All
//! supported activations satisfy `sigma(0) = 0`, so zero parameters make every
//! state a fixed point and the network can represent the identity map --
//! the property the dissipativity analysis rests on.
//!
//! The whole dataset is propagated as an ensemble sharing one parameter
//! sequence. [`forward_ensemble`] records every intermediate state;
//! [`backward`] runs the adjoint recursion for any scalar objective whose
//! per-layer state sensitivities the caller supplies, which keeps the stage
//! cost choice out of this module.
//!
//! Sample processing may be parallelized internally, but every floating-point
//! reduction has a fixed order: identical parameters and inputs give
//! bitwise-identical trajectories and gradients regardless of thread count.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg;

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("layer {layer}: {what} has shape {got:?}, expected {expected:?}")]
    BadShape { layer: usize, what: &'static str, expected: Vec<usize>, got: Vec<usize> },
    #[error("layer {layer}: parameter variant does not match the {arch} architecture")]
    LayerVariantMismatch { layer: usize, arch: &'static str },
    #[error("layer {layer}: non-finite parameter entry")]
    NonFiniteParam { layer: usize },
    #[error("feature dimension {got} does not match state dimension {expected}")]
    FeatureDimMismatch { expected: usize, got: usize },
    #[error("non-finite state at layer {layer}, sample {sample} (diverged)")]
    NonFiniteState { layer: usize, sample: usize },
    #[error("trajectory does not match parameters: {0}")]
    TrajectoryMismatch(String),
    #[error("requested depth {requested} out of range 0..={max}")]
    DepthOutOfRange { requested: usize, max: usize },
    #[error("bottleneck architecture requires hidden_dim >= 1")]
    MissingHiddenDim,
}

/// Scalar activation applied element-wise. Every kind fixes the origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Identity => z,
            Activation::Tanh => z.tanh(),
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative expressed through the activation output. For ReLU the
    /// subgradient at 0 is taken as 0.
    pub fn derivative_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Tanh => 1.0 - a * a,
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "identity" => Some(Activation::Identity),
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Architecture: dimensions and activations shared by all layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Arch {
    Plain { state_dim: usize, activation: Activation },
    Bottleneck {
        state_dim: usize,
        hidden_dim: usize,
        act_hidden: Activation,
        act_out: Activation,
    },
}

impl Arch {
    pub fn state_dim(&self) -> usize {
        match self {
            Arch::Plain { state_dim, .. } => *state_dim,
            Arch::Bottleneck { state_dim, .. } => *state_dim,
        }
    }

    pub fn hidden_dim(&self) -> Option<usize> {
        match self {
            Arch::Plain { .. } => None,
            Arch::Bottleneck { hidden_dim, .. } => Some(*hidden_dim),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Arch::Plain { .. } => "plain",
            Arch::Bottleneck { .. } => "bottleneck",
        }
    }

    /// Length of the vectorized per-layer input `u_k` (weights then biases).
    pub fn input_dim(&self) -> usize {
        match self {
            Arch::Plain { state_dim: n, .. } => n * n + n,
            Arch::Bottleneck { state_dim: n, hidden_dim: h, .. } => 2 * h * n + h + n,
        }
    }
}

/// Parameters of one residual layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LayerParams {
    Plain { weight: Array2<f64>, bias: Array1<f64> },
    Bottleneck {
        w_in: Array2<f64>,
        b_in: Array1<f64>,
        w_out: Array2<f64>,
        b_out: Array1<f64>,
    },
}

impl LayerParams {
    fn zeros(arch: &Arch) -> Self {
        match arch {
            Arch::Plain { state_dim: n, .. } => LayerParams::Plain {
                weight: Array2::zeros((*n, *n)),
                bias: Array1::zeros(*n),
            },
            Arch::Bottleneck { state_dim: n, hidden_dim: h, .. } => LayerParams::Bottleneck {
                w_in: Array2::zeros((*h, *n)),
                b_in: Array1::zeros(*h),
                w_out: Array2::zeros((*n, *h)),
                b_out: Array1::zeros(*n),
            },
        }
    }

    /// Parameter arrays in the fixed vectorization order, with a weight flag
    /// so decoupled decay can skip biases.
    pub(crate) fn slices(&self) -> Vec<(&[f64], bool)> {
        match self {
            LayerParams::Plain { weight, bias } => vec![
                (weight.as_slice().unwrap(), true),
                (bias.as_slice().unwrap(), false),
            ],
            LayerParams::Bottleneck { w_in, b_in, w_out, b_out } => vec![
                (w_in.as_slice().unwrap(), true),
                (b_in.as_slice().unwrap(), false),
                (w_out.as_slice().unwrap(), true),
                (b_out.as_slice().unwrap(), false),
            ],
        }
    }

    pub(crate) fn slices_mut(&mut self) -> Vec<(&mut [f64], bool)> {
        match self {
            LayerParams::Plain { weight, bias } => vec![
                (weight.as_slice_mut().unwrap(), true),
                (bias.as_slice_mut().unwrap(), false),
            ],
            LayerParams::Bottleneck { w_in, b_in, w_out, b_out } => vec![
                (w_in.as_slice_mut().unwrap(), true),
                (b_in.as_slice_mut().unwrap(), false),
                (w_out.as_slice_mut().unwrap(), true),
                (b_out.as_slice_mut().unwrap(), false),
            ],
        }
    }

    /// Squared norm of the vectorized layer input `||u_k||^2`, biases included.
    pub fn norm_sq(&self) -> f64 {
        self.slices().iter().map(|(s, _)| linalg::norm_sq(s)).sum()
    }

    fn validate(&self, layer: usize, arch: &Arch) -> Result<(), NetError> {
        let shape_err = |what, expected: Vec<usize>, got: Vec<usize>| NetError::BadShape {
            layer,
            what,
            expected,
            got,
        };
        match (self, arch) {
            (LayerParams::Plain { weight, bias }, Arch::Plain { state_dim: n, .. }) => {
                if weight.dim() != (*n, *n) {
                    return Err(shape_err(
                        "weight",
                        vec![*n, *n],
                        vec![weight.nrows(), weight.ncols()],
                    ));
                }
                if bias.len() != *n {
                    return Err(shape_err("bias", vec![*n], vec![bias.len()]));
                }
            }
            (
                LayerParams::Bottleneck { w_in, b_in, w_out, b_out },
                Arch::Bottleneck { state_dim: n, hidden_dim: h, .. },
            ) => {
                if w_in.dim() != (*h, *n) {
                    return Err(shape_err("w_in", vec![*h, *n], vec![w_in.nrows(), w_in.ncols()]));
                }
                if b_in.len() != *h {
                    return Err(shape_err("b_in", vec![*h], vec![b_in.len()]));
                }
                if w_out.dim() != (*n, *h) {
                    return Err(shape_err(
                        "w_out",
                        vec![*n, *h],
                        vec![w_out.nrows(), w_out.ncols()],
                    ));
                }
                if b_out.len() != *n {
                    return Err(shape_err("b_out", vec![*n], vec![b_out.len()]));
                }
            }
            _ => return Err(NetError::LayerVariantMismatch { layer, arch: arch.name() }),
        }
        for (s, _) in self.slices() {
            if s.iter().any(|v| !v.is_finite()) {
                return Err(NetError::NonFiniteParam { layer });
            }
        }
        Ok(())
    }
}

/// All network parameters: the architecture plus one [`LayerParams`] per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    arch: Arch,
    layers: Vec<LayerParams>,
}

impl NetworkParams {
    pub fn zeros(arch: Arch, depth: usize) -> Self {
        let layers = (0..depth).map(|_| LayerParams::zeros(&arch)).collect();
        NetworkParams { arch, layers }
    }

    /// Weights i.i.d. uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`, biases
    /// zero; the draw order is fixed (layers ascending, matrices row-major),
    /// so a seed pins the full initialization.
    pub fn random_init(arch: Arch, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = NetworkParams::zeros(arch, depth);
        for layer in &mut params.layers {
            match layer {
                LayerParams::Plain { weight, bias: _ } => {
                    fill_uniform(weight, &mut rng);
                }
                LayerParams::Bottleneck { w_in, w_out, .. } => {
                    fill_uniform(w_in, &mut rng);
                    fill_uniform(w_out, &mut rng);
                }
            }
        }
        params
    }

    pub fn from_layers(arch: Arch, layers: Vec<LayerParams>) -> Result<Self, NetError> {
        if let Arch::Bottleneck { hidden_dim: 0, .. } = arch {
            return Err(NetError::MissingHiddenDim);
        }
        for (k, layer) in layers.iter().enumerate() {
            layer.validate(k, &arch)?;
        }
        Ok(NetworkParams { arch, layers })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn state_dim(&self) -> usize {
        self.arch.state_dim()
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    /// Network keeping only layers `0..depth`.
    pub fn truncated(&self, depth: usize) -> Result<Self, NetError> {
        if depth > self.depth() {
            return Err(NetError::DepthOutOfRange { requested: depth, max: self.depth() });
        }
        Ok(NetworkParams { arch: self.arch.clone(), layers: self.layers[..depth].to_vec() })
    }

    /// Sum over layers of `||u_k||^2`.
    pub fn total_norm_sq(&self) -> f64 {
        self.layers.iter().map(LayerParams::norm_sq).sum()
    }
}

fn fill_uniform(w: &mut Array2<f64>, rng: &mut ChaCha8Rng) {
    let fan_in = w.ncols() as f64;
    let bound = 1.0 / fan_in.sqrt();
    for v in w.as_slice_mut().unwrap() {
        *v = rng.gen_range(-bound..=bound);
    }
}

/// Gradient of a scalar objective with respect to every network parameter;
/// same tree shape as [`NetworkParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    layers: Vec<LayerParams>,
}

impl ParamGradient {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        ParamGradient {
            layers: (0..params.depth()).map(|_| LayerParams::zeros(&params.arch)).collect(),
        }
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [LayerParams] {
        &mut self.layers
    }

    /// Max absolute entry; handy for convergence diagnostics and tests.
    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.slices())
            .flat_map(|(s, _)| s.iter().copied())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Per-layer states of the whole dataset: `states[0]` is the feature matrix,
/// `states[k+1]` the image of `states[k]` under layer `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleTrajectory {
    states: Vec<Array2<f64>>,
}

impl EnsembleTrajectory {
    /// Number of residual layers (states run `0..=depth`).
    pub fn depth(&self) -> usize {
        self.states.len() - 1
    }

    pub fn num_samples(&self) -> usize {
        self.states[0].nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.states[0].ncols()
    }

    pub fn state(&self, k: usize) -> &Array2<f64> {
        &self.states[k]
    }

    pub fn states(&self) -> &[Array2<f64>] {
        &self.states
    }

    pub fn terminal(&self) -> &Array2<f64> {
        self.states.last().unwrap()
    }
}

/// Post-activation values of one layer for the whole batch; enough to rebuild
/// every activation derivative without storing pre-activations.
#[derive(Debug, Clone)]
pub(crate) enum LayerCache {
    Plain { act: Array2<f64> },
    Bottleneck { act_hidden: Array2<f64>, act_out: Array2<f64> },
}

/// One layer applied to a single state vector.
pub fn layer_forward(
    x: &[f64],
    layer: &LayerParams,
    arch: &Arch,
) -> Result<Vec<f64>, NetError> {
    if x.len() != arch.state_dim() {
        return Err(NetError::FeatureDimMismatch { expected: arch.state_dim(), got: x.len() });
    }
    layer.validate(0, arch)?;
    match (layer, arch) {
        (LayerParams::Plain { weight, bias }, Arch::Plain { activation, .. }) => {
            let mut z = vec![0.0; x.len()];
            linalg::matvec(weight.view(), x, &mut z);
            Ok(x.iter()
                .zip(z.iter().zip(bias.iter()))
                .map(|(&xi, (&zi, &bi))| xi + activation.apply(zi + bi))
                .collect())
        }
        (
            LayerParams::Bottleneck { w_in, b_in, w_out, b_out },
            Arch::Bottleneck { act_hidden, act_out, .. },
        ) => {
            let mut hidden = vec![0.0; w_in.nrows()];
            linalg::matvec(w_in.view(), x, &mut hidden);
            for (hi, &bi) in hidden.iter_mut().zip(b_in.iter()) {
                *hi = act_hidden.apply(*hi + bi);
            }
            let mut out = vec![0.0; x.len()];
            linalg::matvec(w_out.view(), &hidden, &mut out);
            Ok(x.iter()
                .zip(out.iter().zip(b_out.iter()))
                .map(|(&xi, (&oi, &bi))| xi + act_out.apply(oi + bi))
                .collect())
        }
        _ => Err(NetError::LayerVariantMismatch { layer: 0, arch: arch.name() }),
    }
}

fn apply_layer_batch(
    layer: &LayerParams,
    arch: &Arch,
    x: &Array2<f64>,
) -> (Array2<f64>, LayerCache) {
    match (layer, arch) {
        (LayerParams::Plain { weight, bias }, Arch::Plain { activation, .. }) => {
            let mut act = linalg::batch_matvec(weight.view(), x.view());
            let bs = bias.as_slice().unwrap();
            for row in act.rows_mut() {
                let row = row.into_slice().unwrap();
                for (v, &b) in row.iter_mut().zip(bs) {
                    *v = activation.apply(*v + b);
                }
            }
            let next = x + &act;
            (next, LayerCache::Plain { act })
        }
        (
            LayerParams::Bottleneck { w_in, b_in, w_out, b_out },
            Arch::Bottleneck { act_hidden, act_out, .. },
        ) => {
            let mut hidden = linalg::batch_matvec(w_in.view(), x.view());
            let b1 = b_in.as_slice().unwrap();
            for row in hidden.rows_mut() {
                let row = row.into_slice().unwrap();
                for (v, &b) in row.iter_mut().zip(b1) {
                    *v = act_hidden.apply(*v + b);
                }
            }
            let mut out = linalg::batch_matvec(w_out.view(), hidden.view());
            let b2 = b_out.as_slice().unwrap();
            for row in out.rows_mut() {
                let row = row.into_slice().unwrap();
                for (v, &b) in row.iter_mut().zip(b2) {
                    *v = act_out.apply(*v + b);
                }
            }
            let next = x + &out;
            (next, LayerCache::Bottleneck { act_hidden: hidden, act_out: out })
        }
        _ => unreachable!("layer variants validated against arch"),
    }
}

fn find_non_finite(m: &Array2<f64>) -> Option<usize> {
    let cols = m.ncols();
    m.as_slice()
        .unwrap()
        .iter()
        .position(|v| !v.is_finite())
        .map(|pos| pos / cols)
}

pub(crate) fn forward_ensemble_cached(
    params: &NetworkParams,
    features: &Array2<f64>,
) -> Result<(EnsembleTrajectory, Vec<LayerCache>), NetError> {
    if features.ncols() != params.state_dim() {
        return Err(NetError::FeatureDimMismatch {
            expected: params.state_dim(),
            got: features.ncols(),
        });
    }
    for (k, layer) in params.layers.iter().enumerate() {
        layer.validate(k, &params.arch)?;
    }
    if let Some(sample) = find_non_finite(features) {
        return Err(NetError::NonFiniteState { layer: 0, sample });
    }
    let mut states = Vec::with_capacity(params.depth() + 1);
    let mut caches = Vec::with_capacity(params.depth());
    states.push(features.clone());
    for (k, layer) in params.layers.iter().enumerate() {
        let (next, cache) = apply_layer_batch(layer, &params.arch, states.last().unwrap());
        if let Some(sample) = find_non_finite(&next) {
            return Err(NetError::NonFiniteState { layer: k + 1, sample });
        }
        states.push(next);
        caches.push(cache);
    }
    Ok((EnsembleTrajectory { states }, caches))
}

/// Propagates every sample of `features` through all layers under the shared
/// per-layer parameters, recording each intermediate state. Aborts with the
/// layer and sample index if any state turns non-finite.
pub fn forward_ensemble(
    params: &NetworkParams,
    features: &Array2<f64>,
) -> Result<EnsembleTrajectory, NetError> {
    forward_ensemble_cached(params, features).map(|(t, _)| t)
}

fn derivative_inplace(act: Activation, m: &mut Array2<f64>) {
    for v in m.as_slice_mut().unwrap() {
        *v = act.derivative_from_output(*v);
    }
}

pub(crate) fn backward_cached(
    params: &NetworkParams,
    trajectory: &EnsembleTrajectory,
    caches: &[LayerCache],
    terminal_grad: &Array2<f64>,
    stage_grads: &[Array2<f64>],
    param_penalty_grads: Option<&ParamGradient>,
) -> Result<ParamGradient, NetError> {
    let depth = params.depth();
    let d = trajectory.num_samples();
    let n = params.state_dim();
    if trajectory.depth() != depth {
        return Err(NetError::TrajectoryMismatch(format!(
            "trajectory depth {} vs network depth {}",
            trajectory.depth(),
            depth
        )));
    }
    if trajectory.state_dim() != n {
        return Err(NetError::TrajectoryMismatch(format!(
            "trajectory state dim {} vs network state dim {}",
            trajectory.state_dim(),
            n
        )));
    }
    if terminal_grad.dim() != (d, n) {
        return Err(NetError::TrajectoryMismatch(format!(
            "terminal gradient shape {:?}, expected ({d}, {n})",
            terminal_grad.dim()
        )));
    }
    if stage_grads.len() != depth {
        return Err(NetError::TrajectoryMismatch(format!(
            "{} stage gradients for {} layers",
            stage_grads.len(),
            depth
        )));
    }
    for (k, g) in stage_grads.iter().enumerate() {
        if g.dim() != (d, n) {
            return Err(NetError::TrajectoryMismatch(format!(
                "stage gradient {k} shape {:?}, expected ({d}, {n})",
                g.dim()
            )));
        }
    }

    let mut grad = ParamGradient::zeros_like(params);
    let mut lambda = terminal_grad.clone();
    for k in (0..depth).rev() {
        let x_k = trajectory.state(k);
        match (&params.layers[k], &caches[k], &mut grad.layers[k]) {
            (
                LayerParams::Plain { weight, .. },
                LayerCache::Plain { act },
                LayerParams::Plain { weight: gw, bias: gb },
            ) => {
                let act_arch = match &params.arch {
                    Arch::Plain { activation, .. } => *activation,
                    _ => unreachable!(),
                };
                let mut delta = act.clone();
                derivative_inplace(act_arch, &mut delta);
                delta *= &lambda;
                linalg::accumulate_outer(gw, delta.view(), x_k.view());
                *gb = Array1::from(linalg::column_sums(delta.view()));
                lambda += &linalg::batch_matvec_transpose(weight.view(), delta.view());
            }
            (
                LayerParams::Bottleneck { w_in, w_out, .. },
                LayerCache::Bottleneck { act_hidden, act_out },
                LayerParams::Bottleneck { w_in: gw1, b_in: gb1, w_out: gw2, b_out: gb2 },
            ) => {
                let (a1, a2) = match &params.arch {
                    Arch::Bottleneck { act_hidden, act_out, .. } => (*act_hidden, *act_out),
                    _ => unreachable!(),
                };
                let mut delta2 = act_out.clone();
                derivative_inplace(a2, &mut delta2);
                delta2 *= &lambda;
                linalg::accumulate_outer(gw2, delta2.view(), act_hidden.view());
                *gb2 = Array1::from(linalg::column_sums(delta2.view()));
                let mut delta1 = act_hidden.clone();
                derivative_inplace(a1, &mut delta1);
                delta1 *= &linalg::batch_matvec_transpose(w_out.view(), delta2.view());
                linalg::accumulate_outer(gw1, delta1.view(), x_k.view());
                *gb1 = Array1::from(linalg::column_sums(delta1.view()));
                lambda += &linalg::batch_matvec_transpose(w_in.view(), delta1.view());
            }
            _ => {
                return Err(NetError::TrajectoryMismatch(
                    "cache variant does not match layer".into(),
                ))
            }
        }
        lambda += &stage_grads[k];
    }

    if let Some(pen) = param_penalty_grads {
        if pen.layers.len() != depth {
            return Err(NetError::TrajectoryMismatch(format!(
                "{} penalty gradients for {} layers",
                pen.layers.len(),
                depth
            )));
        }
        for (gl, pl) in grad.layers.iter_mut().zip(&pen.layers) {
            for ((gs, _), (ps, _)) in gl.slices_mut().into_iter().zip(pl.slices()) {
                linalg::axpy(1.0, ps, gs);
            }
        }
    }
    Ok(grad)
}

/// Exact reverse-mode gradient of the scalar objective whose per-layer state
/// sensitivities are `stage_grads` (one `D x n` array per layer, evaluated at
/// the recorded states) and whose terminal sensitivity is `terminal_grad`.
/// `param_penalty_grads`, when given, is added to the result unchanged.
///
/// The adjoint recursion runs from the last layer down to the first; the
/// activation values are rebuilt from the recorded trajectory with the same
/// arithmetic as the forward pass.
pub fn backward(
    params: &NetworkParams,
    trajectory: &EnsembleTrajectory,
    terminal_grad: &Array2<f64>,
    stage_grads: &[Array2<f64>],
    param_penalty_grads: Option<&ParamGradient>,
) -> Result<ParamGradient, NetError> {
    let mut caches = Vec::with_capacity(params.depth());
    for (k, layer) in params.layers.iter().enumerate() {
        layer.validate(k, &params.arch)?;
        let (_, cache) = apply_layer_batch(layer, &params.arch, trajectory.state(k));
        caches.push(cache);
    }
    backward_cached(params, trajectory, &caches, terminal_grad, stage_grads, param_penalty_grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn plain_arch(n: usize, act: Activation) -> Arch {
        Arch::Plain { state_dim: n, activation: act }
    }

    fn bottleneck_arch(n: usize, h: usize, a1: Activation, a2: Activation) -> Arch {
        Arch::Bottleneck { state_dim: n, hidden_dim: h, act_hidden: a1, act_out: a2 }
    }

    #[test]
    fn zero_parameters_are_identity_both_architectures() {
        let x = vec![0.7, -3.1, 2.2];
        let plain = NetworkParams::zeros(plain_arch(3, Activation::Tanh), 1);
        let y = layer_forward(&x, &plain.layers()[0], plain.arch()).unwrap();
        assert_eq!(x, y);
        let bn = NetworkParams::zeros(bottleneck_arch(3, 5, Activation::Relu, Activation::Tanh), 1);
        let y = layer_forward(&x, &bn.layers()[0], bn.arch()).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn affine_shift_layer() {
        let arch = plain_arch(2, Activation::Identity);
        let layer = LayerParams::Plain {
            weight: Array2::zeros((2, 2)),
            bias: array![1.0, 0.0],
        };
        let y = layer_forward(&[0.25, -0.5], &layer, &arch).unwrap();
        assert_eq!(y, vec![1.25, -0.5]);
    }

    #[test]
    fn tanh_fixed_point_at_origin() {
        let arch = plain_arch(2, Activation::Tanh);
        let layer = LayerParams::Plain {
            weight: Array2::eye(2),
            bias: Array1::zeros(2),
        };
        let y = layer_forward(&[0.0, 0.0], &layer, &arch).unwrap();
        assert_eq!(y, vec![0.0, 0.0]);
    }

    #[test]
    fn shape_mismatch_identifies_layer() {
        let arch = plain_arch(3, Activation::Tanh);
        let bad = LayerParams::Plain { weight: Array2::zeros((2, 2)), bias: Array1::zeros(3) };
        let err = NetworkParams::from_layers(arch, vec![bad]).unwrap_err();
        assert!(matches!(err, NetError::BadShape { layer: 0, what: "weight", .. }));
    }

    #[test]
    fn ensemble_matches_single_sample_runs_bitwise() {
        let arch = bottleneck_arch(3, 4, Activation::Tanh, Activation::Identity);
        let params = NetworkParams::random_init(arch, 3, 99);
        let features = array![[0.1, -0.4, 0.9], [1.5, 0.0, -2.0], [-0.3, 0.8, 0.25]];
        let full = forward_ensemble(&params, &features).unwrap();
        for i in 0..3 {
            let single = features.row(i).to_owned().insert_axis(ndarray::Axis(0));
            let traj = forward_ensemble(&params, &single).unwrap();
            for k in 0..=params.depth() {
                assert_eq!(traj.state(k).row(0), full.state(k).row(i), "layer {k} sample {i}");
            }
        }
    }

    #[test]
    fn ensemble_zero_params_keeps_features() {
        let params = NetworkParams::zeros(plain_arch(2, Activation::Relu), 4);
        let features = array![[1.0, 2.0], [-1.0, 0.5]];
        let traj = forward_ensemble(&params, &features).unwrap();
        for k in 0..=4 {
            assert_eq!(traj.state(k), &features);
        }
    }

    #[test]
    fn divergence_reports_layer_and_sample() {
        let arch = plain_arch(1, Activation::Identity);
        let layer = LayerParams::Plain {
            weight: array![[1e308]],
            bias: array![0.0],
        };
        let params = NetworkParams::from_layers(arch, vec![layer.clone(), layer]).unwrap();
        let features = array![[0.0], [2.0]];
        let err = forward_ensemble(&params, &features).unwrap_err();
        // Sample 1 overflows in the first layer; sample 0 stays at zero.
        assert_eq!(err, NetError::NonFiniteState { layer: 1, sample: 1 });
    }

    #[test]
    fn backward_zero_state_grads_gives_zero_gradient() {
        let arch = bottleneck_arch(2, 3, Activation::Tanh, Activation::Identity);
        let params = NetworkParams::random_init(arch, 2, 17);
        let features = array![[0.3, -0.2], [1.0, 0.9]];
        let traj = forward_ensemble(&params, &features).unwrap();
        let zero = Array2::zeros((2, 2));
        let grads = backward(&params, &traj, &zero, &[zero.clone(), zero.clone()], None).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn determinism_bitwise_across_runs() {
        let arch = bottleneck_arch(4, 6, Activation::Tanh, Activation::Identity);
        let params = NetworkParams::random_init(arch, 5, 7);
        let features = Array2::from_shape_fn((40, 4), |(i, j)| ((i * 7 + j * 3) as f64).sin());
        let t1 = forward_ensemble(&params, &features).unwrap();
        let t2 = forward_ensemble(&params, &features).unwrap();
        assert_eq!(t1, t2);
        let tg = Array2::from_shape_fn((40, 4), |(i, j)| ((i + j) as f64).cos());
        let sg: Vec<Array2<f64>> = (0..5)
            .map(|k| Array2::from_shape_fn((40, 4), |(i, j)| ((i * k + j) as f64) * 1e-3))
            .collect();
        let g1 = backward(&params, &t1, &tg, &sg, None).unwrap();
        let g2 = backward(&params, &t2, &tg, &sg, None).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn truncated_keeps_prefix() {
        let params =
            NetworkParams::random_init(plain_arch(2, Activation::Tanh), 6, 3);
        let short = params.truncated(2).unwrap();
        assert_eq!(short.depth(), 2);
        assert_eq!(short.layers()[..2], params.layers()[..2]);
        assert!(params.truncated(7).is_err());
    }
}
