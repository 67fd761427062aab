//! Post-training diagnostics: layer profiles, dissipation checks, turnpike
//! detection and depth cropping.
//!
//! A trained network whose stage cost dominates a class-K function of the
//! distance to the minimizer set can only spend a bounded number of layers
//! far from that set. The profile records, per layer, how far the states sit
//! from their per-label minimizer lines and what the stage cost is; the
//! report derives the set `Q_eps` of layers within `eps`, the first layer
//! from which the trajectory stays inside (`entry_layer`), the cardinality
//! bound implied by dissipativity, and per-layer dissipation flags. Layers
//! past the turnpike entry act as near-identity maps and can be cropped.

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use crate::data::Dataset;
use crate::resnet::{forward_ensemble, NetError, NetworkParams};
use crate::softce::{
    invariance_transform, ClassKBound, MinimizerLine, SmoothingSpec, SoftCeError,
};
use crate::train::TrainError;

#[derive(Debug, Error)]
pub enum TurnpikeError {
    #[error("epsilon must be positive and finite, got {0}")]
    BadEpsilon(f64),
    #[error("smoothing spec has {spec_classes} classes but dataset has {data_classes}")]
    ClassMismatch { spec_classes: usize, data_classes: usize },
    #[error("entry layer {entry} plus margin {margin} exceeds network depth {depth}")]
    CropOutOfRange { entry: usize, margin: usize, depth: usize },
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    SoftCe(#[from] SoftCeError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Per-layer distance and cost profile of one network on one dataset.
///
/// Distances and stage costs cover every recorded state `k = 0..=N`;
/// parameter norms cover the layers `k = 0..N-1`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerProfile {
    mean_dist: Vec<f64>,
    max_dist: Vec<f64>,
    stacked_dist: Vec<f64>,
    stage_cost: Vec<f64>,
    param_norm: Vec<f64>,
    per_sample_dist: Vec<Vec<f64>>,
}

impl LayerProfile {
    /// Mean over samples of the distance to the per-label minimizer line.
    pub fn mean_dist(&self) -> &[f64] {
        &self.mean_dist
    }

    pub fn max_dist(&self) -> &[f64] {
        &self.max_dist
    }

    /// Distance of the stacked state to the product of minimizer lines,
    /// `sqrt(sum_i dist_i^2)`.
    pub fn stacked_dist(&self) -> &[f64] {
        &self.stacked_dist
    }

    /// Dataset-mean soft cross-entropy of the layer states.
    pub fn stage_cost(&self) -> &[f64] {
        &self.stage_cost
    }

    /// `||u_k||` per layer.
    pub fn param_norm(&self) -> &[f64] {
        &self.param_norm
    }

    /// Per-sample distances, one vector per recorded layer.
    pub fn per_sample_dist(&self) -> &[Vec<f64>] {
        &self.per_sample_dist
    }

    /// Number of residual layers.
    pub fn depth(&self) -> usize {
        self.param_norm.len()
    }
}

/// Runs the forward pass once and evaluates per-layer distances, stage costs
/// and parameter norms.
pub fn profile(
    params: &NetworkParams,
    dataset: &Dataset,
    smoothing: &SmoothingSpec,
) -> Result<LayerProfile, TurnpikeError> {
    let c = smoothing.num_classes();
    if dataset.num_classes() != c {
        return Err(TurnpikeError::ClassMismatch {
            spec_classes: c,
            data_classes: dataset.num_classes(),
        });
    }
    let trajectory = forward_ensemble(params, dataset.features())?;
    let bases: Vec<Vec<f64>> = (1..=c)
        .map(|label| MinimizerLine::new(label, smoothing).map(|l| l.base_point().to_vec()))
        .collect::<Result<_, _>>()?;
    let labels = dataset.labels();
    let d = dataset.len();

    let depth = params.depth();
    let mut mean_dist = Vec::with_capacity(depth + 1);
    let mut max_dist = Vec::with_capacity(depth + 1);
    let mut stacked_dist = Vec::with_capacity(depth + 1);
    let mut stage_cost = Vec::with_capacity(depth + 1);
    let mut per_sample_dist = Vec::with_capacity(depth + 1);
    for k in 0..=depth {
        let states = trajectory.state(k);
        let mut dists = Vec::with_capacity(d);
        let mut cost_sum = 0.0;
        for (row, &label) in states.rows().into_iter().zip(labels) {
            let slice = &row.as_slice().unwrap()[..c];
            let centered = invariance_transform(slice);
            let base = &bases[label - 1];
            let mut sq = 0.0;
            for (v, b) in centered.iter().zip(base) {
                let diff = v - b;
                sq += diff * diff;
            }
            dists.push(sq.sqrt());
            cost_sum += crate::softce::soft_ce(slice, label, smoothing)?;
        }
        let sum: f64 = dists.iter().sum();
        let max = dists.iter().copied().fold(0.0, f64::max);
        let stacked: f64 = dists.iter().map(|v| v * v).sum::<f64>().sqrt();
        mean_dist.push(sum / d as f64);
        max_dist.push(max);
        stacked_dist.push(stacked);
        stage_cost.push(cost_sum / d as f64);
        per_sample_dist.push(dists);
    }
    let param_norm = params.layers().iter().map(|l| l.norm_sq().sqrt()).collect();
    Ok(LayerProfile { mean_dist, max_dist, stacked_dist, stage_cost, param_norm, per_sample_dist })
}

/// The epsilon-neighborhood bookkeeping of one profile.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnpikeReport {
    pub epsilon: f64,
    pub reg_r: f64,
    /// Layer indices `k in 0..N-1` whose mean distance is at most epsilon.
    pub q_eps: Vec<usize>,
    /// Smallest `k` such that all layers from `k` on are in `q_eps`; `N` if none.
    pub entry_layer: usize,
    /// `sum_k alpha(mean_dist_k) / alpha(eps)`, the dissipativity cardinality
    /// bound on the complement of `q_eps`.
    pub cardinality_bound: f64,
    pub sum_alpha: f64,
    /// `sum_k mean_i alpha(dist_k_i)`; the sample-wise form of the bound.
    pub sum_alpha_samplewise: f64,
    pub sum_stage: f64,
    /// Per layer `k < N`: `stage_k + r ||u_k||^2 >= alpha(mean_dist_k) - tol`.
    pub dissipation_ok: Vec<bool>,
    /// Per layer `k < N`: the same check against `mean_i alpha(dist_k_i)`.
    pub dissipation_ok_samplewise: Vec<bool>,
    /// Mean over samples of `sqrt(dist_i^2 + ||u_k||^2)`: the state-input
    /// distance to the turnpike set with its zero-input component.
    pub state_input_dist: Vec<f64>,
}

const DISSIPATION_TOL: f64 = 1e-9;

/// Default neighborhood size: a tenth of the minimizer-line offset scale.
pub fn default_epsilon(smoothing: &SmoothingSpec) -> f64 {
    0.1 * smoothing.delta().abs()
}

pub fn turnpike_report(
    profile: &LayerProfile,
    epsilon: f64,
    alpha: &ClassKBound,
    reg_r: f64,
) -> Result<TurnpikeReport, TurnpikeError> {
    if !epsilon.is_finite() || epsilon <= 0.0 {
        return Err(TurnpikeError::BadEpsilon(epsilon));
    }
    let depth = profile.depth();
    let q_eps: Vec<usize> =
        (0..depth).filter(|&k| profile.mean_dist[k] <= epsilon).collect();
    let mut entry_layer = depth;
    for k in (0..depth).rev() {
        if profile.mean_dist[k] <= epsilon {
            entry_layer = k;
        } else {
            break;
        }
    }

    let alpha_eps = alpha.eval(epsilon);
    let mut sum_alpha = 0.0;
    let mut sum_alpha_samplewise = 0.0;
    let mut sum_stage = 0.0;
    let mut dissipation_ok = Vec::with_capacity(depth);
    let mut dissipation_ok_samplewise = Vec::with_capacity(depth);
    let mut state_input_dist = Vec::with_capacity(depth);
    for k in 0..depth {
        let a_mean = alpha.eval(profile.mean_dist[k]);
        let dists = &profile.per_sample_dist[k];
        let a_samplewise =
            dists.iter().map(|&s| alpha.eval(s)).sum::<f64>() / dists.len() as f64;
        sum_alpha += a_mean;
        sum_alpha_samplewise += a_samplewise;
        sum_stage += profile.stage_cost[k];
        let pen = profile.param_norm[k] * profile.param_norm[k];
        let available = profile.stage_cost[k] + reg_r * pen;
        dissipation_ok.push(available >= a_mean - DISSIPATION_TOL);
        dissipation_ok_samplewise.push(available >= a_samplewise - DISSIPATION_TOL);
        let pen_norm_sq = pen;
        state_input_dist.push(
            dists.iter().map(|&s| (s * s + pen_norm_sq).sqrt()).sum::<f64>()
                / dists.len() as f64,
        );
    }
    let cardinality_bound =
        if alpha_eps > 0.0 { sum_alpha / alpha_eps } else { f64::INFINITY };
    Ok(TurnpikeReport {
        epsilon,
        reg_r,
        q_eps,
        entry_layer,
        cardinality_bound,
        sum_alpha,
        sum_alpha_samplewise,
        sum_stage,
        dissipation_ok,
        dissipation_ok_samplewise,
        state_input_dist,
    })
}

/// Network truncated at `entry_layer + margin` residual layers.
pub fn crop(
    params: &NetworkParams,
    entry_layer: usize,
    margin: usize,
) -> Result<NetworkParams, TurnpikeError> {
    let depth = entry_layer + margin;
    if depth > params.depth() {
        return Err(TurnpikeError::CropOutOfRange {
            entry: entry_layer,
            margin,
            depth: params.depth(),
        });
    }
    Ok(params.truncated(depth)?)
}

/// Profile CSV: one row per recorded layer. `param_norm` is empty for the
/// terminal row.
pub fn write_profile_csv(profile: &LayerProfile, path: &Path) -> std::io::Result<()> {
    let mut out = String::from("layer,mean_dist,max_dist,stacked_dist,stage_cost,param_norm\n");
    for k in 0..profile.mean_dist.len() {
        let norm = if k < profile.param_norm.len() {
            format!("{}", profile.param_norm[k])
        } else {
            String::new()
        };
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            k,
            profile.mean_dist[k],
            profile.max_dist[k],
            profile.stacked_dist[k],
            profile.stage_cost[k],
            norm
        ));
    }
    fs::File::create(path)?.write_all(out.as_bytes())
}

/// Key-value rendering of a report.
pub fn render_report(report: &TurnpikeReport) -> String {
    let mut out = String::new();
    let depth = report.dissipation_ok.len();
    out.push_str(&format!("epsilon {}\n", report.epsilon));
    out.push_str(&format!("reg_r {}\n", report.reg_r));
    out.push_str(&format!("num_layers {}\n", depth));
    out.push_str(&format!("entry_layer {}\n", report.entry_layer));
    out.push_str(&format!("q_eps_cardinality {}\n", report.q_eps.len()));
    out.push_str(&format!("q_eps_complement {}\n", depth - report.q_eps.len()));
    out.push_str(&format!("cardinality_bound {}\n", report.cardinality_bound));
    out.push_str(&format!("sum_alpha {}\n", report.sum_alpha));
    out.push_str(&format!("sum_alpha_samplewise {}\n", report.sum_alpha_samplewise));
    out.push_str(&format!("sum_stage {}\n", report.sum_stage));
    out.push_str(&format!(
        "dissipation_ok {}\n",
        report.dissipation_ok.iter().all(|&b| b)
    ));
    out.push_str(&format!(
        "dissipation_ok_samplewise {}\n",
        report.dissipation_ok_samplewise.iter().all(|&b| b)
    ));
    let failing: Vec<String> = report
        .dissipation_ok
        .iter()
        .enumerate()
        .filter(|(_, &ok)| !ok)
        .map(|(k, _)| k.to_string())
        .collect();
    out.push_str(&format!("dissipation_fail_layers {}\n", failing.join(" ")));
    let q: Vec<String> = report.q_eps.iter().map(|k| k.to_string()).collect();
    out.push_str(&format!("q_eps {}\n", q.join(" ")));
    let sid: Vec<String> = report.state_input_dist.iter().map(|v| format!("{v}")).collect();
    out.push_str(&format!("state_input_dist {}\n", sid.join(" ")));
    out
}

pub fn write_report(report: &TurnpikeReport, path: &Path) -> std::io::Result<()> {
    fs::File::create(path)?.write_all(render_report(report).as_bytes())
}
