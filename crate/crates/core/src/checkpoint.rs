//! Self-describing text checkpoints.
//!
//! A checkpoint is a JSON document carrying a human-readable metadata header
//! (architecture, depth, dimensions, activation names, smoothing parameters)
//! plus every layer's parameter arrays in row-major order. Floats are written
//! in shortest round-trip decimal form, so save/load reproduces parameters
//! bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::resnet::{NetError, NetworkParams};
use crate::softce::{SmoothingSpec, SoftCeError};

pub const FORMAT_MARKER: &str = "resnet-ocp-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("not a checkpoint: {0}")]
    BadFormat(String),
    #[error("inconsistent metadata: {0}")]
    Inconsistent(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Smoothing(#[from] SoftCeError),
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointDoc {
    format: String,
    version: u32,
    arch: String,
    depth: usize,
    state_dim: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    hidden_dim: Option<usize>,
    activations: Vec<String>,
    num_classes: usize,
    p_d: f64,
    params: NetworkParams,
}

fn activation_names(params: &NetworkParams) -> Vec<String> {
    match params.arch() {
        crate::resnet::Arch::Plain { activation, .. } => vec![activation.name().to_string()],
        crate::resnet::Arch::Bottleneck { act_hidden, act_out, .. } => {
            vec![act_hidden.name().to_string(), act_out.name().to_string()]
        }
    }
}

pub fn to_string(params: &NetworkParams, smoothing: &SmoothingSpec) -> String {
    let doc = CheckpointDoc {
        format: FORMAT_MARKER.to_string(),
        version: FORMAT_VERSION,
        arch: params.arch().name().to_string(),
        depth: params.depth(),
        state_dim: params.state_dim(),
        hidden_dim: params.arch().hidden_dim(),
        activations: activation_names(params),
        num_classes: smoothing.num_classes(),
        p_d: smoothing.p_d(),
        params: params.clone(),
    };
    serde_json::to_string_pretty(&doc).expect("checkpoint serialization cannot fail")
}

pub fn save(
    path: &Path,
    params: &NetworkParams,
    smoothing: &SmoothingSpec,
) -> Result<(), CheckpointError> {
    let mut file = fs::File::create(path)?;
    file.write_all(to_string(params, smoothing).as_bytes())?;
    file.write_all(b"\n")?;
    Ok(())
}

pub fn from_str(text: &str) -> Result<(NetworkParams, SmoothingSpec), CheckpointError> {
    let doc: CheckpointDoc = serde_json::from_str(text).map_err(|e| CheckpointError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if doc.format != FORMAT_MARKER {
        return Err(CheckpointError::BadFormat(format!(
            "format marker {:?}, expected {FORMAT_MARKER:?}",
            doc.format
        )));
    }
    if doc.version != FORMAT_VERSION {
        return Err(CheckpointError::BadFormat(format!(
            "unsupported version {}, expected {FORMAT_VERSION}",
            doc.version
        )));
    }
    // Revalidate shapes and finiteness through the usual constructor.
    let params =
        NetworkParams::from_layers(doc.params.arch().clone(), doc.params.layers().to_vec())?;
    if doc.depth != params.depth()
        || doc.state_dim != params.state_dim()
        || doc.arch != params.arch().name()
        || doc.hidden_dim != params.arch().hidden_dim()
    {
        return Err(CheckpointError::Inconsistent(
            "metadata header does not match the parameter arrays".to_string(),
        ));
    }
    let smoothing = SmoothingSpec::new(doc.num_classes, doc.p_d)?;
    Ok((params, smoothing))
}

pub fn load(path: &Path) -> Result<(NetworkParams, SmoothingSpec), CheckpointError> {
    let text = fs::read_to_string(path)?;
    from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resnet::{Activation, Arch};

    #[test]
    fn round_trip_is_bit_exact() {
        let arch = Arch::Bottleneck {
            state_dim: 3,
            hidden_dim: 4,
            act_hidden: Activation::Tanh,
            act_out: Activation::Identity,
        };
        let params = NetworkParams::random_init(arch, 5, 123);
        let smoothing = SmoothingSpec::new(3, 0.9).unwrap();
        let text = to_string(&params, &smoothing);
        let (loaded, loaded_smoothing) = from_str(&text).unwrap();
        assert_eq!(params, loaded);
        assert_eq!(smoothing, loaded_smoothing);
    }

    #[test]
    fn corrupt_text_reports_location() {
        let arch = Arch::Plain { state_dim: 2, activation: Activation::Tanh };
        let params = NetworkParams::zeros(arch, 1);
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let mut text = to_string(&params, &smoothing);
        let mid = text.len() / 2;
        text.truncate(mid);
        match from_str(&text) {
            Err(CheckpointError::Parse { line, .. }) => assert!(line >= 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_marker_rejected() {
        let arch = Arch::Plain { state_dim: 2, activation: Activation::Tanh };
        let params = NetworkParams::zeros(arch, 1);
        let smoothing = SmoothingSpec::new(2, 0.95).unwrap();
        let text = to_string(&params, &smoothing).replace(FORMAT_MARKER, "something-else");
        assert!(matches!(from_str(&text), Err(CheckpointError::BadFormat(_))));
    }
}
