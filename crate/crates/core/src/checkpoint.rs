//! JSON checkpoints.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "spec": { ...NetworkSpec... },
//!   "predictors": [[{"weights": [[...]], "activation": "relu", "bias": [...]}]],
//!   "precisions": [[[...]]],
//!   "prior": {"mean": [...], "precision": [[...]]}
//! }
//! ```
//!
//! `predictors[l]` lists the sublayers of gap `l` in application order and
//! `precisions[l]` is the dense Π of layer `l` (diagonal precisions are
//! written with zero off-diagonals). Numbers are shortest round-trip decimals
//! of the f64 values, so a save/load cycle is bit-exact. Non-finite values
//! are written as `null` and read back as NaN, which loading then rejects as
//! a numerical error. `prior` repeats `spec.prior`; it may be omitted but
//! must agree when present. Activities and errors are not stored.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{
    rows_to_array, Activation, NetworkSpec, PCNetwork, Precision, PrecisionMode, Predictor, PriorSpec,
    Sublayer,
};

pub const FORMAT_VERSION: u64 = 1;

type Cell = Option<f64>;

#[derive(Serialize)]
struct SublayerOut {
    weights: Vec<Vec<f64>>,
    activation: Activation,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u64,
    spec: &'a NetworkSpec,
    predictors: Vec<Vec<SublayerOut>>,
    precisions: Vec<Vec<Vec<f64>>>,
    prior: &'a PriorSpec,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SublayerIn {
    weights: Vec<Vec<Cell>>,
    activation: Activation,
    #[serde(default)]
    bias: Option<Vec<Cell>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format_version: u64,
    spec: NetworkSpec,
    predictors: Vec<Vec<SublayerIn>>,
    precisions: Vec<Vec<Vec<Cell>>>,
    #[serde(default)]
    prior: Option<PriorSpec>,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u64,
}

fn cells(rows: &[Vec<Cell>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| r.iter().map(|c| c.unwrap_or(f64::NAN)).collect())
        .collect()
}

fn to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    crate::network::array_to_rows(m)
}

/// Serialises the network parameters to a JSON string.
pub fn to_json(net: &PCNetwork) -> String {
    let predictors = net
        .predictors()
        .iter()
        .map(|p| {
            p.sublayers
                .iter()
                .map(|s| SublayerOut {
                    weights: to_rows(&s.weights),
                    activation: s.activation,
                    bias: s.bias.as_ref().map(|b| b.to_vec()),
                })
                .collect()
        })
        .collect();
    let precisions = net
        .layers()
        .iter()
        .map(|l| to_rows(&l.precision.to_dense()))
        .collect();
    let out = CheckpointOut {
        format_version: FORMAT_VERSION,
        spec: net.spec(),
        predictors,
        precisions,
        prior: &net.spec().prior,
    };
    let mut s = serde_json::to_string_pretty(&out).expect("checkpoint serialisation");
    s.push('\n');
    s
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let start: usize = text.split_inclusive('\n').take(line - 1).map(str::len).sum();
    (start + column.saturating_sub(1)).min(text.len())
}

fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    Error::Parse {
        offset: byte_offset(text, e.line(), e.column()),
        message: e.to_string(),
    }
}

/// Parses a checkpoint from JSON text.
pub fn from_json(text: &str) -> Result<PCNetwork> {
    let parsed: CheckpointIn = match serde_json::from_str(text) {
        Ok(p) => p,
        Err(e) => {
            if let Ok(probe) = serde_json::from_str::<VersionProbe>(text) {
                if probe.format_version != FORMAT_VERSION {
                    return Err(Error::Version {
                        found: probe.format_version,
                        expected: FORMAT_VERSION,
                    });
                }
            }
            return Err(parse_error(text, &e));
        }
    };
    if parsed.format_version != FORMAT_VERSION {
        return Err(Error::Version {
            found: parsed.format_version,
            expected: FORMAT_VERSION,
        });
    }
    if let Some(prior) = &parsed.prior {
        if prior != &parsed.spec.prior {
            return Err(Error::InvalidSpec("top-level prior disagrees with spec.prior".into()));
        }
    }
    let predictors = parsed
        .predictors
        .iter()
        .map(|chain| {
            chain
                .iter()
                .map(|s| {
                    Ok(Sublayer {
                        weights: rows_to_array(&cells(&s.weights))?,
                        bias: s
                            .bias
                            .as_ref()
                            .map(|b| Array1::from_iter(b.iter().map(|c| c.unwrap_or(f64::NAN)))),
                        activation: s.activation,
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Predictor::new)
        })
        .collect::<Result<Vec<_>>>()?;
    let mode = parsed.spec.precision_mode;
    let precisions = parsed
        .precisions
        .iter()
        .enumerate()
        .map(|(l, rows)| {
            let m = rows_to_array(&cells(rows))?;
            if mode == PrecisionMode::Diagonal {
                let off_diag = m
                    .indexed_iter()
                    .any(|((i, j), &v)| i != j && v != 0.0);
                if off_diag {
                    return Err(Error::InvalidSpec(format!(
                        "diagonal precision of layer {l} has off-diagonal entries"
                    )));
                }
            }
            Ok(Precision::from_dense(m, mode))
        })
        .collect::<Result<Vec<_>>>()?;
    PCNetwork::from_parts(parsed.spec, predictors, precisions)
}

pub fn save_checkpoint(net: &PCNetwork, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_json(net))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<PCNetwork> {
    let text = fs::read_to_string(path)?;
    from_json(&text)
}
