use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ManifestError, ModelManifest, TensorShape, MODEL_INPUT};

/// One internal inconsistency found in a manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "finding", rename_all = "snake_case")]
pub enum Finding {
    DuplicateLayer { layer: String },
    UnresolvedInput { layer: String, input: String },
    /// An input names the layer itself or a layer further down the list.
    ForwardReference { layer: String, input: String },
    /// The layer's inputs do not fit its kind (wrong rank, channels, arity).
    InvalidInputs { layer: String, detail: String },
    ShapeMismatch {
        layer: String,
        expected: TensorShape,
        declared: TensorShape,
    },
    WeightByteMismatch {
        /// `None` for the manifest-level total.
        layer: Option<String>,
        declared: u64,
        expected: u64,
    },
    FootprintTooSmall { footprint: u64, total_weight_bytes: u64 },
    MultipleOutputs { sinks: Vec<String> },
}

impl fmt::Display for Finding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Finding::DuplicateLayer { layer } => write!(f, "duplicate layer name `{layer}`"),
            Finding::UnresolvedInput { layer, input } => {
                write!(f, "`{layer}` consumes unknown `{input}`")
            }
            Finding::ForwardReference { layer, input } => {
                write!(f, "`{layer}` consumes `{input}` which is not an earlier layer")
            }
            Finding::InvalidInputs { layer, detail } => write!(f, "`{layer}`: {detail}"),
            Finding::ShapeMismatch {
                layer,
                expected,
                declared,
            } => write!(f, "`{layer}` declares out={declared}, inputs imply {expected}"),
            Finding::WeightByteMismatch {
                layer: Some(layer),
                declared,
                expected,
            } => write!(f, "`{layer}` declares weight_bytes={declared}, params imply {expected}"),
            Finding::WeightByteMismatch {
                layer: None,
                declared,
                expected,
            } => write!(f, "total_weight_bytes={declared}, layers sum to {expected}"),
            Finding::FootprintTooSmall {
                footprint,
                total_weight_bytes,
            } => write!(
                f,
                "footprint_bytes={footprint} is below total_weight_bytes={total_weight_bytes}"
            ),
            Finding::MultipleOutputs { sinks } => {
                write!(f, "graph has several outputs: {}", sinks.join(", "))
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub findings: Vec<Finding>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.findings.is_empty()
    }

    /// Converts the report into the error `parse_manifest` surfaces.
    pub fn into_result(self) -> Result<(), ManifestError> {
        let Some(first) = self.findings.first() else {
            return Ok(());
        };
        match first {
            Finding::ForwardReference { layer, input } => Err(ManifestError::CyclicGraph {
                layer: layer.clone(),
                input: input.clone(),
            }),
            Finding::ShapeMismatch { layer, .. } | Finding::InvalidInputs { layer, .. } => {
                Err(ManifestError::ShapeMismatch {
                    layer: layer.clone(),
                    detail: first.to_string(),
                })
            }
            _ => Err(ManifestError::Inconsistent(self.findings)),
        }
    }
}

/// Re-derives every shape from the input shape and re-sums weight bytes.
pub fn validate_manifest(manifest: &ModelManifest) -> ValidationReport {
    let mut findings = Vec::new();
    let position: HashMap<&str, usize> = manifest
        .layers
        .iter()
        .enumerate()
        .map(|(i, l)| (l.name.as_str(), i))
        .collect();
    // Shapes derived by forward propagation; a layer whose inputs could not be
    // resolved falls back to its declared shape so later layers still check.
    let mut derived: HashMap<&str, TensorShape> = HashMap::new();
    derived.insert(MODEL_INPUT, manifest.input_shape.clone());
    let mut seen = BTreeSet::new();
    let mut consumed = BTreeSet::new();

    for (idx, layer) in manifest.layers.iter().enumerate() {
        if layer.name == MODEL_INPUT || !seen.insert(layer.name.as_str()) {
            findings.push(Finding::DuplicateLayer {
                layer: layer.name.clone(),
            });
        }
        let mut inputs = Vec::with_capacity(layer.inputs.len());
        for input in &layer.inputs {
            consumed.insert(input.as_str());
            if input == MODEL_INPUT {
                inputs.push(derived[MODEL_INPUT].clone());
                continue;
            }
            match position.get(input.as_str()) {
                None => findings.push(Finding::UnresolvedInput {
                    layer: layer.name.clone(),
                    input: input.clone(),
                }),
                Some(&p) if p >= idx => findings.push(Finding::ForwardReference {
                    layer: layer.name.clone(),
                    input: input.clone(),
                }),
                Some(_) => inputs.push(derived[input.as_str()].clone()),
            }
        }

        let expected = if inputs.len() == layer.inputs.len() {
            let dims: Vec<&[usize]> = inputs.iter().map(|s| s.dims.as_slice()).collect();
            match layer.op.output_dims(&dims) {
                Ok(out) => Some(inputs[0].with_dims(out)),
                Err(detail) => {
                    findings.push(Finding::InvalidInputs {
                        layer: layer.name.clone(),
                        detail,
                    });
                    None
                }
            }
        } else {
            None
        };
        if let Some(expected) = &expected {
            if inputs.iter().any(|s| s.batch != expected.batch) {
                findings.push(Finding::InvalidInputs {
                    layer: layer.name.clone(),
                    detail: "inputs disagree on the batch axis".into(),
                });
            }
            if *expected != layer.output_shape {
                findings.push(Finding::ShapeMismatch {
                    layer: layer.name.clone(),
                    expected: expected.clone(),
                    declared: layer.output_shape.clone(),
                });
            }
        }
        derived.insert(
            layer.name.as_str(),
            expected.unwrap_or_else(|| layer.output_shape.clone()),
        );

        let implied = layer.op.implied_weight_bytes();
        if layer.weight_bytes != implied {
            findings.push(Finding::WeightByteMismatch {
                layer: Some(layer.name.clone()),
                declared: layer.weight_bytes,
                expected: implied,
            });
        }
    }

    let summed: u64 = manifest.layers.iter().map(|l| l.weight_bytes).sum();
    if manifest.total_weight_bytes != summed {
        findings.push(Finding::WeightByteMismatch {
            layer: None,
            declared: manifest.total_weight_bytes,
            expected: summed,
        });
    }
    if manifest.declared_footprint_bytes < summed {
        findings.push(Finding::FootprintTooSmall {
            footprint: manifest.declared_footprint_bytes,
            total_weight_bytes: summed,
        });
    }

    if let Some((last, rest)) = manifest.layers.split_last() {
        let mut sinks: Vec<String> = rest
            .iter()
            .filter(|l| !consumed.contains(l.name.as_str()))
            .map(|l| l.name.clone())
            .collect();
        if !sinks.is_empty() {
            sinks.push(last.name.clone());
            findings.push(Finding::MultipleOutputs { sinks });
        }
    }

    ValidationReport { findings }
}
