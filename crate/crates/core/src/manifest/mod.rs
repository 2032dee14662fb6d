//! Restricted model-description format.
//!
//! A [`ModelManifest`] describes a network as an ordered list of layers drawn
//! from a fixed catalogue of eight kinds. There is no way to express control
//! flow or attach user code: every layer is one of [`LayerKind`], and its
//! cost in flops and bytes is a closed-form function of its parameters and
//! input shapes.
//!
//! The text encoding is documented in `docs/manifest-format.md` and
//! implemented in [`format`].

pub mod bundled;
pub mod flops;
pub mod format;
pub mod validate;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use flops::{layer_flops, model_flops};
pub use format::{parse_document, parse_manifest};
pub use validate::{validate_manifest, Finding, ValidationReport};

/// Bytes per stored weight element. Weights are always 32-bit.
pub const BYTES_PER_WEIGHT: u64 = 4;

/// Name that layers use to refer to the model input.
pub const MODEL_INPUT: &str = "input";

/// The batch axis of a [`TensorShape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BatchDim {
    /// Declared as `*`: any positive batch is accepted.
    Variable,
    Fixed(usize),
}

/// Tensor shape with an explicit batch axis followed by the per-sample axes.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub batch: BatchDim,
    /// Non-batch axes, all >= 1.
    pub dims: Vec<usize>,
}

impl TensorShape {
    pub fn variable(dims: Vec<usize>) -> Self {
        Self {
            batch: BatchDim::Variable,
            dims,
        }
    }

    pub fn fixed(batch: usize, dims: Vec<usize>) -> Self {
        Self {
            batch: BatchDim::Fixed(batch),
            dims,
        }
    }

    /// Product of the non-batch axes.
    pub fn per_sample(&self) -> u64 {
        self.dims.iter().map(|&d| d as u64).product()
    }

    pub fn element_count(&self, batch: usize) -> u64 {
        batch as u64 * self.per_sample()
    }

    /// Resolves the batch axis, failing if a fixed batch disagrees.
    pub fn resolve(&self, batch: usize) -> Result<Vec<usize>, ManifestError> {
        match self.batch {
            BatchDim::Fixed(n) if n != batch => Err(ManifestError::ShapeMismatch {
                layer: MODEL_INPUT.to_string(),
                detail: format!("shape {self} has fixed batch {n}, got {batch}"),
            }),
            _ => {
                let mut full = Vec::with_capacity(self.dims.len() + 1);
                full.push(batch);
                full.extend_from_slice(&self.dims);
                Ok(full)
            }
        }
    }

    pub fn with_dims(&self, dims: Vec<usize>) -> Self {
        Self {
            batch: self.batch,
            dims,
        }
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.batch {
            BatchDim::Variable => f.write_str("*")?,
            BatchDim::Fixed(n) => write!(f, "{n}")?,
        }
        for d in &self.dims {
            write!(f, "x{d}")?;
        }
        Ok(())
    }
}

/// The eight supported layer kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    Maxpool2d,
    Globalavgpool,
    Flatten,
    Add,
    Softmax,
}

impl LayerKind {
    pub const ALL: [LayerKind; 8] = [
        LayerKind::Dense,
        LayerKind::Conv2d,
        LayerKind::Relu,
        LayerKind::Maxpool2d,
        LayerKind::Globalavgpool,
        LayerKind::Flatten,
        LayerKind::Add,
        LayerKind::Softmax,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool2d => "maxpool2d",
            LayerKind::Globalavgpool => "globalavgpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Add => "add",
            LayerKind::Softmax => "softmax",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.as_str() == name)
    }

    pub fn arity(self) -> usize {
        match self {
            LayerKind::Add => 2,
            _ => 1,
        }
    }

    pub fn is_weighted(self) -> bool {
        matches!(self, LayerKind::Dense | LayerKind::Conv2d)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Conv2dParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PoolParams {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

/// A layer's kind together with its kind-specific attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LayerOp {
    Dense { in_features: usize, out_features: usize },
    Conv2d(Conv2dParams),
    Relu,
    Maxpool2d(PoolParams),
    Globalavgpool,
    Flatten,
    Add,
    Softmax,
}

impl LayerOp {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerOp::Dense { .. } => LayerKind::Dense,
            LayerOp::Conv2d(_) => LayerKind::Conv2d,
            LayerOp::Relu => LayerKind::Relu,
            LayerOp::Maxpool2d(_) => LayerKind::Maxpool2d,
            LayerOp::Globalavgpool => LayerKind::Globalavgpool,
            LayerOp::Flatten => LayerKind::Flatten,
            LayerOp::Add => LayerKind::Add,
            LayerOp::Softmax => LayerKind::Softmax,
        }
    }

    /// Number of weight elements (kernel plus bias) the layer owns.
    pub fn parameter_count(&self) -> u64 {
        match *self {
            LayerOp::Dense {
                in_features,
                out_features,
            } => (in_features as u64 + 1) * out_features as u64,
            LayerOp::Conv2d(c) => {
                let kernel = (c.out_channels * c.in_channels * c.kernel_h * c.kernel_w) as u64;
                kernel + c.out_channels as u64
            }
            _ => 0,
        }
    }

    pub fn implied_weight_bytes(&self) -> u64 {
        self.parameter_count() * BYTES_PER_WEIGHT
    }

    /// Per-sample output dims given per-sample input dims, or a reason the
    /// inputs do not fit this op.
    pub fn output_dims(&self, inputs: &[&[usize]]) -> Result<Vec<usize>, String> {
        let arity = self.kind().arity();
        if inputs.len() != arity {
            return Err(format!(
                "{} takes {arity} input(s), got {}",
                self.kind(),
                inputs.len()
            ));
        }
        let x = inputs[0];
        match *self {
            LayerOp::Dense {
                in_features,
                out_features,
            } => {
                if x != [in_features] {
                    return Err(format!("dense expects [{in_features}], got {x:?}"));
                }
                Ok(vec![out_features])
            }
            LayerOp::Conv2d(c) => {
                let [cin, h, w] = chw(x)?;
                if cin != c.in_channels {
                    return Err(format!("conv2d expects {} channels, got {cin}", c.in_channels));
                }
                let ho = window_out(h, c.kernel_h, c.stride, c.pad)?;
                let wo = window_out(w, c.kernel_w, c.stride, c.pad)?;
                Ok(vec![c.out_channels, ho, wo])
            }
            LayerOp::Maxpool2d(p) => {
                let [ch, h, w] = chw(x)?;
                let ho = window_out(h, p.kernel, p.stride, p.pad)?;
                let wo = window_out(w, p.kernel, p.stride, p.pad)?;
                Ok(vec![ch, ho, wo])
            }
            LayerOp::Globalavgpool => {
                let [ch, _, _] = chw(x)?;
                Ok(vec![ch])
            }
            LayerOp::Flatten => Ok(vec![x.iter().product()]),
            LayerOp::Relu => Ok(x.to_vec()),
            LayerOp::Softmax => {
                if x.is_empty() {
                    return Err("softmax needs at least one non-batch axis".into());
                }
                Ok(x.to_vec())
            }
            LayerOp::Add => {
                if inputs[1] != x {
                    return Err(format!("add operands differ: {x:?} vs {:?}", inputs[1]));
                }
                Ok(x.to_vec())
            }
        }
    }
}

fn chw(x: &[usize]) -> Result<[usize; 3], String> {
    match *x {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(format!("expected [C, H, W], got {x:?}")),
    }
}

fn window_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize, String> {
    if stride == 0 || kernel == 0 {
        return Err("kernel and stride must be >= 1".into());
    }
    let padded = size + 2 * pad;
    if padded < kernel {
        return Err(format!("window {kernel} larger than padded extent {padded}"));
    }
    Ok((padded - kernel) / stride + 1)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub op: LayerOp,
    pub inputs: Vec<String>,
    pub output_shape: TensorShape,
    pub weight_bytes: u64,
}

impl LayerSpec {
    pub fn kind(&self) -> LayerKind {
        self.op.kind()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub model_name: String,
    pub version: u32,
    pub input_shape: TensorShape,
    pub layers: Vec<LayerSpec>,
    pub total_weight_bytes: u64,
    /// Bytes the worker must reserve on a device: weights plus workspace.
    pub declared_footprint_bytes: u64,
    pub weight_seed: u64,
}

impl ModelManifest {
    pub fn layer(&self, name: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.name == name)
    }

    /// Shape of the network output: the last layer, or the input when the
    /// layer list is empty.
    pub fn output_shape(&self) -> &TensorShape {
        self.layers
            .last()
            .map(|l| &l.output_shape)
            .unwrap_or(&self.input_shape)
    }

    /// Shape produced by `name`, where `name` may be [`MODEL_INPUT`].
    pub fn shape_of(&self, name: &str) -> Option<&TensorShape> {
        if name == MODEL_INPUT {
            Some(&self.input_shape)
        } else {
            self.layer(name).map(|l| &l.output_shape)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ManifestError {
    #[error("malformed manifest (line {line}): {reason}")]
    MalformedDocument { line: usize, reason: String },
    #[error("unknown layer kind `{kind}` (line {line}); supported kinds are dense, conv2d, relu, maxpool2d, globalavgpool, flatten, add, softmax")]
    UnknownLayerKind { kind: String, line: usize },
    #[error("shape mismatch in `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("layer `{layer}` consumes `{input}`, which is not an earlier layer")]
    CyclicGraph { layer: String, input: String },
    #[error("manifest is internally inconsistent: {}", render_findings(.0))]
    Inconsistent(Vec<Finding>),
}

fn render_findings(findings: &[Finding]) -> String {
    findings
        .iter()
        .map(|f| f.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
