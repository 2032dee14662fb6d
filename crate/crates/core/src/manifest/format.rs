//! Text encoding of [`ModelManifest`].
//!
//! ```text
//! infershare-manifest v1
//! model_name tiny-mlp
//! version 1
//! input *x16
//! weight_seed 7
//! total_weight_bytes 2488
//! footprint_bytes 4096
//! layer fc1 dense inputs=input params=in=16,out=32 out=*x32 weight_bytes=2176
//! layer act relu inputs=fc1 out=*x32
//! ```
//!
//! Blank lines and lines starting with `#` are ignored. Metadata keys may
//! appear in any order before or between layer lines; layer order is the
//! order of `layer` lines.

use std::fmt::Write as _;

use super::{
    validate_manifest, BatchDim, Conv2dParams, LayerKind, LayerOp, LayerSpec, ManifestError,
    ModelManifest, PoolParams, TensorShape, MODEL_INPUT,
};

pub const HEADER: &str = "infershare-manifest v1";

/// Parses and validates a manifest document.
pub fn parse_manifest(text: &str) -> Result<ModelManifest, ManifestError> {
    let manifest = parse_document(text)?;
    validate_manifest(&manifest).into_result()?;
    Ok(manifest)
}

/// Parses a document without cross-layer validation. Syntax errors and
/// unknown layer kinds are still rejected here.
pub fn parse_document(text: &str) -> Result<ModelManifest, ManifestError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    match lines.next() {
        Some((_, HEADER)) => {}
        Some((n, other)) => {
            return Err(malformed(n, format!("expected header `{HEADER}`, found `{other}`")))
        }
        None => return Err(malformed(1, "empty document")),
    }

    let mut model_name = None;
    let mut version = None;
    let mut input_shape = None;
    let mut weight_seed = None;
    let mut total_weight_bytes = None;
    let mut footprint = None;
    let mut layers: Vec<LayerSpec> = Vec::new();

    for (n, line) in lines {
        let mut words = line.split_whitespace();
        let key = words.next().unwrap_or_default();
        if key == "layer" {
            let prev = layers.last().map(|l| l.name.as_str());
            layers.push(parse_layer(n, words, prev)?);
            continue;
        }
        let value = words
            .next()
            .ok_or_else(|| malformed(n, format!("`{key}` needs a value")))?;
        if let Some(extra) = words.next() {
            return Err(malformed(n, format!("unexpected trailing `{extra}`")));
        }
        let slot_taken = match key {
            "model_name" => model_name.replace(ident(n, value)?).is_some(),
            "version" => version.replace(number(n, key, value)? as u32).is_some(),
            "input" => input_shape.replace(parse_shape(n, value)?).is_some(),
            "weight_seed" => weight_seed.replace(number(n, key, value)?).is_some(),
            "total_weight_bytes" => total_weight_bytes.replace(number(n, key, value)?).is_some(),
            "footprint_bytes" => footprint.replace(number(n, key, value)?).is_some(),
            _ => return Err(malformed(n, format!("unknown key `{key}`"))),
        };
        if slot_taken {
            return Err(malformed(n, format!("`{key}` given twice")));
        }
    }

    let model_name = model_name.ok_or_else(|| malformed(0, "missing `model_name`"))?;
    let input_shape = input_shape.ok_or_else(|| malformed(0, "missing `input`"))?;
    let total_weight_bytes =
        total_weight_bytes.unwrap_or_else(|| layers.iter().map(|l| l.weight_bytes).sum());
    Ok(ModelManifest {
        model_name,
        version: version.unwrap_or(1),
        input_shape,
        layers,
        total_weight_bytes,
        declared_footprint_bytes: footprint.unwrap_or(total_weight_bytes),
        weight_seed: weight_seed.unwrap_or(0),
    })
}

fn parse_layer<'a>(
    n: usize,
    mut words: impl Iterator<Item = &'a str>,
    previous: Option<&str>,
) -> Result<LayerSpec, ManifestError> {
    let name = ident(n, words.next().ok_or_else(|| malformed(n, "layer needs a name"))?)?;
    if name == MODEL_INPUT {
        return Err(malformed(n, "`input` is reserved for the model input"));
    }
    let kind_word = words
        .next()
        .ok_or_else(|| malformed(n, "layer needs a kind"))?;
    let kind = LayerKind::from_name(kind_word).ok_or_else(|| ManifestError::UnknownLayerKind {
        kind: kind_word.to_string(),
        line: n,
    })?;

    let mut inputs = None;
    let mut params = None;
    let mut out = None;
    let mut weight_bytes = None;
    for word in words {
        let (key, value) = word
            .split_once('=')
            .ok_or_else(|| malformed(n, format!("expected key=value, found `{word}`")))?;
        let dup = match key {
            "inputs" => inputs
                .replace(
                    value
                        .split(',')
                        .map(|s| ident(n, s))
                        .collect::<Result<Vec<_>, _>>()?,
                )
                .is_some(),
            "params" => params.replace(parse_params(n, value)?).is_some(),
            "out" => out.replace(parse_shape(n, value)?).is_some(),
            "weight_bytes" => weight_bytes
                .replace(number(n, key, value)?)
                .is_some(),
            _ => return Err(malformed(n, format!("unknown layer attribute `{key}`"))),
        };
        if dup {
            return Err(malformed(n, format!("`{key}` given twice")));
        }
    }

    let op = build_op(n, kind, params.unwrap_or_default())?;
    let inputs = inputs.unwrap_or_else(|| vec![previous.unwrap_or(MODEL_INPUT).to_string()]);
    let output_shape = out.ok_or_else(|| malformed(n, format!("layer `{name}` needs out=")))?;
    Ok(LayerSpec {
        name,
        weight_bytes: weight_bytes.unwrap_or_else(|| op.implied_weight_bytes()),
        op,
        inputs,
        output_shape,
    })
}

fn parse_params(n: usize, value: &str) -> Result<Vec<(String, usize)>, ManifestError> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| malformed(n, format!("param `{kv}` is not k=v")))?;
            Ok((k.to_string(), number(n, k, v)? as usize))
        })
        .collect()
}

fn build_op(n: usize, kind: LayerKind, params: Vec<(String, usize)>) -> Result<LayerOp, ManifestError> {
    let mut take = Params { n, kind, params };
    let op = match kind {
        LayerKind::Dense => LayerOp::Dense {
            in_features: take.required("in")?,
            out_features: take.required("out")?,
        },
        LayerKind::Conv2d => LayerOp::Conv2d(Conv2dParams {
            in_channels: take.required("cin")?,
            out_channels: take.required("cout")?,
            kernel_h: take.required("kh")?,
            kernel_w: take.required("kw")?,
            stride: take.optional("stride", 1)?,
            pad: take.optional("pad", 0)?,
        }),
        LayerKind::Maxpool2d => {
            let kernel = take.required("k")?;
            LayerOp::Maxpool2d(PoolParams {
                kernel,
                stride: take.optional("stride", kernel)?,
                pad: take.optional("pad", 0)?,
            })
        }
        LayerKind::Relu => LayerOp::Relu,
        LayerKind::Globalavgpool => LayerOp::Globalavgpool,
        LayerKind::Flatten => LayerOp::Flatten,
        LayerKind::Add => LayerOp::Add,
        LayerKind::Softmax => LayerOp::Softmax,
    };
    take.finish()?;
    Ok(op)
}

struct Params {
    n: usize,
    kind: LayerKind,
    params: Vec<(String, usize)>,
}

impl Params {
    fn take(&mut self, key: &str) -> Option<usize> {
        let idx = self.params.iter().position(|(k, _)| k == key)?;
        Some(self.params.remove(idx).1)
    }

    fn required(&mut self, key: &str) -> Result<usize, ManifestError> {
        let v = self
            .take(key)
            .ok_or_else(|| malformed(self.n, format!("{} needs param `{key}`", self.kind)))?;
        self.positive(key, v)
    }

    fn optional(&mut self, key: &str, default: usize) -> Result<usize, ManifestError> {
        match self.take(key) {
            Some(v) if key == "pad" => Ok(v),
            Some(v) => self.positive(key, v),
            None => Ok(default),
        }
    }

    fn positive(&self, key: &str, v: usize) -> Result<usize, ManifestError> {
        if v == 0 {
            Err(malformed(self.n, format!("param `{key}` must be >= 1")))
        } else {
            Ok(v)
        }
    }

    fn finish(self) -> Result<(), ManifestError> {
        match self.params.first() {
            None => Ok(()),
            Some((k, _)) => Err(malformed(
                self.n,
                format!("{} does not take param `{k}`", self.kind),
            )),
        }
    }
}

/// Parses `*x3x224x224` or `1x1000`.
pub fn parse_shape_text(text: &str) -> Result<TensorShape, ManifestError> {
    parse_shape(0, text)
}

fn parse_shape(n: usize, text: &str) -> Result<TensorShape, ManifestError> {
    let mut axes = text.split('x');
    let batch = match axes.next() {
        Some("*") => BatchDim::Variable,
        Some(b) => BatchDim::Fixed(positive(n, b)?),
        None => return Err(malformed(n, "empty shape")),
    };
    let dims = axes
        .map(|a| positive(n, a))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(TensorShape { batch, dims })
}

fn positive(n: usize, text: &str) -> Result<usize, ManifestError> {
    match text.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ if text == "*" => Err(malformed(n, "only axis 0 may be variable")),
        _ => Err(malformed(n, format!("`{text}` is not a positive dimension"))),
    }
}

fn number(n: usize, key: &str, text: &str) -> Result<u64, ManifestError> {
    text.parse::<u64>()
        .map_err(|_| malformed(n, format!("`{key}` expects an unsigned integer, found `{text}`")))
}

fn ident(n: usize, text: &str) -> Result<String, ManifestError> {
    let ok = !text.is_empty()
        && text
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(text.to_string())
    } else {
        Err(malformed(n, format!("`{text}` is not a valid identifier")))
    }
}

fn malformed(line: usize, reason: impl Into<String>) -> ManifestError {
    ManifestError::MalformedDocument {
        line,
        reason: reason.into(),
    }
}

impl ModelManifest {
    /// Canonical text form; `parse_document(&m.to_document()) == m`.
    pub fn to_document(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{HEADER}");
        let _ = writeln!(out, "model_name {}", self.model_name);
        let _ = writeln!(out, "version {}", self.version);
        let _ = writeln!(out, "input {}", self.input_shape);
        let _ = writeln!(out, "weight_seed {}", self.weight_seed);
        let _ = writeln!(out, "total_weight_bytes {}", self.total_weight_bytes);
        let _ = writeln!(out, "footprint_bytes {}", self.declared_footprint_bytes);
        for layer in &self.layers {
            let _ = write!(
                out,
                "layer {} {} inputs={}",
                layer.name,
                layer.kind(),
                layer.inputs.join(",")
            );
            let params = op_params(&layer.op);
            if !params.is_empty() {
                let rendered: Vec<String> =
                    params.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let _ = write!(out, " params={}", rendered.join(","));
            }
            let _ = writeln!(
                out,
                " out={} weight_bytes={}",
                layer.output_shape, layer.weight_bytes
            );
        }
        out
    }
}

fn op_params(op: &LayerOp) -> Vec<(&'static str, usize)> {
    match *op {
        LayerOp::Dense {
            in_features,
            out_features,
        } => vec![("in", in_features), ("out", out_features)],
        LayerOp::Conv2d(c) => vec![
            ("cin", c.in_channels),
            ("cout", c.out_channels),
            ("kh", c.kernel_h),
            ("kw", c.kernel_w),
            ("stride", c.stride),
            ("pad", c.pad),
        ],
        LayerOp::Maxpool2d(p) => vec![("k", p.kernel), ("stride", p.stride), ("pad", p.pad)],
        _ => Vec::new(),
    }
}
