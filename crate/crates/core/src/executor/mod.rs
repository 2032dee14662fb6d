//! Slow, exact CPU interpreter for the layer catalogue.
//!
//! All arithmetic is f64. Convolution is the plain seven-deep loop nest with
//! explicit zero padding; max-pooling treats padding as negative infinity.
//! Each op can optionally count the arithmetic it performs so the counts can
//! be compared against [`crate::manifest::layer_flops`].

mod tensor;
pub mod weights;

use std::collections::HashMap;

use thiserror::Error;

use crate::manifest::{Conv2dParams, LayerOp, LayerSpec, ModelManifest, PoolParams, MODEL_INPUT};

pub use tensor::Tensor;
pub use weights::{generate_weights, LayerWeights, WeightStore};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("shape mismatch in `{layer}`: {detail}")]
    ShapeMismatch { layer: String, detail: String },
    #[error("layer `{layer}` produced a non-finite value")]
    NonFiniteOutput { layer: String },
    #[error("no weights for layer `{0}`")]
    MissingWeights(String),
    #[error("bad input: {0}")]
    BadInput(String),
}

/// Runs one layer.
pub fn execute_layer(
    layer: &LayerSpec,
    inputs: &[&Tensor],
    weights: &WeightStore,
) -> Result<Tensor, ExecError> {
    run_layer::<false>(layer, inputs, weights, &mut 0)
}

/// Runs one layer and returns the number of arithmetic ops it performed.
pub fn execute_layer_counted(
    layer: &LayerSpec,
    inputs: &[&Tensor],
    weights: &WeightStore,
) -> Result<(Tensor, u64), ExecError> {
    let mut ops = 0;
    let out = run_layer::<true>(layer, inputs, weights, &mut ops)?;
    Ok((out, ops))
}

/// Runs the whole network on `input` and returns the output layer's tensor.
pub fn execute_model(
    manifest: &ModelManifest,
    weights: &WeightStore,
    input: &Tensor,
) -> Result<Tensor, ExecError> {
    run_model::<false>(manifest, weights, input).map(|(t, _)| t)
}

/// As [`execute_model`], also returning per-layer op counts in layer order.
pub fn execute_model_counted(
    manifest: &ModelManifest,
    weights: &WeightStore,
    input: &Tensor,
) -> Result<(Tensor, Vec<u64>), ExecError> {
    run_model::<true>(manifest, weights, input)
}

fn run_model<const COUNT: bool>(
    manifest: &ModelManifest,
    weights: &WeightStore,
    input: &Tensor,
) -> Result<(Tensor, Vec<u64>), ExecError> {
    manifest
        .input_shape
        .resolve(input.batch)
        .map_err(|e| ExecError::BadInput(e.to_string()))?;
    if input.dims != manifest.input_shape.dims {
        return Err(ExecError::ShapeMismatch {
            layer: MODEL_INPUT.into(),
            detail: format!(
                "input dims {:?}, manifest expects {:?}",
                input.dims, manifest.input_shape.dims
            ),
        });
    }

    // Drop each intermediate after its last consumer to bound memory.
    let mut last_use: HashMap<&str, usize> = HashMap::new();
    for (i, layer) in manifest.layers.iter().enumerate() {
        for name in &layer.inputs {
            last_use.insert(name.as_str(), i);
        }
    }

    let mut values: HashMap<&str, Tensor> = HashMap::new();
    let mut counts = Vec::with_capacity(if COUNT { manifest.layers.len() } else { 0 });
    for (i, layer) in manifest.layers.iter().enumerate() {
        let out = {
            let inputs = layer
                .inputs
                .iter()
                .map(|name| {
                    if name == MODEL_INPUT {
                        Ok(input)
                    } else {
                        values.get(name.as_str()).ok_or_else(|| ExecError::ShapeMismatch {
                            layer: layer.name.clone(),
                            detail: format!("input `{name}` not computed yet"),
                        })
                    }
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut ops = 0;
            let out = run_layer::<COUNT>(layer, &inputs, weights, &mut ops)?;
            if COUNT {
                counts.push(ops);
            }
            out
        };
        for name in &layer.inputs {
            if last_use.get(name.as_str()) == Some(&i) {
                values.remove(name.as_str());
            }
        }
        values.insert(layer.name.as_str(), out);
    }
    let output = match manifest.layers.last() {
        Some(last) => values
            .remove(last.name.as_str())
            .expect("output layer computed"),
        None => input.clone(),
    };
    Ok((output, counts))
}

fn run_layer<const COUNT: bool>(
    layer: &LayerSpec,
    inputs: &[&Tensor],
    weights: &WeightStore,
    ops: &mut u64,
) -> Result<Tensor, ExecError> {
    let mismatch = |detail: String| ExecError::ShapeMismatch {
        layer: layer.name.clone(),
        detail,
    };
    let dims: Vec<&[usize]> = inputs.iter().map(|t| t.dims.as_slice()).collect();
    let out_dims = layer.op.output_dims(&dims).map_err(mismatch)?;
    if out_dims != layer.output_shape.dims {
        return Err(mismatch(format!(
            "computed {out_dims:?}, layer declares {:?}",
            layer.output_shape.dims
        )));
    }
    let batch = inputs[0].batch;
    if inputs.iter().any(|t| t.batch != batch) {
        return Err(mismatch("inputs disagree on batch".into()));
    }
    let x = inputs[0];
    let mut out = Tensor::zeros(batch, out_dims);
    let layer_weights = || {
        weights
            .get(&layer.name)
            .ok_or_else(|| ExecError::MissingWeights(layer.name.clone()))
    };

    match layer.op {
        LayerOp::Dense {
            in_features,
            out_features,
        } => {
            let w = layer_weights()?;
            check_weights(layer, w, in_features * out_features, out_features)?;
            dense::<COUNT>(x, w, in_features, out_features, &mut out, ops);
        }
        LayerOp::Conv2d(p) => {
            let w = layer_weights()?;
            let taps = p.in_channels * p.kernel_h * p.kernel_w;
            check_weights(layer, w, p.out_channels * taps, p.out_channels)?;
            conv2d::<COUNT>(x, w, &p, &mut out, ops);
        }
        LayerOp::Relu => {
            for (o, &v) in out.values.iter_mut().zip(&x.values) {
                *o = v.max(0.0);
                if COUNT {
                    *ops += 1;
                }
            }
        }
        LayerOp::Add => {
            let y = inputs[1];
            for ((o, &a), &b) in out.values.iter_mut().zip(&x.values).zip(&y.values) {
                *o = a + b;
                if COUNT {
                    *ops += 1;
                }
            }
        }
        LayerOp::Maxpool2d(p) => maxpool2d::<COUNT>(x, &p, &mut out, ops),
        LayerOp::Globalavgpool => global_avg_pool::<COUNT>(x, &mut out, ops),
        LayerOp::Flatten => out.values.copy_from_slice(&x.values),
        LayerOp::Softmax => softmax::<COUNT>(x, &mut out, ops),
    }

    if out.values.iter().any(|v| !v.is_finite()) {
        return Err(ExecError::NonFiniteOutput {
            layer: layer.name.clone(),
        });
    }
    Ok(out)
}

fn check_weights(
    layer: &LayerSpec,
    w: &LayerWeights,
    kernel: usize,
    bias: usize,
) -> Result<(), ExecError> {
    if w.kernel.len() != kernel || w.bias.len() != bias {
        return Err(ExecError::ShapeMismatch {
            layer: layer.name.clone(),
            detail: format!(
                "weights hold {}+{} values, layer needs {kernel}+{bias}",
                w.kernel.len(),
                w.bias.len()
            ),
        });
    }
    Ok(())
}

fn dense<const COUNT: bool>(
    x: &Tensor,
    w: &LayerWeights,
    n_in: usize,
    n_out: usize,
    out: &mut Tensor,
    ops: &mut u64,
) {
    for b in 0..x.batch {
        let row = x.row(b);
        for o in 0..n_out {
            let wrow = &w.kernel[o * n_in..(o + 1) * n_in];
            let mut acc = w.bias[o];
            for (wi, xi) in wrow.iter().zip(row) {
                acc += wi * xi;
                if COUNT {
                    *ops += 2;
                }
            }
            out.values[b * n_out + o] = acc;
        }
    }
}

fn conv2d<const COUNT: bool>(
    x: &Tensor,
    w: &LayerWeights,
    p: &Conv2dParams,
    out: &mut Tensor,
    ops: &mut u64,
) {
    let (cin, h, wd) = (x.dims[0], x.dims[1], x.dims[2]);
    let (cout, ho, wo) = (out.dims[0], out.dims[1], out.dims[2]);
    let (kh, kw, stride, pad) = (p.kernel_h, p.kernel_w, p.stride, p.pad as isize);
    let mut taps = 0u64;
    for b in 0..x.batch {
        let xin = x.row(b);
        let base = b * cout * ho * wo;
        for oc in 0..cout {
            let wk = &w.kernel[oc * cin * kh * kw..(oc + 1) * cin * kh * kw];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = w.bias[oc];
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad;
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad;
                                let v = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                {
                                    xin[(ic * h + iy as usize) * wd + ix as usize]
                                } else {
                                    0.0
                                };
                                acc += wk[(ic * kh + ky) * kw + kx] * v;
                                if COUNT {
                                    taps += 1;
                                }
                            }
                        }
                    }
                    out.values[base + (oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    if COUNT {
        // One multiply and one add per tap.
        *ops += 2 * taps;
    }
}

fn maxpool2d<const COUNT: bool>(x: &Tensor, p: &PoolParams, out: &mut Tensor, ops: &mut u64) {
    let (c, h, wd) = (x.dims[0], x.dims[1], x.dims[2]);
    let (ho, wo) = (out.dims[1], out.dims[2]);
    let pad = p.pad as isize;
    for b in 0..x.batch {
        let xin = x.row(b);
        let base = b * c * ho * wo;
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    for ky in 0..p.kernel {
                        let iy = (oy * p.stride + ky) as isize - pad;
                        for kx in 0..p.kernel {
                            let ix = (ox * p.stride + kx) as isize - pad;
                            if COUNT {
                                *ops += 1;
                            }
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                best = best.max(xin[(ch * h + iy as usize) * wd + ix as usize]);
                            }
                        }
                    }
                    out.values[base + (ch * ho + oy) * wo + ox] = best;
                }
            }
        }
    }
}

fn global_avg_pool<const COUNT: bool>(x: &Tensor, out: &mut Tensor, ops: &mut u64) {
    let (c, h, w) = (x.dims[0], x.dims[1], x.dims[2]);
    let area = h * w;
    for b in 0..x.batch {
        let xin = x.row(b);
        for ch in 0..c {
            let mut sum = 0.0;
            for v in &xin[ch * area..(ch + 1) * area] {
                sum += v;
                if COUNT {
                    *ops += 1;
                }
            }
            out.values[b * c + ch] = sum / area as f64;
        }
    }
}

/// Softmax over the last axis, with max subtraction.
fn softmax<const COUNT: bool>(x: &Tensor, out: &mut Tensor, ops: &mut u64) {
    let width = *x.dims.last().expect("softmax input has an axis");
    for (src, dst) in x.values.chunks(width).zip(out.values.chunks_mut(width)) {
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
            if COUNT {
                *ops += 1;
            }
        }
    }
}
