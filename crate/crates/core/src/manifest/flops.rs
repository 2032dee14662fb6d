//! Closed-form arithmetic cost of each layer kind.
//!
//! A multiply-accumulate counts as two flops. Elementwise kinds cost one op
//! per output element, pooling costs one op per window tap (padding taps
//! included), and `flatten` is a pure reshape with no arithmetic.

use super::{LayerOp, LayerSpec, ManifestError, ModelManifest, TensorShape};

/// Flops for one layer at the given batch, from its per-sample input shapes.
pub fn layer_flops(
    layer: &LayerSpec,
    inputs: &[&TensorShape],
    batch: usize,
) -> Result<u64, ManifestError> {
    let dims: Vec<&[usize]> = inputs.iter().map(|s| s.dims.as_slice()).collect();
    op_flops(&layer.op, &dims, batch).map_err(|detail| ManifestError::ShapeMismatch {
        layer: layer.name.clone(),
        detail,
    })
}

/// Same as [`layer_flops`] but on bare per-sample dims.
pub fn op_flops(op: &LayerOp, inputs: &[&[usize]], batch: usize) -> Result<u64, String> {
    let out = op.output_dims(inputs)?;
    let b = batch as u64;
    let out_elems: u64 = out.iter().map(|&d| d as u64).product::<u64>() * b;
    Ok(match *op {
        LayerOp::Dense {
            in_features,
            out_features,
        } => 2 * in_features as u64 * out_features as u64 * b,
        LayerOp::Conv2d(c) => {
            2 * (c.kernel_h * c.kernel_w * c.in_channels) as u64 * out_elems
        }
        LayerOp::Maxpool2d(p) => (p.kernel * p.kernel) as u64 * out_elems,
        LayerOp::Globalavgpool => {
            let x = inputs[0];
            (x[1] * x[2]) as u64 * out_elems
        }
        LayerOp::Relu | LayerOp::Add | LayerOp::Softmax => out_elems,
        LayerOp::Flatten => 0,
    })
}

/// Total flops of one forward pass at `batch`. Linear in `batch`.
pub fn model_flops(manifest: &ModelManifest, batch: usize) -> Result<u64, ManifestError> {
    manifest
        .layers
        .iter()
        .map(|layer| {
            let inputs = layer
                .inputs
                .iter()
                .map(|name| {
                    manifest
                        .shape_of(name)
                        .ok_or_else(|| ManifestError::CyclicGraph {
                            layer: layer.name.clone(),
                            input: name.clone(),
                        })
                })
                .collect::<Result<Vec<_>, _>>()?;
            layer_flops(layer, &inputs, batch)
        })
        .sum()
}

/// Per-layer flops at `batch`, in layer order.
pub fn flops_by_layer(
    manifest: &ModelManifest,
    batch: usize,
) -> Result<Vec<(String, u64)>, ManifestError> {
    manifest
        .layers
        .iter()
        .map(|layer| {
            let inputs: Vec<&TensorShape> = layer
                .inputs
                .iter()
                .filter_map(|n| manifest.shape_of(n))
                .collect();
            Ok((layer.name.clone(), layer_flops(layer, &inputs, batch)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{Conv2dParams, LayerSpec, TensorShape};

    fn layer(op: LayerOp, out: Vec<usize>) -> LayerSpec {
        LayerSpec {
            name: "l".into(),
            op,
            inputs: vec!["input".into()],
            output_shape: TensorShape::variable(out),
            weight_bytes: op.implied_weight_bytes(),
        }
    }

    #[test]
    fn dense_counts_two_flops_per_mac() {
        let l = layer(
            LayerOp::Dense {
                in_features: 1000,
                out_features: 1000,
            },
            vec![1000],
        );
        let x = TensorShape::variable(vec![1000]);
        assert_eq!(layer_flops(&l, &[&x], 1).unwrap(), 2_000_000);
    }

    #[test]
    fn relu_is_one_op_per_element() {
        let l = layer(LayerOp::Relu, vec![1000]);
        let x = TensorShape::variable(vec![1000]);
        assert_eq!(layer_flops(&l, &[&x], 1).unwrap(), 1_000);
    }

    #[test]
    fn conv_matches_hand_multiplication() {
        let c = Conv2dParams {
            in_channels: 64,
            out_channels: 64,
            kernel_h: 3,
            kernel_w: 3,
            stride: 1,
            pad: 1,
        };
        let l = layer(LayerOp::Conv2d(c), vec![64, 56, 56]);
        let x = TensorShape::variable(vec![64, 56, 56]);
        // 2 * 3 * 3 * 64 = 1152 per output; 56 * 56 * 64 = 200_704 outputs.
        assert_eq!(1152u64 * 200_704, 231_211_008);
        assert_eq!(layer_flops(&l, &[&x], 1).unwrap(), 231_211_008);
    }

    #[test]
    fn mismatched_input_is_shape_error() {
        let l = layer(
            LayerOp::Dense {
                in_features: 10,
                out_features: 2,
            },
            vec![2],
        );
        let x = TensorShape::variable(vec![11]);
        assert!(matches!(
            layer_flops(&l, &[&x], 1),
            Err(ManifestError::ShapeMismatch { .. })
        ));
    }
}
