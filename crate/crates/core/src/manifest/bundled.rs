//! Manifests shipped with the crate.
//!
//! `resnet18` follows the published layer dimensions of the 18-layer residual
//! network (batch norm folded into conv biases) on a 3x224x224 input. Its
//! declared footprint is 78 MB, which is what the device reserves for it.

use super::{
    format::parse_manifest, Conv2dParams, LayerOp, LayerSpec, ModelManifest, PoolParams,
    TensorShape, MODEL_INPUT,
};

pub const RESNET18_FOOTPRINT_BYTES: u64 = 78_000_000;

/// Golden text of [`resnet18`].
pub const RESNET18_DOC: &str = include_str!("../../manifests/resnet18.manifest");
/// Golden text of [`tiny_mlp`].
pub const TINY_MLP_DOC: &str = include_str!("../../manifests/tiny-mlp.manifest");

/// Looks up a bundled manifest by name.
pub fn by_name(name: &str) -> Option<ModelManifest> {
    match name {
        "resnet18" => Some(resnet18()),
        "tiny-mlp" => Some(tiny_mlp()),
        "dense1000" => Some(dense_1000()),
        "relu-only" => Some(relu_only()),
        _ => None,
    }
}

pub const NAMES: [&str; 4] = ["resnet18", "tiny-mlp", "dense1000", "relu-only"];

/// Parses the golden resnet18 document.
pub fn resnet18_from_doc() -> ModelManifest {
    parse_manifest(RESNET18_DOC).expect("bundled resnet18 manifest is valid")
}

/// Incrementally builds a manifest, deriving each output shape.
pub struct ManifestBuilder {
    manifest: ModelManifest,
}

impl ManifestBuilder {
    pub fn new(name: &str, input: TensorShape) -> Self {
        Self {
            manifest: ModelManifest {
                model_name: name.to_string(),
                version: 1,
                input_shape: input,
                layers: Vec::new(),
                total_weight_bytes: 0,
                declared_footprint_bytes: 0,
                weight_seed: 0,
            },
        }
    }

    /// Appends a layer fed by `inputs` (layer names or `input`).
    ///
    /// # Panics
    /// If the inputs do not fit `op`; builders are only used with known-good
    /// topologies.
    pub fn layer(&mut self, name: &str, op: LayerOp, inputs: &[&str]) -> String {
        let shapes: Vec<&TensorShape> = inputs
            .iter()
            .map(|n| self.manifest.shape_of(n).expect("input defined"))
            .collect();
        let dims: Vec<&[usize]> = shapes.iter().map(|s| s.dims.as_slice()).collect();
        let out = op
            .output_dims(&dims)
            .unwrap_or_else(|e| panic!("layer {name}: {e}"));
        let output_shape = shapes[0].with_dims(out);
        self.manifest.layers.push(LayerSpec {
            name: name.to_string(),
            op,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
            output_shape,
            weight_bytes: op.implied_weight_bytes(),
        });
        name.to_string()
    }

    pub fn finish(mut self, seed: u64, footprint: Option<u64>) -> ModelManifest {
        let total = self.manifest.layers.iter().map(|l| l.weight_bytes).sum();
        self.manifest.total_weight_bytes = total;
        self.manifest.declared_footprint_bytes = footprint.unwrap_or(total);
        self.manifest.weight_seed = seed;
        self.manifest
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> LayerOp {
    LayerOp::Conv2d(Conv2dParams {
        in_channels: cin,
        out_channels: cout,
        kernel_h: k,
        kernel_w: k,
        stride,
        pad,
    })
}

pub fn resnet18() -> ModelManifest {
    let mut b = ManifestBuilder::new("resnet18", TensorShape::variable(vec![3, 224, 224]));
    b.layer("conv1", conv(3, 64, 7, 2, 3), &[MODEL_INPUT]);
    b.layer("relu1", LayerOp::Relu, &["conv1"]);
    let mut x = b.layer(
        "pool1",
        LayerOp::Maxpool2d(PoolParams {
            kernel: 3,
            stride: 2,
            pad: 1,
        }),
        &["relu1"],
    );
    let mut channels = 64;
    for (stage, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for block in 0..2 {
            let stride = if stage > 0 && block == 0 { 2 } else { 1 };
            let p = format!("s{}b{}", stage + 1, block + 1);
            let a = b.layer(&format!("{p}_conv_a"), conv(channels, width, 3, stride, 1), &[&x]);
            let a = b.layer(&format!("{p}_relu_a"), LayerOp::Relu, &[&a]);
            let c = b.layer(&format!("{p}_conv_b"), conv(width, width, 3, 1, 1), &[&a]);
            let skip = if stride != 1 || channels != width {
                b.layer(&format!("{p}_down"), conv(channels, width, 1, stride, 0), &[&x])
            } else {
                x.clone()
            };
            let sum = b.layer(&format!("{p}_add"), LayerOp::Add, &[&c, &skip]);
            x = b.layer(&format!("{p}_relu"), LayerOp::Relu, &[&sum]);
            channels = width;
        }
    }
    b.layer("gap", LayerOp::Globalavgpool, &[&x]);
    b.layer(
        "fc",
        LayerOp::Dense {
            in_features: 512,
            out_features: 1000,
        },
        &["gap"],
    );
    b.layer("prob", LayerOp::Softmax, &["fc"]);
    b.finish(18, Some(RESNET18_FOOTPRINT_BYTES))
}

/// Small classifier used throughout the tests.
pub fn tiny_mlp() -> ModelManifest {
    let mut b = ManifestBuilder::new("tiny-mlp", TensorShape::variable(vec![16]));
    b.layer(
        "fc1",
        LayerOp::Dense {
            in_features: 16,
            out_features: 32,
        },
        &[MODEL_INPUT],
    );
    b.layer("relu1", LayerOp::Relu, &["fc1"]);
    b.layer(
        "fc2",
        LayerOp::Dense {
            in_features: 32,
            out_features: 10,
        },
        &["relu1"],
    );
    b.layer("prob", LayerOp::Softmax, &["fc2"]);
    b.finish(7, Some(16_384))
}

/// One dense 1000 -> 1000 layer at batch 1.
pub fn dense_1000() -> ModelManifest {
    let mut b = ManifestBuilder::new("dense1000", TensorShape::fixed(1, vec![1000]));
    b.layer(
        "fc",
        LayerOp::Dense {
            in_features: 1000,
            out_features: 1000,
        },
        &[MODEL_INPUT],
    );
    b.finish(0, None)
}

/// Weightless toy: a single relu.
pub fn relu_only() -> ModelManifest {
    let mut b = ManifestBuilder::new("relu-only", TensorShape::variable(vec![8]));
    b.layer("act", LayerOp::Relu, &[MODEL_INPUT]);
    b.finish(0, Some(64))
}

/// Single relu over `flops` elements: costs exactly `flops` per sample,
/// carries no weights, and claims `footprint` bytes of memory.
pub fn synthetic(name: &str, flops: usize, footprint: u64) -> ModelManifest {
    let mut b = ManifestBuilder::new(name, TensorShape::variable(vec![flops]));
    b.layer("act", LayerOp::Relu, &[MODEL_INPUT]);
    b.finish(0, Some(footprint))
}

/// Dense stack `widths[0] -> widths[1] -> ...` with relus between, ending
/// in softmax. Handy for synthetic tenants with a chosen cost.
pub fn mlp(name: &str, widths: &[usize], seed: u64, footprint: Option<u64>) -> ModelManifest {
    assert!(widths.len() >= 2, "mlp needs at least input and output width");
    let mut b = ManifestBuilder::new(name, TensorShape::variable(vec![widths[0]]));
    let mut x = MODEL_INPUT.to_string();
    for (i, pair) in widths.windows(2).enumerate() {
        x = b.layer(
            &format!("fc{}", i + 1),
            LayerOp::Dense {
                in_features: pair[0],
                out_features: pair[1],
            },
            &[&x],
        );
        if i + 2 < widths.len() {
            x = b.layer(&format!("relu{}", i + 1), LayerOp::Relu, &[&x]);
        }
    }
    b.layer("prob", LayerOp::Softmax, &[&x]);
    b.finish(seed, footprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{model_flops, validate_manifest};

    #[test]
    fn golden_documents_match_builders() {
        assert_eq!(resnet18().to_document(), RESNET18_DOC);
        assert_eq!(tiny_mlp().to_document(), TINY_MLP_DOC);
        assert_eq!(resnet18_from_doc(), resnet18());
    }

    #[test]
    fn bundled_manifests_validate() {
        for name in NAMES {
            let m = by_name(name).unwrap();
            assert!(validate_manifest(&m).is_ok(), "{name}");
        }
    }

    #[test]
    fn relu_only_has_zero_weights() {
        let m = relu_only();
        assert_eq!(m.total_weight_bytes, 0);
        assert_eq!(model_flops(&m, 1).unwrap(), 8);
    }
}
