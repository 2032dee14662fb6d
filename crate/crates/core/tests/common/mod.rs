//! Random valid manifests for property tests.

use infershare_core::manifest::bundled::ManifestBuilder;
use infershare_core::manifest::{Conv2dParams, LayerOp, ModelManifest, PoolParams, TensorShape, MODEL_INPUT};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

/// A small convolutional DAG (every axis at most 32) drawn from `seed`,
/// optionally ending in a dense/softmax head.
pub fn random_manifest(seed: u64) -> ModelManifest {
    let mut rng = StdRng::seed_from_u64(seed);
    let c = rng.random_range(1..=4);
    let h = rng.random_range(3..=10);
    let w = rng.random_range(3..=10);
    let mut b = ManifestBuilder::new(&format!("rand{seed}"), TensorShape::variable(vec![c, h, w]));
    let mut shapes: Vec<(String, Vec<usize>)> = vec![(MODEL_INPUT.into(), vec![c, h, w])];
    let steps = rng.random_range(1..=6);
    for i in 0..steps {
        let (x, dims) = shapes.last().unwrap().clone();
        let name = format!("l{i}");
        let op = match rng.random_range(0..4) {
            0 => LayerOp::Conv2d(Conv2dParams {
                in_channels: dims[0],
                out_channels: rng.random_range(1..=4),
                kernel_h: rng.random_range(1..=3),
                kernel_w: rng.random_range(1..=3),
                stride: rng.random_range(1..=2),
                pad: rng.random_range(0..=1),
            }),
            1 => LayerOp::Relu,
            2 => LayerOp::Maxpool2d(PoolParams {
                kernel: rng.random_range(1..=3),
                stride: rng.random_range(1..=2),
                pad: rng.random_range(0..=1),
            }),
            _ => {
                let same: Vec<&String> = shapes.iter().filter(|(_, d)| *d == dims).map(|(n, _)| n).collect();
                let other = same[rng.random_range(0..same.len())].clone();
                let out = b.layer(&name, LayerOp::Add, &[&x, &other]);
                shapes.push((out, dims));
                continue;
            }
        };
        // Pool padding must stay below the window; skip draws that do not fit.
        if let LayerOp::Maxpool2d(p) = op {
            if p.pad >= p.kernel {
                continue;
            }
        }
        if let Ok(out) = op.output_dims(&[&dims]) {
            let n = b.layer(&name, op, &[&x]);
            shapes.push((n, out));
        }
    }
    if rng.random_bool(0.6) {
        let (x, dims) = shapes.last().unwrap().clone();
        let reduce = if rng.random_bool(0.5) { LayerOp::Globalavgpool } else { LayerOp::Flatten };
        let flat = b.layer("reduce", reduce, &[&x]);
        let in_features = reduce.output_dims(&[&dims]).unwrap()[0];
        let fc = b.layer(
            "fc",
            LayerOp::Dense {
                in_features,
                out_features: rng.random_range(1..=12),
            },
            &[&flat],
        );
        b.layer("prob", LayerOp::Softmax, &[&fc]);
    }
    b.finish(rng.random(), None)
}
