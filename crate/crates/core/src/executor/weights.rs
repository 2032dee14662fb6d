//! Deterministic synthetic weights.
//!
//! Every weight is a pure function of `(weight_seed, layer name, index)`:
//! the layer key is `splitmix64(seed ^ fnv1a64(name))`, and element `i`
//! is `splitmix64(key + (i + 1) * 0x9E3779B97F4A7C15)` mapped through its
//! top 53 bits to `[0, 1)` and shifted to `[-0.5, 0.5)`. Kernel elements take
//! indices `0..k`, bias elements continue at `k..k + out`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::manifest::{LayerOp, ModelManifest, BYTES_PER_WEIGHT};

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Weight `index` of layer `name` under `seed`, in `[-0.5, 0.5)`.
pub fn weight_value(seed: u64, name: &str, index: u64) -> f64 {
    let key = splitmix64(seed ^ fnv1a64(name.as_bytes()));
    let bits = splitmix64(key.wrapping_add((index + 1).wrapping_mul(GOLDEN_GAMMA)));
    (bits >> 11) as f64 / (1u64 << 53) as f64 - 0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    /// Dense: `[out, in]`. Conv: `[cout, cin, kh, kw]`.
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl LayerWeights {
    pub fn len(&self) -> usize {
        self.kernel.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WeightStore {
    pub generated_from: u64,
    pub layers: BTreeMap<String, LayerWeights>,
}

impl WeightStore {
    pub fn get(&self, layer: &str) -> Option<&LayerWeights> {
        self.layers.get(layer)
    }

    pub fn insert(&mut self, layer: &str, weights: LayerWeights) {
        self.layers.insert(layer.to_string(), weights);
    }

    /// Stored bytes at four bytes per element.
    pub fn stored_bytes(&self) -> u64 {
        self.layers
            .values()
            .map(|w| w.len() as u64 * BYTES_PER_WEIGHT)
            .sum()
    }
}

pub fn generate_weights(manifest: &ModelManifest) -> WeightStore {
    let mut store = WeightStore {
        generated_from: manifest.weight_seed,
        layers: BTreeMap::new(),
    };
    for layer in &manifest.layers {
        let (kernel_len, bias_len) = match layer.op {
            LayerOp::Dense {
                in_features,
                out_features,
            } => (in_features * out_features, out_features),
            LayerOp::Conv2d(c) => (
                c.out_channels * c.in_channels * c.kernel_h * c.kernel_w,
                c.out_channels,
            ),
            _ => continue,
        };
        let seed = manifest.weight_seed;
        let name = layer.name.as_str();
        let kernel = (0..kernel_len as u64)
            .map(|i| weight_value(seed, name, i))
            .collect();
        let bias = (kernel_len as u64..(kernel_len + bias_len) as u64)
            .map(|i| weight_value(seed, name, i))
            .collect();
        store.insert(name, LayerWeights { kernel, bias });
    }
    store
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::bundled;

    #[test]
    fn regeneration_is_bit_identical() {
        let m = bundled::tiny_mlp();
        assert_eq!(generate_weights(&m), generate_weights(&m));
    }

    #[test]
    fn seed_changes_values() {
        let a = bundled::tiny_mlp();
        let mut b = a.clone();
        b.weight_seed += 1;
        assert_ne!(generate_weights(&a), generate_weights(&b));
    }

    #[test]
    fn relu_only_store_is_empty() {
        let store = generate_weights(&bundled::relu_only());
        assert!(store.layers.is_empty());
        assert_eq!(store.stored_bytes(), 0);
    }

    #[test]
    fn stored_bytes_match_manifest() {
        for m in [bundled::tiny_mlp(), bundled::dense_1000()] {
            assert_eq!(generate_weights(&m).stored_bytes(), m.total_weight_bytes);
        }
    }

    #[test]
    fn values_in_range_and_platform_fixed() {
        for i in 0..1000 {
            let v = weight_value(42, "fc", i);
            assert!((-0.5..0.5).contains(&v));
        }
        // Pinned so any change to the generator is caught.
        assert_eq!(splitmix64(0), 0xE220_A839_7B1D_CDAF);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
    }
}
