//! Multi-resolution hash encoding of normalised 3D coordinates.
//!
//! Level `l` has resolution `N_l = floor(N_base · b^l)`. A query at `x ∈ [0,1]³`
//! is trilinearly interpolated from the 8 surrounding lattice corners; each
//! corner's features live at `hash(corner) mod T` in that level's table.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Real, Tensor};

const PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub log2_table_size: u32,
    pub features: usize,
    pub base_resolution: usize,
    pub growth: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            log2_table_size: 14,
            features: 2,
            base_resolution: 4,
            growth: 1.5,
        }
    }
}

impl HashGridConfig {
    pub fn table_size(&self) -> usize {
        1 << self.log2_table_size
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).floor() as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid<T> {
    pub config: HashGridConfig,
    /// `[levels, table_size, features]`
    pub table: Tensor<T>,
}

/// Encoded batch plus the corner indices and weights needed for backprop.
#[derive(Debug, Clone)]
pub struct HashEncoding<T> {
    pub batch: usize,
    /// batch × (levels · features)
    pub features: Vec<T>,
    // batch × levels × 8 flat table offsets (entry start) and weights
    offsets: Vec<u32>,
    weights: Vec<T>,
    /// Set when any coordinate had to be clamped into [0, 1].
    pub clamped: bool,
}

impl<T: Real> HashEncoding<T> {
    /// Interpolation weights of sample `i` at `level` (8 corners).
    pub fn corner_weights(&self, i: usize, level: usize) -> &[T] {
        let levels = self.offsets.len() / (8 * self.batch.max(1));
        let base = (i * levels + level) * 8;
        &self.weights[base..base + 8]
    }

    pub fn corner_offsets(&self, i: usize, level: usize) -> &[u32] {
        let levels = self.offsets.len() / (8 * self.batch.max(1));
        let base = (i * levels + level) * 8;
        &self.offsets[base..base + 8]
    }
}

impl<T: Real> HashGrid<T> {
    /// Table initialised uniformly in ±1e-4.
    pub fn new<R: Rng>(config: HashGridConfig, rng: &mut R) -> Self {
        let n = config.levels * config.table_size() * config.features;
        let data = (0..n).map(|_| T::of(rng.random_range(-1e-4..1e-4))).collect();
        Self {
            config,
            table: Tensor::from_vec(&[config.levels, config.table_size(), config.features], data),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    fn slot(&self, level: usize, corner: [u32; 3]) -> usize {
        let h = (corner[0].wrapping_mul(PRIMES[0]))
            ^ (corner[1].wrapping_mul(PRIMES[1]))
            ^ (corner[2].wrapping_mul(PRIMES[2]));
        let idx = (h as usize) & (self.config.table_size() - 1);
        (level * self.config.table_size() + idx) * self.config.features
    }

    /// Encode `coords` (batch × 3, nominally in [0, 1]).
    pub fn encode(&self, coords: &[[f64; 3]]) -> HashEncoding<T> {
        let cfg = self.config;
        let batch = coords.len();
        let f = cfg.features;
        let mut features = vec![T::zero(); batch * cfg.output_dim()];
        let mut offsets = Vec::with_capacity(batch * cfg.levels * 8);
        let mut weights = Vec::with_capacity(batch * cfg.levels * 8);
        let mut clamped = false;
        for (i, x) in coords.iter().enumerate() {
            let mut p = *x;
            for c in p.iter_mut() {
                if !(0.0..=1.0).contains(c) {
                    clamped = true;
                    *c = c.clamp(0.0, 1.0);
                }
            }
            for level in 0..cfg.levels {
                let res = cfg.resolution(level);
                let mut cell = [0u32; 3];
                let mut frac = [0.0f64; 3];
                for a in 0..3 {
                    let pos = p[a] * res as f64;
                    let c = (pos.floor() as usize).min(res.saturating_sub(1));
                    cell[a] = c as u32;
                    frac[a] = pos - c as f64;
                }
                let out = &mut features[i * cfg.output_dim() + level * f..][..f];
                for corner in 0..8u32 {
                    let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                    let mut w = 1.0;
                    for a in 0..3 {
                        w *= if bits[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                    }
                    let slot = self.slot(level, [cell[0] + bits[0], cell[1] + bits[1], cell[2] + bits[2]]);
                    let w = T::of(w);
                    for k in 0..f {
                        out[k] += w * self.table.data[slot + k];
                    }
                    offsets.push(slot as u32);
                    weights.push(w);
                }
            }
        }
        HashEncoding {
            batch,
            features,
            offsets,
            weights,
            clamped,
        }
    }

    /// Accumulate table gradients for upstream `g_features` (batch × L·F).
    pub fn backward(&mut self, enc: &HashEncoding<T>, g_features: &[T]) {
        let cfg = self.config;
        let f = cfg.features;
        let dim = cfg.output_dim();
        assert_eq!(g_features.len(), enc.batch * dim, "upstream gradient size");
        for i in 0..enc.batch {
            for level in 0..cfg.levels {
                let g = &g_features[i * dim + level * f..][..f];
                let base = (i * cfg.levels + level) * 8;
                for c in 0..8 {
                    let slot = enc.offsets[base + c] as usize;
                    let w = enc.weights[base + c];
                    for k in 0..f {
                        self.table.grad[slot + k] += w * g[k];
                    }
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> HashGrid<U> {
        HashGrid {
            config: self.config,
            table: self.table.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn grid() -> HashGrid<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut g = HashGrid::<f64>::new(HashGridConfig::default(), &mut rng);
        // spread values so interpolation is visible
        for (i, v) in g.table.data.iter_mut().enumerate() {
            *v = ((i * 7919) % 1000) as f64 / 1000.0;
        }
        g
    }

    #[test]
    fn resolutions_follow_growth() {
        let cfg = HashGridConfig::default();
        let r: Vec<usize> = (0..cfg.levels).map(|l| cfg.resolution(l)).collect();
        assert_eq!(r, vec![4, 6, 9, 13, 20, 30, 45, 68]);
    }

    #[test]
    fn corner_query_returns_corner_features() {
        let g = grid();
        let cfg = g.config;
        let res = cfg.resolution(0) as f64;
        let x = [1.0 / res, 2.0 / res, 3.0 / res];
        let enc = g.encode(&[x]);
        let slot = g.slot(0, [1, 2, 3]);
        for k in 0..cfg.features {
            assert!((enc.features[k] - g.table.data[slot + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn cell_center_is_corner_mean() {
        let g = grid();
        let cfg = g.config;
        let res = cfg.resolution(2) as f64;
        let x = [1.5 / res, 0.5 / res, 2.5 / res];
        let enc = g.encode(&[x]);
        let mut mean = vec![0.0; cfg.features];
        for corner in 0..8u32 {
            let c = [1 + (corner & 1), (corner >> 1) & 1, 2 + ((corner >> 2) & 1)];
            let slot = g.slot(2, c);
            for k in 0..cfg.features {
                mean[k] += g.table.data[slot + k] / 8.0;
            }
        }
        for k in 0..cfg.features {
            assert!((enc.features[2 * cfg.features + k] - mean[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_partition_unity_and_clamp_flag() {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<[f64; 3]> = (0..200)
            .map(|_| [rng.random(), rng.random(), rng.random()])
            .collect();
        let enc = g.encode(&pts);
        assert!(!enc.clamped);
        for i in 0..pts.len() {
            for l in 0..g.config.levels {
                let s: f64 = enc.corner_weights(i, l).iter().sum();
                assert!((s - 1.0).abs() < 1e-7);
            }
        }
        let out = g.encode(&[[1.2, -0.1, 0.5]]);
        assert!(out.clamped);
        assert_eq!(out.features, g.encode(&[[1.0, 0.0, 0.5]]).features);
    }

    #[test]
    fn table_gradient_is_interpolation_weight() {
        let mut g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = [rng.random(), rng.random(), rng.random()];
        let enc = g.encode(&[x]);
        let dim = g.output_dim();
        // upstream gradient selects feature 0 of level 3
        let mut up = vec![0.0; dim];
        up[3 * g.config.features] = 1.0;
        g.table.zero_grad();
        g.backward(&enc, &up);
        let offsets = enc.corner_offsets(0, 3).to_vec();
        let weights = enc.corner_weights(0, 3).to_vec();
        let mut expected = std::collections::HashMap::new();
        for (o, w) in offsets.iter().zip(&weights) {
            *expected.entry(*o as usize).or_insert(0.0) += *w;
        }
        for (slot, w) in expected {
            assert!((g.table.grad[slot] - w).abs() < 1e-12);
        }
        let nonzero = g.table.grad.iter().filter(|v| **v != 0.0).count();
        assert!(nonzero <= 8);
    }
}
