//! The three coordinate networks of one fitting session plus the shared hash
//! table, and their checkpoint format.
//!
//! A checkpoint is `<stem>.json` (shapes, step, rng state, config) next to
//! `<stem>.bin`, the parameters as little-endian f32 in [`NetworkBundle::tensors`]
//! order.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{HashGrid, HashGridConfig, Real, SirenMlp, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub hash: HashGridConfig,
    pub omega0: f64,
    pub aif_hidden: Vec<usize>,
    pub tissue_hidden: Vec<usize>,
    pub param_hidden: Vec<usize>,
    /// Raw parameter-head outputs: cbv, mtt, delay, alpha, beta, nu.
    pub param_outputs: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            hash: HashGridConfig::default(),
            omega0: 15.0,
            aif_hidden: vec![16, 16, 16],
            tissue_hidden: vec![128, 128, 128],
            param_hidden: vec![64, 64, 64],
            param_outputs: 6,
        }
    }
}

impl NetworkConfig {
    fn widths(input: usize, hidden: &[usize], out: usize) -> Vec<usize> {
        let mut w = Vec::with_capacity(hidden.len() + 2);
        w.push(input);
        w.extend_from_slice(hidden);
        w.push(out);
        w
    }

    pub fn aif_widths(&self) -> Vec<usize> {
        Self::widths(1, &self.aif_hidden, 1)
    }

    /// Tissue network input is `[t, h(x)]`.
    pub fn tissue_widths(&self) -> Vec<usize> {
        Self::widths(1 + self.hash.output_dim(), &self.tissue_hidden, 1)
    }

    pub fn param_widths(&self) -> Vec<usize> {
        Self::widths(self.hash.output_dim(), &self.param_hidden, self.param_outputs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkBundle<T> {
    pub config: NetworkConfig,
    pub hash: HashGrid<T>,
    pub aif: SirenMlp<T>,
    pub tissue: SirenMlp<T>,
    pub param: SirenMlp<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub config: NetworkConfig,
    pub shapes: Vec<Vec<usize>>,
    pub step: u64,
    pub rng_seed: u64,
    pub rng_word_pos: u128,
}

impl<T: Real> NetworkBundle<T> {
    pub fn new<R: Rng>(config: NetworkConfig, rng: &mut R) -> Self {
        let hash = HashGrid::new(config.hash, rng);
        let aif = SirenMlp::new(&config.aif_widths(), config.omega0, rng);
        let tissue = SirenMlp::new(&config.tissue_widths(), config.omega0, rng);
        let param = SirenMlp::new(&config.param_widths(), config.omega0, rng);
        Self {
            config,
            hash,
            aif,
            tissue,
            param,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.hash.table];
        v.extend(self.aif.tensors());
        v.extend(self.tissue.tensors());
        v.extend(self.param.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.hash.table];
        v.extend(self.aif.tensors_mut());
        v.extend(self.tissue.tensors_mut());
        v.extend(self.param.tensors_mut());
        v
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.tensors_mut().into_iter().for_each(|t| t.zero_grad());
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.all_finite())
    }

    pub fn cast<U: Real>(&self) -> NetworkBundle<U> {
        NetworkBundle {
            config: self.config.clone(),
            hash: self.hash.cast(),
            aif: self.aif.cast(),
            tissue: self.tissue.cast(),
            param: self.param.cast(),
        }
    }

    /// Write `<stem>.json` and `<stem>.bin`.
    pub fn save_checkpoint(&self, stem: &Path, step: u64, rng_seed: u64, rng_word_pos: u128) -> Result<()> {
        let header = CheckpointHeader {
            version: 1,
            config: self.config.clone(),
            shapes: self.tensors().iter().map(|t| t.shape.clone()).collect(),
            step,
            rng_seed,
            rng_word_pos,
        };
        let mut blob = Vec::with_capacity(self.n_params() * 4);
        for t in self.tensors() {
            for v in &t.data {
                blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            }
        }
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&json_path, e))?;
        fs::write(&json_path, text + "\n").map_err(|e| Error::io(&json_path, e))?;
        fs::write(&bin_path, blob).map_err(|e| Error::io(&bin_path, e))?;
        Ok(())
    }

    /// Read a checkpoint written by [`Self::save_checkpoint`].
    pub fn load_checkpoint(stem: &Path) -> Result<(Self, CheckpointHeader)> {
        let json_path = stem.with_extension("json");
        let bin_path = stem.with_extension("bin");
        let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
        let header: CheckpointHeader =
            serde_json::from_str(&text).map_err(|e| Error::json(&json_path, e))?;
        let blob = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut bundle = Self::new(header.config.clone(), &mut rng);
        let expected: Vec<Vec<usize>> = bundle.tensors().iter().map(|t| t.shape.clone()).collect();
        if expected != header.shapes {
            return Err(Error::BundleFormat {
                path: json_path,
                reason: "tensor shapes do not match the network config".into(),
            });
        }
        if blob.len() != bundle.n_params() * 4 {
            return Err(Error::BundleFormat {
                path: bin_path,
                reason: format!("expected {} bytes, found {}", bundle.n_params() * 4, blob.len()),
            });
        }
        let mut chunks = blob.chunks_exact(4);
        for t in bundle.tensors_mut() {
            for v in t.data.iter_mut() {
                let x = f32::from_le_bytes(chunks.next().unwrap().try_into().unwrap());
                *v = T::of(x as f64);
            }
        }
        Ok((bundle, header))
    }
}
