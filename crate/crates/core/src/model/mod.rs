//! The hierarchical VAE: λ embedding, residual blocks, latent blocks.

pub mod block;
pub mod config;
pub mod embedding;
pub mod latent;
pub mod network;


use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{BlockConfig, ModelConfig, NormType, Stage};
pub use network::{LatentSite, LatentSource, Network, TrainOutput};

use crate::error::{QarvError, Result};
use crate::nn::checkpoint::{Checkpoint, Entry, EMA_SUFFIX};
use crate::nn::{ParamStore, Real, Tensor};

/// Which parameter set to read from a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Weights {
    Raw,
    /// EMA shadows when present, raw values otherwise.
    Ema,
}

/// A network layout together with its parameter values.
#[derive(Clone, Debug)]
pub struct Qarv<T: Real = f32> {
    pub net: Network,
    pub store: ParamStore<T>,
}

impl<T: Real> Qarv<T> {
    /// Freshly initialized model; identical seeds give identical weights.
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let net = Network::build(config, &mut store, &mut ChaCha8Rng::seed_from_u64(seed))?;
        Ok(Qarv { net, store })
    }

    pub fn config(&self) -> &ModelConfig {
        self.net.config()
    }

    pub fn cast<U: Real>(&self) -> Qarv<U> {
        Qarv {
            net: self.net.clone(),
            store: self.store.cast(),
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Parameters, optionally EMA shadows, and any extra entries.
    pub fn to_checkpoint(&self, ema: Option<&ParamStore<T>>, extra: Vec<Entry>) -> Checkpoint {
        let mut entries: Vec<Entry> = self
            .store
            .iter()
            .map(|p| Entry::from_tensor(p.name.clone(), &p.value))
            .collect();
        if let Some(ema) = ema {
            entries.extend(
                ema.iter()
                    .map(|p| Entry::from_tensor(format!("{}{EMA_SUFFIX}", p.name), &p.value)),
            );
        }
        entries.extend(extra);
        Checkpoint {
            config_json: self.config().to_json(),
            entries,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, weights: Weights) -> Result<Self> {
        let config = ModelConfig::from_json(&ckpt.config_json)?;
        let mut model = Self::new(&config, 0)?;
        let values = model.read_values(ckpt, weights)?;
        model.store.load_values(&values)?;
        Ok(model)
    }

    fn read_values(&self, ckpt: &Checkpoint, weights: Weights) -> Result<Vec<(String, Tensor<T>)>> {
        let has_ema = self
            .store
            .iter()
            .all(|p| ckpt.get(&format!("{}{EMA_SUFFIX}", p.name)).is_some());
        let suffix = if weights == Weights::Ema && has_ema {
            EMA_SUFFIX
        } else {
            ""
        };
        self.store
            .iter()
            .map(|p| {
                let key = format!("{}{suffix}", p.name);
                let entry = ckpt
                    .get(&key)
                    .ok_or_else(|| QarvError::Checkpoint(format!("missing parameter {key}")))?;
                Ok((p.name.clone(), entry.to_tensor()))
            })
            .collect()
    }

    /// Parameter values of a named set stored in `ckpt` (e.g. EMA shadows).
    pub fn store_from(&self, ckpt: &Checkpoint, weights: Weights) -> Result<ParamStore<T>> {
        let mut store = self.store.clone();
        store.load_values(&self.read_values(ckpt, weights)?)?;
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint(None, Vec::new()).save(path)
    }

    pub fn load(path: &Path, weights: Weights) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?, weights)
    }
}
