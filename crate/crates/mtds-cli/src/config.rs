//! The training configuration file: one TOML document holding the model
//! dimensions, the training algorithm and its hyperparameters, the dataset
//! path, and the seed.
//!
//! ```toml
//! seed = 1
//!
//! [model]
//! base = "lds"        # "lds" | "rnn"
//! n = 4               # state dimension
//! m = 1               # input dimension
//! p = 1               # observation dimension
//! k = 4               # latent code dimension
//! hidden = 300        # hypernetwork hidden width
//!
//! [data]
//! train = "data/train.jsonl"
//!
//! [train]
//! algo = "mco"        # "mco" | "elbo"
//!
//! [train.mco]         # omit for the full benchmark schedule
//! epochs = 1400
//! m_rsmp = 5
//! log_s_prior_sd = 0.05
//! schedule = [
//!   { epoch = 1,    lr = 8e-4, beta1 = 0.9, log_s_mean = -1.0, m = 1000 },
//!   { epoch = 200,  lr = 8e-4, beta1 = 0.9, log_s_mean = -1.3, m = 1000 },
//!   { epoch = 600,  lr = 4e-4, beta1 = 0.9, log_s_mean = -1.5, m = 2000 },
//!   { epoch = 1000, lr = 2e-4, beta1 = 0.8, log_s_mean = -1.5, m = 4000 },
//! ]
//!
//! [train.elbo]        # used when algo = "elbo"
//! epochs = 1000
//! kl_free_epochs = 50
//! init_posterior_sd = 1e-3
//! lr = 4e-4
//! lr_variational = 2e-3
//! eval_samples = 8
//! ```

use anyhow::{bail, Context, Result};
use mtds::learn::{ElboConfig, McoConfig};
use mtds::model::{BaseModel, ModelDims};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::fsio;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSection {
    pub base: BaseModel,
    pub n: usize,
    pub m: usize,
    pub p: usize,
    pub k: usize,
    pub hidden: usize,
}

impl ModelSection {
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            n: self.n,
            m: self.m,
            p: self.p,
            k: self.k,
            h: self.hidden,
        }
    }

    pub fn dho() -> Self {
        Self {
            base: BaseModel::Lds,
            n: 4,
            m: 1,
            p: 1,
            k: 4,
            hidden: 300,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct DataSection {
    pub train: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainAlgo {
    Mco,
    Elbo,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSection {
    pub algo: TrainAlgo,
    pub mco: Option<McoConfig>,
    pub elbo: Option<ElboConfig>,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            algo: TrainAlgo::Mco,
            mco: None,
            elbo: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Config {
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
}

impl Config {
    pub fn dho_default() -> Self {
        Self {
            seed: 1,
            model: ModelSection::dho(),
            data: DataSection::default(),
            train: TrainSection::default(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fsio::read_to_string(path)?;
        let config: Self =
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsio::write_atomic(path, &toml::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.n == 0 || self.model.p == 0 || self.model.k == 0 || self.model.hidden == 0 {
            bail!("model dimensions must be positive");
        }
        if let Some(mco) = &self.train.mco {
            mco.validate()?;
        }
        if let Some(elbo) = &self.train.elbo {
            elbo.validate()?;
        }
        Ok(())
    }

    pub fn mco_config(&self) -> McoConfig {
        self.train.mco.clone().unwrap_or_else(McoConfig::dho_full)
    }

    pub fn elbo_config(&self) -> ElboConfig {
        self.train.elbo.clone().unwrap_or_default()
    }

    /// Stable 64-bit digest of the canonical serialized form; checkpoints
    /// refuse to resume under a different configuration.
    pub fn digest(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        format!("{:016x}", fnv1a(text.as_bytes()))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    hash
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip_and_digest_stability() {
        let config = Config::dho_default();
        let text = toml::to_string_pretty(&config).unwrap();
        let back: Config = toml::from_str(&text).unwrap();
        assert_eq!(config.digest(), back.digest());
    }

    #[test]
    fn digest_changes_with_content() {
        let a = Config::dho_default();
        let mut b = Config::dho_default();
        b.seed = 2;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn parses_inline_schedule() {
        let text = r#"
seed = 7
[model]
base = "lds"
n = 4
m = 1
p = 1
k = 4
hidden = 300
[train]
algo = "mco"
[train.mco]
epochs = 10
m_rsmp = 3
log_s_prior_sd = 0.05
schedule = [{ epoch = 1, lr = 1e-3, beta1 = 0.9, log_s_mean = -1.0, m = 50 }]
"#;
        let config: Config = toml::from_str(text).unwrap();
        config.validate().unwrap();
        assert_eq!(config.mco_config().schedule[0].m_particles, 50);
    }
}
