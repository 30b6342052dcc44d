use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GaussianConfig, GaussianPolicy, SequenceConfig, SequencePolicyModel};
use crate::error::{Error, Result};

/// Self-describing policy record: architecture, seed and the flat parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Gaussian(GaussianPolicy),
    Sequence(SequencePolicyModel),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
enum Record {
    Gaussian {
        config: GaussianConfig,
        seed: u64,
        params: Vec<f64>,
    },
    Sequence {
        config: SequenceConfig,
        seed: u64,
        params: Vec<f64>,
        running_mse: Option<f64>,
    },
}

impl Checkpoint {
    pub fn into_gaussian(self) -> Result<GaussianPolicy> {
        match self {
            Checkpoint::Gaussian(p) => Ok(p),
            Checkpoint::Sequence(_) => Err(Error::Schema("expected a gaussian checkpoint, found a sequence model".into())),
        }
    }

    pub fn into_sequence(self) -> Result<SequencePolicyModel> {
        match self {
            Checkpoint::Sequence(m) => Ok(m),
            Checkpoint::Gaussian(_) => Err(Error::Schema("expected a sequence checkpoint, found a gaussian policy".into())),
        }
    }

    pub fn to_json(&self) -> String {
        let rec = match self {
            Checkpoint::Gaussian(p) => Record::Gaussian {
                config: p.config().clone(),
                seed: p.seed(),
                params: p.params().to_vec(),
            },
            Checkpoint::Sequence(m) => Record::Sequence {
                config: m.config().clone(),
                seed: m.seed(),
                params: m.params().to_vec(),
                running_mse: m.running_mse(),
            },
        };
        serde_json::to_string_pretty(&rec).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let rec: Record = serde_json::from_str(text).map_err(|e| Error::Schema(format!("checkpoint: {e}")))?;
        Ok(match rec {
            Record::Gaussian { config, seed, params } => Checkpoint::Gaussian(GaussianPolicy::from_params(config, params, seed)?),
            Record::Sequence {
                config,
                seed,
                params,
                running_mse,
            } => Checkpoint::Sequence(SequencePolicyModel::from_parts(config, params, seed, running_mse)?),
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_json() + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_json(&text)
}
