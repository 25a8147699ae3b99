//! Versioned JSON checkpoints. Floats are written in shortest round-trip
//! form and parsed exactly, so save/load is bit-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::Optimizer;
use super::RetrieverParams;
use crate::error::{RarError, Result};

pub const FORMAT: &str = "rar-retriever";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub format_version: u32,
    pub hidden: usize,
    pub dim: usize,
    pub num_layers: usize,
    pub step: u64,
    pub params: RetrieverParams,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<Optimizer>,
}

impl Checkpoint {
    pub fn new(params: RetrieverParams, optimizer: Option<Optimizer>) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            format_version: FORMAT_VERSION,
            hidden: params.hidden,
            dim: params.dim,
            num_layers: params.num_layers(),
            step: optimizer.as_ref().map_or(0, |a| a.step),
            params,
            optimizer,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = serde_json::to_string(self).expect("checkpoint serializes");
        fs::write(path, body).map_err(|e| RarError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| RarError::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&body).map_err(|e| RarError::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        if ck.format != FORMAT || ck.format_version != FORMAT_VERSION {
            return Err(RarError::invalid(format!(
                "{}: unsupported checkpoint {} v{}",
                path.display(),
                ck.format,
                ck.format_version
            )));
        }
        if ck.params.dim != ck.dim || ck.params.hidden != ck.hidden || ck.params.num_layers() != ck.num_layers {
            return Err(RarError::invalid(format!("{}: header does not match tensors", path.display())));
        }
        Ok(ck)
    }
}
