//! JSON checkpoints: the full training config plus named parameter tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Architecture;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed update steps.
    pub step: u64,
    pub params: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        step: u64,
        arch: &Architecture,
        params: &[Tensor],
    ) -> Result<Self> {
        arch.check_params(params)?;
        let params = arch
            .param_specs()
            .iter()
            .zip(params)
            .map(|(spec, t)| NamedTensor {
                name: spec.name.clone(),
                shape: t.shape().to_vec(),
                data: t.data().to_vec(),
            })
            .collect();
        Ok(Self {
            config,
            step,
            params,
        })
    }

    pub fn architecture(&self) -> Result<Architecture> {
        Architecture::new(self.config.model.clone(), self.config.episode.ways)
    }

    /// Rebuilds the architecture and its parameters, checking names and shapes.
    pub fn restore(&self) -> Result<(Architecture, Vec<Tensor>)> {
        let arch = self.architecture()?;
        let specs = arch.param_specs();
        if specs.len() != self.params.len() {
            return Err(Error::config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                self.params.len(),
                specs.len()
            )));
        }
        let params = specs
            .iter()
            .zip(&self.params)
            .map(|(spec, nt)| {
                if spec.name != nt.name || spec.shape != nt.shape {
                    return Err(Error::config(format!(
                        "checkpoint tensor {} {:?} does not match {} {:?}",
                        nt.name, nt.shape, spec.name, spec.shape
                    )));
                }
                Tensor::new(nt.shape.clone(), nt.data.clone())
                    .map_err(|e| Error::config(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((arch, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
