//! Single-file JSON checkpoints: run config, data dims, the geolocation
//! graph, the normalizer and every named parameter tensor. Floats are
//! written with round-trip precision, so a reloaded model reproduces
//! forward outputs bit for bit.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::data::Normalizer;
use crate::error::{MipError, Result};
use crate::graph::GeoGraph;
use crate::model::{Dims, MipModel};

const FORMAT: &str = "mip-checkpoint/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: Config,
    pub dims: Dims,
    pub adjacency: NamedTensor,
    pub normalizer: Option<Normalizer>,
    pub tensors: Vec<NamedTensor>,
}

fn tensor(name: &str, a: &Array2<f64>) -> NamedTensor {
    NamedTensor {
        name: name.to_string(),
        shape: [a.nrows(), a.ncols()],
        dtype: "float64".into(),
        data: a.iter().copied().collect(),
    }
}

fn array(t: &NamedTensor) -> Result<Array2<f64>> {
    if t.dtype != "float64" {
        return Err(MipError::Serde(format!("tensor `{}` has unsupported dtype {}", t.name, t.dtype)));
    }
    Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
        .map_err(|e| MipError::Serde(format!("tensor `{}`: {e}", t.name)))
}

impl Checkpoint {
    /// Captures `model`; `config` supplies the non-model sections.
    pub fn new(model: &MipModel, config: &Config, normalizer: Option<&Normalizer>) -> Self {
        let mut config = config.clone();
        config.model = model.config().clone();
        Self {
            format: FORMAT.into(),
            config,
            dims: model.dims(),
            adjacency: tensor("adjacency", model.graph().adjacency()),
            normalizer: normalizer.cloned(),
            tensors: model.params().iter().map(|(n, v)| tensor(n, v)).collect(),
        }
    }

    /// Rebuilds the model, checking every tensor name and shape.
    pub fn model(&self) -> Result<MipModel> {
        if self.format != FORMAT {
            return Err(MipError::Serde(format!("unknown checkpoint format `{}`", self.format)));
        }
        let graph = GeoGraph::new(array(&self.adjacency)?)?;
        let mut model = MipModel::new(&self.config.model, self.dims, graph)?;
        if model.params().len() != self.tensors.len() {
            return Err(MipError::Serde(format!(
                "checkpoint has {} tensors, model expects {}",
                self.tensors.len(),
                model.params().len()
            )));
        }
        for t in &self.tensors {
            let id = model
                .params()
                .id(&t.name)
                .ok_or_else(|| MipError::Serde(format!("unexpected tensor `{}`", t.name)))?;
            let value = array(t)?;
            let slot = model.params_mut().get_mut(id);
            if slot.dim() != value.dim() {
                return Err(MipError::Serde(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    t.name,
                    value.dim(),
                    slot.dim()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| MipError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MipError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{ModelConfig, Variant};
    use ndarray::Array;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn model(variant: Variant) -> MipModel {
        let cfg = ModelConfig {
            hidden_dim: 4,
            num_prototypes: 3,
            num_st_layers: 2,
            variant,
            seed: 11,
            ..ModelConfig::default()
        };
        let dims = Dims {
            nodes: 6,
            features: 2,
            window: 3,
        };
        MipModel::new(&cfg, dims, GeoGraph::grid(2, 3).unwrap()).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for variant in [Variant::Full, Variant::Backbone] {
            let mut m = model(variant);
            // move off the initial values so nothing is trivially reproducible
            for v in m.params_mut().values_mut() {
                v.mapv_inplace(|x| x + rng.random_range(-0.1..0.1));
            }
            let norm = Normalizer {
                mean: vec![0.1, 1.0 / 3.0],
                std: vec![2.5, 1e-7],
            };
            Checkpoint::new(&m, &Config::default(), Some(&norm)).save(&path).unwrap();
            let ck = Checkpoint::load(&path).unwrap();
            assert_eq!(ck.normalizer.as_ref(), Some(&norm));
            let back = ck.model().unwrap();
            let x = Array::from_shape_fn((36, 2), |_| rng.random_range(-3.0..3.0));
            assert_eq!(m.predict(&x).unwrap(), back.predict(&x).unwrap());
        }
    }

    #[test]
    fn tampered_tensors_are_rejected() {
        let mut ck = Checkpoint::new(&model(Variant::Full), &Config::default(), None);
        ck.tensors[0].shape = [1, 1];
        assert!(ck.model().is_err());
        let mut ck = Checkpoint::new(&model(Variant::Full), &Config::default(), None);
        ck.tensors.pop();
        assert!(ck.model().is_err());
        let mut ck = Checkpoint::new(&model(Variant::Full), &Config::default(), None);
        ck.format = "other".into();
        assert!(ck.model().is_err());
    }
}
