//! Trained weights on disk: one npz with `model/<name>`, `attention/<name>`
//! and a JSON `config` entry describing how to rebuild the network.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use ndarray_npy::NpzWriter;
use serde::{Deserialize, Serialize};
use segfuse_autograd::Tensor;

use crate::ablation::Protocol;
use crate::attention::AttentionParams;
use crate::error::{Error, Result};
use crate::labels::Modality;
use crate::model::{Model, ModelConfig};
use crate::prompting::Variant;
use crate::volume_io::{npz_options, open_npz};

/// Everything besides the weights needed to use a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub variant: Variant,
    pub modalities: Vec<Modality>,
    pub seed: u64,
    /// The data split the weights were trained on, when known.
    #[serde(default)]
    pub split: Option<SplitRecord>,
}

/// Identifies the training side of a split so that evaluation can use the
/// complementary cases.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub protocol: Protocol,
    pub fold: usize,
    pub seed: u64,
    pub hash: String,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: Model,
    pub attention: AttentionParams,
}

impl Checkpoint {
    pub fn new(meta: CheckpointMeta, model: Model, attention: AttentionParams) -> Result<Self> {
        if meta.modalities.len() != meta.model.in_channels {
            return Err(Error::Config(format!(
                "{} modalities listed for a model with {} input channels",
                meta.modalities.len(),
                meta.model.in_channels
            )));
        }
        if model.config() != &meta.model {
            return Err(Error::Config("model does not match checkpoint configuration".into()));
        }
        let c = meta.model.prompt_embed_dim;
        if attention.channels() != c {
            return Err(Error::Config(format!(
                "attention has {} channels, model features have {c}",
                attention.channels()
            )));
        }
        Ok(Self { meta, model, attention })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        let mut npz = NpzWriter::new_with_options(file, npz_options());
        let io = |e: ndarray_npy::WriteNpzError| Error::Io(std::io::Error::other(e.to_string()));
        let json = serde_json::to_vec(&self.meta).map_err(|e| Error::format("config", e))?;
        npz.add_array("config", &Array1::from(json)).map_err(io)?;
        let stores = [("model", self.model.store()), ("attention", self.attention.store())];
        for (prefix, store) in stores {
            for id in store.ids() {
                let t = store.get(id);
                let arr = ArrayD::from_shape_vec(IxDyn(t.shape()), t.data().to_vec())
                    .map_err(|e| Error::format(store.name(id), e))?;
                npz.add_array(format!("{prefix}/{}", store.name(id)), &arr).map_err(io)?;
            }
        }
        npz.finish().map_err(io)?;
        Ok(())
    }

    /// Rebuilds the network from the stored configuration and fills in every
    /// parameter; missing or mis-shaped entries are errors.
    pub fn load(path: &Path) -> Result<Self> {
        let mut npz = open_npz(path)?;
        let raw: Array1<u8> = npz.by_name("config").map_err(|e| Error::format("config", e))?;
        let meta: CheckpointMeta =
            serde_json::from_slice(&raw.to_vec()).map_err(|e| Error::format("config", e))?;
        let mut read = |key: String| -> Option<Tensor> {
            let arr: ArrayD<f64> = npz.by_name(&key).ok()?;
            let shape = arr.shape().to_vec();
            Some(Tensor::new(&shape, arr.into_raw_vec_and_offset().0))
        };
        let mut model = Model::build(meta.model.clone(), 0)?;
        model.load_parameters(|name| read(format!("model/{name}")))?;
        let mut attention = AttentionParams::zeros(meta.model.prompt_embed_dim);
        attention.load_parameters(|name| read(format!("attention/{name}")))?;
        Self::new(meta, model, attention)
    }
}
