//! Parameters, optimizer moments and run metadata in one safetensors file.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use unisign_core::model::{ModelConfig, UniSign};
use unisign_core::optim::{AdamW, Stage};
use unisign_core::params::ParamStore;
use unisign_core::task::Task;
use unisign_core::tensor::Tensor;
use unisign_core::tokenizer::Tokenizer;

use crate::error::{Result, RunError};

const META_KEY: &str = "unisign";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub stage: Stage,
    #[serde(default)]
    pub task: Option<Task>,
    /// Completed epochs.
    pub epoch: u64,
    /// Completed optimizer steps. Together with `seed` this fixes every
    /// random choice of the remaining run (batch order and frame sampling).
    pub step: u64,
    pub total_steps: u64,
    pub seed: u64,
    pub config_hash: String,
    pub model: ModelConfig,
    pub has_rgb: bool,
    /// Tokenizer vocabulary, one token per line.
    pub vocab: String,
    #[serde(default)]
    pub adam: Option<AdamScalars>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamScalars {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub store: ParamStore,
    pub model: UniSign,
    pub tokenizer: Tokenizer,
    pub optimizer: Option<AdamW>,
}

fn f64_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn save(path: &Path, meta: &CheckpointMeta, store: &ParamStore, optimizer: Option<&AdamW>) -> Result<()> {
    let mut meta = meta.clone();
    meta.adam = optimizer.map(|o| AdamScalars { beta1: o.beta1, beta2: o.beta2, eps: o.eps, weight_decay: o.weight_decay, step: o.step });
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for (id, p) in store.iter() {
        buffers.push((format!("param.{}", p.name), p.value.shape().to_vec(), f64_bytes(&p.value)));
        if let Some(o) = optimizer {
            buffers.push((format!("adam.m.{}", p.name), p.value.shape().to_vec(), f64_bytes(&o.m[id.index()])));
            buffers.push((format!("adam.v.{}", p.name), p.value.shape().to_vec(), f64_bytes(&o.v[id.index()])));
        }
    }
    let views = buffers
        .iter()
        .map(|(name, shape, bytes)| Ok((name.clone(), TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(|e| bad(path, e))?)))
        .collect::<Result<Vec<_>>>()?;
    let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).expect("meta serializes"))]);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    // Write then rename so an interrupted save never leaves a torn file.
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(views, Some(info), &tmp).map_err(|e| bad(path, e))?;
    std::fs::rename(&tmp, path).map_err(|e| RunError::io(path, e))
}

fn bad(path: &Path, e: impl std::fmt::Display) -> RunError {
    RunError::Checkpoint { path: path.to_path_buf(), reason: e.to_string() }
}

pub fn read_meta(path: &Path) -> Result<CheckpointMeta> {
    let bytes = std::fs::read(path).map_err(|e| RunError::io(path, e))?;
    meta_from_bytes(path, &bytes)
}

fn meta_from_bytes(path: &Path, bytes: &[u8]) -> Result<CheckpointMeta> {
    let (_, header) = SafeTensors::read_metadata(bytes).map_err(|e| bad(path, e))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| bad(path, "no run metadata"))?;
    serde_json::from_str(json).map_err(|e| bad(path, e))
}

fn read_tensor(path: &Path, st: &SafeTensors<'_>, name: &str, expect: &[usize]) -> Result<Tensor> {
    let view = st.tensor(name).map_err(|e| bad(path, format!("{name}: {e}")))?;
    if view.dtype() != Dtype::F64 || view.shape() != expect {
        return Err(bad(path, format!("{name}: expected F64 {expect:?}, found {:?} {:?}", view.dtype(), view.shape())));
    }
    let data = view.data().chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    Ok(Tensor::new(expect, data))
}

/// Rebuilds the model described by the metadata and fills in every tensor.
pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| RunError::io(path, e))?;
    let meta = meta_from_bytes(path, &bytes)?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| bad(path, e))?;
    let tokenizer = Tokenizer::from_vocab_str(&meta.vocab)?;

    // Initial values are overwritten below; the rng only has to build the right shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let mut model = UniSign::new(&mut store, &meta.model, tokenizer.vocab_size(), &mut rng)?;
    if meta.has_rgb {
        model.add_rgb_branch(&mut store, &mut rng)?;
    }
    let expected = store.len() * if meta.adam.is_some() { 3 } else { 1 };
    if st.len() != expected {
        return Err(bad(path, format!("{} tensors, expected {expected}", st.len())));
    }
    let ids: Vec<_> = store.ids().collect();
    for &id in &ids {
        let name = format!("param.{}", store.name(id));
        let shape = store.get(id).shape().to_vec();
        *store.get_mut(id) = read_tensor(path, &st, &name, &shape)?;
    }
    let optimizer = match meta.adam {
        Some(a) => {
            let mut opt = AdamW::new(&store, (a.beta1, a.beta2), a.eps, a.weight_decay);
            opt.step = a.step;
            for &id in &ids {
                let (name, shape) = (store.name(id).to_string(), store.get(id).shape().to_vec());
                opt.m[id.index()] = read_tensor(path, &st, &format!("adam.m.{name}"), &shape)?;
                opt.v[id.index()] = read_tensor(path, &st, &format!("adam.v.{name}"), &shape)?;
            }
            Some(opt)
        }
        None => None,
    };
    Ok(Checkpoint { meta, store, model, tokenizer, optimizer })
}
