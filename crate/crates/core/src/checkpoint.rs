//! Model checkpoints: a directory with `manifest.json` and one GTF file per
//! parameter or buffer.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::GaldConfig;
use crate::error::{shape_err, Error, Result};
use crate::gtf;
use crate::nn::LayerParams;
use crate::segnet::init_model;

const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: GaldConfig,
    pub seed: u64,
    pub tensors: Vec<TensorEntry>,
}

/// Writes every entry of `params` as `<name>.gtf`. Values are stored as
/// `f32`.
pub fn save_checkpoint(dir: &Path, params: &LayerParams, cfg: &GaldConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::with_capacity(params.len());
    for (name, e) in params.iter() {
        gtf::save(&dir.join(format!("{name}.gtf")), &e.value)?;
        tensors.push(TensorEntry {
            name: name.clone(),
            shape: e.value.shape().to_vec(),
            trainable: e.trainable,
        });
    }
    let manifest = Manifest {
        config: cfg.resolved(),
        seed: params.seed(),
        tensors,
    };
    fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a checkpoint into a frozen store: a forward pass that asks for a
/// parameter the checkpoint lacks fails instead of initialising it.
pub fn load_checkpoint(dir: &Path) -> Result<(Manifest, LayerParams)> {
    let mpath = dir.join(MANIFEST);
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(&mpath)?).map_err(|e| Error::CorruptFile {
        path: mpath.display().to_string(),
        reason: e.to_string(),
    })?;
    let mut params = LayerParams::new(manifest.seed);
    for t in &manifest.tensors {
        let path = dir.join(format!("{}.gtf", t.name));
        let value = gtf::load(&path)?;
        if value.shape() != t.shape.as_slice() {
            return Err(Error::CorruptFile {
                path: path.display().to_string(),
                reason: format!("shape {:?}, manifest says {:?}", value.shape(), t.shape),
            });
        }
        params.insert(&t.name, value, t.trainable);
    }
    params.freeze();
    Ok((manifest, params))
}

/// Checks that `params` holds exactly the tensors `cfg` builds for an
/// `h x w` input, with matching shapes.
pub fn verify_params(cfg: &GaldConfig, params: &LayerParams, h: usize, w: usize) -> Result<()> {
    let mut fresh = LayerParams::new(0);
    init_model(cfg, &mut fresh, h, w)?;
    for (name, e) in fresh.iter() {
        let got = params
            .get(name)
            .ok_or_else(|| shape_err(format!("checkpoint lacks `{name}`")))?;
        if got.value.shape() != e.value.shape() {
            return Err(shape_err(format!(
                "`{name}` is {:?} in the checkpoint, config needs {:?}",
                got.value.shape(),
                e.value.shape()
            )));
        }
    }
    if let Some(extra) = params.names().into_iter().find(|n| fresh.get(n).is_none()) {
        return Err(shape_err(format!(
            "checkpoint has `{extra}`, which the config does not use"
        )));
    }
    Ok(())
}
