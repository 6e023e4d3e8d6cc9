use std::path::Path;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::io_util::{read_string, write_atomic, write_string};
use crate::tensor::Tensor;

const CONFIG: &str = "config.toml";
const MANIFEST: &str = "manifest.txt";
const BLOBS: &str = "params.bin";

impl Model {
    /// Writes `config.toml`, `manifest.txt` (name and byte offset per line)
    /// and `params.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Format(e.to_string()))?;
        let mut blob = Vec::new();
        let mut manifest = String::new();
        for (name, t) in self.store.named_tensors() {
            manifest.push_str(&format!("{name}\t{}\n", blob.len()));
            blob.extend_from_slice(&t.to_bytes());
        }
        write_atomic(&dir.join(BLOBS), &blob)?;
        write_string(&dir.join(MANIFEST), &manifest)?;
        write_string(&dir.join(CONFIG), &cfg)
    }

    pub fn load(dir: &Path) -> Result<Model> {
        let config = read_config(dir)?;
        let mut model = Model::build(&config, 0)?;
        let manifest = read_string(&dir.join(MANIFEST))?;
        let blob_path = dir.join(BLOBS);
        let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        let mut seen = 0;
        for line in manifest.lines().filter(|l| !l.is_empty()) {
            let (name, off) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
            let off: usize = off
                .parse()
                .map_err(|_| Error::Format(format!("bad offset in {line:?}")))?;
            let bytes = blob
                .get(off..)
                .ok_or_else(|| Error::Format(format!("offset {off} past end of {BLOBS}")))?;
            model.store.set(name, Tensor::from_bytes(bytes)?)?;
            seen += 1;
        }
        let expected = model.store.named_tensors().count();
        if seen != expected {
            return Err(Error::Format(format!(
                "manifest lists {seen} tensors, model has {expected}"
            )));
        }
        Ok(model)
    }
}

pub fn read_config(dir: &Path) -> Result<ModelConfig> {
    let text = read_string(&dir.join(CONFIG))?;
    toml::from_str(&text).map_err(|e| Error::Format(format!("{CONFIG}: {e}")))
}
