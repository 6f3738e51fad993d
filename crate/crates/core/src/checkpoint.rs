//! Inference checkpoints.
//!
//! Layout: the 8-byte magic `CIRCKPT1`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then every parameter as little-endian `f32` in
//! manifest order. Manifest offsets count bytes from the start of the data
//! section.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CausalModel, ModelConfig, PredictMode};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"CIRCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    n: usize,
    n_c: usize,
    num_classes: usize,
    class_names: Vec<String>,
    predict_mode: PredictMode,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub class_names: Vec<String>,
    /// Prediction rule used for model selection.
    pub predict_mode: PredictMode,
    pub params: ParamSet<f32>,
}

impl Checkpoint {
    pub fn build_model(&self) -> Result<CausalModel> {
        CausalModel::new(self.model.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let model = self.build_model()?;
        model.check_params(&self.params)?;
        if self.class_names.len() != model.num_classes() {
            return Err(Error::Checkpoint(format!(
                "{} class names for a {}-class model",
                self.class_names.len(),
                model.num_classes()
            )));
        }
        let mut entries = Vec::with_capacity(self.params.len());
        let mut offset = 0;
        for (name, t) in self.params.iter() {
            let len = t.numel() * 4;
            entries.push(ParamEntry {
                name: name.to_owned(),
                shape: t.shape().to_vec(),
                offset,
                len,
            });
            offset += len;
        }
        let header = serde_json::to_vec(&Header {
            model: self.model.clone(),
            n: model.n(),
            n_c: model.n_c(),
            num_classes: model.num_classes(),
            class_names: self.class_names.clone(),
            predict_mode: self.predict_mode,
            params: entries,
        })?;
        let mut out = Vec::with_capacity(16 + header.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[16..data_start])?;
        let data = &bytes[data_start..];
        let mut params = ParamSet::new();
        let mut expected = 0;
        for e in &header.params {
            let numel: usize = e.shape.iter().product();
            if e.len != numel * 4 || e.offset != expected {
                return Err(Error::Checkpoint(format!("inconsistent manifest entry `{}`", e.name)));
            }
            let raw = data
                .get(e.offset..e.offset + e.len)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", e.name)))?;
            let values = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            params.insert(e.name.clone(), Tensor::new(e.shape.clone(), values)?)?;
            expected += e.len;
        }
        if expected != data.len() {
            return Err(bad("trailing bytes after parameter data"));
        }
        let ckpt = Self {
            model: header.model,
            class_names: header.class_names,
            predict_mode: header.predict_mode,
            params,
        };
        let model = ckpt.build_model()?;
        model.check_params(&ckpt.params)?;
        if (model.n(), model.n_c(), model.num_classes()) != (header.n, header.n_c, header.num_classes) {
            return Err(bad("header geometry disagrees with the model config"));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
