//! Model files: the line `WFLOW1` followed by one JSON document.
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so a write/read cycle reproduces every parameter bit for bit.

use std::io::{BufRead, BufReader, Read, Write};

use serde::Deserialize;

use super::{CouplingLayer, FlowModel};
use crate::diffnet::{MlpSpec, ParameterStore};
use crate::distributions::GaussianMixture;
use crate::{Error, Result};

pub const MODEL_MAGIC: &str = "WFLOW1";

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    mask: Vec<bool>,
    s_spec: MlpSpec,
    t_spec: MlpSpec,
    s_params: ParameterStore,
    t_params: ParameterStore,
    scale_clamp: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelDoc {
    dim: usize,
    layers: Vec<LayerDoc>,
    base: GaussianMixture,
}

pub fn write_model<W: Write>(model: &FlowModel, mut out: W) -> Result<()> {
    let body = serde_json::to_string(model).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(out, "{MODEL_MAGIC}")
        .and_then(|_| writeln!(out, "{body}"))
        .map_err(|e| Error::io("<model>", e))
}

pub fn read_model<R: Read>(input: R) -> Result<FlowModel> {
    let mut reader = BufReader::new(input);
    let mut magic = String::new();
    reader
        .read_line(&mut magic)
        .map_err(|e| Error::io("<model>", e))?;
    if magic.trim_end() != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "expected leading `{MODEL_MAGIC}`, found `{}`",
            magic.trim_end()
        )));
    }
    let doc: ModelDoc = serde_json::from_reader(reader).map_err(|e| Error::Format(e.to_string()))?;
    let layers = doc
        .layers
        .into_iter()
        .map(|l| CouplingLayer::new(l.mask, l.s_spec, l.t_spec, l.s_params, l.t_params, l.scale_clamp))
        .collect::<Result<Vec<_>>>()?;
    FlowModel::new(doc.dim, layers, doc.base)
}

impl FlowModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(self, &mut buf).expect("writing to memory");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        read_model(bytes)
    }
}

impl FlowModel {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::ensure_parent(path)?;
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
