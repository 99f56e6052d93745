//! `UFOM` model checkpoints: magic, version byte, u32 LE header length, a
//! JSON header (architecture, schedule, parameter registry), then every
//! parameter as f32 LE in registry order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{read_f32s, read_preamble};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelGraph};
use crate::schedule::ScheduleKind;
use crate::tensor::Tensor;
use crate::video::write_atomic;

pub const UFOM_MAGIC: &[u8; 4] = b"UFOM";
pub const UFOM_VERSION: u8 = 1;
const PREAMBLE: usize = 9;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScheduleHeader {
    kind: ScheduleKind,
    steps: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelHeader {
    config: ModelConfig,
    schedule: ScheduleHeader,
    fingerprint: String,
    params: Vec<ParamHeader>,
}

pub fn serialize_model(model: &ModelGraph) -> Vec<u8> {
    let cfg = model.config().clone();
    let header = ModelHeader {
        schedule: ScheduleHeader {
            kind: cfg.schedule,
            steps: cfg.timesteps,
        },
        config: cfg,
        fingerprint: model.fingerprint(),
        params: model
            .param_specs()
            .into_iter()
            .map(|(name, shape)| ParamHeader { name, shape })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 4 * model.parameter_count());
    out.extend_from_slice(UFOM_MAGIC);
    out.push(UFOM_VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for t in model.params() {
        for v in t.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn deserialize_model(bytes: &[u8]) -> Result<ModelGraph> {
    let (json, mut pos) = read_preamble(bytes, UFOM_MAGIC, UFOM_VERSION)?;
    let header: ModelHeader = serde_json::from_slice(json)
        .map_err(|e| Error::format(PREAMBLE, format!("bad checkpoint header: {e}")))?;
    if header.schedule.kind != header.config.schedule || header.schedule.steps != header.config.timesteps {
        return Err(Error::format(PREAMBLE, "schedule section disagrees with the model config"));
    }
    let mut model = ModelGraph::new(header.config, 0).map_err(|e| Error::format(PREAMBLE, e.to_string()))?;
    let specs = model.param_specs();
    if specs.len() != header.params.len() {
        return Err(Error::format(
            PREAMBLE,
            format!(
                "registry lists {} parameters, the architecture has {}",
                header.params.len(),
                specs.len()
            ),
        ));
    }
    for ((name, shape), p) in specs.iter().zip(&header.params) {
        if *name != p.name || *shape != p.shape {
            return Err(Error::format(
                PREAMBLE,
                format!(
                    "registry entry `{}` {:?} does not match architecture `{name}` {shape:?}",
                    p.name, p.shape
                ),
            ));
        }
    }
    if header.fingerprint != model.fingerprint() {
        return Err(Error::format(PREAMBLE, "fingerprint does not match the registry"));
    }
    for (t, (_, shape)) in model.params_mut().into_iter().zip(specs) {
        let n = shape.iter().product();
        *t = Tensor::new(shape, read_f32s(bytes, &mut pos, n)?)?;
    }
    if pos != bytes.len() {
        return Err(Error::format(pos, format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(model)
}

pub fn save_model(model: &ModelGraph, path: &Path) -> Result<()> {
    write_atomic(path, &serialize_model(model))
}

pub fn load_model(path: &Path) -> Result<ModelGraph> {
    deserialize_model(&fs::read(path)?)
}
