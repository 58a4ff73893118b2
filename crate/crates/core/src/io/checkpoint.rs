//! JSON checkpoints. Parameter tensors up to 1 KB are stored inline as
//! nested arrays; larger ones go to sidecar `.cvpf` files next to the JSON.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::tensorfile::{self, Tensor, TensorData};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::trainer::{Network, NetworkConfig, Param, TrainOutcome};

pub const FORMAT_VERSION: u32 = 1;
/// Tensors larger than this many bytes are written to sidecar files.
pub const INLINE_LIMIT: usize = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net_cfg: NetworkConfig,
    pub epoch: usize,
    pub params: Vec<Param>,
    pub rng_state: RngState,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    data: Option<Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sidecar: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format_version: u32,
    net_cfg: NetworkConfig,
    epoch: usize,
    params: Vec<ParamEntry>,
    rng_state: RngState,
}

fn nest(values: &[f64], shape: &[usize]) -> Value {
    match shape {
        [] => Value::from(values[0]),
        [_] => Value::Array(values.iter().map(|&v| Value::from(v)).collect()),
        [n, rest @ ..] => {
            let stride = rest.iter().product::<usize>();
            Value::Array((0..*n).map(|i| nest(&values[i * stride..(i + 1) * stride], rest)).collect())
        }
    }
}

fn flatten(v: &Value, out: &mut Vec<f64>) -> Result<()> {
    match v {
        Value::Array(items) => items.iter().try_for_each(|x| flatten(x, out)),
        Value::Number(n) => {
            out.push(n.as_f64().ok_or_else(|| Error::Checkpoint(format!("bad number {n}")))?);
            Ok(())
        }
        other => Err(Error::Checkpoint(format!("unexpected value {other} in parameter data"))),
    }
}

fn sidecar_name(path: &Path, param: &str) -> String {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "checkpoint".into());
    format!("{stem}.{param}.cvpf")
}

impl Checkpoint {
    pub fn from_network(net: &Network, epoch: usize, rng_state: RngState) -> Self {
        Self {
            net_cfg: net.cfg.clone(),
            epoch,
            params: net.params.clone(),
            rng_state,
        }
    }

    pub fn from_outcome(out: &TrainOutcome) -> Self {
        Self::from_network(&out.net, out.epoch, out.rng_state.clone())
    }

    pub fn to_network(&self) -> Result<Network> {
        Network::from_params(self.net_cfg.clone(), self.params.clone())
    }

    /// Writes sidecars first, then the JSON document, each atomically.
    /// Returns every path written.
    pub fn save(&self, path: &Path) -> Result<Vec<PathBuf>> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut written = Vec::new();
        let mut entries = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let bytes = p.value.len() * std::mem::size_of::<f64>();
            if bytes > INLINE_LIMIT {
                let name = sidecar_name(path, &p.name);
                let t = Tensor::new(p.shape.clone(), TensorData::F64(p.value.clone()))?;
                let target = dir.join(&name);
                tensorfile::write_file(&target, &[t])?;
                written.push(target);
                entries.push(ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: None,
                    sidecar: Some(name),
                });
            } else {
                entries.push(ParamEntry {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: Some(nest(&p.value, &p.shape)),
                    sidecar: None,
                });
            }
        }
        let doc = Document {
            format_version: FORMAT_VERSION,
            net_cfg: self.net_cfg.clone(),
            epoch: self.epoch,
            params: entries,
            rng_state: self.rng_state.clone(),
        };
        let mut json = serde_json::to_vec_pretty(&doc)?;
        json.push(b'\n');
        super::atomic_write(path, &json)?;
        written.push(path.to_path_buf());
        Ok(written)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let doc: Document = serde_json::from_slice(&bytes)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format_version {}", doc.format_version)));
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut params = Vec::with_capacity(doc.params.len());
        for e in doc.params {
            let expected: usize = e.shape.iter().product();
            let value = match (&e.data, &e.sidecar) {
                (Some(v), None) => {
                    let mut out = Vec::with_capacity(expected);
                    flatten(v, &mut out)?;
                    out
                }
                (None, Some(name)) => {
                    let ts = tensorfile::read_file(&dir.join(name))?;
                    match ts.as_slice() {
                        [t] if t.shape == e.shape => t.data.to_f64(),
                        _ => return Err(Error::Checkpoint(format!("sidecar {name} does not hold one {:?} tensor", e.shape))),
                    }
                }
                _ => return Err(Error::Checkpoint(format!("parameter {} needs exactly one of data or sidecar", e.name))),
            };
            if value.len() != expected {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has {} values for shape {:?}",
                    e.name,
                    value.len(),
                    e.shape
                )));
            }
            params.push(Param {
                name: e.name,
                shape: e.shape,
                value,
            });
        }
        let ck = Self {
            net_cfg: doc.net_cfg,
            epoch: doc.epoch,
            params,
            rng_state: doc.rng_state,
        };
        ck.to_network()?;
        Ok(ck)
    }
}
