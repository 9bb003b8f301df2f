//! Trained model files.
//!
//! Layout, integers little-endian:
//!
//! ```text
//! "OTMODL01"             8 bytes
//! kind                   u8   (0 = velocity field, 1 = neural OT pair)
//! header length, header  u32, UTF-8 JSON: network descriptors and flags
//! parameters             f64 per parameter, networks in header order
//! config length, config  u32, UTF-8 run config that produced the model
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::neural_ot::NotModelPair;
use crate::numerics::{Activation, MlpModel};

use super::write_atomic;

pub const MODEL_MAGIC: &[u8; 8] = b"OTMODL01";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    VelocityField,
    NotPair,
}

impl ModelKind {
    fn code(self) -> u8 {
        match self {
            ModelKind::VelocityField => 0,
            ModelKind::NotPair => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(ModelKind::VelocityField),
            1 => Ok(ModelKind::NotPair),
            other => Err(Error::Format(format!("unknown model kind code {other}"))),
        }
    }
}

/// Architecture of one stored network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkDescriptor {
    pub role: String,
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub time_conditioned: bool,
    pub condition_dim: usize,
    pub param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    networks: Vec<NetworkDescriptor>,
    /// Potential passed through `−softplus` (neural OT pairs only).
    nonpositive: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub networks: Vec<(String, MlpModel)>,
    pub nonpositive: bool,
    pub config_echo: String,
}

fn descriptor(role: &str, model: &MlpModel) -> NetworkDescriptor {
    NetworkDescriptor {
        role: role.to_string(),
        layer_dims: model.layer_dims().to_vec(),
        activation: model.activation(),
        time_conditioned: model.time_conditioned(),
        condition_dim: model.condition_dim(),
        param_count: model.param_count(),
    }
}

fn u32_len(len: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(len)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::Validation(format!("{what} of {len} bytes is too large")))
}

impl ModelFile {
    pub fn from_velocity_field(field: &VelocityField, config_echo: impl Into<String>) -> Self {
        Self {
            kind: ModelKind::VelocityField,
            networks: vec![("velocity".into(), field.model.clone())],
            nonpositive: false,
            config_echo: config_echo.into(),
        }
    }

    pub fn from_not_pair(pair: &NotModelPair, config_echo: impl Into<String>) -> Self {
        Self {
            kind: ModelKind::NotPair,
            networks: vec![("map".into(), pair.map.clone()), ("potential".into(), pair.potential.clone())],
            nonpositive: pair.nonpositive,
            config_echo: config_echo.into(),
        }
    }

    pub fn into_velocity_field(self) -> Result<VelocityField> {
        if self.kind != ModelKind::VelocityField || self.networks.len() != 1 {
            return Err(Error::Validation(format!("expected a velocity field model, found {:?}", self.kind)));
        }
        let (_, model) = self.networks.into_iter().next().expect("one network");
        VelocityField::new(model)
    }

    pub fn into_not_pair(self) -> Result<NotModelPair> {
        if self.kind != ModelKind::NotPair || self.networks.len() != 2 {
            return Err(Error::Validation(format!("expected a neural OT pair model, found {:?}", self.kind)));
        }
        let mut it = self.networks.into_iter();
        let (_, map) = it.next().expect("map");
        let (_, potential) = it.next().expect("potential");
        NotModelPair::from_models(map, potential, self.nonpositive)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            networks: self.networks.iter().map(|(role, m)| descriptor(role, m)).collect(),
            nonpositive: self.nonpositive,
        };
        let header_json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MODEL_MAGIC);
        out.push(self.kind.code());
        out.extend_from_slice(&u32_len(header_json.len(), "model header")?);
        out.extend_from_slice(&header_json);
        for (_, model) in &self.networks {
            for v in model.params() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&u32_len(self.config_echo.len(), "config echo")?);
        out.extend_from_slice(self.config_echo.as_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            let end = pos.checked_add(n).filter(|&e| e <= bytes.len());
            match end {
                Some(end) => {
                    let s = &bytes[pos..end];
                    pos = end;
                    Ok(s)
                }
                None => Err(Error::Format(format!("truncated model file while reading {what}"))),
            }
        };
        if take(8, "magic")? != MODEL_MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let kind = ModelKind::from_code(take(1, "kind")?[0])?;
        let header_len = u32::from_le_bytes(take(4, "header length")?.try_into().expect("4 bytes")) as usize;
        let header: Header = serde_json::from_slice(take(header_len, "header")?)
            .map_err(|e| Error::Format(format!("model header: {e}")))?;
        let mut networks = Vec::with_capacity(header.networks.len());
        for desc in &header.networks {
            let expected = MlpModel::expected_param_count(&desc.layer_dims, desc.time_conditioned, desc.condition_dim)
                .map_err(|e| Error::Format(format!("network `{}`: {e}", desc.role)))?;
            if expected != desc.param_count {
                return Err(Error::Format(format!(
                    "network `{}` declares {} parameters but its architecture needs {expected}",
                    desc.role, desc.param_count
                )));
            }
            let nbytes = expected.checked_mul(8).ok_or_else(|| Error::Format("parameter count overflows".into()))?;
            let raw = take(nbytes, "parameters")?;
            let params: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            if let Some(i) = params.iter().position(|v| !v.is_finite()) {
                return Err(Error::Format(format!("network `{}`: non-finite parameter {i}", desc.role)));
            }
            let model = MlpModel::from_parts(&desc.layer_dims, desc.activation, desc.time_conditioned, desc.condition_dim, params)?;
            networks.push((desc.role.clone(), model));
        }
        let config_len = u32::from_le_bytes(take(4, "config length")?.try_into().expect("4 bytes")) as usize;
        let config_echo = std::str::from_utf8(take(config_len, "config")?)
            .map_err(|_| Error::Format("config echo is not valid UTF-8".into()))?
            .to_string();
        if pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes after model file", bytes.len() - pos)));
        }
        Ok(Self { kind, networks, nonpositive: header.nonpositive, config_echo })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&std::fs::read(path)?).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}
