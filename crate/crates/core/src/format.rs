//! Flat binary float layout shared by parameters, gradients and Jacobians.
//!
//! ```text
//! offset  size  field
//! 0       8     magic "NTKRLBIN"
//! 8       4     format version (u32 LE)
//! 12      4     payload kind: 0 params, 1 gradient, 2 feature jacobian
//! 16      4     V
//! 20      4     D
//! 24      4     window c
//! 28      4     hidden width h
//! 32      4     depth
//! 36      4     activation tag: 0 linear, 1 nonneg
//! 40      8     payload length in floats (u64 LE)
//! 48      ...   payload, f64 LE
//! ```
//!
//! Params and gradients store `embeddings, hidden_1, [hidden_2], final_norm,
//! W (row-major)`. Jacobians store the `D x |theta_phi|` matrix row-major.
//! The JSON sidecar maps group names to float offsets and lengths within the
//! payload.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Activation, Group, ModelConfig, Params};

pub const MAGIC: &[u8; 8] = b"NTKRLBIN";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 48;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Params,
    Gradient,
    FeatureJacobian,
}

impl PayloadKind {
    fn tag(self) -> u32 {
        match self {
            PayloadKind::Params => 0,
            PayloadKind::Gradient => 1,
            PayloadKind::FeatureJacobian => 2,
        }
    }

    fn from_tag(tag: u32) -> Option<Self> {
        match tag {
            0 => Some(PayloadKind::Params),
            1 => Some(PayloadKind::Gradient),
            2 => Some(PayloadKind::FeatureJacobian),
            _ => None,
        }
    }
}

/// Architecture fields stored in the header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Header {
    pub version: u32,
    pub kind: PayloadKind,
    pub vocab_size: u32,
    pub feature_dim: u32,
    pub window: u32,
    pub hidden_width: u32,
    pub depth: u32,
    pub activation: Activation,
    pub len: u64,
}

impl Header {
    pub fn for_config(cfg: &ModelConfig, kind: PayloadKind, len: usize) -> Self {
        Self {
            version: FORMAT_VERSION,
            kind,
            vocab_size: cfg.vocab_size,
            feature_dim: cfg.feature_dim as u32,
            window: cfg.window as u32,
            hidden_width: cfg.hidden_width as u32,
            depth: cfg.depth as u32,
            activation: cfg.activation,
            len: len as u64,
        }
    }

    /// Whether the header describes the same architecture as `cfg`.
    pub fn matches(&self, cfg: &ModelConfig) -> bool {
        self.vocab_size == cfg.vocab_size
            && self.feature_dim as usize == cfg.feature_dim
            && self.window as usize == cfg.window
            && self.hidden_width as usize == cfg.hidden_width
            && self.depth as usize == cfg.depth
            && self.activation == cfg.activation
    }
}

/// Writes header and payload.
pub fn encode(header: &Header, payload: impl IntoIterator<Item = f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * header.len as usize);
    out.extend_from_slice(MAGIC);
    for x in [
        header.version,
        header.kind.tag(),
        header.vocab_size,
        header.feature_dim,
        header.window,
        header.hidden_width,
        header.depth,
        header.activation.tag(),
    ] {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&header.len.to_le_bytes());
    let mut n = 0u64;
    for x in payload {
        out.extend_from_slice(&x.to_le_bytes());
        n += 1;
    }
    debug_assert_eq!(n, header.len);
    out
}

/// Parses header and payload, checking magic, version and length.
pub fn decode(bytes: &[u8]) -> Result<(Header, Vec<f64>)> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Format("not an ntkrl binary file (bad magic)".into()));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {version}")));
    }
    let kind = PayloadKind::from_tag(u32_at(12)).ok_or_else(|| Error::Format("unknown payload kind".into()))?;
    let activation = Activation::from_tag(u32_at(36)).ok_or_else(|| Error::Format("unknown activation tag".into()))?;
    let len = u64::from_le_bytes(bytes[40..48].try_into().expect("8 bytes"));
    let body = &bytes[HEADER_LEN..];
    if body.len() as u64 != len * 8 {
        return Err(Error::Format(format!("payload holds {} bytes, header says {len} floats", body.len())));
    }
    let payload = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    let header = Header {
        version,
        kind,
        vocab_size: u32_at(16),
        feature_dim: u32_at(20),
        window: u32_at(24),
        hidden_width: u32_at(28),
        depth: u32_at(32),
        activation,
        len,
    };
    Ok((header, payload))
}

pub fn params_to_bytes(cfg: &ModelConfig, params: &Params) -> Vec<u8> {
    let header = Header::for_config(cfg, PayloadKind::Params, params.len());
    encode(&header, params.theta_phi.iter().chain(&params.w).copied())
}

/// Only `theta_phi`, used to compare feature-map parameters byte for byte.
pub fn theta_phi_bytes(params: &Params) -> Vec<u8> {
    params.theta_phi.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn params_from_bytes(cfg: &ModelConfig, bytes: &[u8]) -> Result<Params> {
    let (header, payload) = decode(bytes)?;
    if header.kind != PayloadKind::Params {
        return Err(Error::Format(format!("expected params payload, found {:?}", header.kind)));
    }
    if !header.matches(cfg) {
        return Err(Error::Config("checkpoint architecture does not match model config".into()));
    }
    let layout = cfg.layout();
    if payload.len() != layout.total_len() {
        return Err(Error::Format(format!("expected {} floats, found {}", layout.total_len(), payload.len())));
    }
    let mut theta_phi = payload;
    let w = theta_phi.split_off(layout.phi_len);
    Ok(Params { theta_phi, w })
}

/// Hex SHA-256 of the serialized parameters.
pub fn params_digest(cfg: &ModelConfig, params: &Params) -> String {
    hex::encode(Sha256::digest(params_to_bytes(cfg, params)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub format_version: u32,
    pub kind: PayloadKind,
    pub groups: Vec<Group>,
}

impl Sidecar {
    pub fn for_params(cfg: &ModelConfig, kind: PayloadKind) -> Self {
        Self { format_version: FORMAT_VERSION, kind, groups: cfg.layout().flat_groups() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_round_trip() {
        for depth in [1, 2] {
            let cfg = ModelConfig { depth, activation: Activation::NonNeg, ..ModelConfig::default() };
            let params = Params::init(&cfg).unwrap();
            let bytes = params_to_bytes(&cfg, &params);
            assert_eq!(bytes.len(), 48 + 8 * params.len());
            assert_eq!(params_from_bytes(&cfg, &bytes).unwrap(), params);
        }
    }

    #[test]
    fn digest_is_stable() {
        let cfg = ModelConfig::default();
        let params = Params::init(&cfg).unwrap();
        assert_eq!(params_digest(&cfg, &params), params_digest(&cfg, &params.clone()));
        assert_eq!(params_digest(&cfg, &params).len(), 64);
    }

    #[test]
    fn rejects_bad_input() {
        let cfg = ModelConfig::default();
        let params = Params::init(&cfg).unwrap();
        let mut bytes = params_to_bytes(&cfg, &params);
        assert!(params_from_bytes(&ModelConfig { window: 2, ..cfg.clone() }, &bytes).is_err());
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(matches!(decode(b"garbage"), Err(Error::Format(_))));
    }

    #[test]
    fn sidecar_covers_flat_vector() {
        let cfg = ModelConfig { depth: 2, ..ModelConfig::default() };
        let side = Sidecar::for_params(&cfg, PayloadKind::Params);
        let total: usize = side.groups.iter().map(|g| g.len).sum();
        assert_eq!(total, cfg.layout().total_len());
        assert_eq!(side.groups.last().unwrap().name, "classifier");
        let json = serde_json::to_string(&side).unwrap();
        assert_eq!(serde_json::from_str::<Sidecar>(&json).unwrap(), side);
    }
}
