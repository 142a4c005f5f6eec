//! Versioned snapshot container for banks, models and federation state.
//!
//! Layout: 8-byte magic `SPFDCKPT`, `u32` LE format version, `u32` LE
//! payload kind, `u64` LE body length, then a JSON body. Floats are written
//! with round-trip precision, so a reload is bit-exact.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::KnowledgeBank;
use crate::federation::{ExperimentConfig, Federation, SharedParams};

pub const MAGIC: &[u8; 8] = b"SPFDCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds {found:?}, expected {expected:?}")]
    Kind { expected: Kind, found: Option<Kind> },
    #[error("checkpoint was written for a different configuration")]
    ConfigMismatch,
    #[error("checkpoint body: {0}")]
    Body(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u32)]
pub enum Kind {
    Bank = 1,
    Model = 2,
    Federation = 3,
}

impl Kind {
    fn from_u32(v: u32) -> Option<Self> {
        match v {
            1 => Some(Kind::Bank),
            2 => Some(Kind::Model),
            3 => Some(Kind::Federation),
            _ => None,
        }
    }
}

/// Shared model parameters plus every client's personalized head/suffix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSnapshot {
    pub shared: SharedParams,
    pub heads: Vec<crate::models::TaskHead>,
    pub suffixes: Vec<Option<crate::tensor::Tensor>>,
}

impl ModelSnapshot {
    pub fn of(fed: &Federation) -> Self {
        Self {
            shared: fed.shared.clone(),
            heads: fed.clients.iter().map(|c| c.head.clone()).collect(),
            suffixes: fed.clients.iter().map(|c| c.suffix.clone()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct FederationSnapshot {
    config_hash: u64,
    federation: Federation,
}

/// FNV-1a over the canonical JSON form of the configuration.
pub fn config_hash(config: &ExperimentConfig) -> u64 {
    let json = serde_json::to_vec(config).expect("config serializes");
    json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

fn write_raw<W: Write, T: Serialize>(mut w: W, kind: Kind, value: &T) -> Result<()> {
    let body = serde_json::to_vec(value)?;
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(kind as u32)?;
    w.write_u64::<LittleEndian>(body.len() as u64)?;
    w.write_all(&body)?;
    Ok(())
}

fn read_raw<R: Read, T: DeserializeOwned>(mut r: R, expected: Kind) -> Result<T> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic);
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let found = Kind::from_u32(r.read_u32::<LittleEndian>()?);
    if found != Some(expected) {
        return Err(CheckpointError::Kind { expected, found });
    }
    let len = r.read_u64::<LittleEndian>()?;
    let mut body = Vec::new();
    r.take(len).read_to_end(&mut body)?;
    if body.len() as u64 != len {
        return Err(CheckpointError::Io(std::io::ErrorKind::UnexpectedEof.into()));
    }
    Ok(serde_json::from_slice(&body)?)
}

pub fn save_bank<W: Write>(w: W, bank: &KnowledgeBank) -> Result<()> {
    write_raw(w, Kind::Bank, bank)
}

pub fn load_bank<R: Read>(r: R) -> Result<KnowledgeBank> {
    read_raw(r, Kind::Bank)
}

pub fn save_model<W: Write>(w: W, model: &ModelSnapshot) -> Result<()> {
    write_raw(w, Kind::Model, model)
}

pub fn load_model<R: Read>(r: R) -> Result<ModelSnapshot> {
    read_raw(r, Kind::Model)
}

pub fn save_federation<W: Write>(w: W, fed: &Federation) -> Result<()> {
    let snap = FederationSnapshot {
        config_hash: config_hash(&fed.config),
        federation: fed.clone(),
    };
    write_raw(w, Kind::Federation, &snap)
}

/// Loads federation state and checks it was written for `config`.
pub fn load_federation<R: Read>(r: R, config: &ExperimentConfig) -> Result<Federation> {
    let snap: FederationSnapshot = read_raw(r, Kind::Federation)?;
    if snap.config_hash != config_hash(config) || snap.config_hash != config_hash(&snap.federation.config) {
        return Err(CheckpointError::ConfigMismatch);
    }
    Ok(snap.federation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::BankConfig;
    use crate::spectral::SpectralToken;

    #[test]
    fn bank_roundtrip_is_exact() {
        let mut bank = KnowledgeBank::new(BankConfig::default()).unwrap();
        bank.insert_and_project(&[SpectralToken::new(vec![0.1, 0.7, -0.3]), SpectralToken::new(vec![1.0 / 3.0, 0.0, 2.0])])
            .unwrap();
        bank.retrieve_topk(&[0.2, 0.1, 0.0], 1).unwrap();
        bank.close_round();
        let mut buf = Vec::new();
        save_bank(&mut buf, &bank).unwrap();
        assert_eq!(load_bank(&buf[..]).unwrap(), bank);
    }

    #[test]
    fn header_is_checked() {
        let bank = KnowledgeBank::new(BankConfig::default()).unwrap();
        let mut buf = Vec::new();
        save_bank(&mut buf, &bank).unwrap();
        assert!(matches!(load_model(&buf[..]), Err(CheckpointError::Kind { .. })));
        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(load_bank(&bad[..]), Err(CheckpointError::Version(9))));
        bad = buf.clone();
        bad[0] = b'x';
        assert!(matches!(load_bank(&bad[..]), Err(CheckpointError::Magic)));
        assert!(load_bank(&buf[..buf.len() - 1]).is_err());
    }

    #[test]
    fn config_hash_tracks_changes() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.federation.lambda = 0.2;
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
